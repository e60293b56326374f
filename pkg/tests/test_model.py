import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from urrl_imvc import autodiff as ad
from urrl_imvc.autodiff import Tensor
from oracles import permute_vde_params, random_inputs, small_config
from urrl_imvc.model import (ContractError, ModelConfig, cdpe, decode, encode, init_params,
                             load_checkpoint, nde_forward, save_checkpoint, soft_assign,
                             target_distribution, tam, vde_forward)


# ---------------------------------------------------------------- CDPE


def test_cdpe_examples():
    same = cdpe(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert not same[:, 2:].any()
    assert cdpe(np.array([[1.0, 0.0], [0.0, 1.0]]))[0, 3] == 1.0
    assert cdpe(np.array([[1.0, 0.0], [-1.0, 0.0]]))[0, 3] == 2.0


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_cdpe_block_symmetric_bounded(x):
    block = cdpe(x)[:, 3:]
    assert block.shape == (4, 4)
    np.testing.assert_array_equal(block, block.T)
    assert (np.diag(block) == 0).all()
    assert (block >= 0).all() and (block <= 2).all()


def test_cdpe_zeroes_padding_rows_and_columns():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    block = cdpe(x, np.array([1, 1, 0]))[:, 2:]
    assert not block[2].any() and not block[:, 2].any()
    assert block[0, 1] == 1.0


# ---------------------------------------------------------------- TAM


def test_tam_categories():
    mbar = np.array([[1, 1, 0], [1, 0, 0]])
    m = np.array([1, 0, 0])
    assert tam(mbar, m, -10.0).tolist() == [0.0, -10.0, -np.inf]


def test_tam_randomized_exact_values():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = rng.integers(0, 2, (6, 4))
        mbar = rng.integers(0, 2, (6, 3, 4)) * (rng.random((6, 1, 4)) < 0.6)
        out = tam(mbar, m, -10.0)
        imputed = mbar.sum(axis=1) > 0
        assert (out[m == 1] == 0.0).all()
        assert (out[(m == 0) & imputed] == -10.0).all()
        assert (out[(m == 0) & ~imputed] == -np.inf).all()


def test_tam_rejects_nonnegative_gamma():
    with pytest.raises(ValueError):
        tam(np.ones((2, 1)), np.ones(1), 0.0)


# ---------------------------------------------------------------- NDE


def test_nde_single_row_attends_to_itself():
    cfg = small_config(k=1, dims=(3,), nde_heads=2)
    params = init_params(cfg)
    x = np.random.default_rng(0).standard_normal((2, 1, 3))
    out = nde_forward(x, np.ones((2, 1)), params, cfg, 0)
    assert out.shape == (2, 4)
    assert np.isfinite(out.data).all()


def test_nde_rejects_empty_stack():
    cfg = small_config()
    with pytest.raises(ContractError):
        nde_forward(np.zeros((1, 3, 3)), np.zeros((1, 3)), init_params(cfg), cfg, 0)


def test_nde_neighbor_permutation_without_cdpe():
    cfg = small_config(use_cdpe=False, k=4, dims=(4,))
    params = init_params(cfg)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 4))
    valid = np.ones((1, 4))
    base = nde_forward(x, valid, params, cfg, 0).data
    for perm in itertools.permutations([1, 2, 3]):
        order = [0, *perm]
        out = nde_forward(x[:, order], valid, params, cfg, 0).data
        np.testing.assert_allclose(out, base, rtol=0, atol=1e-12)


def test_nde_masked_rows_are_inert():
    cfg = small_config()
    params = init_params(cfg)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 3, 3))
    valid = np.array([[1, 1, 0]])
    base = nde_forward(x, valid, params, cfg, 0).data
    for _ in range(20):
        y = x.copy()
        y[0, 2] = rng.standard_normal(3) * 100
        assert nde_forward(y, valid, params, cfg, 0).data.tobytes() == base.tobytes()


# ---------------------------------------------------------------- VDE and encode


def test_vde_view_permutation_invariance():
    cfg = small_config(dims=(4, 4, 4), k=4)
    params = init_params(cfg)
    rng = np.random.default_rng(4)
    for _ in range(100):
        tokens = [Tensor(rng.standard_normal((3, 8))) for _ in range(3)]
        mask = rng.choice([0.0, -10.0, -np.inf], size=(3, 3))
        mask[:, 0] = 0.0
        z = vde_forward(tokens, mask, params, cfg).data
        perm = rng.permutation(3)
        permuted = permute_vde_params(params, cfg, perm)
        zp = vde_forward([tokens[j] for j in perm], mask[:, perm], permuted, cfg).data
        assert np.abs(zp - z).max() < 1e-9


def test_empty_view_is_inert_in_z():
    cfg = small_config()
    params = init_params(cfg)
    rng = np.random.default_rng(5)
    for _ in range(100):
        xbar, mbar, m = random_inputs(cfg, 4, rng)
        z = encode(xbar, mbar, m, params, cfg).data
        view_mask = tam(mbar, m, cfg.gamma)
        empty = ~np.isfinite(view_mask)
        noisy = [x.copy() for x in xbar]
        for v in range(cfg.n_views):
            rows = np.flatnonzero(empty[:, v])
            noisy[v][rows] = rng.standard_normal(noisy[v][rows].shape) * 50
        assert encode(noisy, mbar, m, params, cfg).data.tobytes() == z.tobytes()


def test_vde_rejects_all_empty():
    cfg = small_config()
    params = init_params(cfg)
    tokens = [Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 8)))]
    with pytest.raises(ContractError):
        vde_forward(tokens, np.array([[-np.inf, -np.inf]]), params, cfg)


def test_encode_shape_default_width():
    cfg = ModelConfig(dims=(20, 20), k=4)
    params = init_params(cfg)
    xbar, mbar, m = random_inputs(cfg, 5, np.random.default_rng(0))
    assert encode(xbar, mbar, m, params, cfg).shape == (5, 256)


@pytest.mark.parametrize("choice", ["first", "nth:2", "mean", "concat"])
def test_output_choices_run(choice):
    cfg = small_config(nde_output=choice, vde_output=choice)
    params = init_params(cfg)
    xbar, mbar, m = random_inputs(cfg, 3, np.random.default_rng(1))
    assert np.isfinite(encode(xbar, mbar, m, params, cfg).data).all()


# ---------------------------------------------------------------- decoder and clustering head


def test_decoder_shapes_and_zero_weights():
    cfg = small_config()
    params = init_params(cfg)
    z = Tensor(np.random.default_rng(0).standard_normal((4, cfg.d_e)))
    assert [o.shape for o in decode(z, params, cfg)] == [(4, 3), (4, 5)]
    for name in params.names():
        if name.startswith("dec.") and not name.split(".")[-1].startswith("act"):
            params[name].data[...] = 0.0
    assert not any(o.data.any() for o in decode(z, params, cfg))


def test_soft_assign_examples():
    centers = np.array([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(soft_assign(np.zeros((1, 2)), centers).data, [[0.5, 0.5]])
    for d_c in (2, 3, 5):
        c = np.zeros((d_c, d_c))
        c[1:, 1:] = np.eye(d_c - 1) * 3.0
        q = soft_assign(np.zeros((1, d_c)), c).data
        assert q[0, 0] == pytest.approx(1.0 / (1.0 + (d_c - 1) / 10.0), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, (4, 3), elements=st.floats(-10, 10)))
def test_soft_assign_on_simplex(z, centers):
    q = soft_assign(z, centers).data
    assert (q > 0).all()
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


def test_target_distribution_example():
    p = target_distribution(np.array([[0.8, 0.2], [0.4, 0.6]]))
    np.testing.assert_allclose(p, [[0.914, 0.086], [0.229, 0.771]], atol=5e-4)


def test_target_distribution_fixed_points():
    uniform = np.full((3, 3), 1 / 3)
    np.testing.assert_allclose(target_distribution(uniform), uniform, atol=1e-15)
    one_hot = np.eye(3)
    np.testing.assert_array_equal(target_distribution(one_hot), one_hot)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-6, 6)))
def test_target_distribution_sharpens_balanced_batches(logits):
    rows = np.exp(logits)
    rows /= rows.sum(axis=1, keepdims=True)
    # all cyclic shifts of each row give equal soft cluster sizes
    q = np.concatenate([np.roll(rows, s, axis=1) for s in range(4)])
    p = target_distribution(q)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p.max(axis=1) >= q.max(axis=1) - 1e-12).all()


def test_target_distribution_can_soften_a_row_in_skewed_batch():
    # a dominant cluster shrinks the weight of rows leaning towards it
    q = np.array([[0.95, 0.05]] * 9 + [[0.7, 0.3]])
    p = target_distribution(q)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p[-1].max() < 0.7


def test_target_distribution_warns_on_empty_cluster():
    with pytest.warns(RuntimeWarning):
        p = target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(p, [[1.0, 0.0], [1.0, 0.0]])


# ---------------------------------------------------------------- gradients and checkpoints


def test_nde_block_gradcheck():
    cfg = small_config()
    params = init_params(cfg)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 3))
    valid = np.array([[1, 1, 1], [1, 1, 0]])
    w = rng.standard_normal((2, 6))
    names = [n for n in params.names() if n.startswith("nde.0.")]
    err = ad.grad_check(lambda: ad.sum(ad.mul(nde_forward(x, valid, params, cfg, 0), w)),
                        [params[n] for n in names])
    assert err < 1e-4


def test_vde_block_gradcheck():
    cfg = small_config()
    params = init_params(cfg)
    rng = np.random.default_rng(7)
    tokens = [Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((3, 8)))]
    mask = np.array([[0.0, -10.0], [0.0, 0.0], [-np.inf, 0.0]])
    w = rng.standard_normal((3, cfg.d_e))
    names = [n for n in params.names() if n.startswith("vde.")]
    err = ad.grad_check(lambda: ad.sum(ad.mul(vde_forward(tokens, mask, params, cfg), w)),
                        [params[n] for n in names])
    assert err < 1e-4


def test_decoder_gradcheck():
    cfg = small_config()
    params = init_params(cfg)
    rng = np.random.default_rng(8)
    z = Tensor(rng.standard_normal((4, cfg.d_e)))
    targets = [rng.standard_normal((4, d)) for d in cfg.dims]

    def loss():
        outs = decode(z, params, cfg)
        return ad.add(*[ad.sum(ad.square(ad.sub(o, t))) for o, t in zip(outs, targets)])

    err = ad.grad_check(loss, [params[n] for n in params.names() if n.startswith("dec.")])
    assert err < 1e-4


def test_encode_gradcheck():
    cfg = small_config()
    params = init_params(cfg)
    rng = np.random.default_rng(9)
    xbar, mbar, m = random_inputs(cfg, 4, rng)
    w = rng.standard_normal((4, cfg.d_e))
    names = [n for n in params.names() if not n.startswith(("dec.", "centers"))]
    err = ad.grad_check(lambda: ad.sum(ad.mul(encode(xbar, mbar, m, params, cfg), w)),
                        [params[n] for n in names], max_entries=400)
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config(nde_output="nth:2")
    params = init_params(cfg)
    params["centers"].data[...] = np.random.default_rng(0).standard_normal(params["centers"].shape)
    save_checkpoint(tmp_path / "m.ckpt", params, cfg)
    back, back_cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert back_cfg == cfg
    assert back.names() == params.names()
    for name in params.names():
        assert back[name].data.tobytes() == params[name].data.tobytes()


def test_checkpoint_truncated(tmp_path):
    from urrl_imvc.data import FormatError
    cfg = small_config()
    save_checkpoint(tmp_path / "m.ckpt", init_params(cfg), cfg)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(gamma=1.0)
    with pytest.raises(ValueError):
        small_config(nde_heads=4)
    with pytest.raises(ValueError):
        small_config(nde_output="last")
