import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urrl_imvc.data import (FormatError, MissingProtocol, MultiViewDataset, ProtocolError,
                            SyntheticSpec, dataset_from_bytes, dataset_to_bytes, generate_missing_mask,
                            load_csv_dir, load_dataset, missing_fraction, n_incomplete, save_csv_dir,
                            save_dataset, synthesize)
from urrl_imvc.metrics import accuracy


def small_dataset(seed=0, n=12):
    rng = np.random.default_rng(seed)
    views = [rng.standard_normal((n, 3)), rng.standard_normal((n, 5))]
    mask = generate_missing_mask(n, 2, MissingProtocol(0.5, 1, seed))
    return MultiViewDataset(views, mask, rng.integers(0, 3, n), 3)


def test_protocol_counts():
    mask = generate_missing_mask(100, 3, MissingProtocol(0.4, 2, 0))
    row_sums = mask.sum(axis=1)
    assert (row_sums == 1).sum() == 40
    assert (row_sums == 3).sum() == 60
    assert missing_fraction(mask) == pytest.approx(80 / 300)


def test_floor_rule():
    assert n_incomplete(10, 0.35) == 3
    assert n_incomplete(100, 0.29) == 29


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 5), st.floats(0, 1), st.integers(0, 10_000), st.data())
def test_protocol_properties(n, v, rate, seed, data):
    m_n = data.draw(st.integers(1, v - 1))
    mask = generate_missing_mask(n, v, MissingProtocol(rate, m_n, seed))
    assert mask.sum(axis=1).min() >= 1
    dropped = v - mask.sum(axis=1)
    assert (dropped > 0).sum() == n_incomplete(n, rate)
    assert set(np.unique(dropped)) <= {0, m_n}
    np.testing.assert_array_equal(mask, generate_missing_mask(n, v, MissingProtocol(rate, m_n, seed)))


def test_protocol_rejects_bad_view_counts():
    with pytest.raises(ProtocolError):
        generate_missing_mask(10, 2, MissingProtocol(0.5, 2, 0))
    with pytest.raises(ProtocolError):
        generate_missing_mask(10, 2, MissingProtocol(0.5, 0, 0))


def test_protocol_examples():
    assert generate_missing_mask(5, 3, MissingProtocol(0.0, 1, 0)).all()
    mask = generate_missing_mask(4, 2, MissingProtocol(0.5, 1, 0))
    assert sorted(mask.sum(axis=1).tolist()) == [1, 1, 2, 2]
    full = generate_missing_mask(100, 5, MissingProtocol(1.0, 3, 0))
    assert missing_fraction(full) == pytest.approx(0.6)
    assert missing_fraction(generate_missing_mask(100, 5, MissingProtocol(0.5, 3, 0))) == pytest.approx(0.3)


def test_masked_features_are_zeroed():
    ds = MultiViewDataset([np.ones((2, 3)), np.ones((2, 2))], np.array([[1, 0], [1, 1]]))
    assert (ds.views[1][0] == 0).all()


def test_all_zero_mask_row_rejected():
    with pytest.raises(ValueError, match="sample 1"):
        MultiViewDataset([np.ones((2, 3))], np.array([[1], [0]]))


def test_synthesize_balanced_and_deterministic():
    a = synthesize(SyntheticSpec(seed=3))
    b = synthesize(SyntheticSpec(seed=3))
    assert np.bincount(a.labels).tolist() == [200, 200, 200]
    for x, y in zip(a.views, b.views):
        assert x.tobytes() == y.tobytes()
    assert a.dims == [40, 40]


def test_synthesize_separable_by_kmeans():
    from sklearn.cluster import KMeans
    for seed in range(5):
        ds = synthesize(SyntheticSpec(seed=seed))
        x = np.concatenate(ds.views, axis=1)
        pred = KMeans(3, n_init=10, random_state=0).fit_predict(x)
        assert accuracy(ds.labels, pred) >= 0.95


def test_view_overlap_controls_shared_latent_blocks():
    # noise-free views are linear images of the latent coordinates they read
    def ranks(overlap):
        ds = synthesize(SyntheticSpec(n_samples=100, latent_dim=8, noise=0.0, view_overlap=overlap, seed=1))
        return [np.linalg.matrix_rank(x) for x in ds.views]

    assert ranks(0.0) == [4, 4]
    assert ranks(0.3) == [8, 8]
    assert ranks(1.0) == [8, 8]
    with pytest.raises(ValueError):
        synthesize(SyntheticSpec(view_overlap=1.5))


def test_synthesize_degenerate_cases():
    assert synthesize(SyntheticSpec(n_samples=10, n_clusters=1)).labels.max() == 0
    ds = synthesize(SyntheticSpec(n_samples=30, separation=0.0))
    assert np.isfinite(ds.views[0]).all()


def test_binary_round_trip():
    ds = small_dataset()
    back = dataset_from_bytes(dataset_to_bytes(ds))
    for x, y in zip(ds.views, back.views):
        assert x.tobytes() == y.tobytes()
    np.testing.assert_array_equal(back.mask, ds.mask)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.n_clusters == 3


def test_binary_round_trip_without_labels(tmp_path):
    ds = MultiViewDataset([np.arange(6.0).reshape(3, 2)], np.ones((3, 1)))
    save_dataset(ds, tmp_path / "d.mvds")
    back = load_dataset(tmp_path / "d.mvds")
    assert back.labels is None
    np.testing.assert_array_equal(back.views[0], ds.views[0])


def test_truncated_file_names_field():
    raw = dataset_to_bytes(small_dataset())
    with pytest.raises(FormatError, match="truncated"):
        dataset_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        dataset_from_bytes(raw[:10])


def test_trailing_bytes_and_bad_magic():
    raw = dataset_to_bytes(small_dataset())
    with pytest.raises(FormatError):
        dataset_from_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        dataset_from_bytes(b"XXXX" + raw[4:])


def test_file_with_empty_row_rejected():
    ds = small_dataset()
    raw = bytearray(dataset_to_bytes(ds))
    n, v = ds.n_samples, ds.n_views
    mask_start = 4 + 16 + 4 * v + 8 * n * sum(ds.dims)
    raw[mask_start:mask_start + v] = bytes(v)
    with pytest.raises(FormatError):
        dataset_from_bytes(bytes(raw))


def test_csv_round_trip(tmp_path):
    ds = small_dataset()
    save_csv_dir(ds, tmp_path / "csv")
    back = load_csv_dir(tmp_path / "csv")
    np.testing.assert_array_equal(back.mask, ds.mask)
    np.testing.assert_allclose(back.views[1], ds.views[1], rtol=0, atol=0)
    assert load_dataset(tmp_path / "csv").n_samples == ds.n_samples
