import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesforget.core import (
    Dataset,
    EpochBatcher,
    RngStream,
    as_param,
    dataset_remove,
    dense_solve,
    seeded_rng,
)
from bayesforget.errors import DimensionMismatch, IndexAlreadyRemoved, IndexOutOfRange, OracleFailure

from conftest import random_spd


def _data(n=10, d=2):
    return Dataset(np.arange(n * d, dtype=float).reshape(n, d), np.arange(n) % 3)


def test_remove_empty_is_identity():
    S = _data()
    T = dataset_remove(S, [])
    assert T.n_active == S.n_active
    assert np.array_equal(T.active, S.active)
    assert np.array_equal(T.X, S.X)


def test_remove_800_of_2000():
    S = Dataset(np.zeros((2000, 2)))
    T = dataset_remove(S, range(0, 1600, 2))
    assert T.n_active == 1200
    assert S.n_active == 2000  # original untouched
    assert T.n == 2000


def test_removed_index_is_inactive():
    S = _data()
    T = S.remove([3])
    assert not T.is_active(3)
    assert T.is_active(4)
    assert 3 in T.removed_indices.tolist()


def test_remove_errors():
    S = _data()
    with pytest.raises(IndexOutOfRange):
        S.remove([10])
    with pytest.raises(IndexOutOfRange):
        S.remove([-1])
    T = S.remove([2])
    with pytest.raises(IndexAlreadyRemoved):
        T.remove([2])
    with pytest.raises(IndexAlreadyRemoved):
        S.remove([1, 1])


def test_removal_keeps_item_order():
    S = _data()
    T = S.remove([0, 5])
    assert np.array_equal(T.X, S.X)
    X, y = T.active_data()
    assert np.array_equal(X, S.X[[1, 2, 3, 4, 6, 7, 8, 9]])


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(12))), st.integers(1, 11))
def test_disjoint_batches_commute(perm, cut):
    S = Dataset(np.zeros((12, 1)))
    a, b = perm[:cut], perm[cut:]
    one = S.remove(a).remove(b)
    two = S.remove(b).remove(a)
    assert np.array_equal(one.active, two.active)
    assert one.n_active == 0


def test_audit_counts_removed_reads():
    S = _data()
    T = S.remove([1])
    before = S.audit.removed_reads
    T.take([1, 2])
    assert S.audit.removed_reads == before + 1
    T.active_data()
    assert S.audit.removed_reads == before + 1


def test_csv_round_trip():
    S = Dataset(np.array([[0.1, -2.5], [1e-17, 3.0]]), [1, 0])
    text = S.to_csv()
    assert text.splitlines()[0] == "x0,x1,label"
    T = Dataset.from_csv(text)
    assert np.array_equal(T.X, S.X) and np.array_equal(T.y, S.y)
    assert T.to_csv() == text


def test_dataset_dimension_checks():
    with pytest.raises(DimensionMismatch):
        Dataset(np.zeros((3, 2)), [0, 1])
    with pytest.raises(DimensionMismatch):
        Dataset(np.zeros((2, 2, 2)))


def test_as_param():
    assert as_param([1, 2]).dtype == np.float64
    with pytest.raises(DimensionMismatch):
        as_param([1, 2], dim=3)
    with pytest.raises(FloatingPointError):
        as_param([1.0, np.nan])


def test_rng_determinism():
    a = seeded_rng(7).standard_normal(100)
    b = seeded_rng(7).standard_normal(100)
    assert np.array_equal(a, b)
    c = seeded_rng(8).standard_normal(10)
    assert not np.array_equal(a[:10], c)


def test_rng_mean_clt():
    # sd of the mean of 1e5 unit normals is 0.00316; 0.02 is > 6 sd
    x = seeded_rng(3).standard_normal(100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.02


def test_rng_normal_takes_variance():
    x = RngStream(1).normal(var=4.0, size=200_000)
    assert abs(x.std() - 2.0) < 0.02


def test_spawned_streams_differ_and_replay():
    r = RngStream(5)
    a, b = r.spawn(0).standard_normal(5), r.spawn(1).standard_normal(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, RngStream(5).spawn(0).standard_normal(5))


def test_dense_solve_identity():
    v = np.array([3.0, -1.0, 2.5])
    assert np.allclose(dense_solve(np.eye(3), v), v, rtol=0, atol=1e-15)


def test_dense_solve_diag():
    x = dense_solve(np.diag([2.0, 4.0]), [2.0, 4.0])
    assert np.allclose(x, [1.0, 1.0], rtol=0, atol=1e-15)


def test_dense_solve_random_residual(np_rng):
    for _ in range(20):
        H = random_spd(np_rng, 10)
        v = np_rng.standard_normal(10)
        x = dense_solve(H, v)
        assert np.linalg.norm(H @ x - v) <= 1e-10 * np.linalg.norm(v)


def test_dense_solve_rejects_non_spd():
    with pytest.raises(OracleFailure):
        dense_solve(np.diag([1.0, -1.0]), [1.0, 1.0])
    with pytest.raises(OracleFailure):
        dense_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), [1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        dense_solve(np.eye(2), [1.0, 1.0, 1.0])


def test_epoch_batcher_covers_each_epoch():
    b = EpochBatcher(10, 5, RngStream(0))
    seen = np.concatenate([b.next(), b.next()])
    assert sorted(seen.tolist()) == list(range(10))
    full = EpochBatcher(4, 64, RngStream(0))
    assert full.next().tolist() == [0, 1, 2, 3]
