import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdistill.metrics import (RANKME_EPS, confusion_matrix, jacobi_singular_values, numerical_rank, rankme,
                              segmentation_report, singular_values)


def gram_oracle_rankme(X, eps=RANKME_EPS):
    """Singular values from eigenvalues of the small Gram matrix, then the same entropy formula."""
    G = X.T @ X if X.shape[0] >= X.shape[1] else X @ X.T
    s = np.sqrt(np.clip(np.linalg.eigvalsh(G), 0, None))[::-1]
    p = s / s.sum() + eps
    return float(np.exp(-np.sum(p * np.log(p)))), s


def with_spectrum(s, n, seed=0):
    rng = np.random.default_rng(seed)
    d = len(s)
    U, _ = np.linalg.qr(rng.standard_normal((n, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return U @ np.diag(s) @ V.T


def test_uniform_three_spectrum():
    X = with_spectrum([1, 1, 1, 0, 0, 0, 0, 0], 40)
    assert abs(rankme(X).rankme - 3.0) < 1e-3


def test_rank_one():
    X = np.outer(np.arange(1, 21), np.linspace(-1, 1, 8))
    r = rankme(X)
    assert 1.0 <= r.rankme <= 1.01 and r.numerical_rank == 1


def test_random_matches_gram_oracle():
    X = np.random.default_rng(0).standard_normal((50, 16))
    ref, s = gram_oracle_rankme(X)
    r = rankme(X)
    assert abs(r.rankme - ref) < 1e-6
    np.testing.assert_allclose(r.singular_values, s, atol=1e-9)
    assert r.feature_count == 50 and r.feature_dim == 16


def test_wide_matrix_and_report_invariants():
    X = np.random.default_rng(1).standard_normal((6, 20))
    r = rankme(X)
    assert len(r.singular_values) == 6
    assert 1 <= r.rankme <= 6 + 1e-6 and r.numerical_rank <= 6
    s = np.asarray(r.singular_values)
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)


def test_jacobi_against_eigvalsh_on_many_shapes():
    rng = np.random.default_rng(2)
    for n, d in [(3, 3), (10, 4), (64, 32), (5, 2), (100, 64)]:
        X = rng.standard_normal((n, d))
        ref = np.sqrt(np.clip(np.linalg.eigvalsh(X.T @ X), 0, None))[::-1]
        np.testing.assert_allclose(jacobi_singular_values(X), ref, atol=1e-9)
        np.testing.assert_allclose(singular_values(X), ref, atol=1e-9)


def test_non_finite_rejected():
    X = np.ones((4, 3))
    X[1, 1] = np.nan
    with pytest.raises(ValueError):
        rankme(X)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 60), st.integers(2, 16), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_rankme_rotation_and_scale_invariant(n, d, scale, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    base = rankme(X).rankme
    assert abs(rankme(X @ Q).rankme - base) < 1e-6
    assert abs(rankme(X * scale).rankme - base) < 1e-6


def test_adding_equal_energy_direction_increases_rankme():
    prev = 0.0
    for k in range(1, 9):
        val = rankme(with_spectrum([1.0] * k + [0.0] * (8 - k), 30, k)).rankme
        assert val > prev
        prev = val


def test_numerical_rank_examples():
    assert numerical_rank(np.eye(3)) == 3
    assert numerical_rank(np.outer([1, 2, 3.0], [4, 5.0])) == 1
    assert numerical_rank(np.zeros((4, 3))) == 0
    with pytest.raises(ValueError):
        numerical_rank(np.eye(3), rel_tol=0.0)


def test_duplicated_rows_rank_matches_distinct_span():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((5, 12))
    X = base[rng.integers(0, 5, 40)]
    distinct = np.unique(X, axis=0)
    ev = np.linalg.eigvalsh(distinct @ distinct.T)
    oracle = int(np.sum(ev > 1e-9 * ev.max()))
    assert numerical_rank(X) == oracle == 5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_numerical_rank_row_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 4)) @ rng.standard_normal((4, 10))
    assert numerical_rank(X) == numerical_rank(X[rng.permutation(30)]) == 4


def test_seg_perfect_and_binary_examples():
    y = np.array([0, 1, 2, 2, 1])
    assert segmentation_report(y, y, 3).miou == 1.0
    rep = segmentation_report(np.zeros(4, int), np.array([0, 0, 1, 1]), 2)
    assert rep.per_class_iou == [0.5, 0.0] and rep.miou == 0.25
    assert rep.confusion == [[2, 0], [2, 0]] and rep.accuracy == 0.5


def test_absent_classes_excluded():
    rep = segmentation_report(np.array([0, 1]), np.array([0, 1]), 4)
    assert rep.miou == 1.0


def test_seg_matches_counting_oracle():
    rng = np.random.default_rng(4)
    C = 5
    t, p = rng.integers(0, C, 500), rng.integers(0, C, 500)
    cm = np.zeros((C, C), int)
    for a, b in zip(t, p):
        cm[a, b] += 1
    assert confusion_matrix(p, t, C).tolist() == cm.tolist()
    ious = []
    for c in range(C):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(t, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(t, p) if a == c and b != c)
        ious.append(tp / (tp + fp + fn))
    rep = segmentation_report(p, t, C)
    np.testing.assert_allclose(rep.per_class_iou, ious, atol=1e-15)
    assert rep.miou == pytest.approx(np.mean(ious))


def test_seg_id_out_of_range():
    with pytest.raises(ValueError):
        segmentation_report(np.array([0, 5]), np.array([0, 1]), 5)
