import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvlab.numerics import (DegenerateMaskError, NumericsError, cosine_matrix, jacobi_eigh, kmeans,
                            logistic_fit, logistic_loss_and_grad, masked_softmax, matmul, pca_fit,
                            pca_project, pca_reconstruct, rms_norm)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# matmul

def test_matmul_identity_and_annihilator():
    m = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul(np.zeros((2, 3)), m), np.zeros((2, 2)))


def test_matmul_hand_example():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), np.array([[2.0], [4.0]]))


def test_matmul_rejects_mismatch_and_nonfinite():
    with pytest.raises(NumericsError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(NumericsError):
        matmul([[np.nan]], [[1.0]])
    with pytest.raises(NumericsError):
        matmul(np.ones(3), np.ones((3, 1)))


# masked softmax

def test_softmax_uniform():
    assert np.allclose(masked_softmax(np.full(5, 2.0), np.ones(5, bool)), 0.2, atol=0, rtol=1e-15)


def test_softmax_restriction():
    out = masked_softmax([5.0, 1.0, 3.0], [False, True, True])
    assert out[0] == 0.0
    ref = np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum()
    assert np.allclose(out[1:], ref, rtol=0, atol=1e-15)


def test_softmax_two_point_value():
    # 1 / (1 + e^-1) from the scalar definition
    p = 1.0 / (1.0 + math.exp(-1.0))
    out = masked_softmax([0.5, -0.5], [True, True])
    assert abs(out[0] - 0.7311) < 1e-4 and abs(out[1] - 0.2689) < 1e-4
    assert abs(out[0] - p) < 1e-15


def test_softmax_all_blocked():
    with pytest.raises(DegenerateMaskError):
        masked_softmax([1.0, 2.0], [False, False])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.data())
def test_softmax_properties(logits, data):
    allowed = data.draw(arrays(bool, logits.shape))
    allowed[data.draw(st.integers(0, logits.size - 1))] = True
    out = masked_softmax(logits, allowed)
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out[~allowed] == 0.0)
    full = masked_softmax(logits, np.ones_like(allowed))
    e = np.exp(logits - logits.max())
    assert np.allclose(full, e / e.sum(), rtol=1e-12, atol=1e-15)


# rms norm

def test_rms_norm_examples():
    assert np.array_equal(rms_norm(np.zeros(4), np.ones(4)), np.zeros(4))
    x = np.array([3.0, 4.0])
    assert np.allclose(rms_norm(x, np.ones(2)), x / math.sqrt(12.5 + 1e-6), rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(0.5, 10)), st.floats(0.5, 100))
def test_rms_norm_scale_invariance(x, c):
    g = np.linspace(0.5, 2.0, 8)
    assert np.allclose(rms_norm(c * x, g), rms_norm(x, g), atol=1e-9)


def test_rms_norm_empty():
    with pytest.raises(NumericsError):
        rms_norm(np.zeros(0), np.zeros(0))


# eigen / PCA

@pytest.mark.parametrize("d", [2, 5, 16])
def test_jacobi_matches_eigh(d):
    rng = np.random.default_rng(d)
    a = rng.normal(size=(d, d))
    s = a @ a.T
    w, v = jacobi_eigh(s)
    ref = np.linalg.eigh(s)[0][::-1]
    assert np.allclose(w, ref, rtol=1e-10, atol=1e-10)
    assert np.allclose(v.T @ v, np.eye(d), atol=1e-12)
    assert np.allclose(s @ v, v * w, atol=1e-9)


def test_pca_collinear():
    t = np.linspace(-2, 3, 20)[:, None]
    data = t * np.array([[1.0, 2.0, -1.0]])
    m = pca_fit(data, 2)
    assert m.explained_variance[0] / m.explained_variance.sum() == pytest.approx(1.0, abs=1e-12)


def test_pca_zero_variance():
    m = pca_fit(np.ones((5, 3)), 3)
    assert np.all(m.explained_variance == 0)


def test_pca_planted_plane():
    rng = np.random.default_rng(11)
    basis = np.linalg.qr(rng.normal(size=(8, 2)))[0]
    data = rng.normal(size=(200, 2)) * [3.0, 1.0] @ basis.T + 5.0
    m = pca_fit(data, 2)
    cov = np.cov(data, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    ref = vecs[:, ::-1][:, :2]
    cosines = np.linalg.svd(m.components @ ref, compute_uv=False)
    assert np.all(np.arccos(np.clip(cosines, -1, 1)) < 1e-3)
    assert np.allclose(m.explained_variance, vals[::-1][:2], rtol=1e-6)


def test_pca_project_and_reconstruct():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(30, 2)) @ rng.normal(size=(2, 6)) + 1.0
    m = pca_fit(data, 2)
    assert np.allclose(pca_project(m, m.mean[None, :]), 0.0, atol=1e-12)
    rec = pca_reconstruct(m, pca_project(m, data))
    assert np.max(np.abs(rec - data)) < 1e-6
    full = pca_fit(data, 6)
    proj = pca_project(full, data)
    centred = data - data.mean(axis=0)
    assert np.allclose(proj @ proj.T, centred @ centred.T, atol=1e-9)


def test_pca_rejects_bad_k():
    with pytest.raises(NumericsError):
        pca_fit(np.ones((3, 2)), 3)
    with pytest.raises(NumericsError):
        pca_fit(np.ones((1, 2)), 1)


def test_pca_components_orthonormal():
    rng = np.random.default_rng(5)
    m = pca_fit(rng.normal(size=(40, 12)), 7)
    assert np.allclose(m.components @ m.components.T, np.eye(7), atol=1e-8)
    assert np.all(np.diff(m.explained_variance) <= 0)


# k-means

def _best_two_partition(x):
    n = len(x)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.min() == lab.max():
            continue
        cost = sum(((x[lab == j] - x[lab == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, cost)
    return best


def test_kmeans_six_points_brute_force():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [5.0, 5.0], [6.0, 5.0], [5.0, 7.0]])
    opt = _best_two_partition(x)
    # frozen from the exhaustive oracle: 4/3 + 10/3
    assert opt == pytest.approx(14.0 / 3.0, rel=1e-12)
    assert kmeans(x, 2, seed=0).inertia == pytest.approx(opt, rel=1e-12)


def test_kmeans_blobs_and_k_equals_n():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 3))
    b = rng.normal(size=(20, 3)) + 50
    res = kmeans(np.vstack([a, b]), 2, seed=1)
    assert len(set(res.labels[:20])) == 1 and len(set(res.labels[20:])) == 1
    assert res.labels[0] != res.labels[20]
    pts = rng.normal(size=(5, 2))
    assert kmeans(pts, 5, seed=0).inertia == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_kmeans_trace_monotone_and_deterministic(seed, k):
    x = np.random.default_rng(seed).normal(size=(25, 3))
    r1 = kmeans(x, k, seed)
    r2 = kmeans(x, k, seed)
    assert np.array_equal(r1.labels, r2.labels)
    assert all(b <= a + 1e-9 for a, b in zip(r1.inertia_trace, r1.inertia_trace[1:]))


def test_kmeans_duplicate_points_reseed():
    x = np.array([[0.0, 0.0]] * 4 + [[1.0, 1.0]])
    res = kmeans(x, 3, seed=0)
    assert res.inertia == 0.0
    assert np.all(np.isfinite(res.centroids))


def test_kmeans_bad_k():
    with pytest.raises(NumericsError):
        kmeans(np.ones((2, 2)), 3, seed=0)


# logistic regression

def test_logistic_separable():
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    m = logistic_fit(x, y)
    assert np.array_equal(m.predict_proba(x) >= 0.5, y == 1)


@pytest.mark.parametrize("label", [0, 1])
def test_logistic_constant_labels(label):
    x = np.random.default_rng(0).normal(size=(10, 3))
    p = logistic_fit(x, np.full(10, label)).predict_proba(x)
    assert np.all((p if label else 1 - p) >= 0.9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_logistic_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 3))
    y = rng.integers(0, 2, size=7).astype(float)
    w = rng.normal(size=3)
    b = float(rng.normal())
    _, gw, gb = logistic_loss_and_grad(w, b, x, y, 1e-2)
    h = 1e-5
    num = np.empty(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        lp = logistic_loss_and_grad(w + e[:3], b + e[3], x, y, 1e-2)[0]
        lm = logistic_loss_and_grad(w - e[:3], b - e[3], x, y, 1e-2)[0]
        num[i] = (lp - lm) / (2 * h)
    ana = np.append(gw, gb)
    assert np.all(np.abs(ana - num) <= 1e-6 * np.maximum(np.abs(num), 1e-3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_logistic_trace_nonincreasing(seed, step):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 4)) * 3
    y = rng.integers(0, 2, size=12)
    tr = logistic_fit(x, y, step=step, epochs=100).training_loss_trace
    assert all(b <= a + 1e-9 for a, b in zip(tr, tr[1:]))


def test_logistic_rejects_bad_input():
    with pytest.raises(NumericsError):
        logistic_fit([[np.inf]], [1])
    with pytest.raises(NumericsError):
        logistic_fit([[1.0]], [2])


def test_cosine_matrix_zero_rows():
    c = cosine_matrix([[0.0, 0.0], [1.0, 0.0]], [[2.0, 0.0], [0.0, 3.0]])
    assert np.array_equal(c, np.array([[0.0, 0.0], [1.0, 0.0]]))
