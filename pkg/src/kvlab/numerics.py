"""Dense float64 kernels used across the lab.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
functions here validate shapes and finiteness and otherwise stay out of the
way; everything is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RMS_EPS = 1e-6


class NumericsError(ValueError):
    """Rejected input to a numerics kernel."""


class DegenerateMaskError(NumericsError):
    """Every position of a softmax row is blocked."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericsError("matmul overflowed")
    return out


def masked_softmax(logits, allowed) -> np.ndarray:
    """Softmax over the allowed positions of the last axis.

    ``allowed`` is a boolean array broadcastable to ``logits``. Blocked
    entries get an additive -inf before normalisation and come out as exact
    zeros. Works on vectors and on stacks of rows.
    """
    x = np.asarray(logits, dtype=np.float64)
    ok = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    if not np.all(ok.any(axis=-1)):
        raise DegenerateMaskError("every position in a row is blocked")
    z = np.where(ok, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rms_norm(x, gain, eps: float = RMS_EPS) -> np.ndarray:
    """gain * x / sqrt(mean(x^2) + eps) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise NumericsError("rms_norm of an empty vector")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return np.asarray(gain, dtype=np.float64) * x / np.sqrt(ms + eps)


# ---------------------------------------------------------------------------
# symmetric eigendecomposition and PCA


def jacobi_eigh(sym, tol: float = 1e-15, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` sorted by decreasing eigenvalue,
    eigenvectors as columns. Each eigenvector's largest-magnitude entry is made
    positive so the output is reproducible bit for bit.
    """
    a = as_matrix(sym, "sym").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise NumericsError("jacobi_eigh needs a square matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
    return w, v


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # k x d, orthonormal rows
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(data, k: int) -> PcaModel:
    """PCA through the sample covariance (ddof=1) and a Jacobi solve."""
    x = as_matrix(data, "data")
    n, d = x.shape
    if n < 2:
        raise NumericsError("pca_fit needs at least two rows")
    if not 1 <= k <= min(n, d):
        raise NumericsError(f"k={k} out of range for data {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    w, v = jacobi_eigh(cov)
    ev = np.clip(w[:k], 0.0, None)
    return PcaModel(mean=mean, components=v[:, :k].T.copy(), explained_variance=ev)


def pca_project(model: PcaModel, data) -> np.ndarray:
    x = as_matrix(data, "data")
    if x.shape[1] != model.mean.shape[0]:
        raise NumericsError(f"data has {x.shape[1]} columns, model expects {model.mean.shape[0]}")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, coords) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ model.components + model.mean


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
    return d


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass sits on chosen points; take the first unused index
            idx = next(i for i in range(n) if i not in chosen)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans(data, k: int, seed: int, max_iter: int = 200) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops at an assignment fixpoint or after ``max_iter`` iterations. An
    emptied cluster is re-seeded at the point farthest from its current
    centroid (lowest index on ties).
    """
    x = as_matrix(data, "data")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise NumericsError(f"k={k} out of range for {n} points")
    rng = np.random.default_rng(seed)
    cent = _kmeanspp(x, k, rng)
    labels = np.argmin(_sq_dists(x, cent), axis=1)
    trace: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                cent[j] = x[members].mean(axis=0)
            else:
                own = ((x - cent[labels]) ** 2).sum(axis=1)
                far = int(np.argmax(own))
                cent[j] = x[far]
                labels[far] = j
        d = _sq_dists(x, cent)
        trace.append(float(d[np.arange(n), labels].sum()))
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    d = _sq_dists(x, cent)
    inertia = float(d[np.arange(n), labels].sum())
    return KMeansResult(labels=labels, centroids=cent, inertia=inertia, inertia_trace=trace, n_iter=it)


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    training_loss_trace: list[float] = field(default_factory=list)

    def predict_proba(self, features) -> np.ndarray:
        z = np.asarray(features, dtype=np.float64) @ self.weights + self.bias
        return _sigmoid(z)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic_loss_and_grad(w, b, x, y, l2):
    """Mean log loss plus ``0.5 * l2 * |w|^2`` and its gradient."""
    z = x @ w + b
    # log(1 + e^z) - y z, written stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w @ w)
    r = _sigmoid(z) - y
    gw = x.T @ r / x.shape[0] + l2 * w
    gb = float(r.mean())
    return float(loss), gw, gb


def logistic_fit(features, labels, step: float = 0.1, epochs: int = 500, l2: float = 1e-4) -> LogisticModel:
    """Full-batch gradient descent.

    A step that would raise the loss is rejected and the step size halved, so
    the recorded trace only contains accepted, non-increasing losses.
    """
    x = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape[0] < 1 or y.shape[0] != x.shape[0]:
        raise NumericsError("features and labels must have the same nonzero length")
    if not np.all((y == 0) | (y == 1)):
        raise NumericsError("labels must be 0/1")
    w = np.zeros(x.shape[1])
    b = 0.0
    loss, gw, gb = logistic_loss_and_grad(w, b, x, y, l2)
    trace = [loss]
    lr = step
    for _ in range(epochs):
        while True:
            w_new = w - lr * gw
            b_new = b - lr * gb
            new_loss, new_gw, new_gb = logistic_loss_and_grad(w_new, b_new, x, y, l2)
            if new_loss <= loss + 1e-12 or lr < 1e-12:
                break
            lr *= 0.5
        if new_loss > loss:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        trace.append(loss)
    return LogisticModel(weights=w, bias=b, training_loss_trace=trace)


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity; zero rows give similarity 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na = np.where(na == 0, 1.0, na)
    nb = np.where(nb == 0, 1.0, nb)
    return (a / na) @ (b / nb).T
