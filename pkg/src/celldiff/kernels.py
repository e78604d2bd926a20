"""Energy distance, MMD and explicit-feature kernel mean embeddings.

The energy distance is what training optimises. The finite-feature kernels
below exist to check embedding identities exactly: with an explicit feature
map phi, the mean embedding of a batch is the vector ``mean_j phi(x_j)`` and
every Hilbert-space quantity becomes ordinary linear algebra.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import autodiff as ad


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"expected an m x G batch, got shape {X.shape}")
    return X


def _pairwise(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[..., :, None, :] - Y[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def energy_distance(X, Y):
    """V-statistic energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``.

    Accepts numpy batches (returns a float) or autodiff tensors of shape
    ``(..., m, G)`` (returns a tensor over the leading axes).
    """
    if isinstance(X, ad.Tensor) or isinstance(Y, ad.Tensor):
        rec = X.record if isinstance(X, ad.Tensor) else Y.record
        X = X if isinstance(X, ad.Tensor) else rec.constant(X)
        Y = Y if isinstance(Y, ad.Tensor) else rec.constant(Y)
        if X.shape[-1] != Y.shape[-1]:
            raise ValueError(f"gene dimensions differ: {X.shape[-1]} vs {Y.shape[-1]}")
        axes = (-2, -1)
        dxy = ad.pairwise_distance(X, Y).mean(axis=axes)
        dxx = ad.pairwise_distance(X, X).mean(axis=axes)
        dyy = ad.pairwise_distance(Y, Y).mean(axis=axes)
        return dxy * 2.0 - dxx - dyy
    X, Y = _as_batch(X), _as_batch(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"gene dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    return float(
        2.0 * _pairwise(X, Y).mean() - _pairwise(X, X).mean() - _pairwise(Y, Y).mean()
    )


@dataclass
class FiniteKernel:
    """Kernel with an explicit feature map, ``k(x, y) = <phi(x), phi(y)>``.

    ``kind="linear"`` uses phi(x) = x. ``kind="random-features"`` uses
    ``phi(x) = sqrt(2/D) cos(W x + b)`` with ``W ~ N(0, I)`` and
    ``b ~ U[0, 2pi)`` drawn once from ``seed``.
    """

    kind: str
    n_genes: int
    n_features: int | None = None
    seed: int = 0
    W: np.ndarray = field(init=False, repr=False, default=None)
    b: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.kind == "linear":
            self.n_features = self.n_genes
        elif self.kind == "random-features":
            if not self.n_features:
                raise ValueError("random-features kernel needs n_features")
            rng = np.random.default_rng(self.seed)
            self.W = rng.standard_normal((self.n_features, self.n_genes))
            self.b = rng.uniform(0.0, 2.0 * np.pi, size=self.n_features)
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    def features(self, X) -> np.ndarray:
        X = _as_batch(X)
        if X.shape[1] != self.n_genes:
            raise ValueError(f"kernel expects {self.n_genes} genes, got {X.shape[1]}")
        if self.kind == "linear":
            return X.copy()
        return np.sqrt(2.0 / self.n_features) * np.cos(X @ self.W.T + self.b)

    def jacobian(self, x) -> np.ndarray:
        """D x G Jacobian of phi at a single cell."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "linear":
            return np.eye(self.n_genes)
        s = np.sin(self.W @ x + self.b)
        return -np.sqrt(2.0 / self.n_features) * s[:, None] * self.W

    def __call__(self, X, Y) -> np.ndarray:
        return self.features(X) @ self.features(Y).T


def embed(X, k: FiniteKernel) -> np.ndarray:
    """Empirical mean embedding ``(1/m) sum_j phi(x_j)``."""
    return k.features(X).mean(axis=0)


def mmd_sq(X, Y, k: FiniteKernel) -> float:
    """Biased (V-statistic) squared MMD computed from kernel matrices."""
    X, Y = _as_batch(X), _as_batch(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"gene dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    return float(k(X, X).mean() + k(Y, Y).mean() - 2.0 * k(X, Y).mean())


def noise_covariance_oracle(X, k: FiniteKernel) -> np.ndarray:
    """First-order covariance of the embedding shift under unit per-cell noise.

    Returns ``(1/m^2) sum_j J_j J_j^T`` where ``J_j`` is the Jacobian of the
    feature map at cell ``j``.
    """
    X = _as_batch(X)
    m = X.shape[0]
    C = np.zeros((k.n_features, k.n_features))
    for x in X:
        J = k.jacobian(x)
        C += J @ J.T
    return C / m**2


def _moment_matched_normal(rng, trials: int, dim: int) -> np.ndarray:
    z = rng.standard_normal((trials, dim))
    z -= z.mean(axis=0)
    L = np.linalg.cholesky(np.cov(z, rowvar=False))
    return linalg.solve_triangular(L, z.T, lower=True).T


def simulate_embedding_noise(
    X,
    k: FiniteKernel,
    sigma: float,
    trials: int,
    seed: int = 0,
    moment_matched: bool = False,
    chunk: int = 20000,
) -> np.ndarray:
    """Sample covariance of ``embed(X + sigma*eps) - embed(X)`` over ``trials`` draws.

    With ``moment_matched=True`` the flattened noise draws are whitened so
    their sample covariance is exactly the identity. This removes the Monte
    Carlo error of the linear term and isolates the higher-order remainder.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if trials < 2:
        raise ValueError("need at least two trials")
    X = _as_batch(X)
    m, G = X.shape
    rng = np.random.default_rng(seed)
    base = embed(X, k)
    if moment_matched:
        noise = _moment_matched_normal(rng, trials, m * G).reshape(trials, m, G)
    deltas = np.empty((trials, k.n_features))
    for start in range(0, trials, chunk):
        stop = min(trials, start + chunk)
        eps = noise[start:stop] if moment_matched else rng.standard_normal((stop - start, m, G))
        noisy = (X[None] + sigma * eps).reshape(-1, G)
        deltas[start:stop] = k.features(noisy).reshape(stop - start, m, -1).mean(axis=1) - base
    return np.cov(deltas, rowvar=False).reshape(k.n_features, k.n_features)


def gaussian_kl_shared_cov(m1, m2, C) -> float:
    """KL between two Gaussians sharing covariance ``C``: ``0.5 d^T C^{-1} d``."""
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    m2 = np.atleast_1d(np.asarray(m2, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if C.shape != (m1.size, m1.size) or m2.shape != m1.shape:
        raise ValueError("mean and covariance dimensions disagree")
    if not np.allclose(C, C.T, rtol=1e-12, atol=1e-14):
        raise ValueError("covariance is not symmetric")
    try:
        factor = linalg.cho_factor(C, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    d = m1 - m2
    return float(0.5 * d @ linalg.cho_solve(factor, d))
