"""Monte-Carlo check of the shifted-MSE identity for a linear two-layer model.

For ``f(x) = Wᵀ B x`` and an input shift ``x' = x + eps`` with
``eps ~ N(0, Sigma)`` independent of ``(x, y)``::

    E||y - f(x')||² = E||y - f(x)||² + E||Wᵀ B eps||²
    E||Wᵀ B eps||² = tr(Bᵀ W Wᵀ B Sigma)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LinearTwoLayer:
    B: np.ndarray      # (k, d) backbone
    W: np.ndarray      # (k, m) head
    sigma: np.ndarray  # (d, d) noise covariance

    def __post_init__(self):
        k, d = np.shape(self.B)
        if np.ndim(self.W) != 2 or np.shape(self.W)[0] != k:
            raise ValueError(f"head must be ({k}, m), got {np.shape(self.W)}")
        if np.shape(self.sigma) != (d, d):
            raise ValueError(f"covariance must be ({d}, {d}), got {np.shape(self.sigma)}")
        if not np.allclose(self.sigma, np.transpose(self.sigma), atol=1e-10):
            raise ValueError("covariance must be symmetric")

    @property
    def dims(self) -> tuple[int, int, int]:
        k, d = self.B.shape
        return k, d, self.W.shape[1]

    def map(self) -> np.ndarray:
        """The end-to-end (m, d) matrix Wᵀ B."""
        return self.W.T @ self.B


def psd_factor(sigma: np.ndarray) -> np.ndarray:
    """``L`` with ``L Lᵀ = sigma`` via a clipped eigen-decomposition (works for singular sigma)."""
    vals, vecs = np.linalg.eigh(np.asarray(sigma, dtype=float))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def random_psd(d: int, rng: np.random.Generator, rank: int | None = None, delta: float = 1e-6) -> np.ndarray:
    f = rng.standard_normal((d, rank or d)) / np.sqrt(rank or d)
    return f @ f.T + delta * np.eye(d)


def penalty_trace(model: LinearTwoLayer) -> float:
    """``tr(Bᵀ W Wᵀ B Sigma)``."""
    b, w = np.asarray(model.B, float), np.asarray(model.W, float)
    return float(np.trace(b.T @ w @ w.T @ b @ model.sigma))


def penalty_trace_lowrank(B, W, diag, factor=None) -> float:
    """Same trace for ``Sigma = diag(D) + F Fᵀ`` without forming Sigma."""
    a = np.asarray(W, float).T @ np.asarray(B, float)   # (m, d)
    out = float(np.sum(a * a * np.asarray(diag, float)[None, :]))
    if factor is not None:
        out += float(np.sum((a @ factor) ** 2))
    return out


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(n))


def penalty_empirical(model: LinearTwoLayer, n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Sample mean and standard error of ``||Wᵀ B eps||²``."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    eps = rng.standard_normal((n_samples, model.B.shape[1])) @ psd_factor(model.sigma).T
    vals = np.sum((eps @ model.map().T) ** 2, axis=1)
    return _mean_se(vals)


@dataclass(frozen=True)
class Decomposition:
    clean: float
    shifted: float
    shifted_se: float
    predicted: float        # clean + trace penalty
    cross: float            # mean of residualᵀ (Wᵀ B eps)
    cross_se: float

    def within(self, k: float = 3.0) -> bool:
        return abs(self.shifted - self.predicted) <= k * self.shifted_se + 1e-12


def shifted_mse_decomposition(model: LinearTwoLayer, x: np.ndarray, y: np.ndarray, n_samples: int,
                              rng: np.random.Generator) -> Decomposition:
    """Clean MSE, Monte-Carlo shifted MSE, and clean MSE + trace penalty.

    Every data point is paired with ``ceil(n_samples / n)`` noise draws, and
    the clean loss is averaged over the same index array, so ``Sigma = 0``
    reproduces the clean loss exactly.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = len(x)
    reps = -(-n_samples // n)
    idx = np.tile(np.arange(n), reps)
    a = model.map()
    resid = y - x @ a.T                          # (n, m)
    eps = rng.standard_normal((len(idx), x.shape[1])) @ psd_factor(model.sigma).T
    noise_out = eps @ a.T                        # (N, m)
    r = resid[idx]
    clean_sq = np.sum(r * r, axis=1)
    shifted_res = r - noise_out
    shifted_sq = np.sum(shifted_res * shifted_res, axis=1)
    clean = float(np.mean(clean_sq))
    shifted, shifted_se = _mean_se(shifted_sq)
    cross, cross_se = _mean_se(np.sum(r * noise_out, axis=1))
    return Decomposition(clean, shifted, shifted_se, clean + penalty_trace(model), cross, cross_se)


def semi_orthogonal(w: np.ndarray) -> np.ndarray:
    """Nearest-by-QR (k, m) matrix with orthonormal rows (requires k <= m)."""
    k, m = w.shape
    if k > m:
        raise ValueError("rows can only be orthonormal when k <= m")
    q, r = np.linalg.qr(w.T)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def random_triple(rng: np.random.Generator, k=3, d=4, m=5) -> LinearTwoLayer:
    return LinearTwoLayer(rng.standard_normal((k, d)), rng.standard_normal((k, m)), random_psd(d, rng))
