"""From-scratch t-SNE for jointly embedding feature sets.

Conditional neighbor distributions are calibrated per row by a binary search
on the Gaussian precision until the perplexity (2^entropy, entropy in bits)
hits the target. The low-dimensional similarities are Student-t with one
degree of freedom, optimized by gradient descent with momentum, early
exaggeration, and a seeded small-variance Gaussian initialization. Schedule
defaults are the classic published ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

_Q_FLOOR = 1e-12


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    out_dims: int = 2
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0

    def validate(self, n: int):
        if not (1.0 < self.perplexity < n):
            raise ContractError(
                f"perplexity must lie in (1, n); got {self.perplexity} with n={n}"
            )
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")


@dataclass
class Embedding:
    points: np.ndarray
    labels: list
    kl_history: list = field(default_factory=list)


def pca_reduce(x: np.ndarray, k: int) -> np.ndarray:
    """Project rows onto the top-k principal components (speed knob for
    high-dimensional features). Component signs are fixed so the projection
    is deterministic."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be 2-D, got shape {x.shape}")
    if not 1 <= k <= min(x.shape):
        raise ContractError(f"k must lie in 1..{min(x.shape)}, got {k}")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    anchor = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), anchor])
    signs[signs == 0] = 1.0
    return centered @ (components * signs[:, None]).T


def squared_distances(x: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances with an exactly zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d2 = (d2 + d2.T) / 2.0
    np.fill_diagonal(d2, 0.0)
    return d2


def _row_entropy_bits(p_row):
    nz = p_row[p_row > 0]
    return float(-np.sum(nz * np.log2(nz)))


def perplexity_calibrate(sq_dists: np.ndarray, perplexity: float,
                         tol: float = 1e-5, max_iter: int = 64,
                         return_betas: bool = False):
    """Per-row precision search so each conditional row hits the perplexity.

    Returns the row-stochastic conditional matrix with a zero diagonal
    (optionally also the per-row precisions).
    """
    d = np.asarray(sq_dists, dtype=np.float64)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n:
        raise ContractError(f"sq_dists must be square, got {d.shape}")
    if not np.allclose(d, d.T, atol=1e-8):
        raise ContractError("sq_dists must be symmetric")
    if np.max(np.abs(np.diagonal(d))) > 1e-12:
        raise ContractError("sq_dists must have a zero diagonal")
    if n <= perplexity:
        raise ContractError(f"need n > perplexity, got n={n}, perplexity={perplexity}")
    if perplexity <= 1.0:
        raise ContractError("perplexity must be > 1")

    p = np.zeros((n, n), dtype=np.float64)
    betas = np.ones(n, dtype=np.float64)
    others = np.arange(n)
    for i in range(n):
        idx = others[others != i]
        di = d[i, idx]
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        row = None
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            total = w.sum()
            if total <= 0:
                # precision so high every weight underflowed; back off
                beta_hi = beta
                beta = (beta_lo + beta_hi) / 2.0
                continue
            row = w / total
            perp = 2.0 ** _row_entropy_bits(row)
            if abs(perp - perplexity) <= tol:
                break
            if perp > perplexity:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta_lo + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = (beta_lo + beta_hi) / 2.0
        p[i, idx] = row
        betas[i] = beta
    if return_betas:
        return p, betas
    return p


def joint_probabilities(p_conditional: np.ndarray) -> np.ndarray:
    """Symmetrized affinities p_ij = (p_j|i + p_i|j) / (2n)."""
    n = p_conditional.shape[0]
    return (p_conditional + p_conditional.T) / (2.0 * n)


def _student_t_weights(y: np.ndarray) -> np.ndarray:
    d2 = squared_distances(y)
    w = 1.0 / (1.0 + d2)
    np.fill_diagonal(w, 0.0)
    return w


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    w = _student_t_weights(y)
    q = w / w.sum()
    np.maximum(q, _Q_FLOOR, out=q)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of KL(P || Q) at embedding y: 4 sum_j (p-q)(y_i-y_j)/(1+d2)."""
    w = _student_t_weights(y)
    q = np.maximum(w / w.sum(), _Q_FLOOR)
    pq_w = (p - q) * w
    return 4.0 * (y * pq_w.sum(axis=1)[:, None] - pq_w @ y)


def tsne_run(features: np.ndarray, cfg: TsneConfig | None = None, labels=None,
             init: np.ndarray | None = None) -> Embedding:
    """Embed rows of ``features`` into the plane; deterministic per seed."""
    if cfg is None:
        cfg = TsneConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("features contain non-finite values")
    n = x.shape[0]
    if n < 4:
        raise ContractError("need at least 4 rows to embed")
    cfg.validate(n)
    if labels is not None and len(labels) != n:
        raise ContractError("labels length must match the number of rows")

    p = joint_probabilities(perplexity_calibrate(squared_distances(x), cfg.perplexity))

    if init is not None:
        y = np.array(init, dtype=np.float64, copy=True)
        if y.shape != (n, cfg.out_dims):
            raise ContractError(f"init must have shape {(n, cfg.out_dims)}")
    else:
        rng = np.random.default_rng(cfg.seed)
        y = rng.normal(scale=1e-4, size=(n, cfg.out_dims))
    velocity = np.zeros_like(y)
    kl_history = []

    for it in range(1, cfg.iterations + 1):
        exaggeration = cfg.early_exaggeration if it <= cfg.exaggeration_iters else 1.0
        momentum = cfg.momentum_start if it < cfg.momentum_switch_iter else cfg.momentum_final

        w = _student_t_weights(y)
        q = np.maximum(w / w.sum(), _Q_FLOOR)
        pq_w = (exaggeration * p - q) * w
        grad = 4.0 * (y * pq_w.sum(axis=1)[:, None] - pq_w @ y)

        velocity = momentum * velocity - cfg.learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)

        # report the true (unexaggerated) objective
        mask = p > 0
        kl_history.append(float(np.sum(p[mask] * np.log(p[mask] / q[mask]))))

    return Embedding(points=y, labels=list(labels) if labels is not None else [],
                     kl_history=kl_history)


def set_means(embedding: Embedding, required=None) -> dict:
    """Mean embedded coordinate per label."""
    if not embedding.labels:
        raise ContractError("embedding has no labels to group by")
    points = np.asarray(embedding.points)
    means = {}
    for label in dict.fromkeys(embedding.labels):
        rows = [i for i, l in enumerate(embedding.labels) if l == label]
        means[label] = points[rows].mean(axis=0)
    if required is not None:
        missing = [label for label in required if label not in means]
        if missing:
            raise ContractError(f"labels missing from the embedding: {missing}")
    return means
