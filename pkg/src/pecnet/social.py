"""Social mask construction and masked non-local attention pooling."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nets import ModelParams, mlp_forward


def _frame_intervals(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([np.min(f) for f in frames], dtype=np.int64)
    hi = np.array([np.max(f) for f in frames], dtype=np.int64)
    return lo, hi


def build_mask(trajectories: Sequence[tuple[np.ndarray, np.ndarray]], t_dist: float) -> np.ndarray:
    """Neighbour matrix over agents given their observed ``(positions, frame_ids)``.

    Two agents are neighbours when some pair of their observed points lies within
    ``t_dist`` and their observation frame intervals overlap.  Always symmetric with a
    unit diagonal.
    """
    if t_dist <= 0:
        raise ValueError(f"t_dist must be positive, got {t_dist}")
    n = len(trajectories)
    if n == 0:
        return np.zeros((0, 0), dtype=np.uint8)
    pos = np.stack([np.asarray(p, dtype=np.float64) for p, _ in trajectories])  # (n, t, 2)
    lo, hi = _frame_intervals([f for _, f in trajectories])
    close = np.empty((n, n), dtype=bool)
    for i in range(n):
        diff = pos[:, :, None, :] - pos[i][None, None, :, :]  # (n, t, t, 2)
        close[i] = np.sqrt((diff**2).sum(-1).reshape(n, -1).min(axis=1)) <= t_dist
    overlap = (lo[:, None] <= hi[None, :]) & (lo[None, :] <= hi[:, None])
    mask = (close & overlap).astype(np.uint8)
    np.fill_diagonal(mask, 1)
    return mask


def neighbour_edges(trajectories: Sequence[tuple[np.ndarray, np.ndarray]], t_dist: float) -> list[tuple[int, int]]:
    """Off-diagonal mask edges ``(i, j)`` with ``i < j``, without materialising the dense mask.

    Sweeps agents by start frame so only temporally overlapping pairs are compared.
    """
    if t_dist <= 0:
        raise ValueError(f"t_dist must be positive, got {t_dist}")
    n = len(trajectories)
    if n == 0:
        return []
    lo, hi = _frame_intervals([f for _, f in trajectories])
    pos = [np.asarray(p, dtype=np.float64) for p, _ in trajectories]
    order = np.argsort(lo, kind="stable")
    edges = []
    active: list[int] = []
    for i in order:
        active = [j for j in active if hi[j] >= lo[i]]
        if active:
            cand = np.array(active)
            others = np.stack([pos[j] for j in cand])  # (c, t, 2)
            diff = others[:, :, None, :] - pos[i][None, None, :, :]
            dmin = np.sqrt((diff**2).sum(-1).reshape(len(cand), -1).min(axis=1))
            for j in cand[dmin <= t_dist]:
                edges.append((min(i, j), max(i, j)))
        active.append(i)
    return sorted(edges)


def attention_weights(X: Tensor, mask: np.ndarray, params: ModelParams) -> Tensor:
    """Row-stochastic weights ``softmax_j(phi(X_k) . theta(X_j))`` restricted to the mask."""
    f = mlp_forward(params, "phi", X)
    th = mlp_forward(params, "theta", X)
    logits = ad.matmul(f, ad.transpose(th))
    return ad.masked_softmax(logits, mask)


def pool_round(X: Tensor, mask: np.ndarray, params: ModelParams) -> Tensor:
    """One residual non-local update: ``X_k + sum_j w_kj g(X_j)``.

    ``X`` is ``(agents, width)`` or ``(samples, agents, width)``; the mask is shared
    across leading sample axes.
    """
    alpha = X.shape[-2]
    mask = np.asarray(mask)
    if mask.shape != (alpha, alpha):
        raise DimensionError(f"mask shape {mask.shape} does not match {alpha} agents")
    if not np.all(np.diagonal(mask)):
        raise ValueError("social mask must have a unit diagonal")
    w = attention_weights(X, mask, params)
    return ad.add(X, ad.matmul(w, mlp_forward(params, "g", X)))


def social_pool(X: Tensor, mask: np.ndarray, params: ModelParams, rounds: int) -> Tensor:
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    for _ in range(rounds):
        X = pool_round(X, mask, params)
    return X
