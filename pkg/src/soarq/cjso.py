"""Closed-form joint optimization of the global and block scales.

With the FP4 assignments ``Q`` held fixed the reconstruction error
``sum_ij (W_ij - Q_ij * alpha * delta_i)**2`` is quadratic in ``alpha`` (for
fixed block scales) and in each ``delta_i`` (for fixed ``alpha``), so each
coordinate has a least-squares minimizer in closed form.  One step
reassigns ``Q``, then updates ``alpha``, then every block scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from soarq.block import E4M3_SCALES, ScaleFormat, assign, reconstruct, sse


class DegenerateAssignments(ValueError):
    """All assignments entering a closed-form update are zero."""


@dataclass
class ScaleState:
    """Working state of the scale optimizers for one blocked tensor.

    ``delta_q`` drives the FP4 assignment and is unconstrained; ``delta_d``
    is what gets stored and must be representable in the block-scale format
    (except in the unprojected mode of :func:`cjso_step`).
    """

    alpha: float
    delta_q: np.ndarray
    delta_d: np.ndarray
    q: np.ndarray
    block_losses: np.ndarray

    @property
    def loss(self) -> float:
        return float(np.sum(self.block_losses))


def evaluate(blocks: np.ndarray, alpha: float, delta_q, delta_d) -> ScaleState:
    """Build a state with assignments and losses recomputed from the scales."""
    delta_q = np.asarray(delta_q, dtype=np.float64)
    delta_d = np.asarray(delta_d, dtype=np.float64)
    q = assign(blocks, alpha, delta_q)
    return ScaleState(alpha, delta_q, delta_d, q, sse(blocks, reconstruct(q, alpha, delta_d)))


def recompute_assignments(blocks: np.ndarray, alpha: float, delta_q) -> np.ndarray:
    return assign(np.asarray(blocks, dtype=np.float64), alpha, delta_q)


def update_global_scale(blocks: np.ndarray, q: np.ndarray, delta_d) -> float:
    """Least-squares global scale for fixed assignments and block scales."""
    blocks = np.atleast_2d(np.asarray(blocks, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    dd = np.broadcast_to(np.asarray(delta_d, dtype=np.float64), blocks.shape[:1])[:, None]
    qd = q * dd
    den = float(np.sum(qd * qd))
    if den == 0.0:
        raise DegenerateAssignments("all assignments are zero")
    return float(np.sum(blocks * qd)) / den


def _block_scales(blocks: np.ndarray, q: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    qa = q * alpha
    num = np.sum(blocks * qa, axis=-1)
    den = np.sum(qa * qa, axis=-1)
    ok = den > 0
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), ok


def update_block_scale(block, q_block, alpha: float) -> float:
    """Least-squares scale of one block for fixed assignments and global scale."""
    star, ok = _block_scales(np.asarray(block, dtype=np.float64), np.asarray(q_block, dtype=np.float64), alpha)
    if not ok:
        raise DegenerateAssignments("block assignments are all zero")
    return float(star)


def project_scale_e4m3(delta_star) -> float:
    """Round a positive real block scale to E4M3, clipped to the positive finite range."""
    d = np.asarray(delta_star, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("block scale must be positive and finite")
    return E4M3_SCALES.project(d)


def cjso_step(
    blocks: np.ndarray,
    state: ScaleState,
    project: bool = True,
    scales: ScaleFormat = E4M3_SCALES,
) -> ScaleState:
    """One closed-form pass: reassign Q, update alpha, update block scales.

    The global update uses the stored scales ``delta_d``.  Each new block
    scale is kept unprojected as ``delta_q`` and rounded into the scale
    format as ``delta_d``.  Blocks (or the whole tensor) whose assignments
    are all zero keep their previous scales.

    ``project=False`` skips both the block-scale projection and the float32
    rounding of alpha, giving the pure real-valued coordinate descent.
    """
    q = assign(blocks, state.alpha, state.delta_q)
    try:
        alpha = update_global_scale(blocks, q, state.delta_d)
        if project:
            alpha = float(np.float32(alpha))
        if not alpha > 0:
            alpha = state.alpha
    except DegenerateAssignments:
        alpha = state.alpha
    star, ok = _block_scales(blocks, q, alpha)
    ok &= star > 0
    delta_q = np.where(ok, star, state.delta_q)
    if project:
        delta_d = np.where(ok, scales.project(np.where(ok, star, 1.0)), state.delta_d)
    else:
        delta_d = delta_q.copy()
    return evaluate(blocks, alpha, delta_q, delta_d)

