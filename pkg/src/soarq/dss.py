"""Decoupled scale search.

Each block gets two scales: a real-valued ``delta_q`` that only decides the
FP4 rounding, and a stored ``delta_d`` restricted to the block-scale format.
The search evaluates every pair from a multiplicative grid of ``delta_q``
values crossed with the representable ``delta_d`` values nearest the
current stored scale, and keeps the pair with the lowest block error.  The
incoming (incumbent) pair is always a candidate, so a pass never increases
the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from soarq import codecs
from soarq.block import E4M3_SCALES, QuantConfig, ScaleFormat, reconstruct, sse
from soarq.cjso import ScaleState, evaluate

# blocks per vectorized chunk; bounds peak memory at ~ CHUNK * grid * cands * G doubles
CHUNK = 512


@dataclass(frozen=True)
class ScalePairCandidate:
    delta_q: float
    delta_d: float
    loss: float


def build_quant_grid(delta_base: float, lo: float, hi: float, step: float) -> np.ndarray:
    """``delta_base * beta`` for ``beta = lo, lo + step, ..., hi`` (generated by integer index)."""
    if not (0 < lo <= hi and step > 0):
        raise ValueError("grid requires 0 < lo <= hi and step > 0")
    if not (math.isfinite(delta_base) and delta_base > 0):
        raise ValueError("grid base must be positive and finite")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return delta_base * (lo + np.arange(n + 1) * step)


def build_dequant_candidates(
    delta_d_current: float,
    analytic_delta: float,
    count: int = 2,
    scales: ScaleFormat = E4M3_SCALES,
) -> list[float]:
    """Sorted union of the incumbent stored scale and the ``count`` representable scales nearest the analytic one."""
    if not (delta_d_current > 0 and analytic_delta > 0):
        raise ValueError("scales must be positive")
    return sorted(set(scales.neighbors(analytic_delta, count)) | {float(delta_d_current)})


def _search(
    blocks: np.ndarray,
    alpha: float,
    anchor: np.ndarray,
    analytic: np.ndarray,
    inc_q: np.ndarray,
    inc_d: np.ndarray,
    config: QuantConfig,
    scales: ScaleFormat,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best (delta_q, delta_d, loss) per block for one chunk of blocks.

    ``anchor`` centers the grid and the dequant neighbors; ``analytic``
    only breaks ties between equal-loss challengers.
    """
    betas = build_quant_grid(1.0, config.grid_lo, config.grid_hi, config.grid_step)
    dq = anchor[:, None] * betas  # (nb, K)
    dd = np.concatenate([scales.neighbors_many(anchor, config.dequant_neighbor_count), inc_d[:, None]], axis=1)

    q = codecs.piecewise_round(blocks[:, None, :] / (alpha * dq)[:, :, None])  # (nb, K, G)
    losses = sse(blocks[:, None, None, :], q[:, :, None, :] * (alpha * dd)[:, None, :, None])  # (nb, K, C)

    nb, k, c = losses.shape
    dq_full = np.broadcast_to(dq[:, :, None], (nb, k, c)).reshape(nb, -1)
    dd_full = np.broadcast_to(dd[:, None, :], (nb, k, c)).reshape(nb, -1)
    prox = np.abs(dd_full - analytic[:, None])
    flat = losses.reshape(nb, -1)
    best = np.lexsort((dq_full, prox, flat), axis=-1)[:, 0]
    rows = np.arange(nb)
    best_loss = flat[rows, best]

    inc_loss = sse(blocks, reconstruct(codecs.piecewise_round(blocks / (alpha * inc_q)[:, None]), alpha, inc_d))
    take = best_loss < inc_loss
    return (
        np.where(take, dq_full[rows, best], inc_q),
        np.where(take, dd_full[rows, best], inc_d),
        np.where(take, best_loss, inc_loss),
    )


def dss_refine_block(
    block,
    alpha: float,
    incumbent: ScalePairCandidate,
    config: QuantConfig,
    anchor: float | None = None,
    scales: ScaleFormat = E4M3_SCALES,
) -> ScalePairCandidate:
    """Search the scale pairs of one block.

    The ``delta_q`` grid and the dequant neighbors are centered on ``anchor``
    (default: the incumbent stored scale).  Ties among challengers go to the
    stored scale closest to the incumbent ``delta_q`` (the unprojected
    analytic scale after a closed-form step), then to the smaller
    ``delta_q``; a challenger must be strictly better than the incumbent to
    replace it.
    """
    center = incumbent.delta_d if anchor is None else anchor
    dq, dd, loss = _search(
        np.asarray(block, dtype=np.float64)[None, :],
        alpha,
        np.array([center], dtype=np.float64),
        np.array([incumbent.delta_q], dtype=np.float64),
        np.array([incumbent.delta_q], dtype=np.float64),
        np.array([incumbent.delta_d], dtype=np.float64),
        config,
        scales,
    )
    return ScalePairCandidate(float(dq[0]), float(dd[0]), float(loss[0]))


def dss_refine_tensor(
    blocks: np.ndarray,
    state: ScaleState,
    config: QuantConfig,
    scales: ScaleFormat = E4M3_SCALES,
) -> ScaleState:
    """Refine every block independently around its stored scale; ``alpha`` is left unchanged."""
    new_q = np.empty_like(state.delta_q)
    new_d = np.empty_like(state.delta_d)
    for s in range(0, len(blocks), CHUNK):
        sl = slice(s, s + CHUNK)
        new_q[sl], new_d[sl], _ = _search(
            blocks[sl],
            state.alpha,
            state.delta_d[sl],
            state.delta_q[sl],
            state.delta_q[sl],
            state.delta_d[sl],
            config,
            scales,
        )
    out = evaluate(blocks, state.alpha, new_q, new_d)
    # guard against last-ulp disagreement between the batched and per-block sums
    worse = out.block_losses > state.block_losses
    if np.any(worse):
        out = evaluate(
            blocks,
            state.alpha,
            np.where(worse, state.delta_q, new_q),
            np.where(worse, state.delta_d, new_d),
        )
    return out
