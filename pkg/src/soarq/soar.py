"""Iterative scale optimization: closed-form pass, then decoupled search, until converged.

Every method starts from the max-based scales with ``delta_q == delta_d``.
An iteration whose end loss would exceed the previous one is rejected (the
previous state is kept), so the end-of-iteration loss sequence is
non-increasing for all methods and never above the baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from soarq.block import (
    QuantConfig,
    QuantizedTensor,
    init_scales,
    mse,
    pack_tensor,
    quantize_tensor_baseline,
    scale_format,
    to_blocks,
)
from soarq.cjso import ScaleState, cjso_step, evaluate
from soarq.dss import dss_refine_tensor


@dataclass
class IterationRecord:
    iteration: int
    loss_after_cjso: float
    loss_after_dss: float
    rel_improvement: float
    wall_time: float = 0.0


@dataclass
class MethodResult:
    method: str
    tensor: QuantizedTensor
    mse: float
    trace: list[IterationRecord] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace)


def early_stop(prev_loss: float, cur_loss: float, tol: float) -> bool:
    """True once the relative improvement drops strictly below ``tol`` (or the loss is already zero)."""
    if cur_loss > prev_loss:
        raise ValueError(f"loss increased from {prev_loss!r} to {cur_loss!r}")
    if prev_loss == 0:
        return True
    return (prev_loss - cur_loss) / prev_loss < tol


def initial_state(blocks: np.ndarray, tensor, config: QuantConfig) -> ScaleState:
    alpha, delta = init_scales(tensor, config.format, config.block_size)
    return evaluate(blocks, alpha, delta, delta.copy())


def optimize(
    tensor, config: QuantConfig, use_cjso: bool, use_dss: bool
) -> tuple[ScaleState, list[IterationRecord]]:
    """Run the alternating loop and return the final state and its trace."""
    tensor = np.asarray(tensor, dtype=np.float64)
    blocks = to_blocks(tensor, config.block_size)
    scales = scale_format(config.format)
    state = initial_state(blocks, tensor, config)
    prev = state.loss
    trace = []
    for t in range(config.max_iters):
        t0 = time.perf_counter()
        cand = cjso_step(blocks, state, scales=scales) if use_cjso else state
        after_cjso = cand.loss
        if use_dss:
            cand = dss_refine_tensor(blocks, cand, config, scales)
        cur = cand.loss
        if cur <= prev:
            state = cand
        else:
            cur = prev
        rel = (prev - cur) / prev if prev > 0 else 0.0
        trace.append(IterationRecord(t, after_cjso, cur, rel, time.perf_counter() - t0))
        stop = early_stop(prev, cur, config.early_stop_tol)
        prev = cur
        if stop:
            break
    return state, trace


def _finish(method: str, tensor, config: QuantConfig, name: str, state: ScaleState, trace) -> MethodResult:
    tensor = np.asarray(tensor, dtype=np.float64)
    qt = pack_tensor(name, tensor.shape, config.format, config.block_size, state.alpha, state.delta_d, state.q)
    return MethodResult(method, qt, mse(tensor, qt), trace)


def soar_quantize(tensor, config: QuantConfig, name: str = "") -> MethodResult:
    """Closed-form update followed by decoupled search each iteration.

    Only ``delta_d``, ``alpha`` and the codes end up in the artifact.
    """
    if config.format != "nvfp4":
        raise ValueError("soar requires the nvfp4 format")
    state, trace = optimize(tensor, config, use_cjso=True, use_dss=True)
    return _finish("soar", tensor, config, name, state, trace)


def cjso_only_quantize(tensor, config: QuantConfig, name: str = "") -> MethodResult:
    if config.format != "nvfp4":
        raise ValueError("cjso requires the nvfp4 format")
    state, trace = optimize(tensor, config, use_cjso=True, use_dss=False)
    return _finish("cjso", tensor, config, name, state, trace)


def dss_only_quantize(tensor, config: QuantConfig, name: str = "") -> MethodResult:
    state, trace = optimize(tensor, config, use_cjso=False, use_dss=True)
    return _finish("dss", tensor, config, name, state, trace)


def baseline_quantize(tensor, config: QuantConfig, name: str = "") -> MethodResult:
    qt = quantize_tensor_baseline(tensor, config, name)
    return MethodResult("baseline", qt, mse(tensor, qt))


_METHODS = {
    "baseline": baseline_quantize,
    "cjso": cjso_only_quantize,
    "dss": dss_only_quantize,
    "soar": soar_quantize,
}


def quantize(tensor, config: QuantConfig, name: str = "") -> MethodResult:
    """Quantize one tensor with ``config.method``."""
    return _METHODS[config.method](tensor, config, name)
