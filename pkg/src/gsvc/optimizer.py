"""Gradient-based splat fitting with a from-scratch Adam.

The fitter minimizes masked MSE between the raw accumulated render (plus a
flat background) and a target frame. Positions, Cholesky vectors and colors
form three parameter groups with independent base learning rates; the
position rate is expressed in normalized frame units and converted to
pixels internally. A two-step decay halves all rates at 60% and 85% of the
iteration budget. Optimization happens in the unconstrained raw space: the
two Cholesky diagonals pass through a softplus, and their gradients are
chained accordingly.

Quantization-aware fitting runs in two phases: a plain float warmup, then
a quantize-dequantize round trip inserted into the forward evaluation with
gradients passing straight through, so parameters learn to sit on
representable points. Each phase gets its own decay arc and fresh Adam
moments; the lattice is calibrated once at the phase boundary and frozen.

Divergence (non-finite loss) aborts with the failing iteration index.
Early stopping triggers on masked PSNR once a target is set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .gaussians import GaussianSet, softplus, softplus_grad
from .metrics import psnr_from_mse, validate_image, validate_mask
from .quantization import QuantSpec, calibrate_from_attributes, qdq_attributes
from .rasterizer import _backward_arrays, _forward_arrays

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class FitDivergedError(RuntimeError):
    """Raised when the loss turns non-finite; carries the iteration index."""

    def __init__(self, iteration: int, message: str | None = None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


@dataclass
class FitConfig:
    """Fitting hyperparameters.

    Attributes:
        max_iters: iteration budget.
        target_psnr: early-stop threshold on masked PSNR (dB), or None.
        lr_mu: position rate in normalized frame units; the pixel-space rate
            is ``lr_mu * max(frame_dims)``.
        lr_chol: Cholesky rate, normalized the same way as lr_mu (both
            parameter groups carry pixel units).
        lr_color: raw-space rate for the color group.
        decay_points: iteration fractions where rates halve.
        decay_factor: multiplier applied at each decay point.
        loss_kind: only ``"mse"`` is implemented.
        quant_in_loop: simulate quantization inside the forward pass.
        quant_spec: quantizer for the in-loop round trip. A calibrated spec
            is used as-is; an uncalibrated one is calibrated once from the
            live parameters when the warmup ends, then frozen, so the fit
            adapts to a fixed lattice.
        qat_warmup: fraction of the budget fitted in plain float before the
            in-loop round trip engages.
        active_ids: splat rows the fitter may update; None means all, an
            empty array freezes everything (the input set returns as-is).
        background: flat RGB added to the accumulated sum before the loss.
        cutoff: footprint radius (marginal sigmas) for rendering.
        workers: renderer worker threads.
        psnr_check_every: cadence (iterations) of PSNR trace checkpoints.
    """

    max_iters: int = 1000
    target_psnr: float | None = None
    lr_mu: float = 5e-3
    lr_chol: float = 2e-3
    lr_color: float = 5e-3
    decay_points: tuple[float, float] = (0.6, 0.85)
    decay_factor: float = 0.5
    loss_kind: str = "mse"
    quant_in_loop: bool = False
    quant_spec: QuantSpec | None = None
    qat_warmup: float = 0.5
    active_ids: Any = None
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cutoff: float = 3.0
    workers: int = 1
    psnr_check_every: int = 25

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.loss_kind != "mse":
            raise ValueError(f"unsupported loss_kind {self.loss_kind!r}")
        if not 0.0 <= self.qat_warmup <= 1.0:
            raise ValueError("qat_warmup must be a fraction in [0, 1]")
        if self.psnr_check_every < 1:
            raise ValueError("psnr_check_every must be at least 1")


@dataclass
class FitReport:
    """What a fit did: budget spent, quality trace, final state."""

    iterations: int
    psnr_trace: list = field(default_factory=list)   # (iteration, masked dB)
    loss_trace: list = field(default_factory=list)   # per-iteration loss
    final_loss: float = float("nan")
    wall_time_s: float = 0.0
    early_stopped: bool = False
    quant_spec: QuantSpec | None = None

    @property
    def final_psnr(self) -> float:
        return self.psnr_trace[-1][1] if self.psnr_trace else float("nan")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter group."""

    m_mu: np.ndarray
    v_mu: np.ndarray
    m_chol: np.ndarray
    v_chol: np.ndarray
    m_color: np.ndarray
    v_color: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(
            m_mu=np.zeros((n, 2)), v_mu=np.zeros((n, 2)),
            m_chol=np.zeros((n, 3)), v_chol=np.zeros((n, 3)),
            m_color=np.zeros((n, 3)), v_color=np.zeros((n, 3)),
        )


def lr_schedule(iteration: int, cfg: FitConfig, phase=None):
    """Per-group learning rates after step decay.

    The rate halves (by ``decay_factor``) once the iteration reaches each
    decay point, so an iteration exactly at the 60% boundary already runs
    at ``base * decay_factor``. Monotone non-increasing in ``iteration``.

    Args:
        phase: optional ``(start, end)`` iteration bounds of the current
            annealing arc; decay points are fractions of that span.
            Defaults to the whole budget. Quantization-aware fits run one
            arc per phase so the simulated-quantization half gets its own
            full decay sweep.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    lo, hi = (0, cfg.max_iters) if phase is None else phase
    span = hi - lo
    boundaries = [lo + int(f * span) for f in cfg.decay_points]
    factor = cfg.decay_factor ** sum(iteration >= b for b in boundaries)
    return cfg.lr_mu * factor, cfg.lr_chol * factor, cfg.lr_color * factor


def _adam_step(params, grads, m, v, lr, t, ids):
    """In-place Adam update restricted to the given rows."""
    g = grads[ids]
    m[ids] = ADAM_BETA1 * m[ids] + (1.0 - ADAM_BETA1) * g
    v[ids] = ADAM_BETA2 * v[ids] + (1.0 - ADAM_BETA2) * g * g
    m_hat = m[ids] / (1.0 - ADAM_BETA1 ** t)
    v_hat = v[ids] / (1.0 - ADAM_BETA2 ** t)
    params[ids] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _effective_chol(chol_raw):
    out = chol_raw.copy()
    out[:, 0] = softplus(chol_raw[:, 0])
    out[:, 2] = softplus(chol_raw[:, 2])
    return out


def _masked_mse_and_grad(composite, target, mask):
    """Masked MSE over channels plus d(loss)/d(composite image)."""
    diff = composite - target
    if mask is not None:
        diff = np.where(mask[:, :, None], diff, 0.0)
        count = int(mask.sum()) * 3
    else:
        count = diff.size
    loss = float(np.sum(diff * diff) / count)
    grad = (2.0 / count) * diff
    return loss, grad


def _evaluate(mu, chol_raw, color, target, mask, cfg, frame_dims, spec):
    """One forward/backward evaluation in raw parameter space."""
    chol_eff = _effective_chol(chol_raw)
    mu_e, chol_e, color_e = mu, chol_eff, color
    if spec is not None:
        mu_e, chol_e, color_e = qdq_attributes(mu, chol_eff, color, spec)
    raw, cache = _forward_arrays(
        mu_e, chol_e, color_e, frame_dims, cfg.cutoff, cfg.workers, True
    )
    w, h = frame_dims
    composite = raw.reshape(h, w, 3) + np.asarray(cfg.background).reshape(1, 1, 3)
    loss, grad_img = _masked_mse_and_grad(composite, target, mask)
    grads = _backward_arrays(cache, grad_img, cfg.workers)
    # Straight-through the quantizer; chain the softplus at the raw values.
    grads.chol[:, 0] *= softplus_grad(chol_raw[:, 0])
    grads.chol[:, 2] *= softplus_grad(chol_raw[:, 2])
    return loss, grads, composite


def loss_and_grad(gs: GaussianSet, target, mask=None, cfg: FitConfig | None = None):
    """Masked-MSE loss and raw-space parameter gradients for one set.

    Gradients for the Cholesky group are already chained through the
    softplus, i.e. they apply to ``GaussianSet.chol_raw``. With
    ``cfg.quant_in_loop`` set (and a spec available) the forward pass sees
    quantize-dequantized attributes while gradients pass straight through.

    Returns:
        ``(loss, Gradients)``.
    """
    cfg = cfg or FitConfig()
    target = validate_image(target, "target")
    w, h = gs.frame_dims
    if target.shape != (h, w, 3):
        raise ValueError(f"target shape {target.shape} does not match frame ({h}, {w}, 3)")
    if mask is not None:
        mask = validate_mask(mask, target.shape)
        if not mask.any():
            raise ValueError("mask selects no pixels")
    spec = None
    if cfg.quant_in_loop:
        spec = cfg.quant_spec
        if spec is None:
            raise ValueError("quant_in_loop requires a quant_spec")
        if not spec.calibrated:
            spec = calibrate_from_attributes(_effective_chol(gs.chol_raw), gs.color, spec)
    loss, grads, _ = _evaluate(
        gs.mu.copy(), gs.chol_raw.copy(), gs.color.copy(),
        target, mask, cfg, gs.frame_dims, spec,
    )
    if not np.isfinite(loss):
        raise FitDivergedError(0)
    return loss, grads


def fit(gs: GaussianSet, target, mask=None, cfg: FitConfig | None = None):
    """Optimize a set against a target frame.

    Args:
        gs: initial splats (unchanged; a new set is returned).
        target: ``(H, W, 3)`` frame in [0, 1].
        mask: optional ROI; loss, PSNR and early stop are mask-restricted.
        cfg: hyperparameters; see :class:`FitConfig`.

    Returns:
        ``(fitted_set, FitReport)``. The fitted set carries the Adam state
        in ``opt_state``. An empty ``active_ids`` returns the input
        parameters bit-identically with a zero-iteration report.
    """
    cfg = cfg or FitConfig()
    target = validate_image(target, "target")
    w, h = gs.frame_dims
    if target.shape != (h, w, 3):
        raise ValueError(f"target shape {target.shape} does not match frame ({h}, {w}, 3)")
    if mask is not None:
        mask = validate_mask(mask, target.shape)
        if not mask.any():
            raise ValueError("mask selects no pixels")

    if cfg.active_ids is None:
        ids = np.arange(gs.n, dtype=np.int64)
    else:
        ids = np.unique(np.asarray(cfg.active_ids, dtype=np.int64))
        if ids.size and (ids[0] < 0 or ids[-1] >= gs.n):
            raise IndexError("active_ids out of range")

    start = time.perf_counter()
    if ids.size == 0:
        composite = _render_composite(gs, cfg)
        quality = _masked_psnr(composite, target, mask)
        report = FitReport(
            iterations=0,
            psnr_trace=[(0, quality)],
            final_loss=_masked_mse_and_grad(composite, target, mask)[0],
            wall_time_s=time.perf_counter() - start,
        )
        return gs, report

    mu = gs.mu.copy()
    chol_raw = gs.chol_raw.copy()
    color = gs.color.copy()
    state = AdamState.zeros(gs.n)

    spec = cfg.quant_spec
    recalibrate = cfg.quant_in_loop and (spec is None or not spec.calibrated)
    if cfg.quant_in_loop and spec is None:
        raise ValueError("quant_in_loop requires a quant_spec (bit depths + position ranges)")
    qat_start = int(cfg.qat_warmup * cfg.max_iters) if cfg.quant_in_loop else cfg.max_iters

    losses = []
    trace = []  # (updates applied when measured, masked dB)
    early = False
    executed = 0
    for it in range(cfg.max_iters):
        spec_it = None
        in_qat = cfg.quant_in_loop and it >= qat_start
        if in_qat:
            if recalibrate:
                spec = calibrate_from_attributes(
                    _effective_chol(chol_raw), color, spec
                )
                recalibrate = False
            if it == qat_start and qat_start > 0:
                # The objective changes shape here; stale float-phase
                # momentum would kick the fresh quantized fit.
                state = AdamState.zeros(gs.n)
            spec_it = spec
        loss, grads, composite = _evaluate(
            mu, chol_raw, color, target, mask, cfg, gs.frame_dims, spec_it
        )
        if not np.isfinite(loss):
            raise FitDivergedError(it)
        losses.append(loss)

        # The composite reflects the parameters entering this iteration,
        # i.e. `it` updates applied so far.
        if it % cfg.psnr_check_every == 0:
            quality = _masked_psnr(composite, target, mask)
            trace.append((it, quality))
            if cfg.target_psnr is not None and quality >= cfg.target_psnr:
                early = True
                break

        if not cfg.quant_in_loop:
            phase = None
        elif in_qat:
            phase = (qat_start, cfg.max_iters)
        else:
            phase = (0, qat_start)
        lr_mu, lr_chol, lr_color = lr_schedule(it, cfg, phase)
        state.t += 1
        _adam_step(mu, grads.mu, state.m_mu, state.v_mu,
                   lr_mu * max(w, h), state.t, ids)
        _adam_step(chol_raw, grads.chol, state.m_chol, state.v_chol,
                   lr_chol * max(w, h), state.t, ids)
        _adam_step(color, grads.color, state.m_color, state.v_color,
                   lr_color, state.t, ids)
        executed = it + 1

    if not trace or trace[-1][0] != executed:
        composite = _render_composite_arrays(mu, chol_raw, color, gs.frame_dims, cfg)
        trace.append((executed, _masked_psnr(composite, target, mask, pre_clipped=True)))

    fitted = GaussianSet(mu, chol_raw, color, gs.frame_dims, opt_state=state)
    report = FitReport(
        iterations=executed,
        psnr_trace=trace,
        loss_trace=losses,
        final_loss=losses[-1],
        wall_time_s=time.perf_counter() - start,
        early_stopped=early,
        quant_spec=spec if cfg.quant_in_loop else None,
    )
    return fitted, report


def _render_composite(gs: GaussianSet, cfg: FitConfig):
    return _render_composite_arrays(gs.mu, gs.chol_raw, gs.color, gs.frame_dims, cfg)


def _render_composite_arrays(mu, chol_raw, color, frame_dims, cfg: FitConfig):
    raw, _ = _forward_arrays(
        mu, _effective_chol(chol_raw), color, frame_dims, cfg.cutoff,
        cfg.workers, False,
    )
    w, h = frame_dims
    img = raw.reshape(h, w, 3) + np.asarray(cfg.background).reshape(1, 1, 3)
    return np.clip(img, 0.0, 1.0)


def _masked_psnr(composite, target, mask, pre_clipped=False):
    img = composite if pre_clipped else np.clip(composite, 0.0, 1.0)
    if mask is None:
        diff = img - target
    else:
        diff = img[mask] - target[mask]
    return psnr_from_mse(float(np.mean(diff * diff)))
