"""Per-attribute uniform quantizers for splat parameters.

Three independent quantizers cover the eight scalars of a splat:

* positions: fixed-point over a frame-proportional range (default 16 bits),
  so the step size scales with the frame and needs no calibration data;
* Cholesky vectors: asymmetric uniform quantizer with per-channel scale and
  offset over a calibrated range (default 6 bits);
* colors: uniform quantizer over a calibrated range (default 8 bits).

Calibration takes the 0.1% / 99.9% percentiles of the observed values per
channel, which clips stray outliers instead of stretching the range around
them. Quantization uses round-to-nearest-even and clamps to the
representable range; ``dequantize(quantize(x))`` lands within half a step
of the clamped input. Mode ``"none"`` bypasses quantization and transports
attributes as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .gaussians import GaussianSet, MIN_POSITIVE_DIAG

MIN_BITS = 2
MAX_BITS = 16

# Positions are representable over [-margin*dim, (1+margin)*dim] so splats
# that drift slightly off-frame survive the round trip.
POSITION_MARGIN = 0.25

MODES = ("ptq", "qat", "none")


def _check_bits(bits, name):
    if not MIN_BITS <= int(bits) <= MAX_BITS:
        raise ValueError(f"{name} must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


@dataclass(frozen=True)
class QuantSpec:
    """Bit depths plus per-channel (offset, scale) for each attribute.

    ``offset``/``scale`` arrays are ``None`` until calibrated (positions are
    always calibrated, their range comes from the frame dimensions). Mode
    ``"none"`` carries no quantizer state at all.
    """

    mode: str = "ptq"
    mu_bits: int = 16
    chol_bits: int = 6
    color_bits: int = 8
    mu_offset: np.ndarray | None = None
    mu_scale: np.ndarray | None = None
    chol_offset: np.ndarray | None = None
    chol_scale: np.ndarray | None = None
    color_offset: np.ndarray | None = None
    color_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        _check_bits(self.mu_bits, "mu_bits")
        _check_bits(self.chol_bits, "chol_bits")
        _check_bits(self.color_bits, "color_bits")
        for name, arr, n in (
            ("mu_offset", self.mu_offset, 2),
            ("mu_scale", self.mu_scale, 2),
            ("chol_offset", self.chol_offset, 3),
            ("chol_scale", self.chol_scale, 3),
            ("color_offset", self.color_offset, 3),
            ("color_scale", self.color_scale, 3),
        ):
            if arr is None:
                continue
            frozen = np.array(arr, dtype=np.float64, copy=True)
            if frozen.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {frozen.shape}")
            frozen.flags.writeable = False
            object.__setattr__(self, name, frozen)

    @property
    def calibrated(self) -> bool:
        if self.mode == "none":
            return True
        return all(
            arr is not None
            for arr in (
                self.mu_offset,
                self.mu_scale,
                self.chol_offset,
                self.chol_scale,
                self.color_offset,
                self.color_scale,
            )
        )


@dataclass
class QuantizedGaussians:
    """Transport-domain attribute arrays.

    Integer arrays for quantized modes; float32 pass-through for
    mode ``"none"``.
    """

    mu: np.ndarray
    chol: np.ndarray
    color: np.ndarray

    @property
    def n(self) -> int:
        return self.mu.shape[0]


def _int_dtype(bits):
    return np.uint8 if bits <= 8 else np.uint16


def position_ranges(frame_dims, margin=POSITION_MARGIN):
    """Frame-derived (offset, scale-range) per position axis."""
    w, h = frame_dims
    offset = np.array([-margin * w, -margin * h], dtype=np.float64)
    span = np.array([(1.0 + 2.0 * margin) * w, (1.0 + 2.0 * margin) * h])
    return offset, span


def default_quant_spec(frame_dims, mode="ptq", mu_bits=16, chol_bits=6,
                       color_bits=8) -> QuantSpec:
    """Spec with position ranges set; chol/color await calibration."""
    if mode == "none":
        return QuantSpec(mode="none", mu_bits=mu_bits, chol_bits=chol_bits,
                         color_bits=color_bits)
    offset, span = position_ranges(frame_dims)
    scale = span / (2 ** _check_bits(mu_bits, "mu_bits") - 1)
    return QuantSpec(
        mode=mode,
        mu_bits=mu_bits,
        chol_bits=chol_bits,
        color_bits=color_bits,
        mu_offset=offset,
        mu_scale=scale,
    )


def _calibrate_channels(values, bits, lo_pct, hi_pct):
    """Per-channel (offset, scale) from percentile-clipped ranges."""
    lo = np.percentile(values, lo_pct, axis=0)
    hi = np.percentile(values, hi_pct, axis=0)
    span = hi - lo
    # Constant channels quantize exactly to the offset; any positive scale works.
    scale = np.where(span > 0.0, span / (2 ** bits - 1), 1.0)
    return lo, scale


def calibrate_ptq(sets: Sequence[GaussianSet], spec: QuantSpec,
                  lo_pct=0.1, hi_pct=99.9) -> QuantSpec:
    """Calibrate chol/color ranges from fitted sets.

    Args:
        sets: representative fitted sets (effective attributes are pooled).
        spec: base spec carrying bit depths and position ranges.
        lo_pct, hi_pct: percentile clips for the calibrated range.
    """
    if not sets:
        raise ValueError("calibration needs at least one GaussianSet")
    if spec.mode == "none":
        return spec
    chol = np.concatenate([s.chol for s in sets], axis=0)
    color = np.concatenate([s.color for s in sets], axis=0)
    return calibrate_from_attributes(chol, color, spec, lo_pct, hi_pct)


def calibrate_from_attributes(chol, color, spec: QuantSpec,
                              lo_pct=0.1, hi_pct=99.9) -> QuantSpec:
    """Calibration from attribute arrays (how QAT freezes its lattice)."""
    if spec.mu_offset is None or spec.mu_scale is None:
        raise ValueError("spec is missing position ranges; use default_quant_spec")
    chol_off, chol_scale = _calibrate_channels(chol, spec.chol_bits, lo_pct, hi_pct)
    color_off, color_scale = _calibrate_channels(color, spec.color_bits, lo_pct, hi_pct)
    # Keep dequantized diagonals strictly positive.
    chol_off[0] = max(chol_off[0], MIN_POSITIVE_DIAG)
    chol_off[2] = max(chol_off[2], MIN_POSITIVE_DIAG)
    return replace(
        spec,
        chol_offset=chol_off,
        chol_scale=chol_scale,
        color_offset=color_off,
        color_scale=color_scale,
    )


def _quantize_channels(values, offset, scale, bits):
    q = np.round((values - offset[None, :]) / scale[None, :])
    return np.clip(q, 0, 2 ** bits - 1).astype(_int_dtype(bits))


def _dequantize_channels(q, offset, scale):
    return offset[None, :] + q.astype(np.float64) * scale[None, :]


def quantize(gs: GaussianSet, spec: QuantSpec) -> QuantizedGaussians:
    """Quantize a set's effective attributes (or cast to f32 for mode none)."""
    mu, chol, color = gs.attributes()
    return quantize_attributes(mu, chol, color, spec)


def quantize_attributes(mu, chol, color, spec: QuantSpec) -> QuantizedGaussians:
    if not spec.calibrated:
        raise ValueError("quantization spec is not calibrated")
    if spec.mode == "none":
        return QuantizedGaussians(
            mu=np.asarray(mu, dtype=np.float32),
            chol=np.asarray(chol, dtype=np.float32),
            color=np.asarray(color, dtype=np.float32),
        )
    return QuantizedGaussians(
        mu=_quantize_channels(np.asarray(mu), spec.mu_offset, spec.mu_scale,
                              spec.mu_bits),
        chol=_quantize_channels(np.asarray(chol), spec.chol_offset,
                                spec.chol_scale, spec.chol_bits),
        color=_quantize_channels(np.asarray(color), spec.color_offset,
                                 spec.color_scale, spec.color_bits),
    )


def dequantize(q: QuantizedGaussians, spec: QuantSpec):
    """Effective float attributes ``(mu, chol, color)`` from transport ints."""
    if not spec.calibrated:
        raise ValueError("quantization spec is not calibrated")
    if spec.mode == "none":
        return (
            q.mu.astype(np.float64),
            q.chol.astype(np.float64),
            q.color.astype(np.float64),
        )
    mu = _dequantize_channels(q.mu, spec.mu_offset, spec.mu_scale)
    chol = _dequantize_channels(q.chol, spec.chol_offset, spec.chol_scale)
    color = _dequantize_channels(q.color, spec.color_offset, spec.color_scale)
    return mu, chol, color


def set_from_quantized(q: QuantizedGaussians, spec: QuantSpec,
                       frame_dims) -> GaussianSet:
    mu, chol, color = dequantize(q, spec)
    return GaussianSet.from_attributes(mu, chol, color, frame_dims)


def qdq_attributes(mu, chol, color, spec: QuantSpec):
    """Quantize-dequantize round trip, the simulated-quantization forward.

    Used inside the fitting loop for quantization-aware training; gradients
    pass straight through (the round trip is treated as identity in the
    backward pass).
    """
    return dequantize(quantize_attributes(mu, chol, color, spec), spec)
