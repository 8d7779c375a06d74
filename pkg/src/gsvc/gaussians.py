"""2D Gaussian splat primitives and the Cholesky covariance parametrization.

A splat carries exactly eight learnable scalars: a 2D position ``mu``, the
three lower-triangular entries ``(l1, l2, l3)`` of the covariance Cholesky
factor ``L = [[l1, 0], [l2, l3]]`` (so ``Sigma = L @ L.T`` is positive
semi-definite by construction), and a weighted RGB color that already
includes any opacity factor.

Positions live in pixel units with the origin at the top-left frame corner;
pixel ``(x, y)`` covers ``[x, x+1) x [y, y+1)`` and is sampled at its center
``(x + 0.5, y + 0.5)``.

The diagonal entries ``l1`` and ``l3`` must stay strictly positive, so a
:class:`GaussianSet` stores an unconstrained raw vector that is mapped
through a softplus at evaluation time. ``GaussianSet.chol`` exposes the
effective (positive-diagonal) values; the raw storage is what optimizers
update.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

PARAMS_PER_GAUSSIAN = 8  # 2 position + 3 Cholesky + 3 color

# Diagonal entries produced by softplus never reach zero, but quantized
# round trips need a hard floor to invert through.
MIN_POSITIVE_DIAG = 1e-8


def softplus(x):
    """Numerically stable ``log(1 + exp(x))``."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_grad(x):
    """Derivative of :func:`softplus`, i.e. the logistic sigmoid."""
    return expit(np.asarray(x, dtype=np.float64))


def inv_softplus(y):
    """Inverse of :func:`softplus` for strictly positive inputs."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("inv_softplus requires strictly positive inputs")
    # log(expm1(y)) rewritten to survive large y.
    return y + np.log(-np.expm1(-y))


def cov_from_chol(chol):
    """Covariance matrices from Cholesky vectors.

    Args:
        chol: array of shape ``(..., 3)`` holding ``(l1, l2, l3)`` with
            ``l1 > 0`` and ``l3 > 0``.

    Returns:
        Array of shape ``(..., 2, 2)``:
        ``[[l1^2, l1*l2], [l1*l2, l2^2 + l3^2]]``.
    """
    chol = np.asarray(chol, dtype=np.float64)
    if chol.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got {chol.shape}")
    l1, l2, l3 = chol[..., 0], chol[..., 1], chol[..., 2]
    if np.any(l1 <= 0.0) or np.any(l3 <= 0.0):
        raise ValueError("Cholesky diagonal entries l1 and l3 must be positive")
    cov = np.empty(chol.shape[:-1] + (2, 2), dtype=np.float64)
    cov[..., 0, 0] = l1 * l1
    cov[..., 0, 1] = l1 * l2
    cov[..., 1, 0] = l1 * l2
    cov[..., 1, 1] = l2 * l2 + l3 * l3
    return cov


def inverse_cov(chol):
    """Closed-form inverse covariance from a Cholesky vector.

    ``det(Sigma) = (l1*l3)^2``, so the inverse is

    ``[[(l2^2 + l3^2) / (l1^2 l3^2), -l2 / (l1 l3^2)],
       [-l2 / (l1 l3^2),             1 / l3^2]]``.
    """
    chol = np.asarray(chol, dtype=np.float64)
    l1, l2, l3 = chol[..., 0], chol[..., 1], chol[..., 2]
    if np.any(l1 <= 0.0) or np.any(l3 <= 0.0):
        raise ValueError("Cholesky diagonal entries l1 and l3 must be positive")
    inv_l3sq = 1.0 / (l3 * l3)
    out = np.empty(chol.shape[:-1] + (2, 2), dtype=np.float64)
    out[..., 0, 0] = (l2 * l2 + l3 * l3) / (l1 * l1 * l3 * l3)
    out[..., 0, 1] = -l2 / (l1 * l3 * l3)
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = inv_l3sq
    return out


def regularize_covariances(cov, eps, min_eigenvalue=0.0):
    """Shift near-degenerate 2x2 covariances onto the SPD cone.

    Any matrix whose smallest eigenvalue is at or below ``min_eigenvalue``
    gets ``(eps + max(0, -lambda_min)) * I`` added, which leaves it with
    ``lambda_min >= eps``.

    Returns:
        ``(cov_out, flags)`` where ``flags`` marks the shifted matrices.
    """
    cov = np.asarray(cov, dtype=np.float64)
    scalar_input = cov.ndim == 2
    cov = np.atleast_3d(cov).reshape(-1, 2, 2) if scalar_input else cov
    tr = cov[..., 0, 0] + cov[..., 1, 1]
    det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    lam_min = 0.5 * (tr - disc)
    flags = lam_min <= min_eigenvalue
    shift = np.where(flags, eps + np.maximum(0.0, -lam_min), 0.0)
    out = cov.copy()
    out[..., 0, 0] += shift
    out[..., 1, 1] += shift
    if scalar_input:
        return out[0], bool(flags[0])
    return out, flags


def chol_from_cov(cov, eps=1e-6):
    """Cholesky vectors from 2x2 covariance matrices.

    Non-SPD inputs (det <= 0 or trace <= 0) are regularized by adding a
    multiple of the identity instead of failing; the second return value
    flags which inputs needed it.

    Args:
        cov: array of shape ``(..., 2, 2)``, symmetric.
        eps: diagonal shift applied to degenerate inputs.

    Returns:
        ``(chol, regularized)`` with ``chol`` of shape ``(..., 3)``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape[-2:] != (2, 2):
        raise ValueError(f"expected trailing shape (2, 2), got {cov.shape}")
    asym = np.abs(cov[..., 0, 1] - cov[..., 1, 0])
    scale = np.maximum(np.abs(cov).max(axis=(-2, -1)), 1.0)
    if np.any(asym > 1e-6 * scale):
        raise ValueError("covariance input is not symmetric")
    sym = cov.copy()
    off = 0.5 * (cov[..., 0, 1] + cov[..., 1, 0])
    sym[..., 0, 1] = off
    sym[..., 1, 0] = off
    sym, flags = regularize_covariances(sym, eps, min_eigenvalue=0.0)
    l1 = np.sqrt(sym[..., 0, 0])
    l2 = sym[..., 0, 1] / l1
    det = sym[..., 0, 0] * sym[..., 1, 1] - sym[..., 0, 1] * sym[..., 1, 0]
    l3 = np.sqrt(np.maximum(det, 0.0) / sym[..., 0, 0])
    chol = np.stack([l1, l2, l3], axis=-1)
    return chol, flags


@dataclass(frozen=True, eq=False)
class Gaussian2D:
    """A single splat with effective (positive-diagonal) parameters."""

    mu: np.ndarray
    chol: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen_array(self.mu, (2,)))
        object.__setattr__(self, "chol", _frozen_array(self.chol, (3,)))
        object.__setattr__(self, "color", _frozen_array(self.color, (3,)))
        if self.chol[0] <= 0.0 or self.chol[2] <= 0.0:
            raise ValueError("Cholesky diagonal entries must be positive")

    @property
    def covariance(self):
        return cov_from_chol(self.chol)


def _frozen_array(values, shape, dtype=np.float64):
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Ordered collection of splats tied to a frame size.

    Attributes:
        mu: ``(N, 2)`` positions in pixel units.
        chol_raw: ``(N, 3)`` unconstrained Cholesky storage. The effective
            vector is ``(softplus(raw[0]), raw[1], softplus(raw[2]))``.
        color: ``(N, 3)`` weighted RGB.
        frame_dims: ``(width, height)`` of the target frame.
        opt_state: opaque per-parameter moment accumulators attached by the
            fitter; ignored by equality, hashing and serialization.
    """

    mu: np.ndarray
    chol_raw: np.ndarray
    color: np.ndarray
    frame_dims: tuple[int, int]
    opt_state: Any = field(default=None, repr=False)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64, copy=True)
        chol_raw = np.array(self.chol_raw, dtype=np.float64, copy=True)
        color = np.array(self.color, dtype=np.float64, copy=True)
        if mu.ndim != 2 or mu.shape[1] != 2:
            raise ValueError(f"mu must have shape (N, 2), got {mu.shape}")
        n = mu.shape[0]
        if n < 1:
            raise ValueError("a GaussianSet needs at least one splat")
        if chol_raw.shape != (n, 3):
            raise ValueError(f"chol_raw must have shape ({n}, 3), got {chol_raw.shape}")
        if color.shape != (n, 3):
            raise ValueError(f"color must have shape ({n}, 3), got {color.shape}")
        for arr in (mu, chol_raw, color):
            if not np.all(np.isfinite(arr)):
                raise ValueError("GaussianSet parameters must be finite")
            arr.flags.writeable = False
        w, h = self.frame_dims
        if int(w) < 1 or int(h) < 1:
            raise ValueError(f"frame_dims must be positive, got {self.frame_dims}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "chol_raw", chol_raw)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "frame_dims", (int(w), int(h)))

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def chol(self) -> np.ndarray:
        """Effective Cholesky vectors ``(N, 3)`` with positive diagonals."""
        out = self.chol_raw.copy()
        out[:, 0] = softplus(self.chol_raw[:, 0])
        out[:, 2] = softplus(self.chol_raw[:, 2])
        return out

    def attributes(self):
        """``(mu, chol, color)`` effective attribute arrays (copies)."""
        return self.mu.copy(), self.chol, self.color.copy()

    @classmethod
    def from_attributes(cls, mu, chol, color, frame_dims):
        """Build a set from effective attributes, inverting the softplus."""
        chol = np.array(chol, dtype=np.float64, copy=True)
        if chol.ndim != 2 or chol.shape[1] != 3:
            raise ValueError(f"chol must have shape (N, 3), got {chol.shape}")
        diag = chol[:, (0, 2)]
        if np.any(diag <= 0.0):
            raise ValueError("effective Cholesky diagonals must be positive")
        raw = chol.copy()
        raw[:, 0] = inv_softplus(np.maximum(chol[:, 0], MIN_POSITIVE_DIAG))
        raw[:, 2] = inv_softplus(np.maximum(chol[:, 2], MIN_POSITIVE_DIAG))
        return cls(mu=mu, chol_raw=raw, color=color, frame_dims=frame_dims)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian2D], frame_dims):
        if not gaussians:
            raise ValueError("a GaussianSet needs at least one splat")
        mu = np.stack([g.mu for g in gaussians])
        chol = np.stack([g.chol for g in gaussians])
        color = np.stack([g.color for g in gaussians])
        return cls.from_attributes(mu, chol, color, frame_dims)

    def gaussian(self, i: int) -> Gaussian2D:
        chol = self.chol
        return Gaussian2D(mu=self.mu[i], chol=chol[i], color=self.color[i])

    @property
    def gaussians(self) -> list[Gaussian2D]:
        chol = self.chol
        return [
            Gaussian2D(mu=self.mu[i], chol=chol[i], color=self.color[i])
            for i in range(self.n)
        ]

    def fingerprint(self) -> bytes:
        """Content hash over parameters and frame size (opt_state excluded)."""
        digest = hashlib.sha1()
        digest.update(np.int64(self.frame_dims).tobytes())
        digest.update(self.mu.tobytes())
        digest.update(self.chol_raw.tobytes())
        digest.update(self.color.tobytes())
        return digest.digest()

    def replace_rows(self, ids, mu, chol_raw, color) -> "GaussianSet":
        """New set with the given rows overwritten (raw-space values)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return replace(self, opt_state=None)
        if np.any(ids < 0) or np.any(ids >= self.n):
            raise IndexError("row ids out of range")
        new_mu = self.mu.copy()
        new_chol = self.chol_raw.copy()
        new_color = self.color.copy()
        new_mu[ids] = mu
        new_chol[ids] = chol_raw
        new_color[ids] = color
        return GaussianSet(new_mu, new_chol, new_color, self.frame_dims)
