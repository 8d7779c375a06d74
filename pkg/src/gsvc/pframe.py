"""Selective re-optimization of inter frames.

A fitted reference set renders the previous frame; only pixels whose value
moved by more than a threshold need new parameters. The pixel-to-splat
index records, for every pixel, which splats contribute at least
``influence_eps`` of their full weight there, so the changed pixels resolve
to the exact subset of splats worth re-fitting. Everything outside that
subset is carried over bit-for-bit, which is what keeps inter-frame
payloads small.

Residuals are taken against the reference's *decoded* render rather than
the raw previous frame, so encoder and decoder agree exactly and error
cannot accumulate over a group of pictures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .gaussians import GaussianSet
from .metrics import validate_image, validate_mask
from .optimizer import FitConfig, FitReport, fit
from .rasterizer import (
    RenderConfig,
    TileGrid,
    _block_ranges,
    _conic_terms,
    _footprint_bounds,
    _pair_table,
    build_tile_grid,
    render,
)

# Contribution floor for the pixel-to-splat index: a splat is listed at a
# pixel when exp(-sigma) there is at least this fraction of its peak.
DEFAULT_INFLUENCE_EPS = 0.01


class StaleIndexError(RuntimeError):
    """An index was used with a set other than the one it was built from."""


def _index_radius(influence_eps):
    # exp(-sigma) >= eps inside the Mahalanobis ball sigma <= -ln(eps),
    # whose marginal extent is sqrt(2 * -ln(eps)) standard deviations.
    return float(np.sqrt(-2.0 * np.log(influence_eps)))


@dataclass(frozen=True, eq=False)
class PixelGaussianIndex:
    """Per-pixel splat ID lists in CSR layout, plus a tile-level view.

    ``ids[offsets[p] : offsets[p + 1]]`` holds the ascending IDs of every
    splat whose contribution at pixel ``p`` (row-major) is at least
    ``influence_eps`` of its peak weight. ``tiles`` bins the same splats
    by footprint rectangle for coarse queries.
    """

    offsets: np.ndarray      # (W*H + 1,) int64 row pointers
    ids: np.ndarray          # (total,) int32
    tiles: TileGrid
    frame_dims: tuple
    influence_eps: float
    n_gaussians: int
    source_print: bytes      # fingerprint of the originating set

    @property
    def n_entries(self) -> int:
        return int(self.ids.size)

    def ids_for_pixel(self, x: int, y: int) -> np.ndarray:
        w, h = self.frame_dims
        if not (0 <= x < w and 0 <= y < h):
            raise IndexError("pixel outside the frame")
        p = y * w + x
        return self.ids[self.offsets[p]:self.offsets[p + 1]]

    def verify_matches(self, gs: GaussianSet) -> None:
        """Raise :class:`StaleIndexError` unless ``gs`` is the source set."""
        if (
            gs.n != self.n_gaussians
            or tuple(gs.frame_dims) != tuple(self.frame_dims)
            or gs.fingerprint() != self.source_print
        ):
            raise StaleIndexError(
                "index was built from a different GaussianSet; rebuild it"
            )


@dataclass(frozen=True)
class ChangeMap:
    """Boolean per-pixel change mask and its population count."""

    changed: np.ndarray  # (H, W) bool
    count: int

    @property
    def frame_dims(self) -> tuple:
        h, w = self.changed.shape
        return (w, h)


def build_index(gs: GaussianSet,
                influence_eps: float = DEFAULT_INFLUENCE_EPS,
                tile_size: int = 16) -> PixelGaussianIndex:
    """Map every pixel to the splats contributing >= ``influence_eps`` there.

    Candidate pixels come from the same footprint machinery the renderer
    uses (at the radius implied by ``influence_eps``); each candidate is
    kept only if the literal weight test passes. The result is therefore
    exact for the eps rule, not an over-approximation.
    """
    if not 0.0 < influence_eps < 1.0:
        raise ValueError("influence_eps must lie in (0, 1)")
    w, h = gs.frame_dims
    radius = _index_radius(influence_eps)
    mu = gs.mu
    chol = gs.chol
    conic_a, conic_b, conic_c = _conic_terms(chol)
    x0, y0, x1, y1 = _footprint_bounds(mu, chol, radius, gs.frame_dims)

    pix_parts = []
    gid_parts = []
    for lo, hi in _block_ranges(gs.n):
        g_local, px, py = _pair_table(x0[lo:hi], y0[lo:hi], x1[lo:hi], y1[lo:hi])
        if g_local.size == 0:
            continue
        g = g_local + lo
        dx = (px + 0.5) - mu[g, 0]
        dy = (py + 0.5) - mu[g, 1]
        sigma = (
            0.5 * conic_a[g] * dx * dx
            + conic_b[g] * dx * dy
            + 0.5 * conic_c[g] * dy * dy
        )
        keep = np.exp(-sigma) >= influence_eps
        pix_parts.append((py[keep] * w + px[keep]))
        gid_parts.append(g[keep])

    if pix_parts:
        pix = np.concatenate(pix_parts)
        gid = np.concatenate(gid_parts)
    else:
        pix = np.empty(0, dtype=np.int64)
        gid = np.empty(0, dtype=np.int64)

    # Pairs were generated in ascending splat order, so a stable sort by
    # pixel leaves each pixel's ID list ascending.
    order = np.argsort(pix, kind="stable")
    ids = gid[order].astype(np.int32)
    counts = np.bincount(pix, minlength=w * h)
    offsets = np.zeros(w * h + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    tiles = build_tile_grid(gs, RenderConfig(tile_size=tile_size), radius=radius)
    ids.setflags(write=False)
    offsets.setflags(write=False)
    return PixelGaussianIndex(
        offsets=offsets,
        ids=ids,
        tiles=tiles,
        frame_dims=(w, h),
        influence_eps=float(influence_eps),
        n_gaussians=gs.n,
        source_print=gs.fingerprint(),
    )


def change_map(current, reference_render, mask=None, tau: float = 10.0 / 255.0
               ) -> ChangeMap:
    """Pixels where the max-channel residual exceeds ``tau`` inside the ROI."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    current = validate_image(current)
    reference_render = validate_image(reference_render)
    if current.shape != reference_render.shape:
        raise ValueError("current and reference dimensions disagree")
    resid = np.max(np.abs(current - reference_render), axis=2)
    changed = resid > tau
    if mask is not None:
        mask = validate_mask(mask, current.shape[:2])
        changed &= mask
    changed.setflags(write=False)
    return ChangeMap(changed=changed, count=int(np.count_nonzero(changed)))


def dilate_change_map(cm: ChangeMap, iterations: int = 1) -> ChangeMap:
    """Grow the changed region by ``iterations`` pixels (8-connected).

    Softens selection misses from aliasing right at motion boundaries.
    """
    if iterations < 1 or cm.count == 0:
        return cm
    footprint3x3 = ndimage.generate_binary_structure(2, 2)
    grown = ndimage.binary_dilation(
        cm.changed, structure=footprint3x3, iterations=iterations
    )
    grown.setflags(write=False)
    return ChangeMap(changed=grown, count=int(np.count_nonzero(grown)))


def select_gaussians(cm: ChangeMap, idx: PixelGaussianIndex) -> np.ndarray:
    """Ascending IDs of every splat influencing at least one changed pixel."""
    if cm.frame_dims != tuple(idx.frame_dims):
        raise ValueError("change map and index dimensions disagree")
    flat = np.flatnonzero(cm.changed.ravel())
    hit = np.zeros(idx.n_gaussians, dtype=bool)
    if flat.size:
        starts = idx.offsets[flat]
        lengths = idx.offsets[flat + 1] - starts
        total = int(lengths.sum())
        if total:
            base = np.concatenate(([0], np.cumsum(lengths)[:-1]))
            pos = (
                np.arange(total, dtype=np.int64)
                - np.repeat(base, lengths)
                + np.repeat(starts, lengths)
            )
            hit[idx.ids[pos]] = True
    return np.flatnonzero(hit).astype(np.int32)


def encode_pframe(reference: GaussianSet,
                  idx: PixelGaussianIndex,
                  current,
                  mask=None,
                  tau: float = 10.0 / 255.0,
                  cfg: FitConfig | None = None,
                  dilate: bool = True):
    """Re-fit only the splats influenced by pixels that changed.

    Args:
        reference: fitted set for the previous (decoded) frame.
        idx: index built from ``reference`` (stale use raises).
        current: target frame, float RGB in [0, 1].
        mask: optional ROI; residuals outside it never trigger selection.
        tau: change threshold in pixel-value units.
        cfg: fit configuration; its ``active_ids`` field is overridden.
        dilate: grow the changed region by one pixel before selection.

    Returns:
        ``(updated set, selected ID array, fit report)``. With an empty
        selection the reference set is returned untouched and the report
        shows zero iterations.
    """
    cfg = cfg if cfg is not None else FitConfig()
    idx.verify_matches(reference)
    current = validate_image(current)
    w, h = reference.frame_dims
    if current.shape[:2] != (h, w):
        raise ValueError("frame dimensions disagree with the reference set")

    render_cfg = RenderConfig(cutoff=cfg.cutoff, workers=cfg.workers)
    reference_render = render(
        reference, render_cfg, background=cfg.background, clamp=True
    )
    cm = change_map(current, reference_render, mask, tau)
    if dilate:
        cm = dilate_change_map(cm)
    ids = select_gaussians(cm, idx)

    fit_cfg = replace(cfg, active_ids=ids)
    updated, report = fit(reference, current, mask, fit_cfg)
    return updated, ids, report
