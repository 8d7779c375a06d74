"""Differentiable splat renderer: accumulated-sum forward and analytic backward.

A pixel's value is the plain sum of every covering splat's contribution,

    C(p) = sum_n color_n * exp(-sigma_n(p)),
    sigma_n(p) = 0.5 * (p - mu_n)^T Sigma_n^{-1} (p - mu_n),

with no depth ordering and no alpha normalization. Summation commutes, so
rendering is order-independent up to floating-point association. Each splat
only touches the pixels inside its footprint: the axis-aligned rectangle of
pixel centers within ``cutoff`` marginal standard deviations of ``mu``
(the tight bounding box of the cutoff Mahalanobis ellipse). Clamping to
[0, 1] is an output-stage concern; the raw sum is what losses consume.

Work is partitioned into fixed-size blocks of splats regardless of the
worker count; per-pixel accumulation runs in ascending splat ID order inside
a block and block partials are reduced in block order. Worker threads only
execute blocks concurrently, which keeps renders bit-reproducible for any
``workers`` setting. The backward pass returns loss gradients with respect
to the effective attributes (mu, Cholesky vector, color) of every splat.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gaussians import Gaussian2D, GaussianSet

# Splats per accumulation block. Fixed (never derived from the worker
# count) so that results are identical no matter how blocks are scheduled.
_BLOCK = 256

# Forward/backward pass counters for encode/decode asymmetry checks.
_pass_counts = {"forward": 0, "backward": 0}


def pass_counts() -> dict:
    """Snapshot of how many forward/backward passes have run."""
    return dict(_pass_counts)


def reset_pass_counts() -> None:
    _pass_counts["forward"] = 0
    _pass_counts["backward"] = 0


@dataclass(frozen=True)
class RenderConfig:
    """Rasterization knobs.

    Attributes:
        cutoff: footprint radius in marginal standard deviations.
        tile_size: tile edge for spatial binning (:func:`build_tile_grid`).
        workers: worker threads for block execution; any value produces
            bit-identical output.
    """

    cutoff: float = 3.0
    tile_size: int = 16
    workers: int = 1

    def __post_init__(self):
        if self.cutoff <= 0.0:
            raise ValueError("cutoff must be positive")
        if self.tile_size < 1:
            raise ValueError("tile_size must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


DEFAULT_CONFIG = RenderConfig()


@dataclass
class Gradients:
    """Loss gradients w.r.t. effective splat attributes."""

    mu: np.ndarray     # (N, 2)
    chol: np.ndarray   # (N, 3)
    color: np.ndarray  # (N, 3)


def _conic_terms(chol):
    """Inverse-covariance entries (A, B, C) per splat from Cholesky vectors."""
    l1, l2, l3 = chol[:, 0], chol[:, 1], chol[:, 2]
    l3sq = l3 * l3
    a = (l2 * l2 + l3sq) / (l1 * l1 * l3sq)
    b = -l2 / (l1 * l3sq)
    c = 1.0 / l3sq
    return a, b, c


def _footprint_bounds(mu, chol, radius, frame_dims):
    """Half-open pixel index rectangles per splat, clipped to the frame.

    The marginal standard deviations are sqrt(Sigma_00) = l1 and
    sqrt(Sigma_11) = hypot(l2, l3); pixel (x, y) lies inside when its
    center (x+0.5, y+0.5) is within ``radius`` marginal sigmas of mu.
    """
    w, h = frame_dims
    sx = chol[:, 0]
    sy = np.hypot(chol[:, 1], chol[:, 2])
    x0 = np.ceil(mu[:, 0] - radius * sx - 0.5).astype(np.int64)
    x1 = np.floor(mu[:, 0] + radius * sx - 0.5).astype(np.int64) + 1
    y0 = np.ceil(mu[:, 1] - radius * sy - 0.5).astype(np.int64)
    y1 = np.floor(mu[:, 1] + radius * sy - 0.5).astype(np.int64) + 1
    x0 = np.clip(x0, 0, w)
    x1 = np.clip(x1, 0, w)
    y0 = np.clip(y0, 0, h)
    y1 = np.clip(y1, 0, h)
    x1 = np.maximum(x1, x0)
    y1 = np.maximum(y1, y0)
    return x0, y0, x1, y1


def footprint(g: Gaussian2D, frame_dims, cutoff=3.0):
    """Pixel rectangle ``(x0, y0, x1, y1)`` (half-open) covered by a splat.

    Empty footprints (fully off-frame or clipped away) come back with
    ``x0 == x1`` or ``y0 == y1``.
    """
    x0, y0, x1, y1 = _footprint_bounds(
        g.mu[None, :], g.chol[None, :], cutoff, frame_dims
    )
    return int(x0[0]), int(y0[0]), int(x1[0]), int(y1[0])


def _pair_table(x0, y0, x1, y1):
    """Flatten per-splat rectangles into (local splat idx, px, py) arrays."""
    wbox = x1 - x0
    area = wbox * (y1 - y0)
    total = int(area.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    g_local = np.repeat(np.arange(area.size, dtype=np.int64), area)
    start = np.concatenate(([0], np.cumsum(area)[:-1]))
    k = np.arange(total, dtype=np.int64) - np.repeat(start, area)
    wg = wbox[g_local]
    px = x0[g_local] + k % wg
    py = y0[g_local] + k // wg
    return g_local, px, py


class _BlockCache:
    """Per-block pair data reused by the backward pass."""

    __slots__ = ("lo", "g_local", "pix", "dx", "dy", "weight")

    def __init__(self, lo, g_local, pix, dx, dy, weight):
        self.lo = lo
        self.g_local = g_local
        self.pix = pix
        self.dx = dx
        self.dy = dy
        self.weight = weight


class RenderCache:
    """Forward-pass byproducts keyed to one (set, config) evaluation."""

    def __init__(self, mu, chol, color, frame_dims, conic, blocks):
        self.mu = mu
        self.chol = chol
        self.color = color
        self.frame_dims = frame_dims
        self.conic = conic
        self.blocks = blocks


def _block_ranges(n):
    return [(lo, min(lo + _BLOCK, n)) for lo in range(0, n, _BLOCK)]


def _run_blocks(fn, ranges, workers):
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, ranges))
    return [fn(r) for r in ranges]


def _forward_arrays(mu, chol, color, frame_dims, cutoff, workers, keep_cache):
    """Raw accumulated image (H*W, 3) plus an optional backward cache."""
    w, h = frame_dims
    n = mu.shape[0]
    conic_a, conic_b, conic_c = _conic_terms(chol)
    x0, y0, x1, y1 = _footprint_bounds(mu, chol, cutoff, frame_dims)

    def run(block):
        lo, hi = block
        g_local, px, py = _pair_table(x0[lo:hi], y0[lo:hi], x1[lo:hi], y1[lo:hi])
        g = g_local + lo
        dx = (px + 0.5) - mu[g, 0]
        dy = (py + 0.5) - mu[g, 1]
        sigma = (
            0.5 * conic_a[g] * dx * dx
            + conic_b[g] * dx * dy
            + 0.5 * conic_c[g] * dy * dy
        )
        weight = np.exp(-sigma)
        pix = py * w + px
        partial = np.empty((h * w, 3), dtype=np.float64)
        for ch in range(3):
            partial[:, ch] = np.bincount(
                pix, weights=weight * color[g, ch], minlength=h * w
            )
        cache = _BlockCache(lo, g_local, pix, dx, dy, weight) if keep_cache else None
        return partial, cache

    results = _run_blocks(run, _block_ranges(n), workers)
    raw = np.zeros((h * w, 3), dtype=np.float64)
    blocks = []
    for partial, cache in results:  # fixed block order => deterministic sum
        raw += partial
        if cache is not None:
            blocks.append(cache)
    cache = (
        RenderCache(mu, chol, color, frame_dims, (conic_a, conic_b, conic_c), blocks)
        if keep_cache
        else None
    )
    return raw, cache


def _backward_arrays(cache: RenderCache, loss_grad, workers=1) -> Gradients:
    """Gradients of a scalar loss given d(loss)/d(raw image)."""
    w, h = cache.frame_dims
    n = cache.mu.shape[0]
    conic_a, conic_b, conic_c = cache.conic
    grad_flat = np.ascontiguousarray(loss_grad.reshape(h * w, 3))
    g_mu = np.zeros((n, 2), dtype=np.float64)
    g_conic = np.zeros((n, 3), dtype=np.float64)
    g_color = np.zeros((n, 3), dtype=np.float64)

    def run(block: _BlockCache):
        lo = block.lo
        g = block.g_local + lo
        m = block.g_local.max() + 1 if block.g_local.size else 0
        gp = grad_flat[block.pix]  # (P, 3)
        weight = block.weight
        dx, dy = block.dx, block.dy
        out_color = np.empty((m, 3), dtype=np.float64)
        for ch in range(3):
            out_color[:, ch] = np.bincount(
                block.g_local, weights=gp[:, ch] * weight, minlength=m
            )
        # d(loss)/d(sigma) per pair
        s = -weight * (
            gp[:, 0] * cache.color[g, 0]
            + gp[:, 1] * cache.color[g, 1]
            + gp[:, 2] * cache.color[g, 2]
        )
        six = conic_a[g] * dx + conic_b[g] * dy  # (Sigma^{-1} d)_x
        siy = conic_b[g] * dx + conic_c[g] * dy
        out_mu = np.empty((m, 2), dtype=np.float64)
        out_mu[:, 0] = np.bincount(block.g_local, weights=-s * six, minlength=m)
        out_mu[:, 1] = np.bincount(block.g_local, weights=-s * siy, minlength=m)
        out_conic = np.empty((m, 3), dtype=np.float64)
        out_conic[:, 0] = np.bincount(
            block.g_local, weights=s * 0.5 * dx * dx, minlength=m
        )
        out_conic[:, 1] = np.bincount(block.g_local, weights=s * dx * dy, minlength=m)
        out_conic[:, 2] = np.bincount(
            block.g_local, weights=s * 0.5 * dy * dy, minlength=m
        )
        return lo, m, out_mu, out_conic, out_color

    results = _run_blocks(run, cache.blocks, workers)
    for lo, m, out_mu, out_conic, out_color in results:
        if m:  # blocks partition splats, so writes never collide
            g_mu[lo : lo + m] += out_mu
            g_conic[lo : lo + m] += out_conic
            g_color[lo : lo + m] += out_color

    # Chain (A, B, C) back to the Cholesky vector.
    l1, l2, l3 = cache.chol[:, 0], cache.chol[:, 1], cache.chol[:, 2]
    l3sq = l3 * l3
    l3cu = l3sq * l3
    ga, gb, gc = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    g_chol = np.empty((n, 3), dtype=np.float64)
    g_chol[:, 0] = ga * (-2.0 * (l2 * l2 + l3sq) / (l1 ** 3 * l3sq)) + gb * (
        l2 / (l1 * l1 * l3sq)
    )
    g_chol[:, 1] = ga * (2.0 * l2 / (l1 * l1 * l3sq)) + gb * (-1.0 / (l1 * l3sq))
    g_chol[:, 2] = (
        ga * (-2.0 * l2 * l2 / (l1 * l1 * l3cu))
        + gb * (2.0 * l2 / (l1 * l3cu))
        + gc * (-2.0 / l3cu)
    )
    return Gradients(mu=g_mu, chol=g_chol, color=g_color)


def render(gs: GaussianSet, cfg: RenderConfig = DEFAULT_CONFIG, background=None,
           clamp=True) -> np.ndarray:
    """Render a set to an ``(H, W, 3)`` image.

    Args:
        gs: splats to render.
        cfg: rasterization configuration.
        background: optional flat RGB base added to the accumulated sum.
        clamp: clip the output to [0, 1] (the raw sum is unbounded).
    """
    _pass_counts["forward"] += 1
    w, h = gs.frame_dims
    raw, _ = _forward_arrays(
        gs.mu, gs.chol, gs.color, gs.frame_dims, cfg.cutoff, cfg.workers, False
    )
    img = raw.reshape(h, w, 3)
    if background is not None:
        img = img + np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return img


def render_forward(gs: GaussianSet, cfg: RenderConfig = DEFAULT_CONFIG,
                   background=None):
    """Unclamped render plus the cache consumed by :func:`render_backward`."""
    _pass_counts["forward"] += 1
    w, h = gs.frame_dims
    raw, cache = _forward_arrays(
        gs.mu, gs.chol, gs.color, gs.frame_dims, cfg.cutoff, cfg.workers, True
    )
    img = raw.reshape(h, w, 3)
    if background is not None:
        img = img + np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
    return img, cache


def render_backward(gs: GaussianSet, loss_grad, cache: RenderCache = None,
                    cfg: RenderConfig = DEFAULT_CONFIG) -> Gradients:
    """Loss gradients w.r.t. every splat's effective (mu, chol, color).

    Args:
        gs: the set the loss was evaluated on.
        loss_grad: ``(H, W, 3)`` array of d(loss)/d(raw accumulated image).
        cache: forward cache from :func:`render_forward`; recomputed when
            omitted.
    """
    _pass_counts["backward"] += 1
    w, h = gs.frame_dims
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (h, w, 3):
        raise ValueError(
            f"loss_grad shape {loss_grad.shape} does not match frame ({h}, {w}, 3)"
        )
    if cache is None:
        _, cache = _forward_arrays(
            gs.mu, gs.chol, gs.color, gs.frame_dims, cfg.cutoff, cfg.workers, True
        )
    return _backward_arrays(cache, loss_grad, cfg.workers)


@dataclass(frozen=True)
class TileGrid:
    """Per-tile lists of splat IDs whose footprint intersects the tile.

    Tiles are ``tile_size`` pixels square, stored row-major; ID arrays are
    ascending. Every splat with any above-cutoff contribution inside a tile
    appears in that tile's list (footprints bound the cutoff ellipse).
    """

    tile_size: int
    tiles_x: int
    tiles_y: int
    ids: tuple

    def tile_ids(self, tx: int, ty: int) -> np.ndarray:
        return self.ids[ty * self.tiles_x + tx]

    def ids_for_pixel(self, x: int, y: int) -> np.ndarray:
        return self.tile_ids(x // self.tile_size, y // self.tile_size)


def build_tile_grid(gs: GaussianSet, cfg: RenderConfig = DEFAULT_CONFIG,
                    radius=None) -> TileGrid:
    """Bin splats into tiles by footprint rectangle intersection."""
    w, h = gs.frame_dims
    t = cfg.tile_size
    tiles_x = -(-w // t)
    tiles_y = -(-h // t)
    x0, y0, x1, y1 = _footprint_bounds(
        gs.mu, gs.chol, cfg.cutoff if radius is None else radius, gs.frame_dims
    )
    # Convert half-open pixel ranges to half-open tile ranges.
    nonempty = (x1 > x0) & (y1 > y0)
    tx0 = x0 // t
    tx1 = np.where(nonempty, (x1 - 1) // t + 1, tx0)
    ty0 = y0 // t
    ty1 = np.where(nonempty, (y1 - 1) // t + 1, ty0)
    g, tx, ty = _pair_table(tx0, ty0, tx1, ty1)
    tile_idx = ty * tiles_x + tx
    order = np.argsort(tile_idx, kind="stable")  # keeps splat IDs ascending
    tile_idx = tile_idx[order]
    g = g[order]
    counts = np.bincount(tile_idx, minlength=tiles_x * tiles_y)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    ids = tuple(
        g[offsets[i] : offsets[i + 1]] for i in range(tiles_x * tiles_y)
    )
    return TileGrid(tile_size=t, tiles_x=tiles_x, tiles_y=tiles_y, ids=ids)
