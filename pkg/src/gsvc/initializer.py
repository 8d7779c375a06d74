"""Content-aware splat initialization from ROI superpixels.

The initializer segments the ROI into roughly ``n`` superpixels with a
masked k-means in a 5-D feature space (scaled x, y plus RGB) and seeds one
splat per segment: position at the segment centroid, covariance from the
segment's spatial scatter, color from the segment's mean RGB. Segments are
compact by construction, which is what makes the seeded covariances well
conditioned and the first optimization steps productive.

Feature-space distances follow the usual superpixel convention: spatial
coordinates are divided by the grid step ``S = sqrt(roi_area / n)`` and
weighted by the compactness factor, so larger compactness yields more
grid-like segments. Everything is deterministic: no RNG, ties broken by
lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianSet, chol_from_cov, regularize_covariances
from .metrics import validate_image, validate_mask

# Pixel block size for the assignment step; bounds the (block x K) distance
# matrix so memory stays flat for large ROIs.
_ASSIGN_BLOCK = 8192


@dataclass(frozen=True)
class SuperpixelSegmentation:
    """Dense segment labeling of the ROI plus per-segment statistics.

    Attributes:
        labels: ``(H, W)`` int32, segment id per ROI pixel, -1 outside.
        counts: ``(K,)`` pixels per segment (all >= 1).
        centroids: ``(K, 2)`` mean pixel-center coordinates (x, y).
        covariances: ``(K, 2, 2)`` spatial scatter (population covariance).
        mean_colors: ``(K, 3)`` average RGB per segment.
    """

    labels: np.ndarray
    counts: np.ndarray
    centroids: np.ndarray
    covariances: np.ndarray
    mean_colors: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.counts.shape[0]

    @property
    def frame_dims(self) -> tuple[int, int]:
        h, w = self.labels.shape
        return (w, h)


def full_frame_mask(frame_dims) -> np.ndarray:
    w, h = frame_dims
    return np.ones((h, w), dtype=bool)


def _initial_seed_indices(xs, ys, n):
    """Exactly ``n`` seed indices into the ROI pixel arrays.

    Seeds start on a uniform grid over the ROI bounding box, snap to the
    nearest ROI pixel, and are de-duplicated. Shortfalls are topped up by
    farthest-point sampling; overshoot is thinned evenly in scan order.
    """
    p = xs.size
    xmin, xmax = int(xs.min()), int(xs.max())
    ymin, ymax = int(ys.min()), int(ys.max())
    bw, bh = xmax - xmin + 1, ymax - ymin + 1
    step = np.sqrt(bw * bh / n)
    gx = xmin + (np.arange(max(1, int(np.ceil(bw / step)))) + 0.5) * step
    gy = ymin + (np.arange(max(1, int(np.ceil(bh / step)))) + 0.5) * step
    gx = gx[gx < xmax + 1.0]
    gy = gy[gy < ymax + 1.0]
    if gx.size == 0:
        gx = np.array([xmin + bw / 2.0])
    if gy.size == 0:
        gy = np.array([ymin + bh / 2.0])
    grid = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)

    # Snap each grid point to the nearest ROI pixel (chunked over points).
    snapped = np.empty(grid.shape[0], dtype=np.int64)
    for lo in range(0, grid.shape[0], 64):
        chunk = grid[lo : lo + 64]
        d2 = (chunk[:, 0:1] - xs[None, :]) ** 2 + (chunk[:, 1:2] - ys[None, :]) ** 2
        snapped[lo : lo + chunk.shape[0]] = np.argmin(d2, axis=1)
    _, first = np.unique(snapped, return_index=True)
    seeds = snapped[np.sort(first)]

    if seeds.size > n:
        pick = np.round(np.linspace(0, seeds.size - 1, n)).astype(np.int64)
        seeds = seeds[pick]
    elif seeds.size < n:
        # Farthest-point top-up over ROI pixel coordinates.
        d2 = np.full(p, np.inf)
        for s in seeds:
            d2 = np.minimum(d2, (xs - xs[s]) ** 2 + (ys - ys[s]) ** 2)
        d2[seeds] = -1.0
        extra = []
        while seeds.size + len(extra) < n:
            j = int(np.argmax(d2))
            extra.append(j)
            d2 = np.minimum(d2, (xs - xs[j]) ** 2 + (ys - ys[j]) ** 2)
            d2[j] = -1.0
        seeds = np.concatenate([seeds, np.array(extra, dtype=np.int64)])
    return seeds


def _assign(feats, centroids):
    """Nearest centroid per pixel (squared 5-D distance, first-index ties)."""
    p = feats.shape[0]
    assign = np.empty(p, dtype=np.int64)
    best = np.empty(p, dtype=np.float64)
    for lo in range(0, p, _ASSIGN_BLOCK):
        block = feats[lo : lo + _ASSIGN_BLOCK]
        d2 = np.zeros((block.shape[0], centroids.shape[0]), dtype=np.float64)
        for f in range(feats.shape[1]):
            diff = block[:, f, None] - centroids[None, :, f]
            d2 += diff * diff
        assign[lo : lo + block.shape[0]] = np.argmin(d2, axis=1)
        best[lo : lo + block.shape[0]] = d2[np.arange(block.shape[0]), assign[lo : lo + block.shape[0]]]
    return assign, best


def _update(feats, assign, k):
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.empty((k, feats.shape[1]), dtype=np.float64)
    for f in range(feats.shape[1]):
        sums[:, f] = np.bincount(assign, weights=feats[:, f], minlength=k)
    safe = np.maximum(counts, 1.0)
    return sums / safe[:, None], counts


def segment_superpixels(frame, mask, n_segments, compactness=10.0,
                        kmeans_iters=10) -> SuperpixelSegmentation:
    """Partition the ROI into at most ``n_segments`` compact superpixels.

    Args:
        frame: ``(H, W, 3)`` image in [0, 1].
        mask: ``(H, W)`` boolean ROI; must select at least one pixel.
        n_segments: requested segment count, ``1 <= n <= ROI pixel count``.
        compactness: spatial weight; higher values favor grid-like segments.
        kmeans_iters: k-means refinement iterations.

    Returns:
        A :class:`SuperpixelSegmentation`. Empty clusters are re-seeded at
        the ROI pixel farthest from its assigned centroid during iteration;
        clusters still empty after the final assignment are dropped, so the
        output count can fall below the request but never exceeds it.
    """
    frame = validate_image(frame)
    mask = validate_mask(mask, frame.shape)
    ys, xs = np.nonzero(mask)
    p = xs.size
    if p == 0:
        raise ValueError("ROI mask selects no pixels")
    if not 1 <= n_segments <= p:
        raise ValueError(
            f"n_segments must be in [1, {p}] for this ROI, got {n_segments}"
        )
    if kmeans_iters < 1:
        raise ValueError("kmeans_iters must be at least 1")

    px = xs + 0.5
    py = ys + 0.5
    colors = frame[ys, xs]
    step = np.sqrt(p / n_segments)
    spatial_w = compactness / step
    feats = np.column_stack([px * spatial_w, py * spatial_w, colors])

    seeds = _initial_seed_indices(xs, ys, n_segments)
    centroids = feats[seeds].copy()

    for _ in range(kmeans_iters):
        assign, best = _assign(feats, centroids)
        new_centroids, counts = _update(feats, assign, n_segments)
        keep = counts > 0
        centroids[keep] = new_centroids[keep]
        empties = np.nonzero(~keep)[0]
        if empties.size:
            # Re-seed at the pixels worst represented by their centroid.
            d2 = best.copy()
            for cid in empties:
                j = int(np.argmax(d2))
                centroids[cid] = feats[j]
                d2[j] = -1.0

    assign, _ = _assign(feats, centroids)
    present = np.unique(assign)
    remap = np.full(n_segments, -1, dtype=np.int64)
    remap[present] = np.arange(present.size)
    dense = remap[assign]
    k = present.size

    counts = np.bincount(dense, minlength=k).astype(np.int64)
    sum_x = np.bincount(dense, weights=px, minlength=k)
    sum_y = np.bincount(dense, weights=py, minlength=k)
    cx = sum_x / counts
    cy = sum_y / counts
    exx = np.bincount(dense, weights=px * px, minlength=k) / counts
    eyy = np.bincount(dense, weights=py * py, minlength=k) / counts
    exy = np.bincount(dense, weights=px * py, minlength=k) / counts
    cov = np.empty((k, 2, 2), dtype=np.float64)
    cov[:, 0, 0] = exx - cx * cx
    cov[:, 1, 1] = eyy - cy * cy
    cov[:, 0, 1] = exy - cx * cy
    cov[:, 1, 0] = cov[:, 0, 1]
    mean_colors = np.column_stack(
        [np.bincount(dense, weights=colors[:, ch], minlength=k) / counts
         for ch in range(3)]
    )

    labels = np.full(frame.shape[:2], -1, dtype=np.int32)
    labels[ys, xs] = dense
    return SuperpixelSegmentation(
        labels=labels,
        counts=counts,
        centroids=np.column_stack([cx, cy]),
        covariances=cov,
        mean_colors=mean_colors,
    )


def gaussians_from_segments(seg: SuperpixelSegmentation) -> GaussianSet:
    """One splat per segment: centroid position, scatter covariance, mean color.

    Rank-deficient scatter (single-pixel or collinear segments) is lifted by
    ``eps * I`` with ``eps = 1e-6 * max(frame_dim)^2`` before the Cholesky
    factorization.
    """
    w, h = seg.frame_dims
    eps = 1e-6 * float(max(w, h)) ** 2
    cov, _ = regularize_covariances(seg.covariances, eps, min_eigenvalue=eps)
    chol, _ = chol_from_cov(cov, eps)
    return GaussianSet.from_attributes(seg.centroids, chol, seg.mean_colors, (w, h))


def superpixel_init(frame, mask, n_segments, compactness=10.0,
                    kmeans_iters=10) -> GaussianSet:
    """Segment the ROI and seed one splat per segment."""
    seg = segment_superpixels(frame, mask, n_segments, compactness, kmeans_iters)
    return gaussians_from_segments(seg)


def random_init(frame_dims, n, seed) -> GaussianSet:
    """Uninformed baseline: uniform positions/colors, area-scaled covariance.

    Covariance scale targets ~``frame_area / n`` per splat so coverage is
    comparable to the content-aware path. Deterministic per seed.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    w, h = frame_dims
    rng = np.random.default_rng(seed)
    base = np.sqrt(w * h / n)
    mu = rng.uniform((0.0, 0.0), (float(w), float(h)), size=(n, 2))
    l1 = rng.uniform(0.5 * base, 1.0 * base, size=n)
    l3 = rng.uniform(0.5 * base, 1.0 * base, size=n)
    l2 = rng.uniform(-0.3 * base, 0.3 * base, size=n)
    color = rng.uniform(0.0, 1.0, size=(n, 3))
    return GaussianSet.from_attributes(
        mu, np.column_stack([l1, l2, l3]), color, (int(w), int(h))
    )
