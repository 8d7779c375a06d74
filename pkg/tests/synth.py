"""Synthetic frame generators shared by the unit and acceptance tests.

Everything here is deterministic given the seed arguments, cheap to build,
and sized for CPU test budgets. The 128x128 trio (voronoi / ellipse /
smooth field) exercises hard edges, oriented shapes and low-frequency
content respectively; the blob and wave fields add quantization-sensitive
content where splat scales and colors carry most of the signal.
"""

from __future__ import annotations

import numpy as np


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return xx.astype(np.float64), yy.astype(np.float64)


def voronoi_image(seed=1, size=128, cells=40):
    """Flat-colored Voronoi cells: hard edges in every direction."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, size, (cells, 2))
    cols = rng.uniform(0.1, 0.9, (cells, 3))
    xx, yy = _grid(size)
    d = (xx[..., None] - pts[:, 0]) ** 2 + (yy[..., None] - pts[:, 1]) ** 2
    return cols[np.argmin(d, axis=-1)]


def ellipse_image(seed=2, size=128, shapes=25):
    """Oriented filled ellipses over a horizontal gray ramp."""
    rng = np.random.default_rng(seed)
    xx, yy = _grid(size)
    img = np.linspace(0.2, 0.6, size)[None, :, None] * np.ones((size, size, 3))
    for _ in range(shapes):
        cx, cy = rng.uniform(10, size - 10, 2)
        a, b = rng.uniform(4, 18, 2)
        theta = rng.uniform(0, np.pi)
        col = rng.uniform(0, 1, 3)
        xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] = col
    return img


def smooth_image(seed=3, size=128, blobs=30):
    """Sum of broad isotropic bumps, normalized to [0, 1]."""
    rng = np.random.default_rng(seed)
    xx, yy = _grid(size)
    img = np.zeros((size, size, 3))
    for _ in range(blobs):
        cx, cy = rng.uniform(0, size, 2)
        s = rng.uniform(6, 25)
        col = rng.uniform(0, 1, 3)
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += col * bump[..., None]
    return np.clip(img / img.max(), 0, 1)


def blob_image(seed=7, size=128, blobs=50):
    """Denser, smaller bumps than :func:`smooth_image`."""
    rng = np.random.default_rng(seed)
    xx, yy = _grid(size)
    img = np.zeros((size, size, 3))
    for _ in range(blobs):
        cx, cy = rng.uniform(0, size, 2)
        s = rng.uniform(4, 15)
        col = rng.uniform(0, 1, 3)
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += col * bump[..., None]
    return np.clip(img / img.max(), 0, 1)


def wave_image(seed=9, size=128, terms=6):
    """Superposed low-frequency color sinusoids."""
    rng = np.random.default_rng(seed)
    xx, yy = _grid(size)
    img = np.zeros((size, size, 3))
    for _ in range(terms):
        fx, fy = rng.uniform(0.01, 0.06, 2)
        phase = rng.uniform(0, 2 * np.pi)
        col = rng.uniform(0.2, 1.0, 3)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += col * wave[..., None]
    return img / img.max()


def natural_crop():
    """A 128x128 crop of a stock photograph (skimage sample data)."""
    from skimage import data

    return data.astronaut()[120:248, 140:268].astype(np.float64) / 255.0


def moving_square_frames(count, size=64, square=10, step=5, start=8,
                         row=20, color=(0.9, 0.2, 0.1), seed=3):
    """A colored square sliding right over a static smooth background."""
    background = smooth_image(seed=seed, size=size, blobs=8)
    frames = []
    for f in range(count):
        img = background.copy()
        x0 = start + step * f
        img[row:row + square, x0:x0 + square] = color
        frames.append(img)
    return frames


def static_frames(count, size=64, seed=3):
    """``count`` copies of the same smooth frame."""
    img = smooth_image(seed=seed, size=size, blobs=8)
    return [img.copy() for _ in range(count)]
