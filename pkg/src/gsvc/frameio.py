"""Frame and mask ingestion plus decoded-frame output.

Two source shapes are accepted: a directory of images taken in
lexicographic name order, or a single ``.y4m`` file. Y4M input must be
planar 4:2:0 (any of the common subsampling tags) or 4:4:4 and is
converted to RGB with the BT.601 limited-range matrix and nearest-neighbor
chroma upsampling. Frames are float arrays in [0, 1] everywhere inside the
codec; files are 8-bit at the boundaries.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm")

# BT.601 limited-range YCbCr -> RGB.
_Y_GAIN = 255.0 / 219.0
_CR_R = 1.596027
_CB_G = -0.391762
_CR_G = -0.812968
_CB_B = 2.017232

_C420_TAGS = {"420", "420jpeg", "420mpeg2", "420paldv"}


class FrameSourceError(ValueError):
    """Unreadable, inconsistent, or unsupported frame input."""


def to_float(img8: np.ndarray) -> np.ndarray:
    return img8.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_frame(path) -> np.ndarray:
    """One image file as float RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise FrameSourceError(f"cannot read frame {path}: {exc}") from exc
    return to_float(rgb)


def _image_paths(directory: Path):
    paths = sorted(
        p for p in directory.iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()
    )
    if not paths:
        raise FrameSourceError(f"no image files in {directory}")
    return paths


def load_image_dir(directory) -> list:
    """All frames of an image-sequence directory, constant dims enforced."""
    frames = []
    for i, p in enumerate(_image_paths(Path(directory))):
        frame = load_frame(p)
        if frames and frame.shape != frames[0].shape:
            raise FrameSourceError(
                f"frame {i} ({p.name}) is {frame.shape[1]}x{frame.shape[0]}, "
                f"expected {frames[0].shape[1]}x{frames[0].shape[0]}"
            )
        frames.append(frame)
    return frames


def _ycbcr_to_rgb(y, cb, cr):
    y = y.astype(np.float64) - 16.0
    cb = cb.astype(np.float64) - 128.0
    cr = cr.astype(np.float64) - 128.0
    r = _Y_GAIN * y + _CR_R * cr
    g = _Y_GAIN * y + _CB_G * cb + _CR_G * cr
    b = _Y_GAIN * y + _CB_B * cb
    return np.clip(np.stack([r, g, b], axis=-1) / 255.0, 0.0, 1.0)


def _upsample2(plane, height, width):
    up = np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)
    return up[:height, :width]


def load_y4m(path) -> tuple:
    """Frames plus frame rate from a YUV4MPEG2 file."""
    data = Path(path).read_bytes()
    newline = data.find(b"\x0a")
    if newline < 0 or not data.startswith(b"YUV4MPEG2"):
        raise FrameSourceError(f"{path} is not a YUV4MPEG2 file")
    width = height = None
    fps = 30.0
    colorspace = "420"
    for token in data[9:newline].split():
        tag, value = chr(token[0]), token[1:].decode("ascii")
        if tag == "W":
            width = int(value)
        elif tag == "H":
            height = int(value)
        elif tag == "F":
            num, den = re.fullmatch(r"(\d+):(\d+)", value).groups()
            fps = int(num) / int(den)
        elif tag == "C":
            colorspace = value
    if not width or not height:
        raise FrameSourceError(f"{path} lacks W/H header tags")
    if colorspace in _C420_TAGS:
        chroma_shape = ((height + 1) // 2, (width + 1) // 2)
    elif colorspace == "444":
        chroma_shape = (height, width)
    else:
        raise FrameSourceError(
            f"unsupported Y4M colorspace C{colorspace} (need 4:2:0 or 4:4:4)"
        )
    y_size = width * height
    c_size = chroma_shape[0] * chroma_shape[1]

    frames = []
    pos = newline + 1
    while pos < len(data):
        marker_end = data.find(b"\x0a", pos)
        if marker_end < 0 or not data[pos:pos + 5] == b"FRAME":
            raise FrameSourceError(
                f"{path}: malformed FRAME marker before frame {len(frames)}"
            )
        pos = marker_end + 1
        end = pos + y_size + 2 * c_size
        if end > len(data):
            raise FrameSourceError(
                f"{path}: truncated pixel data in frame {len(frames)}"
            )
        y = np.frombuffer(data, np.uint8, y_size, pos).reshape(height, width)
        cb = np.frombuffer(data, np.uint8, c_size, pos + y_size)
        cr = np.frombuffer(data, np.uint8, c_size, pos + y_size + c_size)
        cb = cb.reshape(chroma_shape)
        cr = cr.reshape(chroma_shape)
        if colorspace != "444":
            cb = _upsample2(cb, height, width)
            cr = _upsample2(cr, height, width)
        frames.append(_ycbcr_to_rgb(y, cb, cr))
        pos = end
    if not frames:
        raise FrameSourceError(f"{path} holds no frames")
    return frames, fps


def load_video(path) -> tuple:
    """Dispatch on source shape; returns ``(frames, fps or None)``."""
    path = Path(path)
    if path.is_dir():
        return load_image_dir(path), None
    if path.suffix.lower() == ".y4m":
        return load_y4m(path)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return [load_frame(path)], None
    raise FrameSourceError(
        f"{path}: expected an image directory, an image, or a .y4m file"
    )


def save_frames(frames, out_dir, prefix="frame_") -> list:
    """Write frames as 8-bit PNGs named ``<prefix>00000.png`` onward."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = out_dir / f"{prefix}{i:05d}.png"
        Image.fromarray(to_uint8(frame)).save(p)
        paths.append(p)
    return paths


def load_mask(path, frame_dims) -> np.ndarray:
    """One mask image as boolean ROI (grayscale >= 50% is inside)."""
    w, h = frame_dims
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"))
    except OSError as exc:
        raise FrameSourceError(f"cannot read mask {path}: {exc}") from exc
    if gray.shape != (h, w):
        raise FrameSourceError(
            f"mask {path} is {gray.shape[1]}x{gray.shape[0]}, "
            f"frames are {w}x{h}"
        )
    return gray >= 128


def load_masks(path, frame_count, frame_dims) -> list:
    """ROI masks for a sequence.

    A single mask file, or a directory with one file, applies to every
    frame; a directory with ``frame_count`` files pairs with frames in
    name order. Any other count is an error.
    """
    path = Path(path)
    if path.is_dir():
        paths = _image_paths(path)
    else:
        paths = [path]
    if len(paths) == 1:
        return [load_mask(paths[0], frame_dims)] * frame_count
    if len(paths) != frame_count:
        raise FrameSourceError(
            f"{len(paths)} masks for {frame_count} frames; "
            "provide one mask or one per frame"
        )
    return [load_mask(p, frame_dims) for p in paths]
