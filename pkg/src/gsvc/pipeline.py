"""End-to-end encode, decode, and metrics reporting.

Encoding walks the sequence in GoP order: frame ``f`` is an I-frame iff
``f % gop == 0``. I-frames run initialization plus a full fit; P-frames
re-fit only the splats influenced by changed pixels, measured against the
previous frame's *decoded* state so the decoder never drifts from the
encoder. The quantizer is calibrated once on frame 0 (from the fitted
parameters for PTQ, inside the fitting loop for QAT) and then frozen for
the whole stream, matching what the header records.

Decoding is dequantize-plus-render only; it never touches the optimizer.
The per-frame quality the encoder reports is computed on the exact decoded
state, so a decoder reproduces those numbers bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitstream import (
    MAX_GAUSSIANS,
    FrameRecord,
    SavingsReport,
    StreamHeader,
    bitsback_savings,
    deserialize,
    encode_frame_record,
    encode_header,
    savings_for_counts,
    scan_record_sizes,
)
from .frameio import load_masks, load_video
from .gaussians import GaussianSet
from .initializer import full_frame_mask, random_init, superpixel_init
from .metrics import psnr
from .optimizer import FitConfig, FitDivergedError, fit
from .pframe import build_index, encode_pframe
from .quantization import (
    MODES,
    calibrate_ptq,
    default_quant_spec,
    dequantize,
    quantize,
    quantize_attributes,
    set_from_quantized,
)
from .rasterizer import RenderConfig, render

PRESET_ITERS = {"fast": 1000, "slow": 10000}
INIT_MODES = ("superpixel", "random")

CSV_COLUMNS = ("stream", "frame", "type", "bits", "bpp", "psnr_roi_db",
               "psnr_full_db", "encode_seconds", "decode_fps")


class EncodeError(RuntimeError):
    """Encoding aborted; the message names the offending frame."""


@dataclass
class EncodeJob:
    """Everything that determines an encode, and therefore the bitstream.

    ``workers`` is deliberately excluded from the configuration digest:
    thread count must never change the emitted bytes.
    """

    input: str
    output: str | None = None
    mask_path: str | None = None
    n_gaussians: int = 500
    gop: int = 4
    preset: str = "fast"
    iters: int | None = None
    target_psnr: float | None = None
    change_threshold: float = 10.0 / 255.0
    quant_mode: str = "ptq"
    mu_bits: int = 16
    chol_bits: int = 6
    color_bits: int = 8
    seed: int = 0
    workers: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    compactness: float = 10.0
    init: str = "superpixel"
    influence_eps: float = 0.01
    dilate: bool = True
    fps: float | None = None
    cutoff: float = 3.0

    def __post_init__(self):
        if not 1 <= self.n_gaussians <= MAX_GAUSSIANS:
            raise ValueError(f"n_gaussians must lie in [1, {MAX_GAUSSIANS}]")
        if self.gop < 1:
            raise ValueError("gop must be at least 1")
        if self.preset not in PRESET_ITERS:
            raise ValueError(f"preset must be one of {tuple(PRESET_ITERS)}")
        if self.iters is not None and self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.quant_mode not in MODES:
            raise ValueError(f"quant_mode must be one of {MODES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if not 0.0 <= self.change_threshold <= 1.0:
            raise ValueError("change_threshold must lie in [0, 1]")
        if not 0.0 < self.influence_eps < 1.0:
            raise ValueError("influence_eps must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if len(self.background) != 3:
            raise ValueError("background must hold three channels")
        self.background = tuple(float(c) for c in self.background)

    @property
    def resolved_iters(self) -> int:
        return self.iters if self.iters is not None else PRESET_ITERS[self.preset]


@dataclass
class FrameMetrics:
    """One CSV row; ``frame`` is an index or the literal ``"all"``."""

    stream: str
    frame: object
    frame_type: str
    bits: int | None = None
    bpp: float | None = None
    psnr_roi_db: float | None = None
    psnr_full_db: float | None = None
    encode_seconds: float | None = None
    decode_fps: float | None = None


@dataclass
class MetricsReport:
    """Per-frame rows plus per-stream aggregates, CSV-serializable."""

    rows: list = field(default_factory=list)
    savings_nominal: SavingsReport | None = None
    savings_actual_bits: float | None = None

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([
                row.stream,
                row.frame,
                row.frame_type,
                "" if row.bits is None else row.bits,
                "" if row.bpp is None else f"{row.bpp:.6f}",
                "" if row.psnr_roi_db is None else f"{row.psnr_roi_db:.4f}",
                "" if row.psnr_full_db is None else f"{row.psnr_full_db:.4f}",
                "" if row.encode_seconds is None
                else f"{row.encode_seconds:.3f}",
                "" if row.decode_fps is None else f"{row.decode_fps:.2f}",
            ])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())


def job_digest(job: EncodeJob) -> bytes:
    """16-byte digest of every bit-affecting job parameter."""
    text = ";".join([
        f"n={job.n_gaussians}",
        f"gop={job.gop}",
        f"iters={job.resolved_iters}",
        f"target={job.target_psnr}",
        f"tau={job.change_threshold!r}",
        f"quant={job.quant_mode}:{job.mu_bits}/{job.chol_bits}/{job.color_bits}",
        f"seed={job.seed}",
        f"init={job.init}",
        f"compactness={job.compactness!r}",
        f"eps={job.influence_eps!r}",
        f"dilate={job.dilate}",
        f"bg={job.background!r}",
        f"cutoff={job.cutoff!r}",
    ])
    return hashlib.md5(text.encode("utf-8")).digest()


def _fit_config(job: EncodeJob, spec, refit: bool = False) -> FitConfig:
    qat = job.quant_mode == "qat"
    # Refits resume from decoded, lattice-consistent parameters, so their
    # whole budget runs quantized. Keyframes keep the float warmup: frame 0
    # needs it to calibrate the stream-wide lattice, and later keyframes
    # converge noticeably worse when a from-scratch fit spends every
    # iteration on the frozen grid.
    warmup = 0.0 if qat and refit else FitConfig.qat_warmup
    return FitConfig(
        max_iters=job.resolved_iters,
        target_psnr=job.target_psnr,
        quant_in_loop=qat,
        quant_spec=spec if qat else None,
        qat_warmup=warmup,
        background=job.background,
        cutoff=job.cutoff,
        workers=job.workers,
    )


def _rows_from_quantized(q, spec, frame_dims) -> GaussianSet:
    mu, chol, color = dequantize(q, spec)
    return GaussianSet.from_attributes(mu, chol, color, frame_dims)


def encode_video(job: EncodeJob):
    """Run the full GoP loop and emit a stream.

    Returns:
        ``(stream bytes, MetricsReport)``; the stream is also written to
        ``job.output`` when that is set. The report carries one row per
        frame plus an aggregate row, and the bits-back savings estimate
        (nominal per the N/20 rule alongside the actual-count total).
    """
    frames, src_fps = load_video(job.input)
    h, w = frames[0].shape[:2]
    dims = (w, h)
    count = len(frames)
    if job.mask_path is not None:
        masks = load_masks(job.mask_path, count, dims)
    else:
        masks = [None] * count
    fps = job.fps if job.fps is not None else (src_fps or 30.0)
    stream_name = Path(job.output).name if job.output else "stream"

    spec = default_quant_spec(
        dims, mode=job.quant_mode, mu_bits=job.mu_bits,
        chol_bits=job.chol_bits, color_bits=job.color_bits,
    )
    header = None
    decoded = None
    records = []
    record_blobs = []
    rows = []
    render_cfg = RenderConfig(cutoff=job.cutoff, workers=job.workers)

    for f, frame in enumerate(frames):
        t0 = time.perf_counter()
        mask = masks[f]
        frame_type = "I" if f % job.gop == 0 else "P"
        try:
            if frame_type == "I":
                if job.init == "superpixel":
                    roi = mask if mask is not None else full_frame_mask(dims)
                    start = superpixel_init(
                        frame, roi, job.n_gaussians, job.compactness
                    )
                else:
                    start = random_init(dims, job.n_gaussians,
                                        seed=job.seed + f)
                fitted, rep = fit(start, frame, mask, _fit_config(job, spec))
                if f == 0 and not spec.calibrated:
                    # Frame 0 fixes the stream-wide quantizer. QAT exposes
                    # the spec its loop converged to; if the loop stopped
                    # before simulated quantization engaged (early stop in
                    # the warmup), or the mode calibrates after fitting,
                    # derive the spec from the fitted parameters instead.
                    if rep.quant_spec is not None and rep.quant_spec.calibrated:
                        spec = rep.quant_spec
                    else:
                        spec = calibrate_ptq([fitted], spec)
                q = quantize(fitted, spec)
                rec = FrameRecord("I", q)
                decoded = set_from_quantized(q, spec, dims)
            else:
                idx = build_index(decoded, job.influence_eps)
                updated, ids, _ = encode_pframe(
                    decoded, idx, frame, mask, job.change_threshold,
                    _fit_config(job, spec, refit=True), job.dilate,
                )
                mu_e, chol_e, color_e = updated.attributes()
                q = quantize_attributes(
                    mu_e[ids], chol_e[ids], color_e[ids], spec
                )
                rec = FrameRecord("P", q, ids)
                if ids.size:
                    fresh = _rows_from_quantized(q, spec, dims)
                    decoded = decoded.replace_rows(
                        ids, fresh.mu, fresh.chol_raw, fresh.color
                    )
        except FitDivergedError as exc:
            raise EncodeError(f"fit diverged on frame {f} "
                              f"(iteration {exc.iteration})") from exc

        if header is None:
            header = StreamHeader(
                width=w, height=h, fps=fps, gop=job.gop,
                n_gaussians=job.n_gaussians, frame_count=count,
                background=job.background,
                change_threshold=job.change_threshold,
                quant=spec, render_cutoff=job.cutoff,
                fit_digest=job_digest(job),
            )
        blob = encode_frame_record(rec, header)
        records.append(rec)
        record_blobs.append(blob)

        decoded_render = render(decoded, render_cfg,
                                background=job.background, clamp=True)
        rows.append(FrameMetrics(
            stream=stream_name,
            frame=f,
            frame_type=frame_type,
            bits=len(blob) * 8,
            bpp=len(blob) * 8 / (w * h),
            psnr_roi_db=psnr(decoded_render, frame, mask),
            psnr_full_db=psnr(decoded_render, frame),
            encode_seconds=time.perf_counter() - t0,
        ))

    stream = encode_header(header) + b"".join(record_blobs)
    if job.output is not None:
        Path(job.output).write_bytes(stream)

    total_bits = sum(r.bits for r in rows)
    i_bits = sum(r.bits for r in rows if r.frame_type == "I")
    p_counts = [rec.q.n for rec in records if rec.frame_type == "P"]
    rows.append(FrameMetrics(
        stream=stream_name,
        frame="all",
        frame_type="",
        bits=total_bits,
        bpp=total_bits / (w * h * count),
        psnr_roi_db=float(np.mean([r.psnr_roi_db for r in rows])),
        psnr_full_db=float(np.mean([r.psnr_full_db for r in rows])),
        encode_seconds=float(sum(r.encode_seconds for r in rows)),
    ))
    report = MetricsReport(rows=rows)
    if count > 1 and job.gop > 1:
        report.savings_nominal = bitsback_savings(
            max(job.n_gaussians // 20, 1), count, job.gop,
            i_frame_bits=i_bits, p_frame_bits=total_bits - i_bits,
        )
        report.savings_actual_bits = savings_for_counts(p_counts)
    return stream, report


def decode_video(source, workers: int = 1):
    """Reconstruct every frame of a stream.

    ``source`` may be stream bytes or a path. Returns ``(frames, header)``
    with float RGB frames in decode order. Decoding dequantizes and
    renders; it runs no optimization, and its output is identical for any
    ``workers`` value.
    """
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = bytes(source)
    header, records = deserialize(data)
    spec = header.quant
    dims = header.frame_dims
    render_cfg = RenderConfig(cutoff=header.render_cutoff, workers=workers)
    state = None
    out = []
    for rec in records:
        if rec.frame_type == "I":
            state = set_from_quantized(rec.q, spec, dims)
        elif rec.ids.size:
            fresh = _rows_from_quantized(rec.q, spec, dims)
            state = state.replace_rows(
                rec.ids, fresh.mu, fresh.chol_raw, fresh.color
            )
        out.append(render(state, render_cfg,
                          background=header.background, clamp=True))
    return out, header


def report_metrics(stream_sources, reference, mask_path=None) -> MetricsReport:
    """Decode streams and measure them against reference frames.

    One row per (stream, frame) plus an aggregate row per stream, so
    several encodes of the same sequence can be compared side by side.
    """
    ref_frames, _ = load_video(reference)
    count = len(ref_frames)
    h, w = ref_frames[0].shape[:2]
    if mask_path is not None:
        masks = load_masks(mask_path, count, (w, h))
    else:
        masks = [None] * count

    report = MetricsReport()
    for source in stream_sources:
        name = Path(source).name if isinstance(source, (str, Path)) else "stream"
        data = (Path(source).read_bytes()
                if isinstance(source, (str, Path)) else bytes(source))
        t0 = time.perf_counter()
        frames, header = decode_video(data)
        decode_seconds = time.perf_counter() - t0
        if len(frames) != count:
            raise ValueError(
                f"{name} decodes {len(frames)} frames, "
                f"reference has {count}"
            )
        if header.frame_dims != (w, h):
            raise ValueError(
                f"{name} is {header.width}x{header.height}, "
                f"reference is {w}x{h}"
            )
        sizes = scan_record_sizes(data)
        total_bits = 0
        roi_vals = []
        full_vals = []
        for f, (frame, (ftype, size)) in enumerate(zip(frames, sizes)):
            bits = size * 8
            total_bits += bits
            roi = psnr(frame, ref_frames[f], masks[f])
            full = psnr(frame, ref_frames[f])
            roi_vals.append(roi)
            full_vals.append(full)
            report.rows.append(FrameMetrics(
                stream=name, frame=f, frame_type=ftype, bits=bits,
                bpp=bits / (w * h), psnr_roi_db=roi, psnr_full_db=full,
            ))
        report.rows.append(FrameMetrics(
            stream=name, frame="all", frame_type="", bits=total_bits,
            bpp=total_bits / (w * h * count),
            psnr_roi_db=float(np.mean(roi_vals)),
            psnr_full_db=float(np.mean(full_vals)),
            decode_fps=count / decode_seconds if decode_seconds > 0 else None,
        ))
    return report
