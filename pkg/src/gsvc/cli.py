"""Command-line front end: encode, decode, report, inspect."""

from __future__ import annotations

import json
from pathlib import Path

import click

from .bitstream import deserialize, scan_record_sizes
from .frameio import save_frames
from .pipeline import (
    INIT_MODES,
    PRESET_ITERS,
    EncodeJob,
    decode_video,
    encode_video,
    report_metrics,
)
from .quantization import MODES

_CONFIGURABLE = (
    "mask_path", "n_gaussians", "gop", "preset", "iters", "target_psnr",
    "change_threshold", "quant_mode", "mu_bits", "chol_bits", "color_bits",
    "seed", "workers", "background", "compactness", "init", "influence_eps",
    "dilate", "fps", "cutoff",
)


def _parse_background(_ctx, _param, value):
    parts = [p for p in str(value).split(",") if p != ""]
    if len(parts) != 3:
        raise click.BadParameter("expected three comma-separated channels")
    try:
        channels = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc
    if not all(0.0 <= c <= 1.0 for c in channels):
        raise click.BadParameter("channels must lie in [0, 1]")
    return channels


def _merge_config(ctx, kwargs, config_path):
    """Fill in JSON config values for flags the user did not type."""
    if config_path is None:
        return kwargs
    try:
        loaded = json.loads(Path(config_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read config {config_path}: {exc}")
    if not isinstance(loaded, dict):
        raise click.ClickException("config must be a JSON object")
    for key, value in loaded.items():
        name = key.replace("-", "_")
        if name not in _CONFIGURABLE:
            raise click.ClickException(f"unknown config key {key!r}")
        if ctx.get_parameter_source(name) is click.core.ParameterSource.COMMANDLINE:
            continue
        if name == "background":
            value = _parse_background(None, None, value)
        kwargs[name] = value
    return kwargs


@click.group()
def main():
    """Gaussian-splat video codec: fit, quantize, and pack frames."""


@main.command()
@click.argument("input_path", metavar="INPUT")
@click.argument("output_path", metavar="OUTPUT")
@click.option("--mask-dir", "mask_path", default=None,
              help="ROI mask image or directory (one mask, or one per frame).")
@click.option("--n-gaussians", default=500, show_default=True,
              help="Splats per frame.")
@click.option("--gop", default=4, show_default=True,
              help="Group-of-pictures length; frame f is an I-frame iff f %% gop == 0.")
@click.option("--preset", type=click.Choice(tuple(PRESET_ITERS)),
              default="fast", show_default=True,
              help="Iteration budget preset (fast=1000, slow=10000).")
@click.option("--iters", type=int, default=None,
              help="Explicit iteration budget (overrides --preset).")
@click.option("--target-psnr", type=float, default=None,
              help="Early-stop threshold in dB (ROI-masked).")
@click.option("--change-threshold", default=10.0 / 255.0, show_default=True,
              help="P-frame residual threshold in [0, 1] pixel units.")
@click.option("--quant", "quant_mode", type=click.Choice(MODES),
              default="ptq", show_default=True)
@click.option("--bits-mu", "mu_bits", default=16, show_default=True)
@click.option("--bits-chol", "chol_bits", default=6, show_default=True)
@click.option("--bits-color", "color_bits", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True,
              help="RNG seed (bitstreams are reproducible per seed).")
@click.option("--workers", default=1, show_default=True,
              help="Render worker threads; never changes the output bytes.")
@click.option("--background", default="0,0,0", show_default=True,
              callback=_parse_background,
              help="Flat non-ROI fill color, comma-separated RGB in [0, 1].")
@click.option("--compactness", default=10.0, show_default=True,
              help="Superpixel spatial weight.")
@click.option("--init", type=click.Choice(INIT_MODES), default="superpixel",
              show_default=True)
@click.option("--influence-eps", default=0.01, show_default=True,
              help="Pixel-to-splat index contribution floor.")
@click.option("--dilate/--no-dilate", default=True, show_default=True,
              help="Grow changed regions by one pixel before selection.")
@click.option("--fps", type=float, default=None,
              help="Header frame rate (defaults to the source's, else 30).")
@click.option("--cutoff", default=3.0, show_default=True,
              help="Render footprint radius in marginal sigmas.")
@click.option("--config", "config_path", default=None,
              help="JSON file of option defaults; typed flags win.")
@click.option("--metrics-csv", default=None,
              help="Write per-frame encode metrics to this CSV path.")
@click.pass_context
def encode(ctx, input_path, output_path, config_path, metrics_csv, **kwargs):
    """Encode an image directory or .y4m file into a .gsvc stream."""
    kwargs = _merge_config(ctx, kwargs, config_path)
    try:
        job = EncodeJob(input=input_path, output=output_path, **kwargs)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    try:
        stream, report = encode_video(job)
    except Exception as exc:
        raise click.ClickException(str(exc))
    agg = report.rows[-1]
    click.echo(f"wrote {output_path}: {len(stream)} bytes, "
               f"{agg.bpp:.4f} bpp over {len(report.rows) - 1} frames")
    click.echo(f"mean PSNR {agg.psnr_roi_db:.2f} dB (ROI) / "
               f"{agg.psnr_full_db:.2f} dB (full), "
               f"encode time {agg.encode_seconds:.1f} s")
    if report.savings_nominal is not None:
        nom = report.savings_nominal
        click.echo(
            f"bits-back estimate: {report.savings_actual_bits:.0f} bits "
            f"recoverable (actual counts); nominal "
            f"S_P={nom.savings_per_pframe_bits:.1f} x "
            f"{nom.p_frame_count} P-frames = {nom.total_savings_bits:.0f}"
        )
    if metrics_csv is not None:
        report.write_csv(metrics_csv)
        click.echo(f"metrics written to {metrics_csv}")


@main.command()
@click.argument("stream_path", metavar="STREAM")
@click.argument("out_dir", metavar="OUT_DIR")
@click.option("--workers", default=1, show_default=True)
def decode(stream_path, out_dir, workers):
    """Decode a stream into numbered PNG frames."""
    try:
        frames, header = decode_video(stream_path, workers=workers)
    except Exception as exc:
        raise click.ClickException(str(exc))
    save_frames(frames, out_dir)
    click.echo(f"decoded {len(frames)} frames "
               f"({header.width}x{header.height}) into {out_dir}")


@main.command()
@click.argument("streams", metavar="STREAM...", nargs=-1, required=True)
@click.option("--reference", required=True,
              help="Original frames (directory or .y4m) to measure against.")
@click.option("--mask-dir", "mask_path", default=None,
              help="ROI masks for the ROI PSNR column.")
@click.option("--csv", "csv_path", default=None,
              help="Write rows to this path instead of stdout.")
def report(streams, reference, mask_path, csv_path):
    """Per-frame and aggregate quality/rate metrics for one or more streams."""
    try:
        metrics = report_metrics(list(streams), reference, mask_path)
    except Exception as exc:
        raise click.ClickException(str(exc))
    if csv_path is not None:
        metrics.write_csv(csv_path)
        click.echo(f"metrics written to {csv_path}")
    else:
        click.echo(metrics.csv_text(), nl=False)


@main.command()
@click.argument("stream_path", metavar="STREAM")
def inspect(stream_path):
    """Dump a stream's header and per-frame record sizes."""
    data = Path(stream_path).read_bytes()
    try:
        header, _ = deserialize(data)
        sizes = scan_record_sizes(data)
    except Exception as exc:
        raise click.ClickException(str(exc))
    q = header.quant
    click.echo(f"{header.width}x{header.height} @ {header.fps:g} fps, "
               f"{header.frame_count} frames, gop {header.gop}, "
               f"N {header.n_gaussians}")
    click.echo(f"quant {q.mode} (mu {q.mu_bits}b, chol {q.chol_bits}b, "
               f"color {q.color_bits}b), "
               f"change threshold {header.change_threshold:.4f}, "
               f"cutoff {header.render_cutoff:g}, "
               f"background {header.background}")
    click.echo(f"fit digest {header.fit_digest.hex()}")
    total = len(data)
    for i, (ftype, size) in enumerate(sizes):
        click.echo(f"  frame {i:4d}  {ftype}  {size:8d} bytes")
    click.echo(f"total {total} bytes "
               f"({total - sum(s for _, s in sizes)} header)")


if __name__ == "__main__":
    main()
