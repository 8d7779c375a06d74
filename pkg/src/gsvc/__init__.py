"""Video codec built on 2D Gaussian splats.

Frames are represented as sums of anisotropic 2D Gaussians fitted by
gradient descent through a differentiable rasterizer. Content-aware
initialization seeds one splat per ROI superpixel; inter frames re-fit
only the splats that changed pixels influence; attributes are quantized
per channel and entropy-coded into a self-contained GoP bitstream.
"""

from .bitstream import (
    BadMagicError,
    BitstreamError,
    CorruptPayloadError,
    FrameRecord,
    SavingsReport,
    StreamHeader,
    TruncatedStreamError,
    UnsupportedVersionError,
    bitsback_savings,
    deserialize,
    savings_for_counts,
    savings_per_pframe_bits,
    serialize,
)
from .entropy import EntropyDecodeError, entropy_decode, entropy_encode
from .gaussians import Gaussian2D, GaussianSet, chol_from_cov, cov_from_chol
from .initializer import (
    SuperpixelSegmentation,
    full_frame_mask,
    gaussians_from_segments,
    random_init,
    segment_superpixels,
    superpixel_init,
)
from .metrics import mse, psnr
from .optimizer import FitConfig, FitDivergedError, FitReport, fit, loss_and_grad
from .pframe import (
    ChangeMap,
    PixelGaussianIndex,
    StaleIndexError,
    build_index,
    change_map,
    encode_pframe,
    select_gaussians,
)
from .pipeline import (
    EncodeError,
    EncodeJob,
    MetricsReport,
    decode_video,
    encode_video,
    report_metrics,
)
from .quantization import (
    QuantSpec,
    QuantizedGaussians,
    calibrate_ptq,
    default_quant_spec,
    dequantize,
    quantize,
    set_from_quantized,
)
from .rasterizer import RenderConfig, footprint, render, render_backward, render_forward

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "BitstreamError",
    "ChangeMap",
    "CorruptPayloadError",
    "EncodeError",
    "EncodeJob",
    "EntropyDecodeError",
    "FitConfig",
    "FitDivergedError",
    "FitReport",
    "FrameRecord",
    "Gaussian2D",
    "GaussianSet",
    "MetricsReport",
    "PixelGaussianIndex",
    "QuantSpec",
    "QuantizedGaussians",
    "RenderConfig",
    "SavingsReport",
    "StaleIndexError",
    "StreamHeader",
    "SuperpixelSegmentation",
    "TruncatedStreamError",
    "UnsupportedVersionError",
    "bitsback_savings",
    "build_index",
    "calibrate_ptq",
    "change_map",
    "chol_from_cov",
    "cov_from_chol",
    "decode_video",
    "default_quant_spec",
    "dequantize",
    "deserialize",
    "encode_pframe",
    "encode_video",
    "entropy_decode",
    "entropy_encode",
    "fit",
    "footprint",
    "full_frame_mask",
    "gaussians_from_segments",
    "loss_and_grad",
    "mse",
    "psnr",
    "quantize",
    "random_init",
    "render",
    "render_backward",
    "render_forward",
    "report_metrics",
    "savings_for_counts",
    "savings_per_pframe_bits",
    "segment_superpixels",
    "select_gaussians",
    "serialize",
    "set_from_quantized",
    "superpixel_init",
]
