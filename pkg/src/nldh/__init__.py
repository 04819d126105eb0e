"""Message hiding inside the quantized latents of neural image codecs.

The toolkit embeds a fixed-length bit message into the latent
representation of a frozen learned image compressor by adding a small
trained perturbation before quantization, and reads it back either from
the compressed container (steganography) or from a re-encoded, possibly
attacked pixel image (watermarking).
"""

from .attacks import AttackSpec, DEFAULT_RANGES, apply_attack, parse_attack, sample_attack
from .codec import (
    CodecBundle,
    FactorizedEntropyModel,
    LatentBlock,
    build_toy_codec,
    load_codec,
    quantize,
    wrap_external_codec,
)
from .data import ingest_dataset, load_image, save_image, write_synthetic_corpus
from .errors import (
    CodecMismatchError,
    ConfigError,
    DimensionError,
    NldhError,
    PayloadCorruptError,
    PerceptualBackendUnavailable,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .evaluation import (
    benchmark_timing,
    bit_error_rate,
    evaluate_model,
    psnr,
    report,
    robustness_sweep,
    roc_auc,
    ssim,
)
from .losses import LossWeights, get_perceptual_backend, message_loss, perceptual_loss, total_loss
from .message import MessageModel, bits_to_hex, hex_to_bits, parse_message, random_message
from .pipeline import (
    HidingModel,
    StegoContainer,
    check_container,
    decode_stego_image,
    embed,
    extract,
    size_overhead,
    watermark_roundtrip,
)
from .steganalysis import detector_report, steganalysis_score
from .training import Checkpoint, PRESETS, TrainConfig, preset_config, train, validate
from .version import __version__

__all__ = [
    "AttackSpec",
    "Checkpoint",
    "CodecBundle",
    "CodecMismatchError",
    "ConfigError",
    "DEFAULT_RANGES",
    "DimensionError",
    "FactorizedEntropyModel",
    "HidingModel",
    "LatentBlock",
    "LossWeights",
    "MessageModel",
    "NldhError",
    "PRESETS",
    "PayloadCorruptError",
    "PerceptualBackendUnavailable",
    "ShapeMismatchError",
    "StegoContainer",
    "TrainConfig",
    "TrainingDivergedError",
    "__version__",
    "apply_attack",
    "benchmark_timing",
    "bit_error_rate",
    "bits_to_hex",
    "build_toy_codec",
    "check_container",
    "decode_stego_image",
    "detector_report",
    "embed",
    "evaluate_model",
    "extract",
    "get_perceptual_backend",
    "hex_to_bits",
    "ingest_dataset",
    "load_codec",
    "load_image",
    "message_loss",
    "parse_attack",
    "parse_message",
    "perceptual_loss",
    "preset_config",
    "psnr",
    "quantize",
    "random_message",
    "report",
    "robustness_sweep",
    "roc_auc",
    "sample_attack",
    "save_image",
    "size_overhead",
    "ssim",
    "steganalysis_score",
    "total_loss",
    "train",
    "validate",
    "watermark_roundtrip",
    "wrap_external_codec",
    "write_synthetic_corpus",
]
