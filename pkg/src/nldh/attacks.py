"""Pixel-domain attack bank for watermark training and evaluation.

Four attacks plus identity: cropout (rectangle replaced with encoded-cover
pixels), dropout (per-pixel replacement with encoded-cover pixels),
additive Gaussian noise, and JPEG compression.  At evaluation time JPEG is
the real codec; during training a differentiable 8x8-DCT surrogate stands
in so gradients reach the message encoder.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ShapeMismatchError

KINDS = ("cropout", "dropout", "gaussian", "jpeg")

# training-time sampling ranges; all configurable via attacks.<kind>.range
DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "cropout": (0.0, 0.3),
    "dropout": (0.0, 0.3),
    "gaussian": (0.0, 0.08),
    "jpeg": (50, 95),
}

_STRENGTH_BOUNDS = {
    "cropout": (0.0, 1.0),
    "dropout": (0.0, 1.0),
    "gaussian": (0.0, 1.0),
    "jpeg": (1, 100),
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    strength: float = 0.0

    def __post_init__(self):
        if self.kind == "identity":
            return
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r} (have {KINDS} + identity)")
        lo, hi = _STRENGTH_BOUNDS[self.kind]
        if not lo <= self.strength <= hi:
            raise ConfigError(f"{self.kind} strength {self.strength} outside [{lo}, {hi}]")
        if self.kind == "jpeg" and self.strength != int(self.strength):
            raise ConfigError(f"jpeg quality must be an integer, got {self.strength}")

    def __str__(self) -> str:
        if self.kind == "identity":
            return "identity"
        value = int(self.strength) if self.kind == "jpeg" else self.strength
        return f"{self.kind}={value:g}" if isinstance(value, float) else f"{self.kind}={value}"


def parse_attack(text: str) -> AttackSpec:
    """Parse the CLI form ``kind=strength`` (or bare ``identity``)."""
    text = text.strip()
    if text == "identity":
        return AttackSpec("identity")
    if "=" not in text:
        raise ConfigError(f"attack must look like kind=strength, got {text!r}")
    kind, _, raw = text.partition("=")
    try:
        strength = float(raw)
    except ValueError:
        raise ConfigError(f"bad attack strength {raw!r}") from None
    return AttackSpec(kind.strip(), strength)


def sample_attack(
    rng: np.random.Generator, ranges: dict[str, tuple[float, float]] | None = None
) -> AttackSpec:
    """Uniform kind over the enabled set, uniform strength within its range."""
    ranges = DEFAULT_RANGES if ranges is None else ranges
    kinds = sorted(ranges)
    if not kinds:
        raise ConfigError("no attacks enabled")
    kind = kinds[int(rng.integers(0, len(kinds)))]
    lo, hi = ranges[kind]
    if kind == "jpeg":
        strength = float(rng.integers(int(lo), int(hi) + 1))
    else:
        strength = float(rng.uniform(lo, hi))
    return AttackSpec(kind, strength)


# ---------------------------------------------------------------------------
# application


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ShapeMismatchError(f"expected (B,3,H,W) or (3,H,W), got {tuple(x.shape)}")
    return x, False


def apply_attack(
    spec: AttackSpec,
    stego: torch.Tensor,
    cover: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    differentiable: bool = False,
) -> torch.Tensor:
    """u(s): attacked image with the same shape and range as the input.

    ``cover`` supplies replacement pixels for cropout/dropout. ``generator``
    drives all randomness. With ``differentiable=True`` the JPEG attack uses
    the DCT surrogate instead of the real codec.
    """
    stego, squeeze = _as_batch(stego)
    if spec.kind in ("cropout", "dropout"):
        if cover is None:
            raise ConfigError(f"{spec.kind} needs the encoded cover for replacement pixels")
        cover, _ = _as_batch(cover)
        if cover.shape != stego.shape:
            raise ShapeMismatchError(
                f"cover {tuple(cover.shape)} does not match stego {tuple(stego.shape)}"
            )

    if spec.kind == "identity":
        out = stego
    elif spec.kind == "gaussian":
        noise = torch.randn(stego.shape, generator=generator, dtype=stego.dtype)
        out = (stego + spec.strength * noise).clamp(0.0, 1.0)
    elif spec.kind == "dropout":
        b, _, h, w = stego.shape
        mask = (torch.rand((b, 1, h, w), generator=generator) < spec.strength).to(stego.dtype)
        out = stego * (1 - mask) + cover * mask
    elif spec.kind == "cropout":
        out = stego.clone()
        b, _, h, w = stego.shape
        for i in range(b):
            top, left, rh, rw = _sample_rect(h, w, spec.strength, generator)
            if rh and rw:
                out[i, :, top : top + rh, left : left + rw] = cover[
                    i, :, top : top + rh, left : left + rw
                ]
    elif spec.kind == "jpeg":
        if differentiable:
            out = differentiable_jpeg(stego, spec.strength)
        else:
            out = jpeg_real(stego, int(spec.strength))
    else:  # pragma: no cover - AttackSpec validates kinds
        raise ConfigError(f"unhandled attack {spec.kind}")
    return out.squeeze(0) if squeeze else out


def _sample_rect(
    h: int, w: int, area_ratio: float, generator: torch.Generator | None
) -> tuple[int, int, int, int]:
    """Random axis-aligned rectangle covering ~area_ratio of the image."""
    if area_ratio <= 0:
        return 0, 0, 0, 0
    if area_ratio >= 1:
        return 0, 0, h, w
    area = area_ratio * h * w
    u = torch.rand(3, generator=generator)
    aspect = math.exp(float(u[0]) * (math.log(2.0) - math.log(0.5)) + math.log(0.5))
    rh = min(h, max(1, round(math.sqrt(area * aspect))))
    rw = min(w, max(1, round(area / rh)))
    top = int(float(u[1]) * (h - rh + 1))
    left = int(float(u[2]) * (w - rw + 1))
    return top, left, rh, rw


def jpeg_real(images: torch.Tensor, quality: int) -> torch.Tensor:
    """Round-trip through the actual JPEG codec (evaluation path)."""
    images, squeeze = _as_batch(images)
    outs = []
    for img in images:
        arr = img.detach().clamp(0, 1).mul(255).round().byte().permute(1, 2, 0).numpy()
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        outs.append(torch.from_numpy(decoded).permute(2, 0, 1))
    out = torch.stack(outs)
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# differentiable JPEG surrogate

# Annex K base quantization tables
_LUMA_TABLE = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float32,
)
_CHROMA_TABLE = torch.tensor(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=torch.float32,
)


def _dct_matrix() -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float32)
    n = torch.arange(8, dtype=torch.float32)
    mat = torch.cos((2 * n[None, :] + 1) * k[:, None] * math.pi / 16)
    mat[0] *= 1 / math.sqrt(2)
    return mat * 0.5


_DCT = _dct_matrix()


def quality_to_scale(quality: float) -> float:
    """libjpeg quality -> quantization-table scale percentage."""
    quality = max(1.0, min(100.0, float(quality)))
    if quality < 50:
        return 5000.0 / quality
    return 200.0 - 2.0 * quality


def _scaled_table(base: torch.Tensor, quality: float) -> torch.Tensor:
    scale = quality_to_scale(quality)
    return torch.clamp(torch.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def _soft_round(x: torch.Tensor) -> torch.Tensor:
    """Differentiable stand-in for rounding: r + (x - r)^3 around each integer."""
    r = torch.round(x).detach()
    return r + (x - r) ** 3


def _blockify(plane: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    b, h, w = plane.shape
    blocks = plane.reshape(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)
    return blocks.reshape(b, -1, 8, 8), (h // 8, w // 8)


def _unblockify(blocks: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    b = blocks.shape[0]
    gh, gw = grid
    return (
        blocks.reshape(b, gh, gw, 8, 8).permute(0, 1, 3, 2, 4).reshape(b, gh * 8, gw * 8)
    )


def _jpeg_plane(plane: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """DCT -> quantize (soft) -> dequantize -> inverse DCT for one plane."""
    blocks, grid = _blockify(plane * 255.0 - 128.0)
    coeff = _DCT @ blocks @ _DCT.T
    coeff = _soft_round(coeff / table) * table
    pixels = _DCT.T @ coeff @ _DCT
    return _unblockify((pixels + 128.0) / 255.0, grid)


def differentiable_jpeg(images: torch.Tensor, quality: float) -> torch.Tensor:
    """JPEG surrogate: real tables and chroma subsampling, soft rounding.

    Matches the real codec's pipeline (BT.601 YCbCr, 4:2:0 below quality 95,
    Annex K tables with libjpeg quality scaling) closely enough for training
    gradients; evaluation always uses :func:`jpeg_real`.
    """
    if not 10 <= quality <= 100:
        raise ConfigError(f"surrogate jpeg quality must be in [10, 100], got {quality}")
    images, squeeze = _as_batch(images)
    h, w = images.shape[-2:]
    mult = 16  # luma 8x8 blocks + one level of chroma subsampling
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    x = F.pad(images, (0, pw, 0, ph), mode="replicate") if (ph or pw) else images

    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5

    subsample = quality < 95
    if subsample:
        cb = F.avg_pool2d(cb.unsqueeze(1), 2).squeeze(1)
        cr = F.avg_pool2d(cr.unsqueeze(1), 2).squeeze(1)

    y = _jpeg_plane(y, _scaled_table(_LUMA_TABLE, quality))
    chroma_table = _scaled_table(_CHROMA_TABLE, quality)
    cb = _jpeg_plane(cb, chroma_table)
    cr = _jpeg_plane(cr, chroma_table)

    if subsample:
        cb = F.interpolate(cb.unsqueeze(1), scale_factor=2, mode="bilinear", align_corners=False).squeeze(1)
        cr = F.interpolate(cr.unsqueeze(1), scale_factor=2, mode="bilinear", align_corners=False).squeeze(1)

    cb = cb - 0.5
    cr = cr - 0.5
    out = torch.stack(
        [y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], dim=1
    ).clamp(0.0, 1.0)
    out = out[..., :h, :w]
    return out.squeeze(0) if squeeze else out
