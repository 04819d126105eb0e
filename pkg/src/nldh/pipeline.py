"""End-to-end hiding flows: embed, transport container, extract, watermark.

Embedding adds a tiled message perturbation onto the cover's latent
(y_e = y + tile(h_e(m))), quantizes, entropy-codes and packs the result
into a small container file.  Extraction reverses transport and reads the
message with h_d.  The watermark path additionally survives a pixel-space
attack followed by re-encoding with the same frozen codec.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import serial
from .attacks import AttackSpec, apply_attack
from .codec import CodecBundle, LatentBlock, quantize
from .data import image_to_tensor, tensor_to_image
from .errors import CodecMismatchError, ConfigError, PayloadCorruptError
from .message import MessageModel, check_message, tile_perturbation

CONTAINER_MAGIC = b"NLS1"
CONTAINER_SUFFIX = ".nls"


@dataclass
class StegoContainer:
    """Transmitted artifact: header + entropy-coded embedded latent."""

    codec_id: int
    quality: int
    image_wh: tuple[int, int]  # (width, height) of the original cover
    latent_shape: tuple[int, int, int]
    n: int
    payload: bytes

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CONTAINER_MAGIC)
        serial.write_u8(buf, self.codec_id)
        serial.write_u8(buf, self.quality)
        serial.write_u16(buf, self.image_wh[0])
        serial.write_u16(buf, self.image_wh[1])
        for dim in self.latent_shape:
            serial.write_u16(buf, dim)
        serial.write_u16(buf, self.n)
        serial.write_u32(buf, len(self.payload))
        buf.write(self.payload)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StegoContainer":
        if raw[:4] != CONTAINER_MAGIC:
            raise PayloadCorruptError(f"not a stego container (magic {raw[:4]!r})", offset=0)
        buf = io.BytesIO(raw[4:])
        codec_id = serial.read_u8(buf)
        quality = serial.read_u8(buf)
        width = serial.read_u16(buf)
        height = serial.read_u16(buf)
        latent_shape = tuple(serial.read_u16(buf) for _ in range(3))
        n = serial.read_u16(buf)
        declared = serial.read_u32(buf)
        payload = buf.read()
        if len(payload) != declared:
            raise PayloadCorruptError(
                f"payload truncated: header declares {declared} bytes, file has {len(payload)}",
                offset=4 + buf.tell() - len(payload),
            )
        return cls(codec_id, quality, (width, height), latent_shape, n, payload)

    @classmethod
    def load(cls, path: str | Path) -> "StegoContainer":
        return cls.from_bytes(Path(path).read_bytes())


class HidingModel:
    """Frozen codec + trained message codec, ready for embed/extract."""

    MODES = ("steganography", "watermark")

    def __init__(
        self,
        codec: CodecBundle,
        message_model: MessageModel,
        mode: str = "steganography",
        trained: bool = False,
    ):
        if mode not in self.MODES:
            raise ConfigError(f"mode must be one of {self.MODES}, got {mode!r}")
        if message_model.latent_channels != codec.latent_channels:
            raise CodecMismatchError(
                f"message model built for {message_model.latent_channels} latent channels, "
                f"codec has {codec.latent_channels}"
            )
        if not codec.frozen:
            codec.freeze()
        self.codec = codec
        self.message_model = message_model
        self.mode = mode
        self.trained = trained

    @property
    def n(self) -> int:
        return self.message_model.n


@dataclass
class EmbedResult:
    container: StegoContainer
    stego: np.ndarray  # uint8 (H,W,3), decode of the quantized embedded latent
    encoded_cover: np.ndarray  # uint8 (H,W,3), decode of the quantized clean latent


def _decode_cropped(codec: CodecBundle, latent: LatentBlock, hw: tuple[int, int]) -> np.ndarray:
    img = codec.decode_image(latent)[: hw[0], : hw[1]]
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def embed(model: HidingModel, cover, bits: np.ndarray, allow_untrained: bool = False) -> EmbedResult:
    """y -> y + tile(h_e(m)) -> quantize -> entropy code, plus decoded views.

    Returns the transmitted container together with the stego image and the
    encoded cover (the quantized clean reconstruction) that quality metrics
    compare against.
    """
    if not model.trained and not allow_untrained:
        raise ConfigError("model is untrained; pass allow_untrained=True to embed anyway")
    bits = check_message(bits, model.n)
    y = model.codec.encode_latent(cover)
    hw = y.image_hw
    pert = model.message_model.encode_message(bits).data
    y_e = LatentBlock(y.data + tile_perturbation(pert, y.spatial), image_hw=hw)
    q_embedded = quantize(y_e, "round")
    q_clean = quantize(y, "round")
    payload = model.codec.entropy_code(q_embedded)
    container = StegoContainer(
        codec_id=model.codec.codec_id,
        quality=model.codec.quality,
        image_wh=(hw[1], hw[0]),
        latent_shape=(q_embedded.channels, *q_embedded.spatial),
        n=model.n,
        payload=payload,
    )
    return EmbedResult(
        container=container,
        stego=_decode_cropped(model.codec, q_embedded, hw),
        encoded_cover=_decode_cropped(model.codec, q_clean, hw),
    )


def check_container(model: HidingModel, container: StegoContainer) -> None:
    """Guards shared by extract and public decode."""
    if container.codec_id != model.codec.codec_id or container.quality != model.codec.quality:
        raise CodecMismatchError(
            f"container was produced by codec id={container.codec_id} quality={container.quality}; "
            f"model has id={model.codec.codec_id} quality={model.codec.quality}"
        )
    if container.n != model.n:
        raise CodecMismatchError(
            f"container carries {container.n}-bit messages, model expects {model.n}"
        )
    _check_shape_law(container, model.codec.downsample_factor, model.codec.latent_channels)


def _check_shape_law(container: StegoContainer, downsample: int, channels: int) -> None:
    w, h = container.image_wh
    c, lh, lw = container.latent_shape
    expect = (channels, math.ceil(h / downsample), math.ceil(w / downsample))
    if (c, lh, lw) != expect:
        raise PayloadCorruptError(
            f"header latent shape {container.latent_shape} inconsistent with "
            f"{w}x{h} image at downsample {downsample} (expected {expect})"
        )


def extract(model: HidingModel, container: StegoContainer) -> np.ndarray:
    """Transport-side message recovery: entropy-decode then h_d."""
    check_container(model, container)
    latent = model.codec.entropy_decode(container.payload, container.latent_shape)
    _, bits = model.message_model.decode_message(latent)
    return bits


def decode_stego_image(codec: CodecBundle, container: StegoContainer) -> np.ndarray:
    """Anyone holding g_d can view the stego image; no message keys needed."""
    if container.codec_id != codec.codec_id or container.quality != codec.quality:
        raise CodecMismatchError("container codec does not match the supplied codec")
    _check_shape_law(container, codec.downsample_factor, codec.latent_channels)
    latent = codec.entropy_decode(container.payload, container.latent_shape)
    w, h = container.image_wh
    return _decode_cropped(codec, latent, (h, w))


def watermark_roundtrip(
    model: HidingModel,
    stego: np.ndarray,
    attack: AttackSpec,
    cover: np.ndarray | None = None,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Attack in pixel space, save as 8-bit, re-encode, read the message.

    ``cover`` supplies replacement pixels for cropout/dropout (the encoded
    cover, matching how those attacks are trained).
    """
    s = image_to_tensor(stego)
    c = image_to_tensor(cover) if cover is not None else None
    attacked = apply_attack(attack, s, c, generator=generator)
    attacked_u8 = tensor_to_image(attacked)  # attacker stores an 8-bit image
    y = model.codec.encode_latent(attacked_u8)
    q = quantize(y, "round")
    _, bits = model.message_model.decode_message(q)
    return bits


def size_overhead(model: HidingModel, cover, bits: np.ndarray, allow_untrained: bool = False) -> float:
    """Payload growth caused by embedding, in percent of the clean payload."""
    if not model.trained and not allow_untrained:
        raise ConfigError("model is untrained; pass allow_untrained=True")
    bits = check_message(bits, model.n)
    y = model.codec.encode_latent(cover)
    pert = model.message_model.encode_message(bits).data
    y_e = LatentBlock(y.data + tile_perturbation(pert, y.spatial))
    clean = model.codec.entropy_code(quantize(y, "round"))
    embedded = model.codec.entropy_code(quantize(y_e, "round"))
    return 100.0 * (len(embedded) - len(clean)) / len(clean)
