"""Trainable message encoder/decoder pair operating in the latent domain.

The encoder turns an n-bit message into a (C, 8, 8) perturbation that is
added onto compressed-image latents; the decoder reads the message back
from a (possibly perturbed, possibly quantized) latent.  For latents larger
than the 8x8 training grid the perturbation is tiled and per-tile decoder
logits are averaged, so one message redundantly covers the whole image.
"""

from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import serial
from .codec import LatentBlock, init_module
from .errors import DimensionError, PayloadCorruptError, ShapeMismatchError

MODEL_MAGIC = b"NLDH"
MODEL_VERSION = 1

BASE_SPATIAL = 8  # message nets are built for 8x8 latent grids


# ---------------------------------------------------------------------------
# bit message helpers


def random_message(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=n).astype(np.uint8)


def check_message(bits: np.ndarray, n: int) -> np.ndarray:
    bits = np.asarray(bits).ravel()
    if bits.size != n:
        raise ShapeMismatchError(f"message has {bits.size} bits, model expects {n}")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("message bits must be 0 or 1")
    return bits.astype(np.uint8)


def bits_to_hex(bits: np.ndarray) -> str:
    bits = np.asarray(bits).ravel().astype(np.uint8)
    if bits.size % 4:
        raise ValueError("bit count must be a multiple of 4 for hex form")
    value = int("".join("1" if b else "0" for b in bits), 2)
    return format(value, f"0{bits.size // 4}x")


def hex_to_bits(hexstr: str, n: int) -> np.ndarray:
    hexstr = hexstr.strip().lower().removeprefix("0x")
    if len(hexstr) != n // 4:
        raise ValueError(f"expected {n // 4} hex digits for an {n}-bit message, got {len(hexstr)}")
    try:
        value = int(hexstr, 16)
    except ValueError:
        raise ValueError(f"invalid hex message {hexstr!r}") from None
    return np.array([(value >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.uint8)


def parse_message(text: str, n: int) -> np.ndarray:
    """Accepts an n/4-digit hex string or an n-digit raw bit string."""
    text = text.strip()
    if len(text) == n and set(text) <= {"0", "1"}:
        return np.array([int(ch) for ch in text], dtype=np.uint8)
    return hex_to_bits(text, n)


# ---------------------------------------------------------------------------
# networks


class MessageEncoder(nn.Module):
    """h_e: n bits -> (C, 8, 8) perturbation.

    A linear layer lifts the message to 64 values, which are read as a
    1-channel 8x8 grid and expanded to C channels by a conv + batch-norm +
    leaky-ReLU block.
    """

    def __init__(self, n: int = 32, latent_channels: int = 320):
        super().__init__()
        self.n = n
        self.latent_channels = latent_channels
        self.fc = nn.Linear(n, BASE_SPATIAL * BASE_SPATIAL)
        self.conv = nn.Conv2d(1, latent_channels, 3, stride=1, padding=1)
        self.bn = nn.BatchNorm2d(latent_channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.dim() != 2 or m.shape[1] != self.n:
            raise ShapeMismatchError(f"expected (B,{self.n}) messages, got {tuple(m.shape)}")
        x = self.fc(m).reshape(-1, 1, BASE_SPATIAL, BASE_SPATIAL)
        return self.act(self.bn(self.conv(x)))


class MessageDecoder(nn.Module):
    """h_d: (C, 8, 8) latent tile -> n logits."""

    def __init__(self, n: int = 32, latent_channels: int = 320):
        super().__init__()
        self.n = n
        self.latent_channels = latent_channels
        c = latent_channels
        self.convs = nn.Sequential(
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc1 = nn.Linear(c, 512)
        self.fc2 = nn.Linear(512, n)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] != self.latent_channels:
            raise ShapeMismatchError(
                f"expected (B,{self.latent_channels},8,8) latents, got {tuple(y.shape)}"
            )
        if y.shape[2] != BASE_SPATIAL or y.shape[3] != BASE_SPATIAL:
            raise ShapeMismatchError(f"decoder consumes 8x8 tiles, got {tuple(y.shape[2:])}")
        h = self.convs(y).flatten(1)
        return self.fc2(self.fc1(h))


def tile_perturbation(pert: torch.Tensor, target_spatial: tuple[int, int]) -> torch.Tensor:
    """Repeat a (..., C, 8, 8) perturbation over a (H_l, W_l) grid, cropping edges."""
    h, w = target_spatial
    if h < BASE_SPATIAL or w < BASE_SPATIAL:
        raise DimensionError(f"target latent {h}x{w} smaller than the {BASE_SPATIAL}x{BASE_SPATIAL} base tile")
    if pert.shape[-2:] != (BASE_SPATIAL, BASE_SPATIAL):
        raise ShapeMismatchError(f"perturbation must be 8x8, got {tuple(pert.shape[-2:])}")
    reps_h = math.ceil(h / BASE_SPATIAL)
    reps_w = math.ceil(w / BASE_SPATIAL)
    reps = (1,) * (pert.dim() - 2) + (reps_h, reps_w)
    return pert.repeat(*reps)[..., :h, :w]


def iter_full_tiles(latent: torch.Tensor):
    """Yield all complete 8x8 tiles of a (..., H, W) latent, anchored at (0,0)."""
    h, w = latent.shape[-2:]
    if h < BASE_SPATIAL or w < BASE_SPATIAL:
        raise DimensionError(f"latent {h}x{w} smaller than one {BASE_SPATIAL}x{BASE_SPATIAL} tile")
    for i in range(h // BASE_SPATIAL):
        for j in range(w // BASE_SPATIAL):
            yield latent[
                ...,
                i * BASE_SPATIAL : (i + 1) * BASE_SPATIAL,
                j * BASE_SPATIAL : (j + 1) * BASE_SPATIAL,
            ]


def aggregate_tiled_logits(decoder: MessageDecoder, latent: torch.Tensor) -> torch.Tensor:
    """Average decoder logits over every full 8x8 tile.

    ``latent`` is (C,H,W) or (B,C,H,W); returns (n,) or (B,n) accordingly.
    """
    squeeze = latent.dim() == 3
    if squeeze:
        latent = latent.unsqueeze(0)
    tiles = list(iter_full_tiles(latent))
    stacked = torch.cat(tiles, dim=0)  # (T*B, C, 8, 8)
    logits = decoder(stacked).reshape(len(tiles), latent.shape[0], -1).mean(dim=0)
    return logits[0] if squeeze else logits


# ---------------------------------------------------------------------------
# bundled pair


class MessageModel:
    """Paired h_e/h_d with persistence; frozen codec supplies the channel count."""

    def __init__(self, n: int, latent_channels: int, seed: int | None = None):
        self.n = n
        self.latent_channels = latent_channels
        self.encoder = MessageEncoder(n, latent_channels)
        self.decoder = MessageDecoder(n, latent_channels)
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
            init_module(self.encoder, gen)
            init_module(self.decoder, gen)
        self.meta: dict = {}

    def train_mode(self) -> None:
        self.encoder.train()
        self.decoder.train()

    def eval_mode(self) -> None:
        self.encoder.eval()
        self.decoder.eval()

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    # -- inference ----------------------------------------------------

    def message_tensor(self, bits: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(check_message(bits, self.n).astype(np.float32)).unsqueeze(0)

    @torch.no_grad()
    def encode_message(self, bits: np.ndarray) -> LatentBlock:
        """h_e(m) as a base-tile perturbation (eval mode, deterministic)."""
        self.encoder.eval()
        pert = self.encoder(self.message_tensor(bits))[0]
        return LatentBlock(pert, quantized=False)

    @torch.no_grad()
    def decode_message(self, latent: LatentBlock | torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Returns (logits, hard bits); tiles larger latents transparently."""
        self.decoder.eval()
        data = latent.data if isinstance(latent, LatentBlock) else latent
        logits = aggregate_tiled_logits(self.decoder, data.float())
        logits_np = logits.numpy()
        return logits_np, (logits_np > 0).astype(np.uint8)

    # -- persistence ----------------------------------------------------

    def _split_state(self, module: nn.Module) -> tuple[dict, dict]:
        params = dict(module.named_parameters())
        state = module.state_dict()
        weights = {k: v for k, v in state.items() if k in params}
        stats = {k: v for k, v in state.items() if k not in params}
        return weights, stats

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MODEL_MAGIC)
        serial.write_u8(buf, MODEL_VERSION)
        serial.write_u16(buf, self.n)
        serial.write_u16(buf, self.latent_channels)
        enc_w, enc_s = self._split_state(self.encoder)
        dec_w, dec_s = self._split_state(self.decoder)
        serial.write_block(buf, serial.state_dict_to_bytes(enc_w))
        serial.write_block(buf, serial.state_dict_to_bytes(dec_w))
        norm = {f"encoder.{k}": v for k, v in enc_s.items()}
        norm.update({f"decoder.{k}": v for k, v in dec_s.items()})
        serial.write_block(buf, serial.state_dict_to_bytes(norm))
        serial.write_json_block(buf, self.meta)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MessageModel":
        if raw[:4] != MODEL_MAGIC:
            raise PayloadCorruptError(f"not a message-model file (magic {raw[:4]!r})", offset=0)
        buf = io.BytesIO(raw[4:])
        version = serial.read_u8(buf)
        if version != MODEL_VERSION:
            raise PayloadCorruptError(f"unsupported message-model version {version}", offset=4)
        n = serial.read_u16(buf)
        channels = serial.read_u16(buf)
        model = cls(n, channels)
        enc_w = serial.bytes_to_state_dict(serial.read_block(buf))
        dec_w = serial.bytes_to_state_dict(serial.read_block(buf))
        norm = serial.bytes_to_state_dict(serial.read_block(buf))
        model.meta = serial.read_json_block(buf)
        enc_state = dict(enc_w)
        dec_state = dict(dec_w)
        for k, v in norm.items():
            scope, _, rest = k.partition(".")
            (enc_state if scope == "encoder" else dec_state)[rest] = v
        model.encoder.load_state_dict(enc_state)
        model.decoder.load_state_dict(dec_state)
        model.eval_mode()
        return model

    @classmethod
    def load(cls, path: str | Path) -> "MessageModel":
        return cls.from_bytes(Path(path).read_bytes())
