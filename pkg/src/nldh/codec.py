"""Frozen image-codec interface: transforms, quantization and entropy coding.

A :class:`CodecBundle` wraps an analysis transform ``g_e`` (image -> latent),
a synthesis transform ``g_d`` (latent -> image) and a per-coefficient
probability model.  Message hiding only ever *reads* the codec: its weights
are frozen, perturbations live in the latent domain, and the entropy coder
turns quantized latents into the transmitted byte stream.

Two bundles are provided: a small self-trained toy codec (so everything is
testable without pretrained downloads) and an adapter that wraps external
pretrained codecs exposing analysis/synthesis callables.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import serial
from .errors import (
    CodecMismatchError,
    DimensionError,
    PayloadCorruptError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .rangecoder import (
    ArithmeticDecoder,
    ArithmeticEncoder,
    FrequencyTable,
    decode_raw_u32,
    encode_raw_u32,
)

CODEC_MAGIC = b"NLC1"
CODEC_VERSION = 1

CODEC_ID_TOY = 1
CODEC_ID_EXTERNAL = 2

_RAW_OFFSET = 1 << 31  # maps signed escape values onto u32


# ---------------------------------------------------------------------------
# latent container


@dataclass
class LatentBlock:
    """One image's latent coefficients, shape (channels, height, width)."""

    data: torch.Tensor
    quantized: bool = False
    image_hw: tuple[int, int] | None = None  # pre-padding pixel dims, if known

    def __post_init__(self):
        if self.data.dim() != 3:
            raise DimensionError(f"latent must be 3-D (C,H,W), got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def to_int_array(self) -> np.ndarray:
        if not self.quantized:
            raise ValueError("latent is not quantized")
        return self.data.detach().cpu().numpy().round().astype(np.int32)


def quantize(latent: LatentBlock, mode: str = "round", generator: torch.Generator | None = None) -> LatentBlock:
    """Unit scalar quantization and its training surrogates.

    ``round``  -- nearest integer (ties to even), marks the block quantized.
    ``noise``  -- additive uniform noise on [-0.5, 0.5] (differentiable proxy).
    ``ste``    -- straight-through rounding: rounds forward, identity gradient.
    """
    if mode == "round":
        return LatentBlock(torch.round(latent.data), quantized=True, image_hw=latent.image_hw)
    if mode == "noise":
        noise = torch.rand(latent.data.shape, generator=generator, dtype=latent.data.dtype) - 0.5
        return LatentBlock(latent.data + noise, quantized=False, image_hw=latent.image_hw)
    if mode == "ste":
        data = latent.data + (torch.round(latent.data) - latent.data).detach()
        return LatentBlock(data, quantized=True, image_hw=latent.image_hw)
    raise ValueError(f"unknown quantization mode {mode!r}")


def quantize_tensor(y: torch.Tensor, mode: str, generator: torch.Generator | None = None) -> torch.Tensor:
    """Batched tensor flavor of :func:`quantize`, used inside training loops."""
    if mode == "round":
        return torch.round(y)
    if mode == "noise":
        return y + (torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5)
    if mode == "ste":
        return y + (torch.round(y) - y).detach()
    raise ValueError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------------------
# factorized entropy model (univariate monotone-CDF network per channel)


class FactorizedEntropyModel(nn.Module):
    """Fully factorized learned prior.

    Each channel gets an independent scalar density modeled through a small
    monotone network whose sigmoid output is the CDF; the probability of an
    integer bin is cdf(v + 0.5) - cdf(v - 0.5).
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3)):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1, *self.filters, 1)
        scale = 10.0  # initial spread of the density
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            self._matrices.append(nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init)))
            self._biases.append(nn.Parameter(torch.empty(channels, dims[k + 1], 1)))
            if k < len(dims) - 2:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    def init_biases(self, generator: torch.Generator | None = None) -> None:
        for b in self._biases:
            with torch.no_grad():
                b.uniform_(-0.5, 0.5, generator=generator)

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, N) -> (channels, 1, N)
        for k in range(len(self._matrices)):
            x = torch.matmul(F.softplus(self._matrices[k]), x) + self._biases[k]
            if k < len(self._factors):
                x = x + torch.tanh(self._factors[k]) * torch.tanh(x)
        return x

    def likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """Per-coefficient bin probability; y is (B, C, H, W)."""
        b, c, h, w = y.shape
        flat = y.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        # evaluate both sigmoids on their stable side
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return p.reshape(c, b, h, w).permute(1, 0, 2, 3).clamp_min(1e-9)

    def bits(self, y: torch.Tensor) -> torch.Tensor:
        """Total information content of a batch, in bits."""
        return -torch.log2(self.likelihood(y)).sum()

    @torch.no_grad()
    def integer_pmf(self, lo: int, hi: int) -> torch.Tensor:
        """PMF over the integer grid [lo, hi] per channel, shape (C, hi-lo+1)."""
        grid = torch.arange(lo, hi + 1, dtype=torch.float32)
        y = grid.reshape(1, 1, -1).repeat(self.channels, 1, 1)
        lower = torch.sigmoid(self._logits(y - 0.5))
        upper = torch.sigmoid(self._logits(y + 0.5))
        return (upper - lower).clamp_min(0.0).squeeze(1)

    @torch.no_grad()
    def support(self, tail_mass: float = 1e-4, max_radius: int = 255) -> tuple[int, int]:
        """Smallest integer range holding all but ``tail_mass`` probability."""
        for radius in range(1, max_radius + 1):
            edges = torch.tensor([-radius - 0.5, radius + 0.5]).reshape(1, 1, 2)
            cdf = torch.sigmoid(self._logits(edges.repeat(self.channels, 1, 1)))
            if bool((cdf[:, 0, 0] < tail_mass).all() and (cdf[:, 0, 1] > 1 - tail_mass).all()):
                return -radius, radius
        return -max_radius, max_radius


@dataclass
class ChannelTables:
    """Integer frequency tables driving the arithmetic coder.

    Symbol ``i`` represents value ``lo + i``; the final symbol of every
    channel is an escape for out-of-range values (followed by a raw u32).
    """

    lo: list[int]
    freqs: list[list[int]]
    _tables: list[FrequencyTable] = field(default_factory=list, repr=False)

    def table(self, channel: int) -> FrequencyTable:
        if not self._tables:
            self._tables = [FrequencyTable(f) for f in self.freqs]
        return self._tables[channel]

    def symbol_of(self, channel: int, value: int) -> int | None:
        s = value - self.lo[channel]
        if 0 <= s < len(self.freqs[channel]) - 1:
            return s
        return None

    def bits_of(self, channel: int, value: int) -> float:
        tab = self.table(channel)
        s = self.symbol_of(channel, value)
        if s is None:
            escape = len(self.freqs[channel]) - 1
            return -math.log2(tab.frequencies[escape] / tab.total) + 32.0
        return -math.log2(tab.frequencies[s] / tab.total)


def tables_from_pmf(pmf: np.ndarray, lo: int) -> ChannelTables:
    """Quantize per-channel pmfs (C, L) into integer frequency tables."""
    c, length = pmf.shape
    los, freqs = [], []
    budget = (1 << 16) - (length + 1)  # leave headroom for +1 floor and escape
    for ch in range(c):
        p = np.maximum(pmf[ch], 0.0)
        p = p / p.sum() if p.sum() > 0 else np.full(length, 1.0 / length)
        f = np.floor(p * budget).astype(np.int64) + 1
        freqs.append([*f.tolist(), 1])  # trailing escape symbol
        los.append(lo)
    return ChannelTables(lo=los, freqs=freqs)


def tables_from_samples(values: np.ndarray, channels: int) -> ChannelTables:
    """Histogram-based tables for codecs without an inspectable prior.

    ``values`` is any array of quantized latents shaped (..., C, H, W); each
    channel's histogram is Laplace-smoothed so nearby unseen values stay
    cheap, and the escape symbol covers true outliers.
    """
    flat = values.reshape(-1, channels, values.shape[-2], values.shape[-1])
    los, freqs = [], []
    for ch in range(channels):
        v = flat[:, ch].ravel().astype(np.int64)
        lo, hi = int(v.min()) - 2, int(v.max()) + 2
        counts = np.bincount(v - lo, minlength=hi - lo + 1).astype(np.float64) + 0.5
        p = counts / counts.sum()
        budget = (1 << 16) - (len(p) + 1)
        f = np.floor(p * budget).astype(np.int64) + 1
        los.append(lo)
        freqs.append([*f.tolist(), 1])
    return ChannelTables(lo=los, freqs=freqs)


# ---------------------------------------------------------------------------
# toy codec networks


class ToyAnalysis(nn.Module):
    """Four stride-2 convolutions: (3,H,W) -> (C, H/16, W/16)."""

    def __init__(self, latent_channels: int = 64, widths: tuple[int, int, int] = (16, 32, 48)):
        super().__init__()
        w1, w2, w3 = widths
        self.net = nn.Sequential(
            nn.Conv2d(3, w1, 5, stride=2, padding=2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w1, w2, 5, stride=2, padding=2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w2, w3, 5, stride=2, padding=2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w3, latent_channels, 5, stride=2, padding=2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _UpsampleConv(nn.Module):
    """Nearest-neighbor 2x upsample followed by a convolution.

    Optimizes far better than a strided transposed convolution at this
    scale and avoids its checkerboard artifacts.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 5, stride=1, padding=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class ToySynthesis(nn.Module):
    """Mirror of :class:`ToyAnalysis`: four 2x upsampling stages."""

    def __init__(self, latent_channels: int = 64, widths: tuple[int, int, int] = (16, 32, 48)):
        super().__init__()
        w1, w2, w3 = widths
        self.net = nn.Sequential(
            _UpsampleConv(latent_channels, w3),
            nn.LeakyReLU(0.2, inplace=True),
            _UpsampleConv(w3, w2),
            nn.LeakyReLU(0.2, inplace=True),
            _UpsampleConv(w2, w1),
            nn.LeakyReLU(0.2, inplace=True),
            _UpsampleConv(w1, 3),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


def init_module(module: nn.Module, generator: torch.Generator) -> None:
    """Default conv/linear init driven by an explicit generator.

    Reproduces PyTorch's kaiming-uniform(a=sqrt(5)) weight + fan-in bias
    scheme but samples through ``generator`` so construction order and
    global RNG state cannot change the result.
    """
    for _, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                # matches torch's fan-in: weight dim 1 x receptive field
                fan_in = m.weight.shape[1] * m.kernel_size[0] * m.kernel_size[1]
            else:
                fan_in = m.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


# ---------------------------------------------------------------------------
# the bundle


class CodecBundle:
    """Frozen codec: transforms + entropy model + integer coder tables."""

    def __init__(
        self,
        analysis: nn.Module,
        synthesis: nn.Module,
        entropy_model: FactorizedEntropyModel | None,
        latent_channels: int,
        downsample_factor: int,
        tables: ChannelTables,
        codec_id: int = CODEC_ID_TOY,
        quality: int = 8,
        meta: dict | None = None,
    ):
        self.analysis = analysis
        self.synthesis = synthesis
        self.entropy_model = entropy_model
        self.latent_channels = latent_channels
        self.downsample_factor = downsample_factor
        self.tables = tables
        self.codec_id = codec_id
        self.quality = quality
        self.meta = dict(meta or {})
        self.frozen = False
        self.freeze()

    # -- lifecycle ----------------------------------------------------

    def freeze(self) -> None:
        for mod in (self.analysis, self.synthesis, self.entropy_model):
            if isinstance(mod, nn.Module):
                mod.eval()
                for p in mod.parameters():
                    p.requires_grad_(False)
        self.frozen = True

    def parameter_snapshot(self) -> bytes:
        blobs = []
        for mod in (self.analysis, self.synthesis, self.entropy_model):
            if isinstance(mod, nn.Module):
                blobs.append(serial.state_dict_to_bytes(mod.state_dict()))
        return b"".join(blobs)

    # -- padding ------------------------------------------------------

    def pad_to_grid(self, x: torch.Tensor) -> torch.Tensor:
        """Replicate-pad right/bottom so H and W divide the downsample factor."""
        h, w = x.shape[-2], x.shape[-1]
        d = self.downsample_factor
        ph = (d - h % d) % d
        pw = (d - w % d) % d
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return x

    # -- transforms ---------------------------------------------------

    def _as_batched_tensor(self, image) -> tuple[torch.Tensor, tuple[int, int]]:
        if isinstance(image, np.ndarray):
            if image.ndim != 3 or image.shape[2] != 3:
                raise DimensionError(f"expected (H,W,3) image, got {image.shape}")
            arr = image.astype(np.float32)
            if image.dtype == np.uint8:
                arr = arr / 255.0
            t = torch.from_numpy(np.transpose(arr, (2, 0, 1)))
        elif isinstance(image, torch.Tensor):
            t = image.float()
            if t.dim() == 4 and t.shape[0] == 1:
                t = t[0]
            if t.dim() != 3 or t.shape[0] != 3:
                raise DimensionError(f"expected (3,H,W) tensor, got {tuple(image.shape)}")
        else:
            raise TypeError(f"unsupported image type {type(image)!r}")
        hw = (t.shape[-2], t.shape[-1])
        if min(hw) < self.downsample_factor:
            raise DimensionError(
                f"image {hw} smaller than one latent cell ({self.downsample_factor}px)"
            )
        return t.unsqueeze(0), hw

    def encode_latent(self, image) -> LatentBlock:
        """g_e: pixel image in [0,1] -> continuous latent (C, ceil(H/d), ceil(W/d))."""
        x, hw = self._as_batched_tensor(image)
        with torch.no_grad():
            y = self.analysis(self.pad_to_grid(x))
        return LatentBlock(y[0], quantized=False, image_hw=hw)

    def decode_image(self, latent: LatentBlock) -> np.ndarray:
        """g_d: latent -> pixel array in [0,1] at the padded resolution."""
        self.check_latent_shape(latent)
        with torch.no_grad():
            x = self.synthesis(latent.data.unsqueeze(0).float())
        return x[0].clamp(0.0, 1.0).permute(1, 2, 0).numpy()

    def decode_tensor(self, y: torch.Tensor) -> torch.Tensor:
        """Batched synthesis without clamping (training use)."""
        return self.synthesis(y)

    def check_latent_shape(self, latent: LatentBlock) -> None:
        if latent.channels != self.latent_channels:
            raise ShapeMismatchError(
                f"latent has {latent.channels} channels, codec expects {self.latent_channels}"
            )

    # -- entropy coding -------------------------------------------------

    def entropy_code(self, latent: LatentBlock) -> bytes:
        """Losslessly code a quantized latent; raster order within channels."""
        if not latent.quantized:
            raise ValueError("entropy_code requires a quantized latent")
        self.check_latent_shape(latent)
        values = latent.to_int_array()
        enc = ArithmeticEncoder()
        tables = self.tables
        for ch in range(values.shape[0]):
            tab = tables.table(ch)
            escape = len(tables.freqs[ch]) - 1
            lo = tables.lo[ch]
            hi = lo + escape - 1
            for v in values[ch].ravel().tolist():
                if lo <= v <= hi:
                    enc.encode(tab, v - lo)
                else:
                    enc.encode(tab, escape)
                    encode_raw_u32(enc, (v + _RAW_OFFSET) & 0xFFFFFFFF)
        return enc.finish()

    def entropy_decode(self, payload: bytes, shape: tuple[int, int, int]) -> LatentBlock:
        if len(shape) != 3:
            raise ShapeMismatchError(f"latent shape must be (C,H,W), got {shape}")
        c, h, w = shape
        if c != self.latent_channels:
            raise ShapeMismatchError(f"shape {shape} does not match codec channels {self.latent_channels}")
        if h <= 0 or w <= 0:
            raise ShapeMismatchError(f"non-positive spatial dims in {shape}")
        dec = ArithmeticDecoder(payload)
        tables = self.tables
        out = np.empty((c, h * w), dtype=np.int32)
        for ch in range(c):
            tab = tables.table(ch)
            escape = len(tables.freqs[ch]) - 1
            lo = tables.lo[ch]
            row = out[ch]
            for i in range(h * w):
                s = dec.decode(tab)
                if s == escape:
                    row[i] = decode_raw_u32(dec) - _RAW_OFFSET
                else:
                    row[i] = lo + s
        data = torch.from_numpy(out.reshape(c, h, w).astype(np.float32))
        return LatentBlock(data, quantized=True)

    def estimate_bits(self, latent: LatentBlock) -> float:
        """Ideal code length under the coder's integerized tables, in bits."""
        if not latent.quantized:
            raise ValueError("estimate_bits requires a quantized latent")
        self.check_latent_shape(latent)
        values = latent.to_int_array()
        tables = self.tables
        total = 0.0
        for ch in range(values.shape[0]):
            tab = tables.table(ch)
            escape = len(tables.freqs[ch]) - 1
            lo = tables.lo[ch]
            hi = lo + escape - 1
            chan = values[ch].ravel()
            inside = chan[(chan >= lo) & (chan <= hi)]
            freqs = np.asarray(tab.frequencies[:escape], dtype=np.float64)
            if inside.size:
                total += float(-np.log2(freqs[inside - lo] / tab.total).sum())
            n_out = chan.size - inside.size
            if n_out:
                total += n_out * (-math.log2(tab.frequencies[escape] / tab.total) + 32.0)
        return total

    # -- persistence ----------------------------------------------------

    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        buf.write(CODEC_MAGIC)
        serial.write_u8(buf, CODEC_VERSION)
        serial.write_u16(buf, self.latent_channels)
        serial.write_u8(buf, self.downsample_factor)
        meta = dict(self.meta)
        meta.update(
            codec_id=self.codec_id,
            quality=self.quality,
            widths=list(self.meta.get("widths", (16, 32, 48))),
            em_filters=list(self.entropy_model.filters) if self.entropy_model else None,
        )
        serial.write_json_block(buf, meta)
        serial.write_block(buf, serial.state_dict_to_bytes(self.analysis.state_dict()))
        serial.write_block(buf, serial.state_dict_to_bytes(self.synthesis.state_dict()))
        if self.entropy_model is not None:
            serial.write_block(buf, serial.state_dict_to_bytes(self.entropy_model.state_dict()))
        else:
            serial.write_block(buf, b"")
        serial.write_block(
            buf,
            serial.arrays_to_bytes(
                {
                    "lo": np.asarray(self.tables.lo, dtype=np.int32),
                    "len": np.asarray([len(f) for f in self.tables.freqs], dtype=np.int32),
                    "freqs": np.asarray(
                        [x for f in self.tables.freqs for x in f], dtype=np.int64
                    ),
                }
            ),
        )
        Path(path).write_bytes(buf.getvalue())


def load_codec(path: str | Path) -> CodecBundle:
    raw = Path(path).read_bytes()
    if raw[:4] != CODEC_MAGIC:
        raise CodecMismatchError(f"{path}: not a codec file (bad magic {raw[:4]!r})")
    buf = io.BytesIO(raw[4:])
    version = serial.read_u8(buf)
    if version != CODEC_VERSION:
        raise CodecMismatchError(f"unsupported codec file version {version}")
    channels = serial.read_u16(buf)
    downsample = serial.read_u8(buf)
    meta = serial.read_json_block(buf)
    analysis_state = serial.bytes_to_state_dict(serial.read_block(buf))
    synthesis_state = serial.bytes_to_state_dict(serial.read_block(buf))
    em_blob = serial.read_block(buf)
    table_arrays = serial.bytes_to_arrays(serial.read_block(buf))

    widths = tuple(meta.get("widths", (16, 32, 48)))
    analysis = ToyAnalysis(channels, widths)
    synthesis = ToySynthesis(channels, widths)
    analysis.load_state_dict(analysis_state)
    synthesis.load_state_dict(synthesis_state)
    em = None
    if em_blob:
        em = FactorizedEntropyModel(channels, tuple(meta.get("em_filters") or (3, 3, 3)))
        em.load_state_dict(serial.bytes_to_state_dict(em_blob))

    lengths = table_arrays["len"].tolist()
    flat = table_arrays["freqs"].tolist()
    freqs, pos = [], 0
    for n in lengths:
        freqs.append(flat[pos : pos + n])
        pos += n
    tables = ChannelTables(lo=table_arrays["lo"].tolist(), freqs=freqs)
    return CodecBundle(
        analysis,
        synthesis,
        em,
        channels,
        downsample,
        tables,
        codec_id=int(meta.get("codec_id", CODEC_ID_TOY)),
        quality=int(meta.get("quality", 8)),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# toy codec training


def build_toy_codec(
    seed: int,
    train_images: list[np.ndarray],
    latent_channels: int = 64,
    widths: tuple[int, int, int] = (16, 32, 48),
    steps: int = 4000,
    batch_size: int = 16,
    crop: int = 64,
    lr: float = 1e-3,
    lmbda: float = 3.0,
    quality: int = 8,
) -> CodecBundle:
    """Train the stand-in codec on a rate-distortion objective, then freeze it.

    ``lmbda`` weights distortion (MSE on the 255 scale) against rate in bits
    per pixel, mirroring the usual variable-rate training convention.
    """
    if len(train_images) < 256:
        raise ValueError(f"toy codec training needs >= 256 images, got {len(train_images)}")

    gen = torch.Generator().manual_seed(seed)
    analysis = ToyAnalysis(latent_channels, widths)
    synthesis = ToySynthesis(latent_channels, widths)
    init_module(analysis, gen)
    init_module(synthesis, gen)
    em = FactorizedEntropyModel(latent_channels)
    em.init_biases(gen)

    params = [*analysis.parameters(), *synthesis.parameters(), *em.parameters()]
    opt = torch.optim.Adam(params, lr=lr)
    # step decay squeezes the last few dB out of the short schedule
    milestones = [int(steps * 0.6), int(steps * 0.85)]
    scheduler = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=0.3)
    rng = np.random.default_rng(seed)
    trace: list[float] = []

    for step in range(steps):
        idx = rng.integers(0, len(train_images), size=batch_size)
        crops = []
        for i in idx:
            im = train_images[i]
            top = int(rng.integers(0, im.shape[0] - crop + 1))
            left = int(rng.integers(0, im.shape[1] - crop + 1))
            crops.append(im[top : top + crop, left : left + crop])
        x = torch.from_numpy(np.stack(crops).astype(np.float32) / 255.0).permute(0, 3, 1, 2)

        y = analysis(x)
        y_noisy = y + (torch.rand(y.shape, generator=gen) - 0.5)
        x_hat = synthesis(y_noisy)
        n_pixels = x.shape[0] * x.shape[2] * x.shape[3]
        rate_bpp = em.bits(y_noisy) / n_pixels
        mse = F.mse_loss(x_hat, x)
        loss = rate_bpp + lmbda * mse * 255.0**2
        trace.append(float(loss.detach()))
        if not math.isfinite(trace[-1]):
            raise TrainingDivergedError(
                f"toy codec loss became non-finite at step {step}", loss_trace=trace[-20:]
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        scheduler.step()

    lo, hi = em.support()
    pmf = em.integer_pmf(lo, hi).numpy()
    tables = tables_from_pmf(pmf, lo)
    return CodecBundle(
        analysis,
        synthesis,
        em,
        latent_channels,
        16,
        tables,
        codec_id=CODEC_ID_TOY,
        quality=quality,
        meta={"widths": list(widths), "seed": seed, "rd_lambda": lmbda, "steps": steps},
    )


# ---------------------------------------------------------------------------
# external codec adapter


def wrap_external_codec(model, probe_size: int = 64, probe_images: list[np.ndarray] | None = None) -> CodecBundle:
    """Adapt a pretrained compressor exposing analysis/synthesis callables.

    Accepts either an object with ``g_a``/``g_s`` submodules (the common
    pretrained-codec convention) or one with ``analysis``/``synthesis``
    attributes.  Latent channel count and downsample factor are discovered
    by probing a dummy encode rather than hardcoded.  The coder tables are
    fit from probe-image histograms, which keeps transport lossless for any
    wrapped codec even when its own prior is not inspectable.
    """
    g_a = getattr(model, "g_a", None) or getattr(model, "analysis", None)
    g_s = getattr(model, "g_s", None) or getattr(model, "synthesis", None)
    if g_a is None or g_s is None:
        raise CodecMismatchError(
            "external codec must expose g_a/g_s (or analysis/synthesis) callables"
        )

    probe = torch.zeros(1, 3, probe_size, probe_size)
    with torch.no_grad():
        y = g_a(probe)
    if y.dim() != 4:
        raise CodecMismatchError(f"analysis output must be 4-D, got shape {tuple(y.shape)}")
    channels = y.shape[1]
    if probe_size % y.shape[2] != 0:
        raise CodecMismatchError(
            f"probe {probe_size}px produced latent height {y.shape[2]}; not an integer factor"
        )
    downsample = probe_size // y.shape[2]

    class _Wrap(nn.Module):
        def __init__(self, fn):
            super().__init__()
            self.fn = fn if isinstance(fn, nn.Module) else None
            self._call = fn

        def forward(self, x):
            return self._call(x)

    analysis = g_a if isinstance(g_a, nn.Module) else _Wrap(g_a)
    synthesis = g_s if isinstance(g_s, nn.Module) else _Wrap(g_s)

    if probe_images is None:
        from .sampledata import synth_corpus

        probe_images = synth_corpus(16, size=probe_size, seed=123)
    latents = []
    with torch.no_grad():
        for im in probe_images:
            x = torch.from_numpy(im.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
            h = x.shape[2] - x.shape[2] % downsample
            w = x.shape[3] - x.shape[3] % downsample
            latents.append(torch.round(g_a(x[:, :, :h, :w]))[0].numpy().astype(np.int64))
    tables = tables_from_samples(np.stack(latents), channels)
    return CodecBundle(
        analysis,
        synthesis,
        None,
        channels,
        downsample,
        tables,
        codec_id=CODEC_ID_EXTERNAL,
        quality=8,
        meta={"external": type(model).__name__},
    )
