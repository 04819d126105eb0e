"""Joint training of the message encoder/decoder against a frozen codec.

Each step samples a batch of cover crops and fresh random messages, embeds
in the latent domain with a differentiable quantization surrogate, and
minimizes L = L_P + alpha * (BCE_clean + beta * BCE_attacked).  Only h_e
and h_d receive gradients; the codec is read-only throughout.  Checkpoints
carry everything needed for bit-exact resume: both model snapshots, Adam
moments, and the numpy/torch RNG states.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import serial
from .version import __version__
from .attacks import DEFAULT_RANGES, apply_attack, sample_attack
from .codec import CodecBundle, load_codec, quantize_tensor
from .data import CropLoader, tensor_to_image
from .errors import ConfigError, PayloadCorruptError, TrainingDivergedError
from .losses import get_perceptual_backend, message_loss, total_loss
from .message import MessageModel, aggregate_tiled_logits, random_message, tile_perturbation

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NLK1"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".nlckpt"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 160
    crop: int = 128
    message_length: int = 32
    alpha: float = 1.5
    beta: float = 1.0
    mode: str = "watermark"  # or "steganography"
    seed: int = 0
    quant_surrogate: str = "noise"  # or "ste"
    perceptual_backend: str = "msssim"
    attack_ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    val_images: int = 64
    val_messages_per_image: int = 1

    def __post_init__(self):
        if self.mode not in ("steganography", "watermark"):
            raise ConfigError(f"mode must be steganography or watermark, got {self.mode!r}")
        for name in ("learning_rate", "batch_size", "epochs", "crop", "message_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.message_length % 4:
            raise ConfigError("message_length must be a multiple of 4 (hex-addressable)")
        if self.quant_surrogate not in ("noise", "ste"):
            raise ConfigError(f"quant_surrogate must be noise or ste, got {self.quant_surrogate!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack_ranges"] = {k: list(v) for k, v in self.attack_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["attack_ranges"] = {k: tuple(v) for k, v in d.get("attack_ranges", {}).items()}
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# named presets; the paper recipe is the default construction
PRESETS: dict[str, dict] = {
    "paper-recipe": {},
    "desk-stego": {
        "epochs": 28,
        "batch_size": 16,
        "mode": "steganography",
        "alpha": 0.8,
        "beta": 0.0,
        "val_images": 48,
    },
    "desk-watermark": {
        "epochs": 18,
        "batch_size": 16,
        "mode": "watermark",
        "beta": 1.0,
        "val_images": 32,
    },
}


def preset_config(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r} (have {sorted(PRESETS)})") from None
    return TrainConfig(**{**base, **overrides})


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    history: list[dict]
    best: dict
    best_model: bytes  # serialized MessageModel
    last_model: bytes
    codec_bytes: bytes  # embedded codec file, so one artifact restores everything
    optimizer_state: bytes
    rng_state: dict
    config_hash: str
    version: str = __version__

    def message_model(self, which: str = "best") -> MessageModel:
        blob = self.best_model if which == "best" else self.last_model
        return MessageModel.from_bytes(blob)

    def codec(self) -> CodecBundle:
        import tempfile

        # the codec loader is file-based; round-trip through a temp file
        with tempfile.NamedTemporaryFile(suffix=".nlc", delete=False) as f:
            f.write(self.codec_bytes)
            path = f.name
        try:
            return load_codec(path)
        finally:
            os.unlink(path)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        serial.write_u8(buf, CHECKPOINT_VERSION)
        serial.write_json_block(
            buf,
            {
                "config": self.config.to_dict(),
                "epoch": self.epoch,
                "history": self.history,
                "best": self.best,
                "config_hash": self.config_hash,
                "version": self.version,
                "rng_state": self.rng_state,
            },
        )
        serial.write_block(buf, self.best_model)
        serial.write_block(buf, self.last_model)
        serial.write_block(buf, self.codec_bytes)
        serial.write_block(buf, self.optimizer_state)
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise PayloadCorruptError(f"not a checkpoint (magic {raw[:4]!r})", offset=0)
        body, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise PayloadCorruptError("checkpoint integrity hash mismatch", offset=len(body))
        buf = io.BytesIO(body[4:])
        version = serial.read_u8(buf)
        if version != CHECKPOINT_VERSION:
            raise PayloadCorruptError(f"unsupported checkpoint version {version}", offset=4)
        meta = serial.read_json_block(buf)
        best_model = serial.read_block(buf)
        last_model = serial.read_block(buf)
        codec_bytes = serial.read_block(buf)
        optimizer_state = serial.read_block(buf)
        return cls(
            config=TrainConfig.from_dict(meta["config"]),
            epoch=meta["epoch"],
            history=meta["history"],
            best=meta["best"],
            best_model=best_model,
            last_model=last_model,
            codec_bytes=codec_bytes,
            optimizer_state=optimizer_state,
            rng_state=meta["rng_state"],
            config_hash=meta["config_hash"],
            version=meta["version"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _optimizer_to_bytes(opt: torch.optim.Optimizer) -> bytes:
    state = opt.state_dict()
    arrays = {}
    for idx, slots in state["state"].items():
        for key, value in slots.items():
            arrays[f"{idx}.{key}"] = (
                value.detach().cpu().numpy()
                if isinstance(value, torch.Tensor)
                else np.asarray(value, dtype=np.float64)
            )
    buf = io.BytesIO()
    serial.write_json_block(buf, state["param_groups"])
    serial.write_block(buf, serial.arrays_to_bytes(dict(sorted(arrays.items()))))
    return buf.getvalue()


def _optimizer_from_bytes(opt: torch.optim.Optimizer, raw: bytes) -> None:
    buf = io.BytesIO(raw)
    param_groups = serial.read_json_block(buf)
    arrays = serial.bytes_to_arrays(serial.read_block(buf))
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        idx_s, _, key = name.partition(".")
        slot = state.setdefault(int(idx_s), {})
        slot[key] = torch.from_numpy(arr.copy()) if arr.ndim else torch.tensor(arr.item())
    opt.load_state_dict({"state": state, "param_groups": param_groups})


def _rng_snapshot(np_rng: np.random.Generator, torch_gen: torch.Generator) -> dict:
    return {
        "numpy": json.loads(json.dumps(np_rng.bit_generator.state)),
        "torch": torch_gen.get_state().numpy().tobytes().hex(),
    }


def _rng_restore(state: dict) -> tuple[np.random.Generator, torch.Generator]:
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = state["numpy"]
    gen = torch.Generator()
    gen.set_state(torch.from_numpy(np.frombuffer(bytes.fromhex(state["torch"]), dtype=np.uint8).copy()))
    return np_rng, gen


# ---------------------------------------------------------------------------
# validation


@torch.no_grad()
def validate(
    model: MessageModel,
    codec: CodecBundle,
    val_images: list[np.ndarray],
    config: TrainConfig,
    seed_offset: int = 0,
) -> dict:
    """Deterministic eval: BER from rounded latents + quality of decodes.

    BER here uses the rounded-latent fast path, which equals the container
    path bit-for-bit because entropy coding is lossless.
    """
    from .evaluation import quality_metrics  # local import to avoid a cycle

    model.eval_mode()
    rng = np.random.default_rng(config.seed + 7777 + seed_offset)
    bers, psnrs, ssims, maes = [], [], [], []
    for image in val_images[: config.val_images]:
        x = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)
        y = codec.analysis(codec.pad_to_grid(x.unsqueeze(0)))[0]
        c_hat = tensor_to_image(codec.synthesis(torch.round(y).unsqueeze(0)).clamp(0, 1))
        for _ in range(config.val_messages_per_image):
            bits = random_message(config.message_length, rng)
            pert = model.encode_message(bits).data
            y_e = torch.round(y + tile_perturbation(pert, (y.shape[1], y.shape[2])))
            logits = aggregate_tiled_logits(model.decoder, y_e)
            decoded = (logits.numpy() > 0).astype(np.uint8)
            bers.append(float(np.mean(decoded != bits)))
        s_hat = tensor_to_image(codec.synthesis(y_e.unsqueeze(0)).clamp(0, 1))
        q = quality_metrics(c_hat, s_hat)
        psnrs.append(q.psnr)
        ssims.append(q.ssim)
        maes.append(q.mae)
    finite = [p for p in psnrs if np.isfinite(p)]
    return {
        "ber": float(np.mean(bers)),
        "psnr": float(np.mean(finite)) if finite else float("inf"),
        "ssim": float(np.mean(ssims)),
        "mae": float(np.mean(maes)),
    }


# ---------------------------------------------------------------------------
# training loop


def train(
    config: TrainConfig,
    codec: CodecBundle,
    train_images: list[np.ndarray],
    val_images: list[np.ndarray],
    resume_from: Checkpoint | None = None,
    log_file: Path | None = None,
) -> Checkpoint:
    """Optimize h_e/h_d with Adam; returns the checkpoint (best + last)."""
    if not train_images or not val_images:
        raise ConfigError("training and validation sets must be non-empty")
    if not codec.frozen:
        codec.freeze()
    if config.crop % codec.downsample_factor:
        raise ConfigError(
            f"crop {config.crop} not divisible by codec downsample {codec.downsample_factor}"
        )
    if config.crop < codec.downsample_factor * 8:
        raise ConfigError(f"crop must cover at least one 8x8 latent tile ({codec.downsample_factor * 8}px)")

    codec_before = codec.parameter_snapshot()
    perceptual = get_perceptual_backend(config.perceptual_backend)

    if resume_from is not None:
        model = resume_from.message_model("last")
        np_rng, torch_gen = _rng_restore(resume_from.rng_state)
        history = list(resume_from.history)
        best = dict(resume_from.best)
        best_blob = resume_from.best_model
        start_epoch = resume_from.epoch
        loader = _make_loader(train_images, config)
        loader.rng = np_rng  # resume the data stream exactly
        opt = torch.optim.Adam(list(model.parameters()), lr=config.learning_rate)
        _optimizer_from_bytes(opt, resume_from.optimizer_state)
    else:
        model = MessageModel(config.message_length, codec.latent_channels, seed=config.seed)
        np_rng = np.random.default_rng(config.seed)
        torch_gen = torch.Generator().manual_seed(config.seed + 1)
        history = []
        best = {"ber": float("inf"), "psnr": -float("inf"), "epoch": -1}
        best_blob = model.to_bytes()
        start_epoch = 0
        loader = _make_loader(train_images, config)
        loader.rng = np_rng
        opt = torch.optim.Adam(list(model.parameters()), lr=config.learning_rate)

    steps_per_epoch = max(1, len(train_images) // config.batch_size)
    log_fh = open(log_file, "a") if log_file else None
    trace: list[float] = []

    try:
        for epoch in range(start_epoch, config.epochs):
            model.train_mode()
            epoch_t0 = time.perf_counter()
            for step in range(steps_per_epoch):
                x = loader.batch(config.batch_size)
                with torch.no_grad():
                    y = codec.analysis(x)
                    c_hat = codec.synthesis(torch.round(y)).clamp(0, 1)

                bits = np.stack(
                    [random_message(config.message_length, np_rng) for _ in range(x.shape[0])]
                )
                m = torch.from_numpy(bits.astype(np.float32))
                pert = model.encoder(m)
                y_e = y + tile_perturbation(pert, (y.shape[2], y.shape[3]))
                y_e_q = quantize_tensor(y_e, config.quant_surrogate, torch_gen)
                s_hat = codec.synthesis(y_e_q).clamp(0, 1)

                l_p = perceptual(c_hat, s_hat)
                logits_clean = aggregate_tiled_logits(model.decoder, y_e_q)

                logits_attacked = None
                attack_desc = ""
                if config.mode == "watermark" and config.beta > 0:
                    spec = sample_attack(np_rng, config.attack_ranges)
                    attacked = apply_attack(spec, s_hat, c_hat, generator=torch_gen, differentiable=True)
                    y_dot = codec.analysis(attacked)
                    y_dot_q = quantize_tensor(y_dot, config.quant_surrogate, torch_gen)
                    logits_attacked = aggregate_tiled_logits(model.decoder, y_dot_q)
                    attack_desc = str(spec)

                l_m = message_loss(m, logits_clean, logits_attacked, beta=config.beta)
                loss = total_loss(l_p, l_m, alpha=config.alpha)
                trace.append(float(loss.detach()))
                if not np.isfinite(trace[-1]):
                    raise TrainingDivergedError(
                        f"loss non-finite at epoch {epoch} step {step}", loss_trace=trace[-20:]
                    )

                opt.zero_grad()
                loss.backward()
                opt.step()

                if log_fh:
                    log_fh.write(
                        json.dumps(
                            {
                                "epoch": epoch,
                                "step": step,
                                "L_P": round(float(l_p.detach()), 6),
                                "L_M": round(float(l_m.detach()), 6),
                                "L": round(trace[-1], 6),
                                "attack": attack_desc,
                            }
                        )
                        + "\n"
                    )

            metrics = validate(model, codec, val_images, config, seed_offset=epoch)
            metrics["epoch"] = epoch
            history.append(metrics)  # wall time stays out: checkpoints must be seed-reproducible
            seconds = time.perf_counter() - epoch_t0
            log.info(
                "epoch %d (%.1fs): loss %.4f | val ber %.4f psnr %.2f ssim %.4f",
                epoch, seconds, trace[-1], metrics["ber"], metrics["psnr"], metrics["ssim"],
            )
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch, "val": metrics, "seconds": round(seconds, 3)}) + "\n")
                log_fh.flush()

            # model selection: lowest BER, PSNR as tie-break
            if (metrics["ber"], -metrics["psnr"]) < (best["ber"], -best["psnr"]):
                best = {"ber": metrics["ber"], "psnr": metrics["psnr"], "epoch": epoch}
                model.eval_mode()
                best_blob = model.to_bytes()
    finally:
        if log_fh:
            log_fh.close()

    if codec.parameter_snapshot() != codec_before:
        raise RuntimeError("frozen codec parameters changed during training")

    model.eval_mode()
    model.meta = {"config_hash": config.hash(), "version": __version__, "mode": config.mode}
    return Checkpoint(
        config=config,
        epoch=config.epochs,
        history=history,
        best=best,
        best_model=_with_meta(best_blob, model.meta),
        last_model=model.to_bytes(),
        codec_bytes=_codec_bytes(codec),
        optimizer_state=_optimizer_to_bytes(opt),
        rng_state=_rng_snapshot(np_rng, torch_gen),
        config_hash=config.hash(),
    )


def _with_meta(model_blob: bytes, meta: dict) -> bytes:
    model = MessageModel.from_bytes(model_blob)
    model.meta = dict(meta)
    return model.to_bytes()


def _make_loader(train_images: list[np.ndarray], config: TrainConfig):
    class _ArrayLoader(CropLoader):
        def __init__(self, images, crop):
            self.images = list(images)
            self.crop = crop
            self.rng = np.random.default_rng(0)

    return _ArrayLoader(train_images, config.crop)


def _codec_bytes(codec: CodecBundle) -> bytes:
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".nlc", delete=False) as f:
        path = f.name
    try:
        codec.save(path)
        return Path(path).read_bytes()
    finally:
        os.unlink(path)


# ---------------------------------------------------------------------------
# codec/model caching (NLDH_CACHE)


def cache_dir() -> Path | None:
    root = os.environ.get("NLDH_CACHE")
    return Path(root) if root else None


def cached_toy_codec(key: str, builder) -> CodecBundle:
    """Build or reuse a toy codec; ``key`` must capture seed + data + hparams."""
    root = cache_dir()
    if root is None:
        return builder()
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"codec_{hashlib.sha256(key.encode()).hexdigest()[:16]}.nlc"
    if path.exists():
        log.info("reusing cached codec %s", path)
        return load_codec(path)
    codec = builder()
    codec.save(path)
    return codec
