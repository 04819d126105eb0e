"""Measurement machinery: quality metrics, BER, ROC/AUC, sweeps, timing.

Quality is always measured between the encoded cover (the codec's own
reconstruction) and the stego image, i.e. the distortion attributable to
message embedding alone, not to lossy compression.  All aggregate numbers
come with the per-image records that produced them.
"""

from __future__ import annotations

import math
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import nn

from .attacks import AttackSpec, apply_attack
from .codec import quantize
from .data import image_to_tensor, tensor_to_image
from .errors import ConfigError, ShapeMismatchError
from .message import aggregate_tiled_logits, random_message, tile_perturbation
from .pipeline import HidingModel, embed, extract
from .version import __version__

# ---------------------------------------------------------------------------
# image quality


@dataclass
class QualityMetrics:
    psnr: float  # dB on the 8-bit scale; inf when images are identical
    ssim: float
    mae: float  # mean absolute error on the 8-bit scale


def _check_uint8_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.dtype != np.uint8 or b.dtype != np.uint8:
        raise ValueError("quality metrics expect 8-bit images")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    x, y = _check_uint8_pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(255.0**2 / mse)


def mae(a: np.ndarray, b: np.ndarray) -> float:
    x, y = _check_uint8_pair(a, b)
    return float(np.mean(np.abs(x - y)))


_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5
_SSIM_PAD = 5  # radius of the 11-tap window


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    kw = dict(sigma=_SSIM_SIGMA, truncate=_SSIM_TRUNCATE)
    ux = gaussian_filter(x, **kw)
    uy = gaussian_filter(y, **kw)
    vx = gaussian_filter(x * x, **kw) - ux * ux
    vy = gaussian_filter(y * y, **kw) - uy * uy
    vxy = gaussian_filter(x * y, **kw) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(s[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD].mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-weighted SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03, peak 255)."""
    x, y = _check_uint8_pair(a, b)
    if x.ndim == 2:
        return _ssim_plane(x, y)
    return float(np.mean([_ssim_plane(x[..., c], y[..., c]) for c in range(x.shape[-1])]))


def quality_metrics(c_hat: np.ndarray, s_hat: np.ndarray) -> QualityMetrics:
    return QualityMetrics(psnr=psnr(c_hat, s_hat), ssim=ssim(c_hat, s_hat), mae=mae(c_hat, s_hat))


def bit_error_rate(m: np.ndarray, m_prime: np.ndarray) -> float:
    m = np.asarray(m).ravel()
    m_prime = np.asarray(m_prime).ravel()
    if m.size != m_prime.size:
        raise ShapeMismatchError(f"message lengths differ: {m.size} vs {m_prime.size}")
    return float(np.mean(m.astype(np.uint8) != m_prime.astype(np.uint8)))


# ---------------------------------------------------------------------------
# ROC / AUC


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_auc(scores_clean, scores_stego) -> RocResult:
    """Threshold sweep over the pooled scores; AUC by the trapezoid rule.

    Higher scores are treated as "more stego".  With ties this equals the
    Mann-Whitney statistic P(stego > clean) + 0.5 P(equal).
    """
    clean = np.asarray(scores_clean, dtype=np.float64).ravel()
    stego = np.asarray(scores_stego, dtype=np.float64).ravel()
    if clean.size == 0 or stego.size == 0:
        raise ConfigError("both score sets must be non-empty")
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([clean, stego]))[::-1]])
    fpr = np.array([np.mean(clean >= t) for t in thresholds])
    tpr = np.array([np.mean(stego >= t) for t in thresholds])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(thresholds=thresholds, tpr=tpr, fpr=fpr, auc=auc)


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class MetricsReport:
    count: int
    ber: float
    psnr: float
    ssim: float
    mae: float
    overhead_pct: float | None
    lpips: float | None  # None when the learned backend is unavailable
    per_image: list[dict] = field(default_factory=list)
    context: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "ber": self.ber,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mae": self.mae,
            "overhead_pct": self.overhead_pct,
            "lpips": self.lpips,
            "per_image": self.per_image,
            "context": self.context,
        }


def evaluate_model(
    model: HidingModel,
    images: list[np.ndarray],
    seed: int = 0,
    transport: str = "container",
    compute_overhead: bool = True,
    lpips_backend=None,
) -> MetricsReport:
    """Embed a fresh random message per image and measure everything.

    ``transport="container"`` exercises the full quantize -> entropy-code ->
    decode -> extract path; ``"latent"`` skips (lossless) entropy transport
    for speed.  Results are deterministic in ``seed``.
    """
    if not images:
        raise ConfigError("empty evaluation set")
    if transport not in ("container", "latent"):
        raise ConfigError(f"transport must be container or latent, got {transport!r}")
    rng = np.random.default_rng(seed)
    records = []
    for idx, image in enumerate(images):
        bits = random_message(model.n, rng)
        result = embed(model, image, bits, allow_untrained=True)
        if transport == "container":
            decoded = extract(model, result.container)
        else:
            latent = model.codec.entropy_decode(
                result.container.payload, result.container.latent_shape
            )
            _, decoded = model.message_model.decode_message(latent)
        q = quality_metrics(result.encoded_cover, result.stego)
        rec = {
            "index": idx,
            "ber": bit_error_rate(bits, decoded),
            "psnr": q.psnr,
            "ssim": q.ssim,
            "mae": q.mae,
            "payload_bytes": len(result.container.payload),
        }
        if compute_overhead:
            clean_q = quantize(model.codec.encode_latent(image), "round")
            clean_len = len(model.codec.entropy_code(clean_q))
            rec["overhead_pct"] = 100.0 * (len(result.container.payload) - clean_len) / clean_len
        if lpips_backend is not None:
            with torch.no_grad():
                rec["lpips"] = float(
                    lpips_backend(
                        image_to_tensor(result.encoded_cover).unsqueeze(0),
                        image_to_tensor(result.stego).unsqueeze(0),
                    )
                )
        records.append(rec)

    finite_psnr = [r["psnr"] for r in records if math.isfinite(r["psnr"])]
    return MetricsReport(
        count=len(records),
        ber=float(np.mean([r["ber"] for r in records])),
        psnr=float(np.mean(finite_psnr)) if finite_psnr else float("inf"),
        ssim=float(np.mean([r["ssim"] for r in records])),
        mae=float(np.mean([r["mae"] for r in records])),
        overhead_pct=(
            float(np.mean([r["overhead_pct"] for r in records])) if compute_overhead else None
        ),
        lpips=(
            float(np.mean([r["lpips"] for r in records])) if lpips_backend is not None else None
        ),
        per_image=records,
        context={
            "codec_id": model.codec.codec_id,
            "quality": model.codec.quality,
            "mode": model.mode,
            "transport": transport,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# robustness sweeps


@dataclass
class SweepPoint:
    strength: float
    ber: float
    psnr: float  # PSNR(attacked stego, encoded cover): attack + embedding damage


def robustness_sweep(
    model: HidingModel,
    kind: str,
    strengths: list[float],
    images: list[np.ndarray],
    seed: int = 0,
) -> list[SweepPoint]:
    """Mean BER/PSNR per attack strength over an image set (Fig.-6 style).

    Each image is embedded once; every strength point attacks the same
    stego images, re-encodes with the frozen codec and reads the message.
    """
    if not images:
        raise ConfigError("empty sweep image set")
    rng = np.random.default_rng(seed)
    embeds = []
    for image in images:
        bits = random_message(model.n, rng)
        result = embed(model, image, bits, allow_untrained=True)
        embeds.append((bits, result))

    points = []
    for strength in strengths:
        gen = torch.Generator().manual_seed(seed + int(round(strength * 10000)))
        spec = AttackSpec("identity") if kind == "identity" else AttackSpec(kind, strength)
        bers, psnrs = [], []
        for bits, result in embeds:
            s = image_to_tensor(result.stego)
            c = image_to_tensor(result.encoded_cover)
            attacked = apply_attack(spec, s, c, generator=gen)
            attacked_u8 = tensor_to_image(attacked)
            y = quantize(model.codec.encode_latent(attacked_u8), "round")
            _, decoded = model.message_model.decode_message(y)
            bers.append(bit_error_rate(bits, decoded))
            psnrs.append(psnr(result.encoded_cover, attacked_u8))
        finite = [p for p in psnrs if math.isfinite(p)]
        points.append(
            SweepPoint(
                strength=float(strength),
                ber=float(np.mean(bers)),
                psnr=float(np.mean(finite)) if finite else float("inf"),
            )
        )
    return points


def sweep_table(kind: str, points: list[SweepPoint]) -> str:
    """Plot-ready columnar text: strength, mean BER, mean PSNR."""
    lines = [f"# attack={kind}", "# strength ber psnr_db"]
    for p in points:
        lines.append(f"{p.strength:g} {p.ber:.6f} {p.psnr:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# timing


class PixelDomainEmbedder(nn.Module):
    """Conventional pixel-space embedding network used as a speed baseline.

    The message is broadcast over the full image plane and mixed in by
    convolutions (the standard pixel-domain watermarking layout), so its
    cost scales with pixel count rather than latent size.  Used untrained:
    the benchmark compares compute cost, not accuracy.
    """

    def __init__(self, n: int = 32, hidden: int = 64):
        super().__init__()
        self.n = n
        self.net = nn.Sequential(
            nn.Conv2d(3 + n, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )

    def forward(self, image: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        b, _, h, w = image.shape
        m_plane = m[:, :, None, None].expand(b, self.n, h, w)
        return image + self.net(torch.cat([image, m_plane], dim=1))


@dataclass
class TimingResult:
    embed_seconds: float
    extract_seconds: float
    baseline_embed_seconds: float
    speedup_vs_baseline: float
    repetitions: int
    hardware: str
    notes: str

    def to_dict(self) -> dict:
        return {
            "embed_seconds": self.embed_seconds,
            "extract_seconds": self.extract_seconds,
            "baseline_embed_seconds": self.baseline_embed_seconds,
            "speedup_vs_baseline": self.speedup_vs_baseline,
            "repetitions": self.repetitions,
            "hardware": self.hardware,
            "notes": self.notes,
        }


def _median_time(fn, count: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(count):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def benchmark_timing(
    model: HidingModel,
    images: list[np.ndarray],
    repetitions: int = 100,
    warmup: int = 10,
    seed: int = 0,
) -> TimingResult:
    """Median per-image embed/extract time of the latent-domain message ops.

    Embedding is timed as h_e forward + tiling + latent add on an already
    computed latent (the codec runs regardless of hiding, so its cost is not
    attributed to the message path); extraction as tiled h_d decoding of an
    already entropy-decoded latent.  The pixel-domain baseline embeds into
    full-resolution pixels on the same hardware.
    """
    if not images:
        raise ConfigError("empty benchmark image set")
    rng = np.random.default_rng(seed)
    model.message_model.eval_mode()

    latents = []
    tensors = []
    for image in images:
        y = quantize(model.codec.encode_latent(image), "round")
        latents.append(y.data)
        tensors.append(image_to_tensor(image).unsqueeze(0))
    messages = [
        torch.from_numpy(random_message(model.n, rng).astype(np.float32)).unsqueeze(0)
        for _ in images
    ]

    state = {"i": 0}

    def embed_once():
        i = state["i"] % len(images)
        state["i"] += 1
        with torch.no_grad():
            pert = model.message_model.encoder(messages[i])[0]
            y = latents[i]
            _ = y + tile_perturbation(pert, (y.shape[1], y.shape[2]))

    embed_s = _median_time(embed_once, repetitions, warmup)

    embedded = []
    with torch.no_grad():
        for i, y in enumerate(latents):
            pert = model.message_model.encoder(messages[i])[0]
            embedded.append(torch.round(y + tile_perturbation(pert, (y.shape[1], y.shape[2]))))

    def extract_once():
        i = state["i"] % len(images)
        state["i"] += 1
        with torch.no_grad():
            logits = aggregate_tiled_logits(model.message_model.decoder, embedded[i])
            _ = logits > 0

    extract_s = _median_time(extract_once, repetitions, warmup)

    baseline = PixelDomainEmbedder(model.n).eval()

    def baseline_once():
        i = state["i"] % len(images)
        state["i"] += 1
        with torch.no_grad():
            _ = baseline(tensors[i], messages[i])

    baseline_s = _median_time(baseline_once, repetitions, warmup)

    return TimingResult(
        embed_seconds=embed_s,
        extract_seconds=extract_s,
        baseline_embed_seconds=baseline_s,
        speedup_vs_baseline=baseline_s / embed_s if embed_s > 0 else float("inf"),
        repetitions=repetitions,
        hardware=f"{platform.machine()} {platform.processor() or 'cpu'}, "
        f"torch {torch.__version__}, {torch.get_num_threads()} threads",
        notes=(
            "median over repetitions after warmup; embed = message-encoder forward "
            "+ tile + latent add; extract = tiled message-decoder forward; "
            "baseline = pixel-domain conv embedder forward at full resolution; "
            "image decode and file I/O excluded"
        ),
    )


# ---------------------------------------------------------------------------
# report assembly


def report(
    quality: MetricsReport | None = None,
    roc: RocResult | None = None,
    sweeps: dict[str, list[SweepPoint]] | None = None,
    timing: TimingResult | None = None,
    context: dict | None = None,
) -> dict:
    """Aggregate results into one deterministic, machine-readable document."""
    if quality is None and roc is None and not sweeps and timing is None:
        raise ConfigError("nothing to report")
    doc: dict = {"tool_version": __version__, "context": dict(context or {})}
    if quality is not None:
        doc["quality"] = quality.to_dict()
    if roc is not None:
        doc["steganalysis"] = {
            "auc": roc.auc,
            "fpr": [float(v) for v in roc.fpr],
            "tpr": [float(v) for v in roc.tpr],
        }
    if sweeps:
        doc["sweeps"] = {
            kind: [{"strength": p.strength, "ber": p.ber, "psnr": p.psnr} for p in points]
            for kind, points in sweeps.items()
        }
    if timing is not None:
        doc["timing"] = timing.to_dict()
    return doc


def render_table(doc: dict) -> str:
    """Human-readable summary table of a report document."""
    lines = []
    ctx = doc.get("context", {})
    if ctx:
        lines.append("  ".join(f"{k}={v}" for k, v in sorted(ctx.items())))
    if "quality" in doc:
        q = doc["quality"]
        lines.append(f"{'PSNR':>10} {'SSIM':>8} {'MAE':>8} {'Error':>9} {'LPIPS':>9} {'Overhead':>9}")
        lpips_s = f"{q['lpips']:.5f}" if q.get("lpips") is not None else "n/a"
        over_s = f"{q['overhead_pct']:.2f}%" if q.get("overhead_pct") is not None else "n/a"
        lines.append(
            f"{q['psnr']:>10.2f} {q['ssim']:>8.4f} {q['mae']:>8.2f} "
            f"{q['ber']:>9.5f} {lpips_s:>9} {over_s:>9}"
        )
        lines.append(f"(means over {q['count']} images)")
    if "steganalysis" in doc:
        lines.append(f"steganalysis AUC: {doc['steganalysis']['auc']:.4f} (0.5 = undetectable)")
    for kind, points in doc.get("sweeps", {}).items():
        lines.append(f"attack sweep [{kind}]:")
        for p in points:
            lines.append(f"  strength {p['strength']:g}: BER {p['ber']:.4f}, PSNR {p['psnr']:.2f} dB")
    if "timing" in doc:
        t = doc["timing"]
        lines.append(
            f"embed {t['embed_seconds'] * 1000:.3f} ms/img, "
            f"extract {t['extract_seconds'] * 1000:.3f} ms/img, "
            f"pixel-domain baseline {t['baseline_embed_seconds'] * 1000:.3f} ms/img "
            f"({t['speedup_vs_baseline']:.1f}x slower than latent embed)"
        )
        lines.append(f"hardware: {t['hardware']}")
    return "\n".join(lines) + "\n"
