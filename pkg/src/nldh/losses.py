"""Training objective: perceptual distortion + message cross-entropy.

The total objective is ``L = L_P + alpha * L_M`` where ``L_P`` is a
perceptual distance between the encoded cover and the stego image and
``L_M = BCE(m, m') + beta * BCE(m, m'_attacked)``.  BCE is computed from
logits and summed over bits (so an n-bit message at chance costs n*ln2),
then averaged over the batch.

Two perceptual backends exist: ``msssim`` (multi-scale structural, no
pretrained weights, always available) and ``lpips`` (learned features,
requires the optional ``lpips`` package and its pretrained weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import PerceptualBackendUnavailable, ShapeMismatchError, TrainingDivergedError


@dataclass
class LossWeights:
    alpha: float = 1.5
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


# ---------------------------------------------------------------------------
# multi-scale structural backend (dependency-free default)

_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11


def _gaussian_window(channels: int, sigma: float = 1.5, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    half = (_WIN_SIZE - 1) / 2
    coords = torch.arange(_WIN_SIZE, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    kernel = torch.outer(g, g)
    return kernel.expand(channels, 1, _WIN_SIZE, _WIN_SIZE).contiguous()


def _ssim_and_contrast(x: torch.Tensor, y: torch.Tensor, window: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c = x.shape[1]
    mu_x = F.conv2d(x, window, groups=c)
    mu_y = F.conv2d(y, window, groups=c)
    xx = F.conv2d(x * x, window, groups=c) - mu_x**2
    yy = F.conv2d(y * y, window, groups=c) - mu_y**2
    xy = F.conv2d(x * y, window, groups=c) - mu_x * mu_y
    c1 = 0.01**2
    c2 = 0.03**2
    cs = (2 * xy + c2) / (xx + yy + c2)
    ssim = ((2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)) * cs
    return ssim.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


class MsSsimBackend:
    """1 - MS-SSIM on [0,1] images; scale count adapts to image size."""

    name = "msssim"

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _check_pair(a, b)
        levels = 1
        side = min(a.shape[-2], a.shape[-1])
        while levels < len(_MSSSIM_WEIGHTS) and side // 2 >= _WIN_SIZE:
            levels += 1
            side //= 2
        weights = torch.tensor(_MSSSIM_WEIGHTS[:levels], dtype=a.dtype)
        weights = weights / weights.sum()
        window = _gaussian_window(a.shape[1], dtype=a.dtype)

        terms = []
        x, y = a, b
        for level in range(levels):
            ssim, cs = _ssim_and_contrast(x, y, window)
            terms.append((ssim if level == levels - 1 else cs).clamp_min(1e-6))
            if level != levels - 1:
                x = F.avg_pool2d(x, 2)
                y = F.avg_pool2d(y, 2)
        score = torch.stack([t ** w for t, w in zip(terms, weights)], dim=0).prod(dim=0)
        return (1.0 - score).mean()


class LpipsBackend:
    """Learned perceptual metric; needs the optional lpips package + weights."""

    name = "lpips"

    def __init__(self, net: str = "alex"):
        try:
            import lpips  # noqa: PLC0415 - optional heavy import
        except ImportError as exc:
            raise PerceptualBackendUnavailable(
                "the 'lpips' backend needs the lpips package and its pretrained "
                "weights; install lpips or use perceptual_backend=msssim"
            ) from exc
        try:
            self._metric = lpips.LPIPS(net=net, verbose=False)
        except Exception as exc:  # weight download failure, etc.
            raise PerceptualBackendUnavailable(f"could not initialize LPIPS({net}): {exc}") from exc
        self._metric.eval()
        for p in self._metric.parameters():
            p.requires_grad_(False)

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _check_pair(a, b)
        # lpips expects [-1, 1]
        return self._metric(a * 2 - 1, b * 2 - 1).mean()


_BACKENDS = {"msssim": MsSsimBackend, "lpips": LpipsBackend}


def get_perceptual_backend(name: str = "msssim"):
    try:
        return _BACKENDS[name]()
    except KeyError:
        raise ValueError(f"unknown perceptual backend {name!r} (have {sorted(_BACKENDS)})") from None


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise ShapeMismatchError(f"expected (B,C,H,W) images, got {tuple(a.shape)}")


def perceptual_loss(c_hat: torch.Tensor, s_hat: torch.Tensor, backend="msssim") -> torch.Tensor:
    """L_P between encoded cover and stego (both batched, values in [0,1])."""
    if isinstance(backend, str):
        backend = get_perceptual_backend(backend)
    return backend(c_hat, s_hat)


def pixel_mse_loss(c_hat: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
    """Plain MSE alternative used by the ablation configuration."""
    _check_pair(c_hat, s_hat)
    return F.mse_loss(s_hat, c_hat)


def message_loss(
    m: torch.Tensor,
    logits_clean: torch.Tensor,
    logits_attacked: torch.Tensor | None = None,
    beta: float = 1.0,
) -> torch.Tensor:
    """L_M = BCE(m, clean) + beta * BCE(m, attacked), summed over bits.

    Accepts (n,) or (B,n) tensors; batched inputs are averaged over B.
    """
    if m.shape != logits_clean.shape:
        raise ShapeMismatchError(f"message/logit shapes differ: {tuple(m.shape)} vs {tuple(logits_clean.shape)}")
    m = m.to(logits_clean.dtype)
    loss = F.binary_cross_entropy_with_logits(logits_clean, m, reduction="none")
    loss = loss.sum(dim=-1).mean()
    if beta != 0.0:
        if logits_attacked is None:
            raise ValueError("beta != 0 requires attacked logits")
        if logits_attacked.shape != m.shape:
            raise ShapeMismatchError(
                f"attacked logit shape {tuple(logits_attacked.shape)} != message {tuple(m.shape)}"
            )
        attacked = F.binary_cross_entropy_with_logits(logits_attacked, m, reduction="none")
        loss = loss + beta * attacked.sum(dim=-1).mean()
    return loss


def total_loss(l_perceptual: torch.Tensor, l_message: torch.Tensor, alpha: float = 1.5) -> torch.Tensor:
    """L = L_P + alpha * L_M, refusing to propagate non-finite values."""
    for name, value in (("perceptual", l_perceptual), ("message", l_message)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergedError(f"{name} loss is non-finite ({v})")
    return l_perceptual + alpha * l_message
