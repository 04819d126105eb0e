"""Procedural photo-like images for tests and desk-scale training.

Real photographs cannot be checked into the repository, so training and
evaluation corpora are synthesized: smooth color gradients layered with
soft blobs, sinusoidal textures and band-limited noise.  The generator is
fully deterministic in (seed, index) and produces enough low-frequency
structure for a small transform codec to learn something non-trivial.
"""

from __future__ import annotations

import numpy as np


def _smooth_noise(rng: np.random.Generator, h: int, w: int, grid: int) -> np.ndarray:
    """Band-limited noise: coarse gaussian grid upsampled bilinearly."""
    coarse = rng.standard_normal((grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.clip(ys.astype(int), 0, grid - 2)
    x0 = np.clip(xs.astype(int), 0, grid - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = coarse[y0][:, x0]
    tr = coarse[y0][:, x0 + 1]
    bl = coarse[y0 + 1][:, x0]
    br = coarse[y0 + 1][:, x0 + 1]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


def synth_image(index: int, size: int = 160, seed: int = 0) -> np.ndarray:
    """Render one RGB uint8 image of shape (size, size, 3)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w

    channels = []
    # shared geometry so the channels correlate like natural photos do
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    n_blobs = rng.integers(2, 6)
    blob_params = [
        (rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.35))
        for _ in range(n_blobs)
    ]
    # frequencies stay below the 16x-downsampled latent's Nyquist so the
    # texture is representable by a /16 transform code
    freq = rng.uniform(1.5, 7.5)
    phase = rng.uniform(0, 2 * np.pi)
    wave_angle = rng.uniform(0, 2 * np.pi)
    wave = np.sin(
        2 * np.pi * freq * (np.cos(wave_angle) * xx + np.sin(wave_angle) * yy) + phase
    )

    for _ in range(3):
        base = rng.uniform(0.15, 0.85)
        img = base + rng.uniform(-0.5, 0.5) * ramp
        for cy, cx, sigma in blob_params:
            amp = rng.uniform(-0.5, 0.5)
            img = img + amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        img = img + rng.uniform(0.0, 0.15) * wave
        img = img + rng.uniform(0.02, 0.08) * _smooth_noise(rng, h, w, rng.integers(6, 14))
        channels.append(img)

    stack = np.stack(channels, axis=-1)
    stack = stack + rng.normal(0, 0.004, size=stack.shape)  # sensor-ish grain
    return np.clip(np.round(stack * 255.0), 0, 255).astype(np.uint8)


def synth_corpus(count: int, size: int = 160, seed: int = 0) -> list[np.ndarray]:
    return [synth_image(i, size=size, seed=seed) for i in range(count)]
