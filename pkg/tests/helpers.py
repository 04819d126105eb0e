"""Shared builders for the expensive test artifacts (codec + trained models).

Everything is cached under NLDH_CACHE (default .nldh_cache/ in the repo
root) keyed by the exact build recipe, so repeated pytest runs skip the
desk-scale training.  Deleting the cache directory forces a full rebuild.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

os.environ.setdefault(
    "NLDH_CACHE", str(Path(__file__).resolve().parent.parent / ".nldh_cache")
)

from nldh.codec import CodecBundle, build_toy_codec
from nldh.sampledata import synth_corpus
from nldh.training import Checkpoint, cache_dir, cached_toy_codec, preset_config, train

CORPUS_SEED = 9
CORPUS_SIZE = 160
TRAIN_COUNT = 512
VAL_COUNT = 48
EVAL_COUNT = 100  # separate held-out set for sweeps/steganalysis
EVAL_SEED = 77


def corpus() -> tuple[list[np.ndarray], list[np.ndarray]]:
    images = synth_corpus(TRAIN_COUNT + VAL_COUNT, size=CORPUS_SIZE, seed=CORPUS_SEED)
    return images[:TRAIN_COUNT], images[TRAIN_COUNT:]


def eval_corpus(count: int = EVAL_COUNT) -> list[np.ndarray]:
    return synth_corpus(count, size=CORPUS_SIZE, seed=EVAL_SEED)


def _fingerprint(images: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for im in images[:: max(1, len(images) // 16)]:
        h.update(im.tobytes())
    h.update(str(len(images)).encode())
    return h.hexdigest()[:12]


def desk_codec() -> CodecBundle:
    train_images, _ = corpus()
    key = json.dumps(
        {"seed": 0, "steps": 4000, "lmbda": 3.0, "corpus": _fingerprint(train_images)},
        sort_keys=True,
    )
    return cached_toy_codec(key, lambda: build_toy_codec(0, train_images))


def _cached_checkpoint(name: str, preset: str, **overrides) -> Checkpoint:
    train_images, val_images = corpus()
    codec = desk_codec()
    config = preset_config(preset, **overrides)
    key = hashlib.sha256(
        json.dumps(
            {"config": config.to_dict(), "corpus": _fingerprint(train_images)}, sort_keys=True
        ).encode()
    ).hexdigest()[:16]
    path = cache_dir() / f"{name}_{key}.nlckpt"
    if path.is_file():
        return Checkpoint.load(path)
    ckpt = train(config, codec, train_images, val_images, log_file=path.with_suffix(".jsonl"))
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
    return ckpt


def desk_stego_checkpoint() -> Checkpoint:
    return _cached_checkpoint("desk_stego", "desk-stego")


def desk_watermark_checkpoint() -> Checkpoint:
    return _cached_checkpoint("desk_watermark", "desk-watermark")


def ensure_all() -> None:
    """Prebuild every cached artifact (used by CI/background warmup)."""
    desk_codec()
    desk_stego_checkpoint()
    desk_watermark_checkpoint()


if __name__ == "__main__":
    import logging

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    ensure_all()
    print("artifact cache ready:", cache_dir())
