"""Dataset ingestion and image I/O.

Datasets are plain directories of images.  ``ingest_dataset`` scans a root,
skips anything PIL cannot decode, shuffles deterministically and persists a
train/val/test manifest as JSON.  No resizing happens at ingest time; the
resolution policy is applied by the loader (random crop during training,
center crop or whole image at eval).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp", ".tif", ".tiff"}

MANIFEST_NAME = "manifest.json"


def load_image(path: str | Path) -> np.ndarray:
    """Read an image as RGB uint8 (H, W, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path: str | Path, array: np.ndarray) -> None:
    if array.dtype != np.uint8:
        raise ValueError("save_image expects uint8")
    Image.fromarray(array).save(path)


def image_to_tensor(array: np.ndarray):
    """uint8 (H,W,3) -> float32 tensor (3,H,W) in [0,1]."""
    import torch

    return torch.from_numpy(array.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def tensor_to_image(tensor) -> np.ndarray:
    """float tensor (3,H,W) or (1,3,H,W) in [0,1] -> uint8 (H,W,3)."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise DimensionError("tensor_to_image expects a single image")
        tensor = tensor[0]
    arr = tensor.detach().clamp(0.0, 1.0).mul(255.0).round().byte().cpu().numpy()
    return np.transpose(arr, (1, 2, 0))


@dataclass
class DatasetManifest:
    root: str
    seed: int
    policy: str  # "crop" | "resize"
    train: list[str]
    val: list[str]
    test: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[str]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}") from None

    def paths(self, name: str) -> list[Path]:
        root = Path(self.root)
        return [root / rel for rel in self.split(name)]

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "seed": self.seed,
            "policy": self.policy,
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "skipped": self.skipped,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))


def ingest_dataset(
    root: str | Path,
    seed: int = 0,
    ratios: tuple[float, ...] = (0.9, 0.1),
    policy: str = "crop",
    min_size: int = 64,
) -> DatasetManifest:
    """Scan ``root`` for decodable images and split them deterministically.

    ``ratios`` gives (train, val) or (train, val, test) fractions; the train
    share absorbs rounding.  Undecodable or too-small files are skipped with
    a warning and listed in the manifest.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    if policy not in ("crop", "resize"):
        raise ConfigError(f"unknown resolution policy {policy!r}")
    if not 2 <= len(ratios) <= 3:
        raise ConfigError("ratios must have 2 or 3 entries")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")

    candidates = sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    usable, skipped = [], []
    for rel in candidates:
        try:
            with Image.open(root / rel) as im:
                im.verify()
            with Image.open(root / rel) as im:
                w, h = im.size
            if min(w, h) < min_size:
                raise ValueError(f"smaller than {min_size}px")
            usable.append(rel)
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the file
            log.warning("skipping %s: %s", rel, exc)
            skipped.append(rel)

    if len(usable) < 2:
        raise ConfigError(f"need at least 2 usable images under {root}, found {len(usable)}")

    order = np.random.default_rng(seed).permutation(len(usable))
    shuffled = [usable[i] for i in order]
    n = len(shuffled)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n)) if len(ratios) == 3 else 0
    n_train = n - n_val - n_test
    manifest = DatasetManifest(
        root=str(root),
        seed=seed,
        policy=policy,
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        skipped=skipped,
    )
    manifest.save(root / MANIFEST_NAME)
    return manifest


def random_crop(array: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = array.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than crop size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return array[top : top + size, left : left + size]


def center_crop(array: np.ndarray, size: int) -> np.ndarray:
    h, w = array.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return array[top : top + size, left : left + size]


def write_synthetic_corpus(dest: str | Path, count: int, size: int = 160, seed: int = 0) -> Path:
    """Materialize the procedural corpus as PNG files (for CLI/e2e runs)."""
    from .sampledata import synth_image

    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        save_image(dest / f"synth_{i:04d}.png", synth_image(i, size=size, seed=seed))
    return dest


class CropLoader:
    """In-memory training loader yielding float tensors of random crops.

    Desk-scale corpora fit in RAM comfortably, so everything is decoded once
    up front; per-step work is just crop + normalize.
    """

    def __init__(self, paths: list[Path] | list[str], crop: int, seed: int = 0):
        if not paths:
            raise ConfigError("empty image list")
        self.images = [load_image(p) for p in paths]
        for p, im in zip(paths, self.images):
            if im.shape[0] < crop or im.shape[1] < crop:
                raise DimensionError(f"{p}: {im.shape[:2]} smaller than crop {crop}")
        self.crop = crop
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, batch_size: int):
        import torch

        idx = self.rng.integers(0, len(self.images), size=batch_size)
        crops = [random_crop(self.images[i], self.crop, self.rng) for i in idx]
        return torch.stack([image_to_tensor(c) for c in crops])
