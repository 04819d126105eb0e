"""Command-line entry points.

Commands: train, embed, extract, evaluate, benchmark, steganalyze, ingest.
Exit codes: 0 success; 2 configuration/usage/dataset problems; 3 codec
mismatch between artifact and model; 4 corrupt payload or container;
1 any other failure (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as configmod
from .codec import build_toy_codec, load_codec
from .data import (
    DatasetManifest,
    MANIFEST_NAME,
    ingest_dataset,
    load_image,
    save_image,
    write_synthetic_corpus,
)
from .errors import (
    CodecMismatchError,
    ConfigError,
    DimensionError,
    NldhError,
    PayloadCorruptError,
    PerceptualBackendUnavailable,
    ShapeMismatchError,
)
from .evaluation import (
    benchmark_timing,
    evaluate_model,
    psnr,
    render_table,
    report,
    robustness_sweep,
    roc_auc,
    sweep_table,
)
from .losses import get_perceptual_backend
from .message import bits_to_hex, parse_message
from .pipeline import HidingModel, StegoContainer, embed, extract
from .steganalysis import detector_report, steganalysis_score
from .training import Checkpoint, cached_toy_codec, train
from .version import __version__

log = logging.getLogger("nldh")

DEFAULT_SWEEP_GRIDS = {
    "gaussian": [0.0, 0.02, 0.05, 0.08],
    "dropout": [0.0, 0.1, 0.2, 0.3],
    "cropout": [0.0, 0.1, 0.2, 0.3],
    "jpeg": [95, 80, 65, 50],
    "identity": [0.0],
}


# ---------------------------------------------------------------------------
# helpers


def _load_model(checkpoint_path: str, which: str = "best") -> tuple[HidingModel, Checkpoint]:
    path = Path(checkpoint_path)
    if not path.is_file():
        raise ConfigError(f"checkpoint does not exist: {path}")
    ckpt = Checkpoint.load(path)
    model = HidingModel(
        ckpt.codec(), ckpt.message_model(which), mode=ckpt.config.mode, trained=True
    )
    return model, ckpt


def _dataset_images(root: str | Path, limit: int, split: str | None = None) -> list[np.ndarray]:
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset directory does not exist: {root}")
    manifest_path = root / MANIFEST_NAME
    if split and manifest_path.is_file():
        paths = DatasetManifest.load(manifest_path).paths(split)
    else:
        from .data import IMAGE_SUFFIXES

        paths = sorted(
            p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
    if not paths:
        raise ConfigError(f"no images found under {root}")
    return [load_image(p) for p in paths[:limit]]


def _prepare_dataset(exp) -> tuple[list[np.ndarray], list[np.ndarray]]:
    root = exp.dataset_root
    if exp.dataset_synthetic_count > 0:
        if str(root) in ("", "."):
            root = exp.out_dir / "data"
        expected = {f"synth_{i:04d}.png" for i in range(exp.dataset_synthetic_count)}
        present = {p.name for p in root.glob("synth_*.png")} if root.is_dir() else set()
        if present != expected:
            for name in present - expected:
                (root / name).unlink()
            log.info("generating %d synthetic images in %s", exp.dataset_synthetic_count, root)
            write_synthetic_corpus(
                root, exp.dataset_synthetic_count, size=exp.dataset_image_size, seed=exp.seed
            )
    if str(root) in ("", "."):
        raise ConfigError("dataset.root is not set (and dataset.synthetic_count is 0)")
    manifest = ingest_dataset(
        root,
        seed=exp.seed,
        ratios=(1.0 - exp.dataset_val_ratio, exp.dataset_val_ratio),
        policy=exp.dataset_policy,
    )
    train_imgs = [load_image(p) for p in manifest.paths("train")]
    val_imgs = [load_image(p) for p in manifest.paths("val")]
    log.info("dataset: %d train / %d val images", len(train_imgs), len(val_imgs))
    return train_imgs, val_imgs


def _build_codec(exp, train_imgs: list[np.ndarray]):
    if exp.codec_kind == "file":
        if exp.codec_path is None or not exp.codec_path.is_file():
            raise ConfigError(f"codec.path does not exist: {exp.codec_path}")
        return load_codec(exp.codec_path)
    if exp.codec_kind != "toy":
        raise ConfigError(f"codec.kind must be toy or file, got {exp.codec_kind!r}")
    key = json.dumps(
        {
            "seed": exp.seed,
            "channels": exp.codec_latent_channels,
            "steps": exp.codec_steps,
            "lambda": exp.codec_rd_lambda,
            "quality": exp.codec_quality,
            "n_images": len(train_imgs),
            "fingerprint": hash_images(train_imgs[:8]),
        },
        sort_keys=True,
    )
    return cached_toy_codec(
        key,
        lambda: build_toy_codec(
            exp.seed,
            train_imgs,
            latent_channels=exp.codec_latent_channels,
            steps=exp.codec_steps,
            lmbda=exp.codec_rd_lambda,
            quality=exp.codec_quality,
        ),
    )


def hash_images(images: list[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for im in images:
        h.update(im.tobytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.preset is not None:
        overrides["preset"] = args.preset
    exp = configmod.load_experiment(args.config, overrides)
    exp.out_dir.mkdir(parents=True, exist_ok=True)

    train_imgs, val_imgs = _prepare_dataset(exp)
    codec = _build_codec(exp, train_imgs)

    resume = Checkpoint.load(args.resume) if args.resume else None
    ckpt = train(
        exp.train,
        codec,
        train_imgs,
        val_imgs,
        resume_from=resume,
        log_file=exp.out_dir / "train_log.jsonl",
    )
    out_path = exp.out_dir / "model.nlckpt"
    ckpt.save(out_path)
    print(f"checkpoint: {out_path}")
    print(f"config hash: {ckpt.config_hash}  tool version: {__version__}")
    print(
        f"best epoch {ckpt.best['epoch']}: val BER {ckpt.best['ber']:.5f}, "
        f"PSNR {ckpt.best['psnr']:.2f} dB"
    )
    return 0


def cmd_embed(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    cover_path = Path(args.cover)
    if not cover_path.is_file():
        raise ConfigError(f"cover image does not exist: {cover_path}")
    cover = load_image(cover_path)
    bits = parse_message(args.message, model.n)

    result = embed(model, cover, bits)
    container_path = Path(args.container) if args.container else cover_path.with_suffix(".nls")
    stego_path = Path(args.stego) if args.stego else cover_path.with_name(cover_path.stem + "_stego.png")
    result.container.save(container_path)
    save_image(stego_path, result.stego)

    from .codec import quantize

    clean_len = len(model.codec.entropy_code(quantize(model.codec.encode_latent(cover), "round")))
    overhead = 100.0 * (len(result.container.payload) - clean_len) / clean_len
    print(f"container: {container_path} ({len(result.container.payload)} payload bytes)")
    print(f"stego image: {stego_path}")
    print(f"PSNR(encoded cover, stego): {psnr(result.encoded_cover, result.stego):.2f} dB")
    print(f"size overhead: {overhead:+.2f}%")
    return 0


def cmd_extract(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    path = Path(args.container)
    if not path.is_file():
        raise ConfigError(f"container does not exist: {path}")
    if args.verify:
        print(f"checkpoint integrity ok; config hash {ckpt.config_hash}", file=sys.stderr)
    container = StegoContainer.load(path)
    bits = extract(model, container)
    print(bits_to_hex(bits))
    return 0


def cmd_evaluate(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    images = _dataset_images(args.dataset, args.images, split=args.split)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)

    lpips_backend = None
    try:
        lpips_backend = get_perceptual_backend("lpips")
    except PerceptualBackendUnavailable as exc:
        log.info("learned perceptual backend unavailable (%s); reporting without it", exc)

    quality = evaluate_model(
        model,
        images,
        seed=args.seed,
        transport=args.transport,
        lpips_backend=lpips_backend,
    )

    roc = None
    if args.steganalysis:
        rng = np.random.default_rng(args.seed)
        clean_scores, stego_scores = [], []
        for image in images:
            from .message import random_message

            bits = random_message(model.n, rng)
            res = embed(model, image, bits, allow_untrained=True)
            clean_scores.append(steganalysis_score(res.encoded_cover))
            stego_scores.append(steganalysis_score(res.stego))
        roc = roc_auc(clean_scores, stego_scores)

    sweeps = {}
    for kind in args.attack_sweep or []:
        grid = (
            [float(x) for x in args.grid.split(",")]
            if args.grid
            else DEFAULT_SWEEP_GRIDS.get(kind)
        )
        if grid is None:
            raise ConfigError(f"no default grid for attack {kind!r}; pass --grid")
        points = robustness_sweep(model, kind, grid, images, seed=args.seed)
        sweeps[kind] = points
        (out_dir / f"sweep_{kind}.csv").write_text(sweep_table(kind, points))

    doc = report(
        quality=quality,
        roc=roc,
        sweeps=sweeps or None,
        context={
            "dataset": str(args.dataset),
            "codec_id": model.codec.codec_id,
            "mode": model.mode,
            "config_hash": ckpt.config_hash,
            "checkpoint_version": ckpt.version,
        },
    )
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    table = render_table(doc)
    (out_dir / "report.txt").write_text(table)
    if roc is not None:
        lines = ["# fpr tpr"] + [f"{f:.6f} {t:.6f}" for f, t in zip(doc["steganalysis"]["fpr"], doc["steganalysis"]["tpr"])]
        (out_dir / "roc.csv").write_text("\n".join(lines) + "\n")
    print(table, end="")
    print(f"report written to {out_dir}")
    return 0


def cmd_benchmark(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    if args.dataset:
        images = _dataset_images(args.dataset, args.images)
    else:
        from .sampledata import synth_corpus

        images = synth_corpus(args.images, size=160, seed=args.seed)
    timing = benchmark_timing(model, images, repetitions=args.repetitions, seed=args.seed)
    doc = report(timing=timing, context={"config_hash": ckpt.config_hash})
    print(render_table(doc), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True))
        print(f"written to {args.out}")
    return 0


def cmd_steganalyze(args) -> int:
    for path in args.images:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"image does not exist: {p}")
        image = load_image(p)
        scores = detector_report(image)
        fused = steganalysis_score(image)
        detail = "  ".join(f"{k}={v:.4f}" for k, v in sorted(scores.items()))
        print(f"{p}: score={fused:.4f}  ({detail})")
    return 0


def cmd_ingest(args) -> int:
    root = Path(args.root)
    if args.synthetic > 0:
        write_synthetic_corpus(root, args.synthetic, size=args.size, seed=args.seed)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    manifest = ingest_dataset(root, seed=args.seed, ratios=ratios, policy=args.policy)
    print(f"manifest: {root / MANIFEST_NAME}")
    print(
        f"{len(manifest.train)} train / {len(manifest.val)} val / {len(manifest.test)} test; "
        f"{len(manifest.skipped)} skipped"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nldh",
        description="Message hiding in the quantized latents of neural image codecs.",
    )
    parser.add_argument("--version", action="version", version=f"nldh {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the message encoder/decoder")
    p.add_argument("--config", help="config file (flat dotted keys)")
    p.add_argument("--preset", help="named preset: paper-recipe, desk-stego, desk-watermark")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="hide a message in a cover image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cover", required=True, help="cover image (PNG/JPEG)")
    p.add_argument("--message", required=True, help="hex (n/4 digits) or raw bit string")
    p.add_argument("--container", help="output container path (default: cover with .nls)")
    p.add_argument("--stego", help="output stego PNG (default: <cover>_stego.png)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="read the message out of a container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--container", required=True)
    p.add_argument("--verify", action="store_true", help="also verify checkpoint integrity hash")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="quality/BER/overhead report on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="directory of images")
    p.add_argument("--split", default=None, help="manifest split to use (train/val/test)")
    p.add_argument("--images", type=int, default=100, help="max images to evaluate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transport", choices=("container", "latent"), default="container")
    p.add_argument("--steganalysis", action="store_true", help="detector ROC/AUC on cover vs stego")
    p.add_argument(
        "--attack-sweep",
        action="append",
        metavar="KIND",
        help="robustness curve for an attack kind (repeatable)",
    )
    p.add_argument("--grid", help="comma-separated strengths for --attack-sweep")
    p.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="embed/extract timing vs pixel-domain baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="images to benchmark on (default: synthetic)")
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON document here")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("steganalyze", help="LSB-detector suspicion scores for images")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_steganalyze)

    p = sub.add_parser("ingest", help="scan an image directory into a dataset manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.9,0.1", help="train,val[,test] fractions")
    p.add_argument("--policy", choices=("crop", "resize"), default="crop")
    p.add_argument("--synthetic", type=int, default=0, help="generate N synthetic images first")
    p.add_argument("--size", type=int, default=160, help="synthetic image size")
    p.set_defaults(func=cmd_ingest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, DimensionError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CodecMismatchError as exc:
        print(f"error: codec mismatch: {exc}", file=sys.stderr)
        return 3
    except PayloadCorruptError as exc:
        where = f" (at byte offset {exc.offset})" if exc.offset >= 0 else ""
        print(f"error: corrupt data: {exc}{where}", file=sys.stderr)
        return 4
    except NldhError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
