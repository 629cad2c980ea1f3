"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. `--config FILE` (JSON) overrides built-in defaults; explicit flags
override the file; the AGM_SEED environment variable overrides every other
seed source.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import ganstyle, harness
from .datapipe import SynthConfig, generate_synthetic, load_dataset
from .errors import ConfigError, DataError, NumericError
from .imaging import GrayscaleCoeffs, Modality, load_image, save_image, to_grayscale
from .losses import LossConfig

log = logging.getLogger("agm")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _resolve_seed(args_seed: int | None, file_cfg: dict, default: int = 0) -> int:
    env = os.environ.get("AGM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"AGM_SEED must be an integer, got {env!r}") from exc
    if args_seed is not None:
        return args_seed
    return int(file_cfg.get("seed", default))


def cmd_synth_data(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = SynthConfig(
        num_identities=args.ids if args.ids is not None else int(file_cfg.get("ids", 20)),
        images_per_identity_per_modality=(
            args.per_id if args.per_id is not None else int(file_cfg.get("per_id", 10))
        ),
        height=args.height if args.height is not None else int(file_cfg.get("height", 72)),
        width=args.width if args.width is not None else int(file_cfg.get("width", 36)),
        seed=_resolve_seed(args.seed, file_cfg),
    )
    index = generate_synthetic(cfg, args.out)
    print(f"wrote {len(index)} images for {cfg.num_identities} identities under {args.out}")
    return 0


def cmd_gray(args: argparse.Namespace) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory not found: {in_dir}")
    out_dir = Path(args.out_dir)
    coeffs = GrayscaleCoeffs()
    count = 0
    for png in sorted(in_dir.rglob("*.png")):
        img = load_image(png, Modality.VISIBLE, identity=0)
        out = to_grayscale(img, coeffs)
        save_image(out, out_dir / png.relative_to(in_dir))
        count += 1
    if count == 0:
        raise DataError(f"no PNG files under {in_dir}")
    print(f"grayed {count} images into {out_dir}")
    return 0


def _load_flat_images(root: Path, modality: Modality) -> list:
    if not root.is_dir():
        raise DataError(f"image directory not found: {root}")
    images = []
    for png in sorted(root.rglob("*.png")):
        images.append(load_image(png, modality, identity=0))
    if not images:
        raise DataError(f"no PNG files under {root}")
    return images


def cmd_gan_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = ganstyle.GanConfig(
        lambda1=float(file_cfg.get("lambda1", 10.0)),
        lambda2=float(file_cfg.get("lambda2", 5.0)),
        epochs=args.epochs if args.epochs is not None else int(file_cfg.get("epochs", 10)),
        batch_size=int(file_cfg.get("batch_size", 8)),
        learning_rate=float(file_cfg.get("learning_rate", 2e-4)),
        seed=_resolve_seed(args.seed, file_cfg),
        base_channels_g=int(file_cfg.get("base_channels_g", 16)),
        base_channels_d=int(file_cfg.get("base_channels_d", 16)),
        residual_blocks=int(file_cfg.get("residual_blocks", 3)),
        adv_mode=file_cfg.get("adv_mode", "log"),
        identity_init=bool(file_cfg.get("identity_init", True)),
    )
    # Tags are irrelevant to GAN training, and "visible" carries no
    # channel-equality constraint, so load both domains with it.
    grays = _load_flat_images(Path(args.gray_dir), Modality.VISIBLE)
    irs = _load_flat_images(Path(args.ir_dir), Modality.VISIBLE)
    model, history = ganstyle.train_gn(grays, irs, cfg)
    ganstyle.save_gan(model, args.out, cfg)
    final = history[-1]
    print(
        f"trained {cfg.epochs} epochs; final losses: "
        + ", ".join(f"{k}={v:.4f}" for k, v in final.items())
    )
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_gan_apply(args: argparse.Namespace) -> int:
    model = ganstyle.load_gan(args.ckpt)
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    images = _load_flat_images(in_dir, Modality.INFRARED)
    paths = sorted(in_dir.rglob("*.png"))
    translated = ganstyle.apply_gn(model, images)
    for src, img in zip(paths, translated):
        save_image(img, out_dir / src.relative_to(in_dir))
    print(f"normalized {len(translated)} images into {out_dir}")
    return 0


def _train_config(args: argparse.Namespace) -> harness.TrainConfig:
    file_cfg = _load_config_file(args.config)
    base = harness.TrainConfig.desk() if file_cfg.pop("desk", args.desk) else harness.TrainConfig()
    merged = base.to_dict()
    merged.update(file_cfg)
    if args.epochs is not None:
        merged["total_epochs"] = args.epochs
    merged["seed"] = _resolve_seed(args.seed, file_cfg, default=merged.get("seed", 0))
    profile = merged.get("profile", "sysu")
    if "loss" not in file_cfg:
        merged["loss"] = asdict(LossConfig.for_profile(profile))
    return harness.TrainConfig.from_dict(merged)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    index = load_dataset(args.data, layout=args.layout)
    mode = args.mode or "rgb-ir"
    out_dir = Path(args.out)
    if mode != "rgb-ir":
        work = out_dir / "preprocessed"
        index = harness.preprocess_agm(index, mode, work, gan_ckpt=args.gan_ckpt or cfg.gan_ckpt)
    ckpt = harness.train(index, cfg, out_dir=out_dir)
    ckpt.save(out_dir / "final.pt")
    print(f"trained {cfg.total_epochs} epochs on {len(index)} images; checkpoint at {out_dir / 'final.pt'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    query = load_dataset(args.query_dir, layout=args.layout, training=False)
    gallery = load_dataset(args.gallery_dir, layout=args.layout, training=False)
    payload = harness.evaluate(args.ckpt, query, gallery, out_path=args.out)
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        print(f"metrics written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agm", description="Aligned grayscale modality pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic two-modality dataset")
    p.add_argument("--ids", type=int, default=None)
    p.add_argument("--per-id", type=int, default=None, dest="per_id")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("gray", help="convert visible images to grayscale")
    p.add_argument("--in-dir", required=True, dest="in_dir")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gray)

    p = sub.add_parser("gan-train", help="train grayscale normalization")
    p.add_argument("--gray-dir", required=True, dest="gray_dir")
    p.add_argument("--ir-dir", required=True, dest="ir_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gan_train)

    p = sub.add_parser("gan-apply", help="apply grayscale normalization to infrared images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in-dir", required=True, dest="in_dir")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gan_apply)

    p = sub.add_parser("train", help="train the two-branch retrieval model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", default="id_dirs", choices=["id_dirs", "flat_manifest"])
    p.add_argument("--mode", default=None,
                   choices=["rgb-ir", "rgb-ir+gn", "gray-ir", "gray-ir+gn", "agm"])
    p.add_argument("--gan-ckpt", default=None, dest="gan_ckpt")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--desk", action="store_true", help="use the small CPU-scale profile")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate retrieval metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query-dir", required=True, dest="query_dir")
    p.add_argument("--gallery-dir", required=True, dest="gallery_dir")
    p.add_argument("--layout", default="id_dirs", choices=["id_dirs", "flat_manifest"])
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
