"""Command-line surface: dataset, pretrain, adapt, eval, compare.

Every command takes --seed and --out-dir and is deterministic given both:
rerunning with identical flags reproduces data artifacts (PNGs, CSVs,
checkpoints, report JSONs) byte for byte. The run manifest carries
timestamps and is the one file exempt from that guarantee.

Exit codes: 0 success, 1 bad config/usage, 2 runtime failure,
3 acceptance-threshold miss (pretrain validation, eval gates).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, adapt, domain, metrics, nets
from .adapt import AdaptConfig, ConfigError
from .domain import Reference
from .latent import load_latent, save_latent
from .losses import LevelSet
from .rng import derive_seed

EXIT_OK = 0
EXIT_BAD_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_THRESHOLD = 3

OUT_ROOT_ENV = "GANADAPT_OUT"


class ThresholdMiss(RuntimeError):
    pass


def _default_out(name: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return str(Path(root) / name)


def _prepare_out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, command: str) -> None:
    manifest = {
        "command": command,
        "config_file": getattr(args, "config", None),
        "seed": args.seed,
        "version": __version__,
        "out_dir": str(out),
        "started_utc": datetime.now(timezone.utc).isoformat(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_reference(args) -> Reference:
    image = domain.read_image_png(args.reference)
    if getattr(args, "mask", None):
        mask = domain.read_mask_png(args.mask)
    else:
        mask = np.zeros(image.shape[:2], dtype=np.float32)
    return Reference(image=image, mask=mask)


def _build_adapt_config(args, has_entity: bool) -> AdaptConfig:
    base = AdaptConfig.defaults_for(has_entity).to_dict()
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
        unknown = set(file_cfg) - set(base)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base.update(file_cfg)
    flag_map = {
        "lambda_rec": "lam1",
        "lambda_style": "lam2",
        "lambda_entity": "lam3",
        "lambda_reg": "lam4",
        "lambda_mask": "lam5",
        "epochs": "epochs",
        "regularizer": "regularizer",
        "seed": "seed",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    cfg = AdaptConfig.from_dict(base)
    cfg.validate()
    return cfg


def _get_landmarker(args, out: Path) -> metrics.LandmarkRegressor:
    if getattr(args, "landmarker", None):
        return metrics.load_landmarker(args.landmarker)
    lmk, report = metrics.train_landmarker(
        seed=derive_seed(args.seed, "cli-landmarker"), steps=args.landmarker_steps
    )
    metrics.save_landmarker(out / "landmarker.ckpt", lmk)
    (out / "landmarker_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return lmk


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_dataset(args) -> int:
    out = _prepare_out_dir(args)
    _write_manifest(out, args, "dataset")
    for i in range(args.count):
        params = domain.sample_params(derive_seed(args.seed, f"dataset-{i}"))
        img = domain.render(params, args.resolution)
        domain.write_image_png(out / f"scene_{i:04d}.png", img)
        domain.write_scene_sidecar(out / f"scene_{i:04d}.json", params)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = _prepare_out_dir(args)
    _write_manifest(out, args, "pretrain")
    net_cfg = nets.NetConfig(resolution=args.resolution)
    bundle, report = adapt.pretrain(net_cfg, seed=args.seed, max_steps=args.max_steps)
    nets.save_checkpoint(out / "source.ckpt", bundle, extra={"pretrain": report})
    (out / "pretrain_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"pretrained: val_l1={report['val_l1']:.4f} converged={report['converged']}")
    if not report["converged"]:
        raise ThresholdMiss(f"validation L1 {report['val_l1']:.4f} missed the threshold")
    return EXIT_OK


def cmd_adapt(args) -> int:
    out = _prepare_out_dir(args)
    _write_manifest(out, args, "adapt")
    source, _ = nets.load_checkpoint(args.source_ckpt)
    ref = _load_reference(args)
    cfg = _build_adapt_config(args, ref.has_entity)
    fe = nets.FeatureExtractor(seed=derive_seed(cfg.seed, "cli-fe"))

    if args.latent:
        w_ref = load_latent(args.latent)
    else:
        w_ref = adapt.invert(source, ref, fe, seed=cfg.seed)
    save_latent(out / "w_ref.latent", w_ref)

    adapted, runlog = adapt.adapt(source, ref, cfg, fe, w_ref=w_ref, checkpoint_dir=out)
    runlog.to_csv(out / "runlog.csv")

    seeds = [derive_seed(args.seed, f"grid-{k}") for k in range(args.grid_size)]
    grid_src = adapt.sample_grid(source, w_ref, seeds, use_aux=False, split_l=cfg.split_l)
    grid_new = adapt.sample_grid(adapted, w_ref, seeds, use_aux=True, split_l=cfg.split_l)
    domain.write_image_png(out / "grid_source.png", grid_src)
    domain.write_image_png(out / "grid_adapted.png", grid_new)
    domain.write_image_png(
        out / "grid_before_after.png", np.concatenate([grid_src, grid_new], axis=0)
    )
    print(f"adapted: final total loss {runlog.total[-1]:.4f} over {len(runlog)} epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _prepare_out_dir(args)
    _write_manifest(out, args, "eval")
    source, _ = nets.load_checkpoint(args.source_ckpt)
    adapted, _ = nets.load_checkpoint(args.adapted_ckpt)
    ref = _load_reference(args)
    fe = nets.FeatureExtractor(seed=derive_seed(args.seed, "cli-fe"))
    lmk = _get_landmarker(args, out)
    if args.latent:
        w_ref = load_latent(args.latent)
    else:
        w_ref = adapt.invert(source, ref, fe, seed=args.seed)
    report = metrics.evaluate(
        source, adapted, ref, fe, lmk, n=args.n, seed=args.seed, w_ref=w_ref
    )
    (out / "metrics_report.json").write_text(report.to_json())
    print(report.to_json().rstrip())
    if args.max_nme is not None and report.nme > args.max_nme:
        raise ThresholdMiss(f"nme {report.nme:.4f} > gate {args.max_nme}")
    if args.min_embed_sim is not None and report.embed_sim < args.min_embed_sim:
        raise ThresholdMiss(f"embed_sim {report.embed_sim:.4f} < gate {args.min_embed_sim}")
    return EXIT_OK


def cmd_compare(args) -> int:
    out = _prepare_out_dir(args)
    _write_manifest(out, args, "compare")
    source, _ = nets.load_checkpoint(args.source_ckpt)
    ref = _load_reference(args)
    fe = nets.FeatureExtractor(seed=derive_seed(args.seed, "cli-fe"))
    lmk = _get_landmarker(args, out)
    w_ref = load_latent(args.latent) if args.latent else adapt.invert(source, ref, fe, seed=args.seed)
    save_latent(out / "w_ref.latent", w_ref)

    rows = []
    for reg in ("vlapr", "cdc"):
        cfg = _build_adapt_config(args, ref.has_entity)
        cfg = dataclasses.replace(cfg, regularizer=reg)
        run_dir = out / reg
        run_dir.mkdir(exist_ok=True)
        adapted, runlog = adapt.adapt(source, ref, cfg, fe, w_ref=w_ref, checkpoint_dir=run_dir)
        runlog.to_csv(run_dir / "runlog.csv")
        report = metrics.evaluate(
            source, adapted, ref, fe, lmk, n=args.n, seed=args.seed, w_ref=w_ref
        )
        rows.append((reg, cfg.seed, report))
    with open(out / "compare.csv", "w") as f:
        f.write("regularizer,seed,nme,embed_sim,style_dist,mask_iou\n")
        for reg, seed, rep in rows:
            iou = "" if rep.mask_iou is None else f"{rep.mask_iou:.6g}"
            f.write(f"{reg},{seed},{rep.nme:.6g},{rep.embed_sim:.6g},{rep.style_dist:.6g},{iou}\n")
    for reg, seed, rep in rows:
        print(f"{reg}: nme={rep.nme:.4f} embed_sim={rep.embed_sim:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=_default_out(default_out))

    p = sub.add_parser("dataset", help="render scenes with JSON sidecars")
    common(p, "dataset")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--resolution", type=int, default=32)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("pretrain", help="train the source generator")
    common(p, "pretrain")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--max-steps", type=int, default=4000)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="one-shot adaptation to a reference")
    common(p, "adapt")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--reference", required=True, help="reference PNG")
    p.add_argument("--mask", help="entity mask PNG; omit for the mask-free variant")
    p.add_argument("--config", help="JSON file mirroring AdaptConfig")
    p.add_argument("--latent", help="precomputed w_ref latent file (skips inversion)")
    p.add_argument("--regularizer", choices=adapt.REGULARIZERS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-rec", type=float, dest="lambda_rec")
    p.add_argument("--lambda-style", type=float, dest="lambda_style")
    p.add_argument("--lambda-entity", type=float, dest="lambda_entity")
    p.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    p.add_argument("--lambda-mask", type=float, dest="lambda_mask")
    p.add_argument("--grid-size", type=int, default=8)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="metrics between source and adapted checkpoints")
    common(p, "eval")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--adapted-ckpt", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask")
    p.add_argument("--latent")
    p.add_argument("--landmarker", help="landmarker checkpoint to reuse")
    p.add_argument("--landmarker-steps", type=int, default=1200)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--max-nme", type=float)
    p.add_argument("--min-embed-sim", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired vlapr-vs-cdc adaptation runs")
    common(p, "compare")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask")
    p.add_argument("--config")
    p.add_argument("--latent")
    p.add_argument("--landmarker")
    p.add_argument("--landmarker-steps", type=int, default=1200)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_BAD_CONFIG
    try:
        return args.func(args)
    except ThresholdMiss as e:
        print(f"threshold miss: {e}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"bad config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
