"""Command-line entry point: synth, bank, train, render, eval, gradcheck, prune.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint, featio, lifecycle, trainer
from . import config as config_mod
from . import diffcore as dc
from .config import ConfigError
from .membank import BankFormatError, save_bank
from .model import bank_from_views
from .rasterizer import configure_threads
from .scaffold import Camera, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("anchorsplat")


def _config(args):
    if getattr(args, "config", None):
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.PRESETS[args.preset]()
    return config_mod.apply_overrides(cfg, args.set or [])


def _load_ckpt(path):
    model, _, meta = checkpoint.load(path)
    dc.set_dtype(np.dtype(meta.get("precision", "float32")).type)
    return model, meta


def cmd_synth(args):
    cfg = _config(args)
    d = cfg.data
    n_objects = d.n_objects if args.n_objects is None else args.n_objects
    if n_objects < 1:
        raise ConfigError("n_objects must be at least 1")
    seed = d.synth_seed if args.seed is None else args.seed
    ring = featio.CameraRing(count=d.n_cameras, image_size=d.image_size)
    data = featio.synth_scene(seed, n_objects, d.n_points, ring, d.models)
    featio.write_scene_dir(args.out, data)
    print(f"wrote {len(data.cameras)} cameras, {n_objects} objects, "
          f"{len(d.models)} feature sets to {args.out}")


def cmd_bank(args):
    if not 0 < args.gamma < 1:
        raise ConfigError(f"gamma must lie in (0, 1), got {args.gamma}")
    with open(os.path.join(args.scene, "cams.json")) as fh:
        n_views = len(json.load(fh))
    tags = args.models.split(",") if args.models else None
    if tags is None:
        path = os.path.join(args.scene, "scene.json")
        if os.path.exists(path):
            with open(path) as fh:
                tags = list(json.load(fh)["models"])
    if tags is not None:
        missing = featio.missing_feature_tags(args.scene, tags, n_views)
        if missing:
            raise FileNotFoundError(f"missing feature maps for tags: {', '.join(missing)}")
    data = featio.read_scene_dir(args.scene, tags)
    bank = bank_from_views(data.features, args.gamma)
    save_bank(args.out, bank)
    for tag, sub in bank.banks.items():
        print(f"{tag}: K={len(sub)} D={sub.dim}")


def cmd_train(args):
    cfg = _config(args)
    out = args.out or cfg.train.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    result = trainer.train(cfg, out_dir=out)
    print(f"params {result.model.param_count()} anchors {len(result.model.scaffold)}")
    if result.evals:
        ev = result.evals[-1]
        print(f"train psnr {ev['train_psnr']:.3f} test psnr {ev['test_psnr']:.3f} "
              f"mean cos {ev['mean_cos']:.4f}")
    print(f"checkpoint {os.path.join(out, 'final.ckpt')}")


def cmd_render(args):
    model, _ = _load_ckpt(args.ckpt)
    if args.cam.isdigit():
        fw = model.forward(int(args.cam), with_features=False)
    else:
        with open(args.cam) as fh:
            cam = Camera.from_dict(json.load(fh))
        # an unseen camera: view -1 selects the mean appearance embedding
        fw = model.forward(-1, camera=cam, with_features=False)
    h, w = fw.render.alpha.shape
    featio.save_png(args.out, np.clip(fw.rgb.data.reshape(h, w, 3), 0, 1))
    if args.qmap:
        np.save(args.qmap, fw.qmap.data.reshape(h, w, -1))
    print(f"wrote {args.out}")


def cmd_eval(args):
    model, _ = _load_ckpt(args.ckpt)
    cfg = model.cfg
    if args.scene:
        cfg = cfg.copy()
        cfg.data.scene_dir = args.scene
    data = trainer.load_data(cfg)
    targets = trainer.targets_for(data, dc.get_dtype())
    if args.self_compare:
        for v, t in enumerate(targets):
            fw = model.forward(v)
            t.image = fw.rgb.data.reshape(t.image.shape).copy()
            t.features = {tag: f.data.copy() for tag, f in fw.features.items()}
    ev = trainer.evaluate(model, data, targets=targets)
    tags = list(model.bank.banks)
    cols = ["view", "split", "psnr", "ssim"] + [f"cos:{t}" for t in tags] + [f"l2:{t}" for t in tags]
    lines = [",".join(cols)]
    for row in ev["views"]:
        lines.append(",".join(f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    for split in ("train", "test"):
        rows = [r for r in ev["views"] if r["split"] == split]
        if rows:
            means = [f"{np.mean([r[c] for r in rows]):.6f}" for c in cols[2:]]
            lines.append(",".join(["mean", split] + means))
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


def cmd_gradcheck(args):
    cfg = _config(args)
    report = trainer.gradcheck(cfg, samples=args.samples)
    worst = 0.0
    for k, v in report.items():
        if not k.startswith("param:"):
            print(f"{k}: {v:.3e}")
            worst = max(worst, v)
    if worst >= 1e-3:
        print(f"FAIL: max relative error {worst:.3e} >= 1e-3")
        return EXIT_NUMERIC
    print(f"OK: max relative error {worst:.3e}")


def cmd_prune(args):
    model, meta = _load_ckpt(args.ckpt)
    ratio = model.cfg.lifecycle.prune_ratio if args.ratio is None else args.ratio
    lifecycle.prune_count(len(model.scaffold), ratio)
    data = trainer.load_data(model.cfg)
    targets = trainer.targets_for(data, dc.get_dtype())
    window = trainer.collect_window(model, targets)
    records = trainer.significance_records(model, window)
    print(lifecycle.dry_run_report(records, ratio))
    if args.dry_run:
        return
    removed = lifecycle.prune(model.scaffold, records, ratio)
    out = args.out or args.ckpt
    checkpoint.save(out, model, None, meta.get("iteration", 0), meta.get("rng_state"))
    print(f"removed {len(removed)} anchors, {len(model.scaffold)} remain; wrote {out}", file=sys.stderr)


def build_parser():
    p = argparse.ArgumentParser(prog="anchorsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--preset", choices=sorted(config_mod.PRESETS), default="default")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, e.g. train.seed=7 (repeatable)")

    sp = sub.add_parser("synth", help="write a synthetic scene directory")
    with_config(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-objects", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("bank", help="build the memory bank from a scene's feature maps")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--models", help="comma-separated tags (default: from scene.json)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bank)

    sp = sub.add_parser("train", help="train and write metrics.csv + final.ckpt")
    with_config(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render one view of a checkpoint to PNG")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--cam", required=True, help="view index or camera JSON file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--qmap", help="also dump the query map (.npy)")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="per-view and mean metrics of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", help="scene dir (default: the checkpoint's data source)")
    sp.add_argument("--self-compare", action="store_true",
                    help="compare against the checkpoint's own renders")
    sp.add_argument("--out", help="write the table as CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check on a tiny scene")
    with_config(sp)
    sp.add_argument("--samples", type=int, default=12)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("prune", help="score anchors and prune the least significant")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--dry-run", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_prune)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    configure_threads()
    try:
        return args.func(args) or EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, featio.FeatureFormatError, BankFormatError, checkpoint.CheckpointError,
            FormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (trainer.NumericError, dc.EvaluationError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
