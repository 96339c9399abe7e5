"""Command-line entry point.

Exit codes: 0 success, 2 usage or input errors, 3 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError
from .data_io import DatasetError

logger = logging.getLogger("bbsnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _index(folder: Path) -> dict:
    from .data_io import IMAGE_EXTS

    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def _require_dir(path, what="directory"):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_training_samples(cfg, side):
    from .data_io import ManifestDataset, load_dataset
    from .synthetic import generate_corpus

    if cfg["data.toy"]:
        return generate_corpus(cfg["data.toy_n"], side, cfg["data.toy_style"], cfg["data.toy_seed"])
    roots = [r.strip() for r in cfg["data.train_root"].split(",") if r.strip()]
    if not roots:
        raise UsageError("no training data: set data.train_root or data.toy = true")
    samples = []
    for root in roots:
        if not Path(root).is_dir():
            raise UsageError(f"dataset root not found: {root}")
        manifest = load_dataset(root, split="train")
        ds = ManifestDataset(manifest, side, cfg["data.invert_depth"])
        samples.extend(ds[i] for i in range(len(ds)))
    return samples


def cmd_train(args) -> int:
    from .config import dump_config, load_config, model_config, train_config
    from .model import BBSNet
    from .trainer import DivergenceError, train

    overrides = {"model.variant": args.variant} if args.variant else {}
    cfg = load_config(args.config, overrides=overrides)
    try:
        mcfg = model_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tcfg = train_config(cfg)
    samples = _load_training_samples(cfg, tcfg.side)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    import torch

    torch.manual_seed(cfg["train.init_seed"])
    model = BBSNet(mcfg)
    t0 = time.perf_counter()
    try:
        res = train(model, samples, tcfg, out_dir=str(out), resume=args.resume)
    except DivergenceError as exc:
        logger.error("%s (last good checkpoint: %s)", exc, exc.last_good)
        return EXIT_RUNTIME
    last = res.history[-1] if res.history else None
    print(json.dumps({"epochs_run": res.epochs_run, "iterations": last[1] if last else 0,
                      "final_loss_s1": last[2] if last else None, "final_loss_s2": last[3] if last else None,
                      "checkpoint": res.checkpoints[-1] if res.checkpoints else None,
                      "seconds": round(time.perf_counter() - t0, 2)}))
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch
    from PIL import Image

    from .checkpoint import load_model
    from .data_io import IMAGENET_MEAN, IMAGENET_STD, RgbdSample, _read_gray, _resize, normalize_depth, save_saliency, to_tensors

    src = _require_dir(args.input_dir, "input directory")
    model, meta = load_model(args.ckpt)
    tmeta = meta.get("train_config", {})
    side = int(args.side or tmeta.get("side", 352))
    mean = tuple(tmeta.get("mean", IMAGENET_MEAN))
    std = tuple(tmeta.get("std", IMAGENET_STD))
    rgb_idx, depth_idx, gt_idx = _index(src / "RGB"), _index(src / "depth"), _index(src / "GT")
    stems = sorted(set(rgb_idx) & set(depth_idx))
    if not stems:
        raise UsageError(f"{src}: no RGB/ depth/ pairs found")
    skipped = sorted(set(rgb_idx) ^ set(depth_idx))
    for s in skipped:
        logger.warning("unpaired file %s skipped", s)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)  # reproducible float reductions across runs
    model.eval()
    for s in stems:
        with Image.open(rgb_idx[s]) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        depth = _read_gray(depth_idx[s])
        size = rgb.shape[:2]
        if s in gt_idx:
            with Image.open(gt_idx[s]) as im:
                size = (im.size[1], im.size[0])
        rgb_r = np.stack([_resize(rgb[..., c], side, Image.BILINEAR) for c in range(3)], -1)
        depth_r = normalize_depth(_resize(depth, side, Image.BILINEAR), args.invert_depth, s)
        sample = RgbdSample(s, np.clip(rgb_r, 0, 1), depth_r[..., None], np.zeros((side, side, 1), np.float32))
        r, d, _ = to_tensors([sample], mean, std)
        with torch.no_grad():
            o = model(r, d)
        m = (o.s1 if args.stage == "initial" else o.final)[0, 0].double().numpy()
        save_saliency(np.clip(m, 0, 1), out / f"{s}.png", size=size)
    print(json.dumps({"written": len(stems), "skipped": skipped, "out_dir": str(out)}))
    return EXIT_OK


def _pairs(pred_dir: Path, gt_dir: Path):
    preds, gts = _index(pred_dir), _index(gt_dir)
    stems = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    return preds, gts, stems, unmatched


def cmd_eval(args) -> int:
    from .data_io import _read_gray
    from .metrics import evaluate_maps

    pred_dir = _require_dir(args.pred_dir, "prediction directory")
    gt_dir = _require_dir(args.gt_dir, "ground-truth directory")
    preds, gts, stems, unmatched = _pairs(pred_dir, gt_dir)
    for s in unmatched:
        logger.warning("no counterpart for %s; skipped", s)
    if not stems:
        raise UsageError(f"no matching filenames between {pred_dir} and {gt_dir}")

    def load():
        for s in stems:
            p = _read_gray(preds[s]) / 255.0
            g = _read_gray(gts[s])
            g = (g / 255.0 if g.max() > 1 else g) >= 0.5
            if p.shape != g.shape:
                from .data_io import resize_map
                p = np.clip(resize_map(p, g.shape), 0, 1)
            yield p, g

    report = evaluate_maps(load(), normalize=not args.no_normalize,
                           meta={"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "skipped": unmatched})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    report.pr_to_csv(out / "pr_curve.csv")
    print(json.dumps({**report.summary(), "skipped": unmatched}))
    return EXIT_OK


def cmd_postproc(args) -> int:
    from .data_io import _read_gray
    from .metrics import mae
    from .postproc import binarize
    from PIL import Image

    pred_dir = _require_dir(args.pred_dir, "prediction directory")
    preds = _index(pred_dir)
    gts = _index(Path(args.gt_dir)) if args.gt_dir else {}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s, path in preds.items():
        m = _read_gray(path) / 255.0
        t0 = time.perf_counter()
        b = binarize(m, args.method)
        ms = (time.perf_counter() - t0) * 1000
        Image.fromarray(b.map * 255, mode="L").save(out / f"{s}.png")
        row = {"id": s, "threshold": b.threshold, "ms": round(ms, 3)}
        if s in gts:
            g = _read_gray(gts[s])
            g = (g / 255.0 if g.max() > 1 else g) >= 0.5
            row["mae_raw"] = mae(m, g)
            row["mae_bin"] = mae(b.map.astype(np.float64), g)
        rows.append(row)
        print(json.dumps(row))
    (out / "postproc.json").write_text(json.dumps({"method": args.method, "images": rows}, indent=2))
    return EXIT_OK


def _bench_config(args):
    from .bench import BenchConfig
    from .config import load_config, model_config, train_config

    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        bc = BenchConfig()
    else:
        bc = BenchConfig(variant=cfg["model.variant"], model=model_config(cfg), train=train_config(cfg),
                         init_seed=cfg["train.init_seed"], normalize=cfg["eval.normalize"])
    if getattr(args, "iters", None):
        import dataclasses
        n = args.n_train
        per_epoch = max(1, n // bc.train.batch)
        bc.train = dataclasses.replace(bc.train, epochs=max(1, args.iters // per_epoch))
    return bc


def cmd_generalize(args) -> int:
    from .bench import run_grid
    from .data_io import SplitSpec, load_dataset
    from .synthetic import generate_corpus

    bc = _bench_config(args)
    if args.toy:
        styles = ("near", "far")
        pools = {s: generate_corpus(args.n_train + args.n_test, args.side, s, seed=args.seed) for s in styles}
    else:
        if not args.dataset:
            raise UsageError("generalize needs --toy or at least one --dataset NAME=ROOT")
        from .data_io import ManifestDataset
        pools = {}
        for item in args.dataset:
            name, _, root = item.partition("=")
            if not Path(root).is_dir():
                raise UsageError(f"dataset root not found: {root}")
            pools[name] = ManifestDataset(load_dataset(root, name), bc.train.side)
    names = list(pools)
    specs = [SplitSpec([(n, args.n_train, args.seed)], names) for n in names]
    grid = run_grid(specs, pools, bc, cols=names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid.to_csv(out / "grid.csv")
    grid.to_json(out / "grid.json")
    for r in grid.to_rows():
        print(json.dumps(r))
    return EXIT_RUNTIME if len(grid.failed) == len(grid.rows) else EXIT_OK


def cmd_ablate(args) -> int:
    import dataclasses

    import torch

    from .backbone import BackboneConfig
    from .model import ModelConfig, VariantTag, build_variant
    from .synthetic import generate_corpus
    from .trainer import TrainConfig, evaluate_model, train

    if args.all:
        tags = [t.value for t in VariantTag]
    elif args.variant:
        tags = args.variant
        for t in tags:
            if t not in VariantTag.__members__:
                raise UsageError(f"unknown variant {t!r}; choose from {list(VariantTag.__members__)}")
    else:
        raise UsageError("ablate needs --all or --variant")
    samples = generate_corpus(args.n_train, args.side, "near", seed=args.seed)
    test = generate_corpus(args.n_test, args.side, "near", seed=args.seed + 1) if args.n_test else None
    base = ModelConfig(backbone=BackboneConfig(kind="toy"))
    tcfg = TrainConfig(lr=1e-3, decay_every=None, epochs=1, batch=min(8, args.n_train), side=args.side,
                       augment=False, seed=args.seed)
    per_epoch = max(1, args.n_train // tcfg.batch)
    tcfg = dataclasses.replace(tcfg, epochs=max(1, args.iters // per_epoch))
    rows = []
    for t in tags:
        torch.manual_seed(args.seed)
        model = build_variant(t, base)
        res = train(model, samples, tcfg)
        row = {"variant": t, "iterations": res.history[-1][1], "loss_s1": res.history[-1][2],
               "loss_s2": res.history[-1][3]}
        if test is not None:
            row.update(evaluate_model(model, test).summary())
        rows.append(row)
        print(json.dumps(row))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .synthetic import generate_corpus, write_corpus

    root = write_corpus(generate_corpus(args.n, args.side, args.style, args.seed), args.out)
    print(json.dumps({"root": str(root), "n": args.n, "style": args.style}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bbsnet", description="RGB-D salient object detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--variant")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write saliency maps for RGB/ + depth/ pairs")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input-dir", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--stage", choices=("final", "initial"), default="final")
    i.add_argument("--side", type=int)
    i.add_argument("--invert-depth", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score saliency maps against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--out", default="eval_out")
    e.add_argument("--no-normalize", action="store_true")
    e.set_defaults(func=cmd_eval)

    pp = sub.add_parser("postproc", help="binarize saliency maps")
    pp.add_argument("--pred-dir", required=True)
    pp.add_argument("--out-dir", required=True)
    pp.add_argument("--method", choices=("adp", "otsu"), default="otsu")
    pp.add_argument("--gt-dir")
    pp.set_defaults(func=cmd_postproc)

    g = sub.add_parser("generalize", help="train-on-X / test-on-Y grid")
    g.add_argument("--toy", action="store_true")
    g.add_argument("--dataset", action="append", help="NAME=ROOT")
    g.add_argument("--config")
    g.add_argument("--n-train", type=int, default=32)
    g.add_argument("--n-test", type=int, default=32)
    g.add_argument("--iters", type=int, default=200)
    g.add_argument("--side", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="grid_out")
    g.set_defaults(func=cmd_generalize)

    a = sub.add_parser("ablate", help="train model variants on the synthetic corpus")
    a.add_argument("--all", action="store_true")
    a.add_argument("--variant", action="append")
    a.add_argument("--iters", type=int, default=1)
    a.add_argument("--n-train", type=int, default=4)
    a.add_argument("--n-test", type=int, default=0)
    a.add_argument("--side", type=int, default=32)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("make-toy", help="write a synthetic RGB-D corpus")
    m.add_argument("--out", required=True)
    m.add_argument("--n", type=int, default=16)
    m.add_argument("--side", type=int, default=64)
    m.add_argument("--style", default="near")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint schema error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("command failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
