"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand
accepts ``--config FILE.json``; explicit flags override values from the file,
which override built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import (
    load_dataset,
    prepare_samples,
    psnr,
    read_images,
    read_rten,
    save_dataset,
    save_mask,
    ssim,
    write_image_set,
    write_json,
    write_rten,
)
from .kspace import make_selection_subsets, make_undersampling_mask
from .model import magnitude
from .trainer import TrainConfig, fit, load_checkpoint, reconstruct_sample, zero_filled

log = logging.getLogger("ssmri")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


DEFAULTS = {
    "phantom-gen": {"n": 64, "count": 20, "seed": 0, "variant": "blobs"},
    "make-masks": {"size": 256, "accel": 4, "acs": 24, "sel_acs": 16, "seed": 0},
    "prepare-dataset": {"accel": 4, "acs": 24, "sel_acs": 16, "seed": 0, "per_sample_masks": False, "drop_images": False},
    "reconstruct": {"branch": "1"},
    "evaluate": {"branch": "1", "method": None},
    "report": {},
}


def _resolve(args, command):
    """Flag > config file > default, for every key of the command's defaults."""
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
    for key, default in DEFAULTS.get(command, {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, cfg.get(key, cfg.get(key.replace("_", "-"), default)))
    for key in ("out", "images", "checkpoint", "dataset"):
        if hasattr(args, key) and getattr(args, key) is None and key in cfg:
            setattr(args, key, cfg[key])
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssmri", description="Self-supervised parallel-network MRI reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("phantom-gen", help="write synthetic phantom images")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--variant", choices=["shepp", "blobs"])
    sp.add_argument("--out")

    sp = sub.add_parser("make-masks", help="write an undersampling mask and its two selection subsets")
    common(sp)
    sp.add_argument("--size", type=int)
    sp.add_argument("--accel", type=float)
    sp.add_argument("--acs", type=int)
    sp.add_argument("--sel-acs", dest="sel_acs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("prepare-dataset", help="undersample images and draw subset pairs")
    common(sp)
    sp.add_argument("--images", help="image set directory or manifest")
    sp.add_argument("--accel", type=float)
    sp.add_argument("--acs", type=int)
    sp.add_argument("--sel-acs", dest="sel_acs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--per-sample-masks", dest="per_sample_masks", action="store_true", default=None)
    sp.add_argument("--drop-images", dest="drop_images", action="store_true", default=None,
                    help="omit ground truth from the dataset")
    sp.add_argument("--out")

    sp = sub.add_parser("train", help="fit the parallel branches")
    common(sp)
    sp.add_argument("--train", dest="train_path")
    sp.add_argument("--val", dest="val_path")
    sp.add_argument("--out")
    sp.add_argument("--mode", choices=["parallel", "parallel_no_diff", "ssdu", "supervised"])
    sp.add_argument("--share-params", dest="share_params", action="store_true", default=None)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--K", type=int)
    sp.add_argument("--channels", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--seed-init1", dest="seed_init1", type=int)
    sp.add_argument("--seed-init2", dest="seed_init2", type=int)
    sp.add_argument("--seed-shuffle", dest="seed_shuffle", type=int)
    sp.add_argument("--seed-subsets", dest="seed_subsets", type=int)
    sp.add_argument("--resample-subsets-per-epoch", dest="resample", action="store_true", default=None)
    sp.add_argument("--ssdu-disjoint", dest="ssdu_disjoint", action="store_true", default=None)

    for name, helptext in (("reconstruct", "reconstruct a dataset"), ("evaluate", "score reconstructions")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--dataset")
        sp.add_argument("--out")
        sp.add_argument("--branch", choices=["1", "2"] + (["both"] if name == "evaluate" else []))
        if name == "evaluate":
            sp.add_argument("--method", help="row label used by 'report'")

    sp = sub.add_parser("report", help="tabulate evaluation reports and write error maps")
    common(sp)
    sp.add_argument("metrics", nargs="*", help="evaluation JSON files")
    sp.add_argument("--out")
    return p


# -- commands -------------------------------------------------------------


def _out_dir(path, force):
    out = Path(path)
    if (out / "manifest.json").exists() and not force:
        raise FileExistsError(f"{out / 'manifest.json'} exists (use --force to overwrite)")
    return out


def cmd_phantom_gen(a):
    _require(a, "out")
    out = _out_dir(a.out, a.force)
    imgs = [dataio.phantom(a.n, a.variant, a.seed + i) for i in range(a.count)]
    meta = {"n": a.n, "variant": a.variant, "seed": a.seed}
    write_image_set(out, imgs, meta=meta, force=a.force)
    print(f"wrote {a.count} phantoms to {out}")


def cmd_make_masks(a):
    out = Path(a.out or ".")
    size = a.size
    parent = make_undersampling_mask(size, size, a.accel, a.acs, a.seed)
    pair = make_selection_subsets(parent, a.sel_acs, seed=a.seed + 1)
    save_mask(out / "parent.rten", parent, a.force)
    save_mask(out / "sub1.rten", pair.sub1, a.force)
    save_mask(out / "sub2.rten", pair.sub2, a.force)
    summary = {
        "parent_count": parent.count,
        "target_count": size * size / a.accel,
        "sub1_fraction": pair.sub1.count / parent.count,
        "sub2_fraction": pair.sub2.count / parent.count,
        "overlap_fraction": pair.overlap_fraction(),
        "coverage_fraction": pair.coverage_fraction(),
    }
    print(json.dumps(summary, indent=2))


def cmd_prepare_dataset(a):
    _require(a, "images", "out")
    out = _out_dir(a.out, a.force)
    ids, imgs = read_images(a.images)
    samples = prepare_samples(
        imgs, a.accel, a.acs, a.sel_acs, a.seed, ids=ids,
        shared_mask=not a.per_sample_masks, keep_images=not a.drop_images,
    )
    meta = {"accel": a.accel, "acs_lines": a.acs, "sel_acs": a.sel_acs, "seed": a.seed,
            "shared_mask": not a.per_sample_masks}
    save_dataset(out, samples, meta=meta, force=a.force)
    print(f"wrote {len(samples)} samples to {out}")


def train_config_from_args(a) -> TrainConfig:
    base = json.loads(Path(a.config).read_text()) if a.config else {}
    cfg = TrainConfig.from_dict(base)
    overrides = {
        "max_epochs": a.epochs, "base_lr": a.lr, "warmup_epochs": a.warmup_epochs,
        "batch_size": a.batch_size, "K": a.K, "channels": a.channels, "loss_mode": a.mode,
        "share_params": a.share_params, "resample_subsets_per_epoch": a.resample,
        "ssdu_disjoint": a.ssdu_disjoint,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    for k in ("alpha", "beta", "gamma"):
        if getattr(a, k) is not None:
            cfg.weights = type(cfg.weights)(**{**cfg.weights.__dict__, k: getattr(a, k)})
    for k in ("init1", "init2", "shuffle", "subsets"):
        v = getattr(a, "seed_" + k)
        if v is not None:
            setattr(cfg.seeds, k, v)
    for k, v in (("train", a.train_path), ("val", a.val_path), ("out", a.out)):
        if v is not None:
            setattr(cfg.paths, k, v)
    return TrainConfig.from_dict(cfg.to_dict())


def cmd_train(a):
    cfg = train_config_from_args(a)
    if not cfg.paths.train or not cfg.paths.out:
        raise UsageError("train needs --train and --out (or paths.train / paths.out in --config)")
    if not a.force and (Path(cfg.paths.out) / "metrics.jsonl").exists():
        raise FileExistsError(f"{cfg.paths.out}/metrics.jsonl exists (use --force to overwrite)")
    if cfg.image_size != _dataset_size(cfg.paths.train):
        cfg.image_size = _dataset_size(cfg.paths.train)
    result = fit(cfg, force=True)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"epochs": len(result.log), "last": last, "best_checkpoint": str(result.best_checkpoint)}, indent=2))


def _dataset_size(path) -> int:
    return int(_manifest(path)[1]["shape"][0])


def cmd_reconstruct(a):
    _require(a, "checkpoint", "dataset", "out")
    p1, p2, _ = load_checkpoint(a.checkpoint)
    params = p1 if a.branch == "1" else p2
    out = Path(a.out)
    samples = load_dataset(a.dataset)
    for s in samples:
        write_rten(out / f"{s.id}.rten", reconstruct_sample(s, params), a.force)
    print(f"wrote {len(samples)} reconstructions to {out}")


def _manifest(path) -> tuple[Path, dict]:
    mpath = Path(path) / "manifest.json" if Path(path).is_dir() else Path(path)
    return mpath, json.loads(mpath.read_text())


def evaluate_checkpoint(checkpoint, dataset, out, branch="1", method=None, force=False) -> dict:
    p1, p2, manifest = load_checkpoint(checkpoint)
    samples = load_dataset(dataset)
    if any(s.image is None for s in samples):
        raise ValueError(f"{dataset}: evaluation needs ground-truth images")
    mpath, meta = _manifest(dataset)
    image_paths = {e["id"]: (mpath.parent / e["image"]).resolve() for e in meta["samples"]}
    out = Path(out)
    if out.exists() and not force:
        raise FileExistsError(f"{out} exists (use --force to overwrite)")
    recon_dir = out.with_name(out.stem + "_recon")
    branches = {"1": [("1", p1)], "2": [("2", p2)], "both": [("1", p1), ("2", p2)]}[branch]
    report = {
        "method": method or Path(checkpoint).parent.name or "model",
        "accel": meta.get("accel", samples[0].mask.accel),
        "checkpoint": str(Path(checkpoint).resolve()),
        "dataset": str(Path(dataset).resolve()),
        "branches": {},
    }
    zf = [magnitude(zero_filled(s)) for s in samples]
    report["zero_filled"] = {
        "mean_psnr": float(np.mean([psnr(s.image, z) for s, z in zip(samples, zf)])),
        "mean_ssim": float(np.mean([ssim(s.image, z) for s, z in zip(samples, zf)])),
    }
    for label, params in branches:
        rows = []
        for s in samples:
            rec = reconstruct_sample(s, params)
            rpath = write_rten(recon_dir / f"branch{label}" / f"{s.id}.rten", rec, True)
            mag = magnitude(rec)
            rows.append({
                "id": s.id,
                "psnr": psnr(s.image, mag),
                "ssim": ssim(s.image, mag),
                "recon": str(rpath.resolve()),
                "image": str(image_paths[s.id]),
            })
        report["branches"][label] = {
            "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
            "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
            "samples": rows,
        }
    first = report["branches"][branches[0][0]]
    report.update(mean_psnr=first["mean_psnr"], mean_ssim=first["mean_ssim"], samples=first["samples"])
    write_json(out, report, True)
    return report


def cmd_evaluate(a):
    _require(a, "checkpoint", "dataset", "out")
    rep = evaluate_checkpoint(a.checkpoint, a.dataset, a.out, a.branch, a.method, a.force)
    print(json.dumps({k: rep[k] for k in ("method", "accel", "mean_psnr", "mean_ssim", "zero_filled")}, indent=2))


def _slug(s):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(s)).strip("_") or "method"


def _accel_key(v):
    f = float(v)
    return int(f) if f.is_integer() else f


def build_report(reports: list[dict]) -> tuple[list[dict], list]:
    """Rows of {method, cells: {accel: (psnr, ssim)}} plus the ordered accel columns."""
    if not reports:
        raise ValueError("report needs at least one evaluation file")
    ids0 = sorted(r["id"] for r in reports[0]["samples"])
    for rep in reports[1:]:
        ids = sorted(r["id"] for r in rep["samples"])
        if ids != ids0:
            raise ValueError(f"inconsistent dataset ids: {rep.get('method')} does not match {reports[0].get('method')}")
    accels = [4, 8]
    for rep in reports:
        k = _accel_key(rep["accel"])
        if k not in accels:
            accels.append(k)
    rows: list[dict] = []
    for rep in reports:
        k = _accel_key(rep["accel"])
        row = next((r for r in rows if r["method"] == rep["method"] and k not in r["cells"]), None)
        if row is None:
            row = {"method": rep["method"], "cells": {}}
            rows.append(row)
        row["cells"][k] = (rep["mean_psnr"], rep["mean_ssim"])
    return rows, accels


def format_table(rows, accels) -> tuple[str, str]:
    head = ["Methods"] + [f"PSNR {a}x" for a in accels] + [f"SSIM {a}x" for a in accels]
    body = []
    for r in rows:
        ps = [f"{r['cells'][a][0]:.3f}" if a in r["cells"] else "-" for a in accels]
        ss = [f"{r['cells'][a][1]:.5f}" if a in r["cells"] else "-" for a in accels]
        body.append([r["method"]] + ps + ss)
    widths = [max(len(str(x[i])) for x in [head] + body) for i in range(len(head))]
    line = lambda cells: " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    text = "\n".join([line(head), sep] + [line(b) for b in body]) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    w.writerows(body)
    return text, buf.getvalue()


def cmd_report(a):
    if not a.metrics:
        raise UsageError("report needs at least one evaluation JSON")
    reports = [json.loads(Path(p).read_text()) for p in a.metrics]
    rows, accels = build_report(reports)
    text, csv_text = format_table(rows, accels)
    sys.stdout.write(text)
    if a.out:
        out = Path(a.out)
        for name, content in (("table.txt", text), ("table.csv", csv_text)):
            path = out / name
            if path.exists() and not a.force:
                raise FileExistsError(f"{path} exists (use --force to overwrite)")
            out.mkdir(parents=True, exist_ok=True)
            path.write_text(content)
        for i, rep in enumerate(reports):
            tag = f"{i:02d}_{_slug(rep['method'])}_{_accel_key(rep['accel'])}x"
            for row in rep["samples"]:
                err = np.abs(magnitude(read_rten(row["recon"])) - read_rten(row["image"]))
                write_rten(out / "error_maps" / tag / f"{row['id']}.rten", err, a.force)


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "make-masks": cmd_make_masks,
    "prepare-dataset": cmd_prepare_dataset,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        _resolve(args, args.command)
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        sys.stderr.write(f"ssmri {args.command}: error: {e}\n")
        log.debug("traceback", exc_info=True)
        return 2
    return 0


def main():
    sys.exit(run())
