"""``parsestack`` command line: gen, train, eval, ablate, predict.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 when a
checkpoint and a dataset were built on different hierarchies.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import set_precision
from .config import ConfigError, RunConfig, load_config, with_overrides
from .hierarchy import LabelHierarchy, hierarchy_from_text
from .model import MODES, build_model, load_checkpoint, predict, save_checkpoint
from .svg import bar_chart, line_chart
from .synth import Dataset, HierarchyMismatch, generate, load_dataset, read_dataset_header, save_dataset
from .training import STRATEGY_NAMES, evaluate, run_ablation, train

EXIT_INPUT = 1
EXIT_HIERARCHY = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# helpers


def _claim_outputs(out: Path, names: Sequence[str], force: bool) -> None:
    """Create ``out`` and refuse to clobber any of ``names`` inside it unless forced."""
    out.mkdir(parents=True, exist_ok=True)
    taken = [n for n in names if (out / n).exists()]
    if taken and not force:
        raise CliError(f"{out}: would overwrite {', '.join(taken)}; pass --force to replace")


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def _truncate(ds: Dataset, h: LabelHierarchy) -> Dataset:
    """Same fine labels under a hierarchy that keeps only the finest levels."""
    return ds if h == ds.hierarchy else Dataset(ds.images, ds.fine, h)


def _datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    full = cfg.full_hierarchy()
    if cfg.data_dir:
        d = Path(cfg.data_dir)
        tr_path, va_path = d / "train.psds", d / "val.psds"
        for p in (tr_path, va_path):
            if not p.is_file():
                raise CliError(f"dataset file {p} does not exist; run `parsestack gen -o {d}` first")
        tr, va = load_dataset(tr_path, full), load_dataset(va_path, full)
    else:
        tr, va = generate(cfg.dataset_spec(), full).split(cfg.train_count)
    h = cfg.hierarchy()
    return _truncate(tr, h), _truncate(va, h)


def _load_config(args) -> RunConfig:
    cfg = with_overrides(load_config(args.config), seed=args.seed, mode=args.mode, levels=args.levels)
    cfg.validate()
    return cfg


# commands


def cmd_gen(args) -> None:
    cfg = _load_config(args)
    out = Path(args.out)
    _claim_outputs(out, ["train.psds", "val.psds", "config.toml"], args.force)
    tr, va = generate(cfg.dataset_spec(), cfg.full_hierarchy()).split(cfg.train_count)
    save_dataset(tr, out / "train.psds")
    save_dataset(va, out / "val.psds")
    _write(out, "config.toml", cfg.to_toml())
    print(f"wrote {len(tr)} train and {len(va)} val samples to {out}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    out = Path(args.out)
    names = ["model.psck", "trainlog.csv", "validation.csv", "loss.svg", "config.toml"]
    _claim_outputs(out, names, args.force)
    tr, va = _datasets(cfg)
    h = tr.hierarchy
    level = h.finest if cfg.train.mode == "standalone" else None
    model = build_model(cfg.train.mode, cfg.encoder, cfg.heads(), h, seed=cfg.train.seed, level=level)
    full = cfg.full_hierarchy()
    extra = {"data_hierarchy_hash": full.hexdigest(), "train_seed": cfg.train.seed}
    if full != h:
        extra["data_hierarchy"] = full.to_text()

    def snapshot(epoch, m, _log):
        every = cfg.train.snapshot_every
        if every and (epoch + 1) % every == 0:
            (out / "snapshots").mkdir(exist_ok=True)
            save_checkpoint(m, out / "snapshots" / f"epoch{epoch + 1:04d}.psck", {**extra, "epoch": epoch + 1})

    _write(out, "config.toml", cfg.to_toml())
    model, tlog = train(model, tr, cfg.train, val=va if len(va) else None, on_epoch=snapshot)
    tlog.check_decomposition()
    save_checkpoint(model, out / "model.psck", {**extra, "epoch": cfg.train.epochs})
    _write(out, "trainlog.csv", tlog.to_csv())
    _write(out, "validation.csv", tlog.validation_csv())
    series = {f"level {h.levels[k].name}": [] for k in tlog.levels}
    for e in range(cfg.train.epochs):
        recs = [r for r in tlog.steps if r.epoch == e]
        for j, key in enumerate(series):
            series[key].append(float(np.mean([r.level_losses[j] for r in recs])))
    _write(out, "loss.svg", line_chart("training loss per epoch", series))
    print(f"trained {cfg.train.mode} for {cfg.train.epochs} epochs; final loss {tlog.epoch_losses()[-1]:.4f}"
          if tlog.steps else "trained for 0 epochs")
    if tlog.epochs:
        print(tlog.epochs[-1].to_table())


def _checkpoint(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint {p} does not exist")
    try:
        return load_checkpoint(p)
    except (ValueError, KeyError) as err:
        raise CliError(f"{p}: unreadable checkpoint ({err})") from err


def cmd_eval(args) -> None:
    model, header = _checkpoint(args.checkpoint)
    ds_path = Path(args.dataset)
    if not ds_path.is_file():
        raise CliError(f"dataset {ds_path} does not exist")
    expected = header.get("extra", {}).get("data_hierarchy_hash", header["hierarchy_hash"])
    found = read_dataset_header(ds_path)["hierarchy_hash"]
    if found != expected:
        raise CliError(
            f"hierarchy hash mismatch: dataset {ds_path} has {found}, checkpoint {args.checkpoint} expects {expected}",
            EXIT_HIERARCHY,
        )
    out = Path(args.out)
    _claim_outputs(out, ["metrics.csv", "metrics.txt"], args.force)
    full = _full_hierarchy_for(header, model.hierarchy, ds_path)
    ds = _truncate(load_dataset(ds_path, full), model.hierarchy)
    report = evaluate(model, ds)
    _write(out, "metrics.csv", report.to_csv())
    _write(out, "metrics.txt", report.to_table() + "\n")
    print(report.to_table())


def _full_hierarchy_for(header: dict, h: LabelHierarchy, ds_path: Path) -> LabelHierarchy:
    """The hierarchy the dataset was written under: the checkpoint's own, or the archived run config's."""
    want = header.get("extra", {}).get("data_hierarchy_hash", header["hierarchy_hash"])
    if h.hexdigest() == want:
        return h
    source = header.get("extra", {}).get("data_hierarchy")
    if source:
        return hierarchy_from_text(source)
    raise CliError(f"{ds_path}: checkpoint does not record the dataset's full hierarchy")


def cmd_ablate(args) -> None:
    cfg = _load_config(args)
    out = Path(args.out)
    names = ["ablation.csv", "ablation.svg", "ablation.txt", "consistency.csv", "config.toml"]
    _claim_outputs(out, names, args.force)
    tr, va = _datasets(cfg)
    if len(va) == 0:
        raise CliError("ablation needs a validation split; set data.val_count > 0")
    modes = MODES if args.mode is None else (args.mode,)
    _write(out, "config.toml", cfg.to_toml())
    res = run_ablation(tr, va, cfg.encoder, cfg.heads(), cfg.train, modes)
    _write(out, "ablation.csv", res.to_csv())
    _write(out, "ablation.txt", res.to_table() + "\n")
    cons = ["strategy,consistency"] + [f"{m},{v!r}" for m, v in res.consistency.items()]
    _write(out, "consistency.csv", "\n".join(cons) + "\n")
    chart = bar_chart(
        "validation mIoU per level",
        res.level_names,
        {STRATEGY_NAMES[m]: v for m, v in res.miou.items()},
    )
    _write(out, "ablation.svg", chart)
    print(res.to_table())


def cmd_predict(args) -> None:
    from PIL import Image

    model, _ = _checkpoint(args.checkpoint)
    p = Path(args.image)
    if not p.is_file():
        raise CliError(f"image {p} does not exist")
    names = [f"{model.hierarchy.levels[k].name}.png" for k in model.levels]
    out = Path(args.out)
    _claim_outputs(out, names, args.force)
    try:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
    except OSError as err:
        raise CliError(f"{p}: cannot read image ({err})") from err
    try:
        maps = predict(model, img.transpose(2, 0, 1))
    except ValueError as err:
        raise CliError(str(err)) from err
    for name, m in zip(names, maps.maps):
        Image.fromarray(m[0].astype(np.uint8), "L").save(out / name)
    print(f"wrote {', '.join(names)} to {out}")


# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("-c", "--config", help="TOML run config (default: bundled geoscene.toml)")
    run.add_argument("--seed", type=int, help="override train.seed")
    run.add_argument("--mode", choices=MODES, help="override train.mode (ablate: run only this strategy)")
    run.add_argument("--levels", type=int, help="keep only the N finest hierarchy levels")

    parser = argparse.ArgumentParser(prog="parsestack", description="Coarse-to-fine parsing with stacked heads.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common, run], help="generate train/val datasets").set_defaults(fn=cmd_gen)
    sub.add_parser("train", parents=[common, run], help="train one model").set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(fn=cmd_eval)
    sub.add_parser("ablate", parents=[common, run], help="compare the four strategies").set_defaults(fn=cmd_ablate)
    p = sub.add_parser("predict", parents=[common], help="per-level label PNGs for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.set_defaults(fn=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    set_precision(64 if os.environ.get("PSTK_F64") == "1" else 32)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            args.fn(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except HierarchyMismatch as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_HIERARCHY
    except ConfigError as err:
        print(f"error: invalid configuration: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
