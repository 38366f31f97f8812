"""Command-line entry point: ``rubikpp <command> [options]``.

Exit codes: 0 success, 2 usage or config error, 3 I/O or file format error,
4 domain error.  Machine-readable results (report paths, metrics) go to
stdout; logs go to stderr.

The only environment variable consulted is ``RUBIKPP_SEED``, which supplies
the seed when neither the config file, ``--set seed=...`` nor ``--seed`` does.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import loss as L
from . import pipeline as P
from .errors import FormatError, RubikError
from .net import load_checkpoint
from .rubik import Axis, DisarrangeParams, DisarrangeRecord, disarrange, make_grid, restore, valid_angles
from .volume import Volume, load_nifti1, load_raw, save_raw

SEED_ENV = "RUBIKPP_SEED"
log = logging.getLogger("rubikpp")


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------------

def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _side(text: str):
    values = _int_list(text)
    if len(values) == 1:
        return values * 3
    if len(values) != 3:
        raise argparse.ArgumentTypeError("--side takes one value or three (x,y,z)")
    return values


def _raw_paths(path: str):
    """``(header, payload)`` for a raw volume given either file or the bare prefix."""
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".f32")


def read_volume(path: str) -> Volume:
    if Path(path).suffix == ".nii":
        return load_nifti1(path)
    header, payload = _raw_paths(path)
    return load_raw(header, payload)


def write_volume(volume: Volume, prefix: str):
    header, payload = _raw_paths(prefix)
    if header.parent and not header.parent.exists():
        raise FormatError(f"write error: directory {header.parent} does not exist")
    save_raw(volume, header, payload)
    return header, payload


def _record_path(prefix: str) -> Path:
    return _raw_paths(prefix)[0].with_suffix(".record.json")


def _read_record(path) -> DisarrangeRecord:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read record {path}: {exc}") from exc
    return DisarrangeRecord.loads(text)


def _fmt_dims(dims) -> str:
    return "x".join(str(d) for d in dims)


def load_config(args) -> P.ExperimentConfig:
    """Defaults < config file < RUBIKPP_SEED (only if no seed given) < --set < --seed."""
    data = P.load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = list(getattr(args, "set", None) or [])
    seed_overridden = any(o.split("=", 1)[0].strip() == "seed" for o in overrides)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and "seed" not in data and not seed_overridden and args.seed is None:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise P.ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    cfg = P.ExperimentConfig.from_dict(data).with_overrides(overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    return cfg


def _out_dir(args, cfg: P.ExperimentConfig) -> Path:
    return Path(args.out or cfg.output_dir)


def _emit(**items):
    for k, v in items.items():
        print(f"{k}: {v}")


# --- commands ------------------------------------------------------------------

def cmd_disarrange(args) -> int:
    vol = read_volume(args.input)
    params = DisarrangeParams(tuple(args.side), args.m, args.seed if args.seed is not None else _env_seed())
    out, record = disarrange(vol, params)
    header, payload = write_volume(out, args.out)
    rec_path = _record_path(args.out)
    rec_path.write_text(record.dumps())
    g = record.grid
    _emit(
        grid=_fmt_dims(g.counts),
        covered=_fmt_dims(g.covered),
        rotations=len(record.sequence),
        volume=payload,
        header=header,
        record=rec_path,
    )
    return 0


def _env_seed() -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise P.ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def cmd_restore(args) -> int:
    record = _read_record(args.record)
    vol = read_volume(args.input)
    out = restore(vol, record)
    _, payload = write_volume(out, args.out)
    _emit(volume=payload)
    if args.reference:
        ref = read_volume(args.reference)
        _emit(mse=repr(L.l2_loss(ref, out)))
    return 0


def cmd_gen_dataset(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    started = time.perf_counter()
    ids = P.gen_pretext_dataset(cfg, out, per_volume=args.per_volume)
    P.write_manifest(out, cfg, "gen-dataset", time.perf_counter() - started, {"pairs": len(ids)})
    _emit(pairs=len(ids), dataset=out / "pairs")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    extra = []
    if args.loss:
        extra.append(f"pretrain.loss={args.loss}")
    if args.adversarial:
        extra.append(f"pretrain.adversarial={'true' if args.adversarial == 'on' else 'false'}")
    if args.steps is not None:
        extra.append(f"pretrain.steps={args.steps}")
    cfg = cfg.with_overrides(extra)
    out = _out_dir(args, cfg)
    try:
        _, report = P.pretrain(cfg, out_dir=out)
    except P.Diverged as exc:
        log.error("%s; partial report in %s", exc, out / "pretrain.csv")
        raise
    _emit(
        report=out / "pretrain.json",
        losses=out / "pretrain.csv",
        checkpoint=out / "pretrain.ckpt",
        final_mse=repr(report.final_mse),
        baseline_mse=repr(report.baseline_mse),
    )
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args)
    extra = []
    if args.fraction is not None:
        extra.append(f"finetune.label_fraction={args.fraction}")
    if args.steps is not None:
        extra.append(f"finetune.steps={args.steps}")
    cfg = cfg.with_overrides(extra)
    ckpt = None if args.from_ckpt in (None, "none") else load_checkpoint(args.from_ckpt)
    out = _out_dir(args, cfg)
    tag = args.tag or ("finetune_pretrained" if ckpt else "finetune_scratch")
    report = P.finetune(cfg, ckpt, out_dir=out, tag=tag)
    _emit(report=out / f"{tag}.json", losses=out / f"{tag}.csv", mean_dice=repr(report.mean_dice))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    P.difficulty_sweep(cfg, args.n, args.m, out_dir=out, finetune_after=not args.no_finetune)
    _emit(report=out / "sweep.csv")
    return 0


def cmd_eval(args) -> int:
    pairs = P.load_pretext_dataset(args.dataset)
    if args.checkpoint:
        restorer = load_checkpoint(args.checkpoint)
    else:
        restorer = {"identity": P.identity_restorer, "oracle": P.oracle_restorer}[args.restorer]
    mse, rows = P.evaluate_restoration(restorer, pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["index,mse"] + [f"{r['index']},{r['mse']!r}" for r in rows]
    out.write_text("\n".join(lines) + "\n")
    _emit(mse=repr(mse), report=out)
    return 0


def cmd_compare(args) -> int:
    def scores(items):
        vals = []
        for item in items:
            try:
                vals.append(float(item))
            except ValueError:
                try:
                    obj = json.loads(Path(item).read_text())
                except OSError as exc:
                    raise FormatError(f"cannot read report {item}: {exc}") from exc
                except json.JSONDecodeError as exc:
                    raise FormatError(f"bad report {item}: {exc}") from exc
                if obj.get("mean_dice") is None:
                    raise FormatError(f"bad report {item}: no mean_dice")
                vals.append(float(obj["mean_dice"]))
        return vals

    summary = P.compare_runs(scores(args.a), scores(args.b), args.out)
    _emit(report=args.out, p_value=summary["p_value"], verdict=summary["verdict"])
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.input)
    if path.name.endswith(".record.json"):
        record = _read_record(path)
        g = record.grid
        print(f"record: seed {record.params.seed}, side {_fmt_dims(record.params.side)}, m {record.params.m}")
        print(f"grid: {_fmt_dims(g.counts)} (covered {_fmt_dims(g.covered)} of {_fmt_dims(g.dims)})")
        print(f"rotations: {len(record.sequence)}")
        for i, r in enumerate(record.sequence):
            print(f"  {i:3d}  {r.axis.name.lower():<8s} layer {r.layer:3d}  {r.angle:3d} deg")
        return 0
    vol = read_volume(args.input)
    print(f"dims: {_fmt_dims(vol.dims)}")
    print(f"channels: {vol.channels}")
    for c in range(vol.channels):
        ch = vol.data[c]
        print(f"range[{c}]: [{float(ch.min())!r}, {float(ch.max())!r}]")
    if args.side:
        grid = make_grid(vol.dims, args.side)
        print(f"grid: {_fmt_dims(grid.counts)} (covered {_fmt_dims(grid.covered)})")
        print("axis      layers  angles")
        for axis in Axis:
            angles = ",".join(str(a) for a in valid_angles(grid, axis))
            print(f"{axis.name.lower():<9s} {grid.counts[axis]:6d}  {{{angles}}}")
    return 0


# --- parser --------------------------------------------------------------------

def _config_options(p):
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, help="master seed (overrides config and %s)" % SEED_ENV)
    p.add_argument("--out", help="output directory (default: config output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rubikpp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rubikpp {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("disarrange", help="apply a random cube-layer disarrangement to a volume")
    p.add_argument("--in", dest="input", required=True, help="raw volume (.json/.f32 prefix) or .nii")
    p.add_argument("--out", required=True, help="output prefix; writes .json, .f32 and .record.json")
    p.add_argument("--side", type=_side, required=True, help="subcube side, n or x,y,z")
    p.add_argument("--m", type=int, required=True, help="layers rotated per axis")
    p.add_argument("--seed", type=int, help="disarrangement seed (default %s or 0)" % SEED_ENV)
    p.set_defaults(func=cmd_disarrange)

    p = sub.add_parser("restore", help="invert a recorded disarrangement")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="original volume; reports the restoration MSE")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("gen-dataset", help="materialise pretext pairs on disk")
    _config_options(p)
    p.add_argument("--per-volume", type=int, default=1, help="pairs per source volume")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("pretrain", help="train the restoration generator")
    _config_options(p)
    p.add_argument("--loss", choices=["l1", "l2"], help="reconstruction loss arm")
    p.add_argument("--adversarial", choices=["on", "off"], help="adversarial term on or off")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a head-swapped generator for segmentation")
    _config_options(p)
    p.add_argument("--from", dest="from_ckpt", default="none", help="checkpoint path or 'none' for scratch")
    p.add_argument("--fraction", type=float, help="labeled fraction of the training volumes")
    p.add_argument("--steps", type=int)
    p.add_argument("--tag", help="report file stem")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="pretrain (and fine-tune) over a grid of n and m")
    _config_options(p)
    p.add_argument("--n", type=_int_list, required=True, help="subcube sides, e.g. 2,4,8")
    p.add_argument("--m", type=_int_list, required=True, help="layers per axis, e.g. 2")
    p.add_argument("--no-finetune", action="store_true", help="record restoration MSE only")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="restoration MSE of a checkpoint over a pretext dataset")
    p.add_argument("--dataset", required=True, help="directory written by gen-dataset")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--restorer", choices=["identity", "oracle"])
    p.add_argument("--out", required=True, help="per-sample CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired t-test between two lists of dice scores or reports")
    p.add_argument("--a", nargs="+", required=True, help="numbers or report JSON files")
    p.add_argument("--b", nargs="+", required=True)
    p.add_argument("--out", required=True, help="summary JSON path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="summarise a volume or a disarrangement record")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--side", type=_side, help="show the grid and valid angles for this subcube side")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except P.ConfigError as exc:
        print(f"rubikpp {args.command}: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"rubikpp {args.command}: {exc}", file=sys.stderr)
        return 3
    except RubikError as exc:
        print(f"rubikpp {args.command}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
