"""Command-line entry point: ``dkit <command> [options]``."""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import ENCODER_LOSSES, GRL_MODES, RunConfig
from .errors import ConfigError, DkitError, FormatError, NonFiniteLoss
from .metrics import (
    Readouts,
    encode_references,
    evaluate,
    flow_probe,
    pca_2d,
    read_report,
    write_flow_probe,
    write_report,
)
from .model import TRANSFORM_MODES
from .selfaug import AUG_MODES
from .synthdata import load_dataset, make_dataset, save_dataset
from .trainer import load_checkpoint, save_checkpoint, train, write_history

log = logging.getLogger("dkit")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

PROJECTION_METHOD = "pca (exact, 2 components; substitutes UMAP)"

SWEEP_AXES = {
    "grl_mode": [(loss, mode) for mode in GRL_MODES for loss in ENCODER_LOSSES],
    "encoder_loss": list(ENCODER_LOSSES),
    "aug_proportion": [0.0, 0.25, 0.5, 0.75, 1.0],
    "aug_mode": list(AUG_MODES),
    "reference_transform": list(TRANSFORM_MODES),
}
SWEEP_METRICS = ("cka_emb", "lk_cka_speaker", "lk_cka_emotion", "secs", "eecs",
                 "speaker_target_win_rate", "emotion_match_rate", "heldout_recon")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------- helpers


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.dataset.seed = args.seed
        cfg.self_augmentation.seed = args.seed
    return cfg.validate()


def _prepare_out_dir(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise CliError(EXIT_IO, f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise CliError(EXIT_IO, f"{path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_out_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CliError(EXIT_IO, f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise CliError(EXIT_CONFIG, f"--{n.replace('_', '-')} is required for this command")


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except (FormatError, ConfigError, KeyError, ValueError, RuntimeError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"{path}: {exc}") from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, FormatError, KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load dataset {path}: {exc}") from exc


def _model_for(ckpt, dataset):
    model = ckpt.build_model()
    if model.cfg.feature_dim != dataset.spec.feature_dim:
        raise CliError(EXIT_CHECKPOINT, "checkpoint feature_dim does not match the dataset")
    model.eval()
    return model


def config_label(cfg: RunConfig) -> str:
    a, s = cfg.ablation, cfg.self_augmentation
    label = f"{a.encoder_loss}+{a.grl_mode}"
    if a.reference_transform != "none":
        label += f"+{a.reference_transform}"
    if cfg.train.stage2_steps:
        label += f"+aug:{s.mode}@{s.proportion:g}"
    return label


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def _sidecar(out: Path, command: str) -> None:
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(out / "run.log", "a") as fh:
        fh.write(f"{stamp} {command} {' '.join(sys.argv[1:])}\n")


def _metric_rows(metrics: dict, label: str, seed: int) -> list[dict]:
    return [{"metric": k, "config": label, "value": float(v), "seed": seed} for k, v in metrics.items()]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    _require(args, "out")
    cfg = _load_config(args)
    out = _prepare_out_dir(Path(args.out), args.force)
    ds = make_dataset(cfg.dataset)
    save_dataset(ds, out)
    for name, idx in ds.splits.items():
        _say(args, f"{name}: {len(idx)}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    cfg = _load_config(args)
    dataset = _load_data(args.data)
    if dataset.spec.feature_dim != cfg.dataset.feature_dim:
        raise CliError(EXIT_CONFIG, "config feature_dim does not match the dataset")
    out = _prepare_out_dir(Path(args.out), args.force)
    resume = _load_ckpt(args.resume) if args.resume else None

    def on_log(step, stage, metrics):
        if not args.quiet:
            shown = " ".join(f"{k}={v:.4g}" for k, v in metrics.items())
            print(f"[stage {stage} step {step}] {shown}", flush=True)

    _sidecar(out, "train")
    try:
        result = train(cfg, dataset, resume=resume, on_log=on_log)
    except NonFiniteLoss as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "last_good.dkc")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    save_checkpoint(result.checkpoint, out / "final.dkc")
    save_checkpoint(result.best, out / "best.dkc")
    write_history(result.history, out / "metrics.csv")
    _say(args, f"wrote {out / 'final.dkc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "ckpt", "data", "out")
    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    model = _model_for(ckpt, dataset)
    cfg = ckpt.config
    seed = cfg.train.seed if args.seed is None else args.seed
    out = _prepare_out_dir(Path(args.out), args.force)
    metrics = evaluate(model, dataset, seed, Readouts.fit(dataset), cfg.ablation.reference_transform)
    rows = _metric_rows(metrics, config_label(cfg), seed)
    write_report(rows, out / "report.csv", out / "report.json",
                 meta={"checkpoint_step": ckpt.step, "config": cfg.to_dict(), "projection": PROJECTION_METHOD})
    for r in rows:
        _say(args, f"{r['metric']}: {r['value']:.6g}")
    return EXIT_OK


def cmd_flow_probe(args) -> int:
    _require(args, "ckpt", "data", "out")
    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    model = _model_for(ckpt, dataset)
    out = _prepare_out_file(Path(args.out), args.force)
    table = flow_probe(model, dataset, reference_transform=ckpt.config.ablation.reference_transform)
    write_flow_probe(table, out)
    for r in table.rows:
        _say(args, f"step {r.flow_step} reverse={r.reverse} speaker={r.lk_cka_speaker:.4f} emotion={r.lk_cka_emotion:.4f}")
    return EXIT_OK


def cmd_project(args) -> int:
    _require(args, "ckpt", "data", "out")
    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    model = _model_for(ckpt, dataset)
    out = _prepare_out_file(Path(args.out), args.force)
    samples = dataset.split(args.split)
    _, E = encode_references(model, samples, ckpt.config.ablation.reference_transform, dataset.speaker_basis)
    xy = pca_2d(E)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "x", "y", "emotion", "speaker"])
        for s, (x, y) in zip(samples, xy):
            w.writerow([s.index, repr(float(x)), repr(float(y)), s.emotion_id, s.speaker_id])
    _say(args, f"wrote {len(samples)} rows ({PROJECTION_METHOD})")
    return EXIT_OK


# --------------------------------------------------------------------- sweep


def _apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if axis == "grl_mode":
        cfg.ablation.encoder_loss, cfg.ablation.grl_mode = value
    elif axis == "encoder_loss":
        cfg.ablation.encoder_loss = value
    elif axis == "aug_proportion":
        cfg.self_augmentation.proportion = float(value)
    elif axis == "aug_mode":
        cfg.self_augmentation.mode = value
    elif axis == "reference_transform":
        cfg.ablation.reference_transform = value
    else:
        raise CliError(EXIT_CONFIG, f"unknown sweep axis {axis!r}")
    return cfg.validate()


def _value_label(value) -> str:
    return "+".join(value) if isinstance(value, tuple) else f"{value:g}" if isinstance(value, float) else str(value)


def _sweep_job(job: dict) -> dict:
    """Train and evaluate one sub-run inside its own directory; never raises."""
    torch.set_num_threads(1)
    out = Path(job["dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig.from_dict(job["config"])
    status = {"dir": str(out), "value": job["value"], "replicate": job["replicate"], "seed": cfg.train.seed}
    try:
        dataset = make_dataset(cfg.dataset)
        result = train(cfg, dataset, evaluate_stages=False)
        save_checkpoint(result.checkpoint, out / "final.dkc")
        write_history(result.history, out / "metrics.csv")
        model = result.checkpoint.build_model()
        model.eval()
        metrics = evaluate(model, dataset, cfg.train.seed, Readouts.fit(dataset), cfg.ablation.reference_transform)
        write_report(_metric_rows(metrics, config_label(cfg), cfg.train.seed), out / "report.csv", out / "report.json",
                     meta={"config": cfg.to_dict(), "projection": PROJECTION_METHOD})
        status.update(exit=EXIT_OK, metrics=metrics)
    except NonFiniteLoss as exc:
        status.update(exit=EXIT_NONFINITE, error=str(exc))
    except DkitError as exc:
        status.update(exit=EXIT_CONFIG, error=str(exc))
    except OSError as exc:
        status.update(exit=EXIT_IO, error=str(exc))
    return status


def sweep_jobs(cfg: RunConfig, axis: str, n_seeds: int, out: Path) -> list[dict]:
    """One job per (axis value, replicate); the dataset is shared by all values of a replicate."""
    if axis not in SWEEP_AXES:
        raise CliError(EXIT_CONFIG, f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    base_seed = cfg.train.seed
    jobs = []
    for value in SWEEP_AXES[axis]:
        for rep in range(n_seeds):
            sub = _apply_axis(cfg, axis, value)
            sub.dataset.seed = derive_seed(base_seed, "dataset", rep)
            sub.train.seed = derive_seed(base_seed, _value_label(value), rep)
            sub.self_augmentation.seed = sub.train.seed
            jobs.append({
                "dir": str(out / f"{_value_label(value)}" / f"rep{rep}"),
                "config": sub.to_dict(),
                "value": _value_label(value),
                "replicate": rep,
            })
    return jobs


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DKIT_THREADS", "1")))
    except ValueError:
        raise CliError(EXIT_CONFIG, "DKIT_THREADS must be an integer") from None


def cmd_sweep(args) -> int:
    _require(args, "axis", "out")
    cfg = _load_config(args)
    out = _prepare_out_dir(Path(args.out), args.force)
    jobs = sweep_jobs(cfg, args.axis, args.seeds, out)
    workers = min(_threads(), len(jobs))
    _say(args, f"sweep {args.axis}: {len(jobs)} runs on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_sweep_job(job))
            _say(args, f"  {job['value']} rep{job['replicate']}: exit {results[-1]['exit']}")
    write_sweep_table(results, args.axis, out / "sweep.csv")
    rows = [r for res in results if res["exit"] == EXIT_OK
            for r in _metric_rows(res["metrics"], f"{args.axis}={res['value']}", res["seed"])]
    write_report(rows, out / "runs.csv", out / "runs.json",
                 meta={"axis": args.axis, "seeds": args.seeds, "projection": PROJECTION_METHOD,
                       "failed": [{k: r[k] for k in ("value", "replicate", "exit", "error")}
                                  for r in results if r["exit"] != EXIT_OK]})
    failed = [r for r in results if r["exit"] != EXIT_OK]
    return failed[0]["exit"] if failed else EXIT_OK


def write_sweep_table(results: list[dict], axis: str, path: Path) -> None:
    """Ablation-table layout: one row per axis value, metric means over replicates."""
    keys = ["encoder_loss", "grl_mode"] if axis == "grl_mode" else [axis]
    order = []
    for r in results:
        if r["value"] not in order:
            order.append(r["value"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["n_ok", "n_failed"] + [f"{m}_mean" for m in SWEEP_METRICS] + [f"{m}_std" for m in SWEEP_METRICS])
        for value in order:
            group = [r for r in results if r["value"] == value]
            ok = [r["metrics"] for r in group if r["exit"] == EXIT_OK]
            cells = value.split("+") if axis == "grl_mode" else [value]
            means, stds = [], []
            for m in SWEEP_METRICS:
                vals = [o[m] for o in ok if m in o]
                means.append(repr(float(np.mean(vals))) if vals else "")
                stds.append(repr(float(np.std(vals))) if vals else "")
            w.writerow(cells + [len(ok), len(group) - len(ok)] + means + stds)


# -------------------------------------------------------------------- report


def cmd_report(args) -> int:
    """Merge report.csv files found under the given run directories into one table."""
    _require(args, "out")
    if not args.runs:
        raise CliError(EXIT_CONFIG, "report needs at least one run directory")
    rows = []
    for run in args.runs:
        found = sorted(Path(run).rglob("report.csv"))
        if not found:
            raise CliError(EXIT_IO, f"no report.csv under {run}")
        for f in found:
            try:
                rows.extend(read_report(f))
            except (OSError, KeyError, ValueError) as exc:
                raise CliError(EXIT_IO, f"{f}: {exc}") from exc
    out = _prepare_out_file(Path(args.out), args.force)
    json_path = out.with_suffix(".json")
    write_report(rows, out, json_path, meta={"sources": [str(r) for r in args.runs], "projection": PROJECTION_METHOD})
    _say(args, f"merged {len(rows)} rows into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "flow-probe": cmd_flow_probe,
    "project": cmd_project,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed in the config")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory or file")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing outputs")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress output")

    p = argparse.ArgumentParser(prog="dkit", parents=[common], description="Disentanglement toolkit on synthetic factor data.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train both stages")
    t.add_argument("--data")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name, helptext in (("eval", "metric report"), ("flow-probe", "per-flow-step LK-CKA"),
                           ("project", "2-D projection of emotion embeddings")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--ckpt")
        c.add_argument("--data")
        if name == "project":
            c.add_argument("--split", default="eval_heldout", choices=["train", "eval_heldout"])
    s = sub.add_parser("sweep", parents=[common], help="ablation sweep over one axis")
    s.add_argument("--axis", choices=sorted(SWEEP_AXES))
    s.add_argument("--seeds", type=int, default=3)
    r = sub.add_parser("report", parents=[common], help="merge run reports")
    r.add_argument("runs", nargs="*")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("force", False), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT if args.command != "gen-data" else EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
