"""``lgs`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every subcommand reads the same strict config file (``--config``); flags
override it, and ``--seed`` is the single source of randomness.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, load_config, write_config
from .geometry import PATCH_SIZE
from .numerics import ContractError
from .optics import export_masks
from .synth_eye import DatasetError, generate_dataset, import_dataset, load_arrays, render_dataset_sample

log = logging.getLogger("latent_gaze")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="global seed; overrides [train] seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = _Parser(prog="lgs", description="Latent optical gaze sensing pipeline.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def cmd(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = cmd("gen-data", "render a synthetic cross-subject train/test dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-subjects", type=int)
    p.add_argument("--test-subjects", type=int)
    p.add_argument("--samples", type=int, help="samples per train subject")
    p.add_argument("--test-samples", type=int, help="samples per test subject")
    p.add_argument("--workers", type=int, help="render processes (default LGS_THREADS or 1)")

    p = cmd("import-data", "validate an external manifest and report what was accepted")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write a JSON summary here")

    p = cmd("train", "train masks and decoder")
    p.add_argument("--data", required=True, help="dataset directory with train/ and test/")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--bank-mode", choices=["learned", "random", "hadamard"])
    p.add_argument("--teacher-file", help="precomputed teacher outputs (.lgs)")

    p = cmd("eval", "cross-subject evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", required=True, help="per-sample CSV")

    p = cmd("calibrate", "per-subject K-point calibration study")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", help="comma-separated K values (default from config)")
    p.add_argument("--out", required=True, help="calibration CSV")

    p = cmd("steer-train", "train the latent steering controller")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True, help="checkpoint with steer.* entries")

    p = cmd("steer-eval", "round-trip steering evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="steering CSV")

    p = cmd("ablate-masks", "train learned, random and Hadamard banks under one budget")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)

    p = cmd("export-masks", "write the hard masks as bitmaps for fabrication")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = cmd("bench", "latency of the deployment path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="bench.json")
    p.add_argument("--runs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--backend", choices=["compiled", "python"])
    p.add_argument("--external-sensing-us", type=float)
    return ap


# -- helpers ---------------------------------------------------------------------------

def _parse_set(items) -> dict:
    out: dict = {}
    for item in items:
        key, sep, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out.setdefault(sec.strip(), {})[name.strip()] = value.strip()
    return out


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        groups = _parse_set(args.set)
        text = "\n".join(f"[{sec}]\n" + "\n".join(f"{k} = {v}" for k, v in kv.items())
                         for sec, kv in groups.items())
        typed = load_config(text=text)
        cfg = cfg.with_overrides(**{sec: {k: getattr(getattr(typed, sec), k) for k in kv}
                                    for sec, kv in groups.items()})
    train = {}
    if args.seed is not None:
        train["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "bank_mode", None):
        train["bank_mode"] = args.bank_mode
    if getattr(args, "teacher_file", None):
        train.update(teacher_source="file", teacher_file=args.teacher_file)
    steering = {"steps": args.steps} if getattr(args, "steps", None) is not None else {}
    bench = {}
    if getattr(args, "runs", None) is not None:
        bench["runs"] = args.runs
    if getattr(args, "warmup", None) is not None:
        bench["warmup"] = args.warmup
    if getattr(args, "external_sensing_us", None) is not None:
        bench["external_sensing_us"] = args.external_sensing_us
    return cfg.with_overrides(train=train, steering=steering, bench=bench)


def _arrays(data_dir, split: str):
    return load_arrays(import_dataset(Path(data_dir) / split / "manifest.csv"))


def _load_checkpoint(path, cfg: RunConfig | None = None) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    if cfg is not None and ckpt.bank.n_masks != cfg.train.n_masks:
        raise CheckpointError(
            f"checkpoint has {ckpt.bank.n_masks} masks of {PATCH_SIZE}x{PATCH_SIZE} but the "
            f"config expects {cfg.train.n_masks}; refusing to evaluate")
    return ckpt


def _limit_threads():
    n = os.environ.get("LGS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(max(1, int(n)))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    d = cfg.data
    splits = generate_dataset(
        args.train_subjects or d.n_subjects_train, args.test_subjects or d.n_subjects_test,
        args.samples or d.samples_per_subject, cfg.train.seed, args.out,
        test_samples_per_subject=args.test_samples or d.test_samples_per_subject,
        workers=args.workers, invalid_fraction=d.invalid_fraction, config_hash=cfg.hash())
    write_config(cfg, Path(args.out) / "config.ini")
    _emit({"train": len(splits.train), "test": len(splits.test), "config_hash": cfg.hash()})
    return 0


def cmd_import_data(args, cfg: RunConfig) -> int:
    m = import_dataset(args.manifest)
    summary = {
        "accepted": len(m), "skipped": len(m.skipped), "subjects": len(m.subject_ids),
        "invalid_labels": sum(1 for r in m.samples if r.valid == 0),
        "config_hash": cfg.hash(), "skipped_rows": m.skipped,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import train, write_curve
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr = _arrays(args.data, "train")
    val = _arrays(args.data, "test") if (Path(args.data) / "test").is_dir() else None
    res = train(tr, cfg, val, progress=lambda r: log.info(
        "epoch %d  loss %.4f  val_mae %.2f deg", r.epoch, r.train_loss, r.val_mae_deg))
    res.checkpoint.save(out / "checkpoint.lgs")
    write_curve(res.curve, out / "curve.csv", cfg.hash())
    write_config(cfg, out / "config.ini")
    _emit({"checkpoint": str(out / "checkpoint.lgs"), "epochs": len(res.curve),
           "final_val_mae_deg": res.curve[-1].val_mae_deg if res.curve else None,
           "config_hash": cfg.hash()})
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .training import evaluate, write_eval
    ckpt = _load_checkpoint(args.checkpoint, cfg)
    rep = evaluate(ckpt, _arrays(args.data, args.split))
    write_eval(rep, args.out, ckpt.config_hash)
    _emit({"mean_angular_error_deg": rep.mean_angular_error,
           "validity_accuracy": rep.validity_accuracy, "n_valid": rep.n_valid,
           "config_hash": ckpt.config_hash})
    return 0


def cmd_calibrate(args, cfg: RunConfig) -> int:
    from .training import calibration_study, write_calibration
    ckpt = _load_checkpoint(args.checkpoint, cfg)
    ks = [int(k) for k in args.k.split(",")] if args.k else cfg.calibration.ks
    rows = calibration_study(ckpt, _arrays(args.data, "test"), ks, cfg)
    write_calibration(rows, args.out, ckpt.config_hash)
    summary = {}
    for K in ks:
        sel = [r for r in rows if r.K == K]
        summary[f"K={K}"] = {
            "median_uncalibrated_deg": float(np.median([r.mae_uncalibrated for r in sel])),
            "median_calibrated_deg": float(np.median([r.mae_calibrated for r in sel]))}
    _emit(summary)
    return 0


def cmd_steer_train(args, cfg: RunConfig) -> int:
    from .steering import controller_to_checkpoint, train_controller
    ckpt = _load_checkpoint(args.checkpoint, cfg)
    res = train_controller(ckpt, _arrays(args.data, "train"), cfg, _arrays(args.data, "test"))
    controller_to_checkpoint(ckpt, res.controller).save(args.out)
    _emit({"checkpoint": args.out, "final_loss": res.losses[-1] if res.losses else None,
           "cycle_rmse": res.cycle_rmse[-1] if res.cycle_rmse else None})
    return 0


def cmd_steer_eval(args, cfg: RunConfig) -> int:
    from .steering import controller_from_checkpoint, roundtrip_eval, write_steering
    ckpt = _load_checkpoint(args.checkpoint, cfg)
    rep = roundtrip_eval(controller_from_checkpoint(ckpt), ckpt, _arrays(args.data, "test"),
                         cfg.train.seed)
    write_steering(rep, args.out, ckpt.config_hash)
    _emit({"forward_error_deg": rep.forward_error, "backward_error_deg": rep.backward_error,
           "latent_roundtrip_rmse": rep.latent_roundtrip_rmse,
           "identity_error_deg": rep.identity_error})
    return 0


def cmd_ablate_masks(args, cfg: RunConfig) -> int:
    from .training import evaluate, train, write_curve
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr = _arrays(args.data, "train")
    te = _arrays(args.data, "test")
    rows = []
    for mode in ("learned", "random", "hadamard"):
        run_cfg = cfg.with_overrides(train={"bank_mode": mode})
        res = train(tr, run_cfg, te)
        rep = evaluate(res.checkpoint, te)
        res.checkpoint.save(out / f"{mode}.lgs")
        write_curve(res.curve, out / f"{mode}_curve.csv", run_cfg.hash())
        rows.append((mode, rep.mean_angular_error, rep.validity_accuracy, run_cfg.hash()))
        log.info("%s: %.2f deg", mode, rep.mean_angular_error)
    rows.sort(key=lambda r: r[1])
    with open(out / "ablation.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["rank", "bank_mode", "mae_deg", "validity_accuracy", "config_hash"])
        for i, (mode, mae, acc, h) in enumerate(rows, start=1):
            wr.writerow([i, mode, f"{mae:.6f}", f"{acc:.6f}", h])
    print(f"{'rank':<6}{'bank':<10}{'MAE (deg)':>10}")
    for i, (mode, mae, _, _) in enumerate(rows, start=1):
        print(f"{i:<6}{mode:<10}{mae:>10.2f}")
    return 0


def cmd_export_masks(args, cfg: RunConfig) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    bank = ckpt.bank if ckpt.bank.mode == "hard" else ckpt.bank.hardened()
    paths = export_masks(bank, args.out)
    (Path(args.out) / "config_hash.txt").write_text(ckpt.config_hash + "\n")
    _emit({"written": len(paths), "out": args.out})
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .bench import bench_inference, bench_pipeline, write_bench
    ckpt = _load_checkpoint(args.checkpoint)
    b = cfg.bench
    patch = render_dataset_sample(cfg.train.seed, 0, 0).patch
    reports = {
        "inference": bench_inference(ckpt, b.runs, b.warmup, backend=args.backend,
                                     seed=cfg.train.seed),
        "pipeline": bench_pipeline(ckpt, patch, b.runs, b.warmup, backend=args.backend),
    }
    ext = b.external_sensing_us if b.external_sensing_us >= 0 else None
    write_bench(reports, args.out, ckpt.config_hash, ext)
    _emit({k: {"p50_us": r.p50_us, "p99_us": r.p99_us, "backend": r.backend}
           for k, r in reports.items()})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "import-data": cmd_import_data, "train": cmd_train,
    "eval": cmd_eval, "calibrate": cmd_calibrate, "steer-train": cmd_steer_train,
    "steer-eval": cmd_steer_eval, "ablate-masks": cmd_ablate_masks,
    "export-masks": cmd_export_masks, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("lgs: error: a subcommand is required")
        cfg = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"lgs: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("kernels: %s", kernels.BACKEND)
    limiter = _limit_threads()
    t0 = time.perf_counter()
    try:
        return COMMANDS[args.command](args, cfg)
    except (DatasetError, CheckpointError, ContractError, ConfigError, OSError,
            RuntimeError, ValueError) as exc:
        print(f"lgs {args.command}: {exc}", file=sys.stderr)
        return 2
    finally:
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
