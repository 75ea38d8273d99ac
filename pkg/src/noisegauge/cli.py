"""Command-line interface.

Commands: pretrain, train-rater, train-select, baseline, eval, analyze.
Each run writes its artifacts plus a manifest under the output directory;
the NOISEGAUGE_OUT environment variable overrides --out.

Exit codes: 0 success, 2 invalid config/usage, 3 missing artifact,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (append_metric_csv, rater_statistics, read_metric_csv,
                       sliced_wasserstein, stage_sweep, write_stats_csv)
from .config import apply_seed_offset, config_hash, load_config
from .datasets import ToyDataset, ToyDatasetSpec, generate, load_dataset, save_dataset
from .diffusion import ddim_sample
from .errors import ConfigError, MissingArtifactError, NumericalAbort
from .figures import render_match_figure, render_metric_figure, render_stats_figures
from .io import (load_checkpoint, load_loss_curve, save_checkpoint, save_loss_curve,
                 sha256_file, write_manifest)
from .models import Denoiser, Rater
from .pipelines import (LossCurve, build_context, match_checkpoint, pretrain,
                        train_naive, train_rater, train_vanilla, train_with_selection)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config overlay")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--workers", type=int, default=1,
                        help="worker count for evaluation fan-out")
    common.add_argument("--seed-offset", type=int, default=0,
                        help="added to every seed in the config")

    parser = argparse.ArgumentParser(prog="noisegauge",
                                     description="meta-learned noise valuation pipelines")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common],
                   help="standard diffusion training with uniform noise")
    sub.add_parser("train-rater", parents=[common],
                   help="meta-train the noise rater on a frozen checkpoint")
    sub.add_parser("train-select", parents=[common],
                   help="resume training on rater-selected noise")
    baseline = sub.add_parser("baseline", parents=[common],
                              help="continue training with a fixed strategy")
    baseline.add_argument("mode", choices=["vanilla", "naive-min", "naive-max"])
    sub.add_parser("eval", parents=[common],
                   help="sample a checkpoint and score it against held-out data")
    analyze = sub.add_parser("analyze", parents=[common], help="rater analysis reports")
    analyze.add_argument("what", choices=["rater-stats", "stage-sweep", "match-checkpoint"])
    return parser


def _setup(args) -> tuple[dict, Path]:
    cfg = load_config(args.config, args.set)
    if args.seed_offset:
        cfg = apply_seed_offset(cfg, args.seed_offset)
    out = Path(os.environ.get("NOISEGAUGE_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _ensure_dataset(cfg: dict, out: Path) -> tuple[ToyDataset, Path]:
    configured = cfg["paths"]["dataset"]
    if configured:
        path = Path(configured)
        if not path.exists():
            raise MissingArtifactError(str(path))
        return load_dataset(path), path
    path = out / "dataset.blob"
    spec = ToyDatasetSpec(kind=cfg["data"]["kind"], d=cfg["data"]["d"],
                          n_classes=cfg["data"]["n_classes"],
                          n_samples=cfg["data"]["n_samples"],
                          seed=cfg["seeds"]["data_seed"])
    if path.exists():
        ds = load_dataset(path)
        if ds.spec == spec:
            return ds, path
    ds = generate(spec)
    save_dataset(path, ds)
    return ds, path


def _load_denoiser(cfg: dict, out: Path, key: str = "denoiser_checkpoint",
                   default: str = "pretrain/ckpt_final.blob"):
    path = Path(cfg["paths"][key] or out / default)
    model, params, header = load_checkpoint(path)
    if not isinstance(model, Denoiser):
        raise ConfigError(f"{path} is not a denoiser checkpoint")
    return model, params, header, path


def _load_rater(cfg: dict, out: Path):
    path = Path(cfg["paths"]["rater_checkpoint"] or out / "rater" / "rater_final.blob")
    model, params, header = load_checkpoint(path)
    if not isinstance(model, Rater):
        raise ConfigError(f"{path} is not a rater checkpoint")
    return model, params, header, path


def _check_data_compat(model, ds: ToyDataset, path) -> None:
    if model.arch.d != ds.spec.d or model.arch.n_classes != ds.spec.n_classes:
        raise ConfigError(
            f"{path} was trained for d={model.arch.d}, C={model.arch.n_classes}; "
            f"dataset has d={ds.spec.d}, C={ds.spec.n_classes}")


def _write_run_manifest(run_dir: Path, command: str, cfg: dict,
                        inputs: dict, outputs: dict) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": cfg["seeds"],
        "inputs": inputs,
        "outputs": {name: str(p) for name, p in outputs.items()},
        "output_hashes": {name: sha256_file(p) for name, p in outputs.items()},
    }
    path = run_dir / "manifest.json"
    write_manifest(path, manifest)
    return path


def _make_checkpoint_writer(run_dir: Path, kind: str, arch, seed: int, outputs: dict):
    def cb(step: int, params) -> None:
        path = run_dir / f"ckpt_step_{step:07d}.blob"
        save_checkpoint(path, kind, arch, params, step, seed)
        outputs[f"ckpt_step_{step:07d}"] = path
    return cb


def cmd_pretrain(args) -> int:
    cfg, out = _setup(args)
    ds, ds_path = _ensure_dataset(cfg, out)
    ctx = build_context(cfg, ds)
    run_dir = out / "pretrain"
    outputs: dict = {}
    seed = cfg["seeds"]["train_seed"]
    cb = _make_checkpoint_writer(run_dir, "denoiser", ctx.denoiser.arch, seed, outputs)
    theta, curve = pretrain(ctx, checkpoint_cb=cb)
    final = run_dir / "ckpt_final.blob"
    save_checkpoint(final, "denoiser", ctx.denoiser.arch, theta,
                    int(curve.steps[-1]) if len(curve.steps) else 0, seed)
    losses = run_dir / "losses.csv"
    save_loss_curve(losses, curve.steps, curve.losses)
    outputs["ckpt_final"] = final
    outputs["losses"] = losses
    _write_run_manifest(run_dir, "pretrain", cfg, {"dataset": str(ds_path)}, outputs)
    print(f"pretrain: {len(curve.steps)} steps, "
          f"final loss {curve.losses[-1]:.6f}" if len(curve.steps)
          else "pretrain: 0 steps")
    print(f"checkpoint: {final}")
    return 0


def cmd_train_rater(args) -> int:
    cfg, out = _setup(args)
    ds, ds_path = _ensure_dataset(cfg, out)
    ctx = build_context(cfg, ds)
    model, theta, header, ckpt_path = _load_denoiser(cfg, out)
    _check_data_compat(model, ds, ckpt_path)
    ctx.denoiser = model
    eta, log = train_rater(ctx, theta, seed=cfg["seeds"]["train_seed"])
    run_dir = out / "rater"
    run_dir.mkdir(parents=True, exist_ok=True)
    rater_path = run_dir / "rater_final.blob"
    save_checkpoint(rater_path, "rater", ctx.rater.arch, eta,
                    int(log.steps[-1]) if len(log.steps) else 0,
                    cfg["seeds"]["train_seed"],
                    extra={"base_checkpoint_step": header.get("step", 0)})
    log_path = run_dir / "meta_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("outer_step", "val_before", "val_after", "grad_norm"))
        for i in range(len(log.steps)):
            writer.writerow((int(log.steps[i]), repr(float(log.val_before[i])),
                             repr(float(log.val_after[i])), repr(float(log.grad_norms[i]))))
    outputs = {"rater_final": rater_path, "meta_log": log_path}
    _write_run_manifest(run_dir, "train-rater", cfg,
                        {"dataset": str(ds_path), "denoiser_checkpoint": str(ckpt_path),
                         "denoiser_step": header.get("step", 0)}, outputs)
    if len(log.steps):
        print(f"train-rater: {len(log.steps)} outer steps, "
              f"val {log.val_before[0]:.6f} -> {log.val_after[-1]:.6f}")
    else:
        print("train-rater: 0 outer steps (rater equals init)")
    print(f"rater: {rater_path}")
    return 0


def _resume_command(args, strategy: str) -> int:
    cfg, out = _setup(args)
    ds, ds_path = _ensure_dataset(cfg, out)
    ctx = build_context(cfg, ds)
    model, theta, header, ckpt_path = _load_denoiser(cfg, out)
    _check_data_compat(model, ds, ckpt_path)
    ctx.denoiser = model
    seed = cfg["seeds"]["train_seed"]
    inputs = {"dataset": str(ds_path), "denoiser_checkpoint": str(ckpt_path),
              "denoiser_step": header.get("step", 0)}
    if strategy == "train-select":
        rater, eta, rheader, rater_path = _load_rater(cfg, out)
        _check_data_compat(rater, ds, rater_path)
        ctx.rater = rater
        inputs["rater_checkpoint"] = str(rater_path)
        run_dir = out / "select"
        outputs: dict = {}
        cb = _make_checkpoint_writer(run_dir, "denoiser", ctx.denoiser.arch, seed, outputs)
        theta_out, curve = train_with_selection(ctx, theta, eta, seed, checkpoint_cb=cb)
    elif strategy == "vanilla":
        run_dir = out / "baseline-vanilla"
        outputs = {}
        cb = _make_checkpoint_writer(run_dir, "denoiser", ctx.denoiser.arch, seed, outputs)
        theta_out, curve = train_vanilla(ctx, theta, seed, checkpoint_cb=cb)
    else:  # naive-min / naive-max
        mode = strategy.split("-", 1)[1]
        run_dir = out / f"baseline-naive-{mode}"
        outputs = {}
        cb = _make_checkpoint_writer(run_dir, "denoiser", ctx.denoiser.arch, seed, outputs)
        theta_out, curve = train_naive(ctx, theta, mode, seed, checkpoint_cb=cb)
    final = run_dir / "ckpt_final.blob"
    save_checkpoint(final, "denoiser", ctx.denoiser.arch, theta_out,
                    header.get("step", 0) + (int(curve.steps[-1]) if len(curve.steps) else 0),
                    seed)
    losses = run_dir / "losses.csv"
    save_loss_curve(losses, curve.steps, curve.losses)
    outputs["ckpt_final"] = final
    outputs["losses"] = losses
    command = "train-select" if strategy == "train-select" else f"baseline {strategy}"
    _write_run_manifest(run_dir, command, cfg, inputs, outputs)
    if len(curve.steps):
        print(f"{command}: {len(curve.steps)} steps, final loss {curve.losses[-1]:.6f}")
    else:
        print(f"{command}: 0 steps")
    print(f"checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    cfg, out = _setup(args)
    ds, ds_path = _ensure_dataset(cfg, out)
    model, theta, header, ckpt_path = _load_denoiser(
        cfg, out, key="eval_checkpoint", default="pretrain/ckpt_final.blob")
    _check_data_compat(model, ds, ckpt_path)
    ctx = build_context(cfg, ds)
    ctx.denoiser = model
    rng = np.random.default_rng(cfg["seeds"]["eval_seed"])
    n = cfg["evaluation"]["n_samples"]
    sampling = cfg["sampling"]
    if ds.spec.n_classes > 0:
        cond_indices = rng.integers(0, ds.spec.n_classes, size=n)
        cfg_scale = sampling["cfg_scale"]
    else:
        cond_indices = np.full(n, 0)
        cfg_scale = None
    samples = ddim_sample(model, theta, ctx.sched, sampling["ddim_steps"],
                          sampling["ddim_eta"], rng, cond_indices=cond_indices,
                          cfg_scale=cfg_scale, n_samples=n)
    reference = ds.val_arrays()[0]
    swd = sliced_wasserstein(samples, reference, cfg["evaluation"]["n_projections"], rng)
    run_dir = out / "eval"
    run_dir.mkdir(parents=True, exist_ok=True)
    metric_path = run_dir / "metric.csv"
    append_metric_csv(metric_path, cfg["paths"]["run_label"], header.get("step", 0), swd)
    figure = render_metric_figure(read_metric_csv(metric_path), run_dir / "metric.png")
    outputs = {"metric": metric_path, "figure": figure}
    _write_run_manifest(run_dir, "eval", cfg,
                        {"dataset": str(ds_path), "checkpoint": str(ckpt_path),
                         "checkpoint_step": header.get("step", 0)}, outputs)
    print(f"eval: run={cfg['paths']['run_label']} step={header.get('step', 0)} "
          f"swd={swd:.6f}")
    return 0


def _stage_checkpoint_paths(cfg: dict, out: Path) -> list[Path]:
    configured = cfg["paths"]["stage_checkpoints"]
    if configured:
        paths = [Path(p) for p in configured]
        for p in paths:
            if not p.exists():
                raise MissingArtifactError(str(p))
        return paths
    paths = sorted((out / "pretrain").glob("ckpt_step_*.blob"))
    if not paths:
        raise MissingArtifactError(str(out / "pretrain" / "ckpt_step_*.blob"))
    return paths


def cmd_analyze(args) -> int:
    cfg, out = _setup(args)
    run_dir = out / "analysis"
    run_dir.mkdir(parents=True, exist_ok=True)
    ana = cfg["analysis"]

    if args.what == "match-checkpoint":
        curve_path = Path(ana["match_curve"] or out / "pretrain" / "losses.csv")
        if ana["match_target"] is None:
            raise ConfigError("analysis.match_target must be set for match-checkpoint")
        steps, losses = load_loss_curve(curve_path)
        curve = LossCurve(steps, losses)
        step = match_checkpoint(curve, float(ana["match_target"]),
                                ana["match_smooth_window"], ana["match_stability_window"])
        figure = render_match_figure(curve, float(ana["match_target"]),
                                     ana["match_smooth_window"], step,
                                     run_dir / "match.png")
        result_path = run_dir / "match.json"
        with open(result_path, "w") as fh:
            json.dump({"curve": str(curve_path), "target": ana["match_target"],
                       "smooth_window": ana["match_smooth_window"],
                       "stability_window": ana["match_stability_window"],
                       "matched_step": step}, fh, indent=2)
            fh.write("\n")
        outputs = {"match": result_path, "figure": figure}
        _write_run_manifest(run_dir, "analyze match-checkpoint", cfg,
                            {"curve": str(curve_path)}, outputs)
        print(f"match-checkpoint: {'NOT_FOUND' if step is None else step}")
        return 0

    ds, ds_path = _ensure_dataset(cfg, out)
    ctx = build_context(cfg, ds)
    t_grid = np.linspace(0.0, 1.0, ana["n_timesteps"])

    if args.what == "rater-stats":
        rater, eta, rheader, rater_path = _load_rater(cfg, out)
        _check_data_compat(rater, ds, rater_path)
        stage = str(rheader.get("extra", {}).get("base_checkpoint_step", "rater"))
        rng = np.random.default_rng(cfg["seeds"]["eval_seed"])
        rows = rater_statistics(rater, eta, ds, ana["n_images"], ana["n_noise"],
                                t_grid, rng, stage=stage, workers=args.workers)
        inputs = {"dataset": str(ds_path), "rater_checkpoint": str(rater_path)}
    else:  # stage-sweep
        paths = _stage_checkpoint_paths(cfg, out)
        stages = []
        for p in paths:
            model, theta, header = load_checkpoint(p)
            _check_data_compat(model, ds, p)
            ctx.denoiser = model
            stages.append((str(header.get("step", 0)), theta))
        results = stage_sweep(ctx, stages, ana["rater_train_steps"], ana["n_images"],
                              ana["n_noise"], t_grid, seed=cfg["seeds"]["train_seed"],
                              workers=args.workers)
        rows = [row for stage in sorted(results, key=lambda s: (len(s), s))
                for row in results[stage]]
        inputs = {"dataset": str(ds_path),
                  "stage_checkpoints": [str(p) for p in paths]}

    stats_path = run_dir / "stats.csv"
    write_stats_csv(rows, stats_path)
    figure_paths = render_stats_figures(rows, run_dir)
    outputs = {"stats": stats_path}
    outputs.update({p.stem: p for p in figure_paths})
    _write_run_manifest(run_dir, f"analyze {args.what}", cfg, inputs, outputs)
    print(f"analyze {args.what}: {len(rows)} rows -> {stats_path}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "pretrain":
            return cmd_pretrain(args)
        if args.command == "train-rater":
            return cmd_train_rater(args)
        if args.command == "train-select":
            return _resume_command(args, "train-select")
        if args.command == "baseline":
            return _resume_command(args, args.mode)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
