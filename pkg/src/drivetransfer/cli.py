"""Command-line front end: train, evaluate, transfer, analyze, export.

Each run writes one directory holding the effective configuration echo, the
produced CSV and checkpoint artifacts, and a machine-readable manifest, so a
finished run is reproducible from its own echo.  Flags mirror config keys
and override file values.  Exit codes: 0 success, 2 configuration error,
3 runtime failure, 4 training that was required to converge but did not.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, RunConfig, config_from_dict, config_to_dict,
                     save_config)
from .control import (design_controller, feedback_gains, linear_loop_response,
                      sensitivity_tf)
from .policy import load_policy
from .scenario import TASKS
from .train import train_lane_tracking
from .transfer import (_write_csv, bode_table, run_baseline, run_experiment,
                       sample_plant_variations, write_bode_csv, write_raw_csv,
                       write_summary_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NO_CONVERGENCE = 4

# Default root for derived run directories.
OUT_ENV_VAR = "DRIVETRANSFER_OUT"

EVAL_COLUMNS = ("episode", "length_steps", "discounted_return",
                "undiscounted_return", "cause")
STEP_COLUMNS = ("t_s", "offset_m", "heading_rad", "steer_cmd_rad")
SWEEP_COLUMNS = ("k_offset_rad_per_m", "vx_m_s", "max_pole_radius")
SENSITIVITY_COLUMNS = ("omega_rad_s", "mag_dob_on", "mag_dob_off")

_GAP_FLAG_KINDS = {"none": "none", "params": "param_variation",
                   "force": "side_force"}


# -- config assembly ------------------------------------------------------------


def _load_raw(path) -> dict:
    try:
        with open(os.fspath(path), encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a JSON object")
    return data


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file (if any) with flag overrides, then validate."""
    data = _load_raw(args.config) if getattr(args, "config", None) else {}
    flag = lambda name: getattr(args, name, None)
    if flag("seed") is not None:
        data["seed"] = args.seed
    if flag("out"):
        data["out"] = args.out
    if flag("task"):
        data["task"] = args.task
    if flag("checkpoint"):
        data["checkpoint"] = args.checkpoint
    if flag("resume"):
        data["resume"] = args.resume
    if flag("require_convergence"):
        data["require_convergence"] = True
    if flag("episodes") is not None:
        data.setdefault("transfer", {})["episodes"] = args.episodes
    if flag("samples") is not None:
        data["samples"] = args.samples
    if flag("dob"):
        data.setdefault("controller", {})["dob"] = args.dob == "on"
    if flag("gap"):
        # A kind switch invalidates any level set for the previous kind.
        data["gap"] = {"kind": _GAP_FLAG_KINDS[args.gap]}
    if flag("gap_level") is not None:
        section = data.setdefault("gap", {})
        kind = section.get("kind", "none")
        if kind == "param_variation":
            section["variation_bound"] = args.gap_level
        elif kind == "side_force":
            section["side_force_N"] = args.gap_level
        else:
            raise ConfigError("--gap-level needs --gap params or --gap force "
                              "(or a config gap.kind) to give it meaning")
    if flag("gap_sweep"):
        try:
            data["gap_sweep"] = [float(tok) for tok in args.gap_sweep.split(",")
                                 if tok.strip()]
        except ValueError as err:
            raise ConfigError(f"--gap-sweep: {err}") from err
    return config_from_dict(data)


# -- run directory plumbing -------------------------------------------------------


def resolve_run_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.out:
        run_dir = Path(cfg.out)
    else:
        root = Path(os.environ.get(OUT_ENV_VAR, "runs"))
        n = 1
        while (root / f"{command}-{n:03d}").exists():
            n += 1
        run_dir = root / f"{command}-{n:03d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, command: str, outputs, **extra) -> None:
    data = {"command": command, "package_version": __version__,
            "config": "config.json", "outputs": sorted(outputs)}
    data.update(extra)
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo(cfg: RunConfig, run_dir: Path) -> RunConfig:
    """The effective config a rerun needs, with the directory pinned.

    The master seed is left exactly as given: a null seed derives its
    defaults deterministically, while resolving it here would let it
    clobber an explicit ppo.seed on reload.
    """
    return replace(cfg, out=str(run_dir), ppo=cfg.ppo_config())


# -- commands ---------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.task != "lk":
        raise ConfigError("training optimizes the lane-tracking policy; "
                          "task must be lk")
    initial = None
    start = 0
    if cfg.resume:
        policy, value = load_policy(cfg.resume)
        if value is None:
            raise ValueError("checkpoint has no value-net arrays; "
                             "cannot resume training from it")
        initial = (policy, value)
        start = _resume_iteration(cfg.resume)
    run_dir = resolve_run_dir(cfg, "train")
    save_config(run_dir / "config.json", _echo(cfg, run_dir))

    def progress(row):
        print("iter {:>6d}  return {:10.3f}  length {:7.1f}".format(
            row[0], row[1], row[2]))

    result = train_lane_tracking(cfg.ppo_config(),
                                 checkpoint_path=run_dir / "policy.ckpt",
                                 log_path=run_dir / "training_log.csv",
                                 progress=progress, initial_nets=initial,
                                 start_iteration=start)
    write_manifest(run_dir, "train",
                   ["config.json", "policy.ckpt", "training_log.csv"],
                   iterations=result.iterations, converged=result.converged,
                   log_rows=len(result.log_rows), start_iteration=start,
                   resumed_from=cfg.resume, seed=result.config.seed)
    print(f"trained {result.iterations - start} iterations "
          f"(total {result.iterations}), converged={result.converged}")
    print(f"run directory: {run_dir}")
    if cfg.require_convergence and not result.converged:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _resume_iteration(checkpoint) -> int:
    """Iteration count recorded by the run that wrote the checkpoint."""
    manifest = Path(checkpoint).parent / "manifest.json"
    if not manifest.exists():
        return 0
    try:
        data = json.loads(manifest.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return 0
    return int(data.get("iterations", 0))


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.checkpoint is None:
        raise ConfigError("evaluate needs a checkpoint (--checkpoint PATH)")
    if cfg.task == "all":
        raise ConfigError("evaluate runs a single task; pick lk, lc or oa")
    policy, _ = load_policy(cfg.checkpoint)
    scenario = cfg.scenario_config()
    params = cfg.vehicle_params()
    run_dir = resolve_run_dir(cfg, "evaluate")
    save_config(run_dir / "config.json", _echo(cfg, run_dir))
    rows = []
    for i in range(cfg.transfer.episodes):
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.master_seed(), spawn_key=(i,)))
        res = run_baseline(scenario, policy, params, rng=rng)
        rows.append((i, res.length, res.discounted_return,
                     res.undiscounted_return, res.cause))
    _write_csv(run_dir / "episodes.csv", EVAL_COLUMNS, rows)
    mean_length = float(np.mean([r[1] for r in rows]))
    write_manifest(run_dir, "evaluate", ["config.json", "episodes.csv"],
                   checkpoint=cfg.checkpoint, task=cfg.task,
                   episodes=len(rows), mean_length=mean_length)
    print(f"{len(rows)} episodes on task {cfg.task}: "
          f"mean length {mean_length:.1f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_transfer(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.checkpoint is None:
        raise ConfigError("transfer needs a checkpoint (--checkpoint PATH)")
    policy, _ = load_policy(cfg.checkpoint)
    gaps = cfg.gaps()
    run_dir = resolve_run_dir(cfg, "transfer")
    save_config(run_dir / "config.json", _echo(cfg, run_dir))

    def progress(record):
        print("{:>3s} {:>8s} gap {:>15s}@{:<8g} episode {:>3d}: "
              "length {:>4d} ({})".format(
                  record.task, record.strategy, record.gap_kind,
                  record.gap_level, record.seed, record.length,
                  record.cause))

    summary = run_experiment(
        policy, gaps, tasks=cfg.tasks(),
        episodes_per_cell=cfg.transfer.episodes, seed=cfg.master_seed(),
        nominal_params=cfg.vehicle_params(),
        ctrl_config=cfg.controller.design_kwargs(),
        plan_horizon=cfg.transfer.plan_horizon,
        replan_every=cfg.transfer.replan_every,
        speed_cap=cfg.transfer.speed_cap,
        maneuver_offset=cfg.transfer.maneuver_offset,
        scenario_overrides=cfg.scenario or None,
        progress=progress if args.verbose else None)
    write_raw_csv(run_dir / "transfer_raw.csv", summary)
    write_summary_csv(run_dir / "transfer_summary.csv", summary)
    write_manifest(run_dir, "transfer",
                   ["config.json", "transfer_raw.csv", "transfer_summary.csv"],
                   checkpoint=cfg.checkpoint, cells=len(summary.cells),
                   records=len(summary.records), seed=summary.seed)
    for cell in summary.cells:
        print("{:>3s} {:>8s} gap {:>15s}@{:<8g}: length {:7.1f} +- {:6.1f}"
              .format(cell.task, cell.strategy, cell.gap_kind, cell.gap_level,
                      cell.mean_length, cell.std_length))
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args: argparse.Namespace) -> int:
    run_dir = resolve_run_dir(cfg, f"analyze-{args.kind}")
    save_config(run_dir / "config.json", _echo(cfg, run_dir))
    params = cfg.vehicle_params()
    ctrl = cfg.controller
    outputs = ["config.json"]
    warnings: list = []
    extra: dict = {"kind": args.kind}

    if args.kind == "step":
        # 12 s of response: settling checks live at the 10 s mark.
        n_steps = round(12.0 / params.dt)
        variants = [True, False] if args.dob is None else [args.dob == "on"]
        for dob in variants:
            resp = linear_loop_response(params, vx=ctrl.vx,
                                        lookahead=ctrl.lookahead,
                                        k_heading=ctrl.k_heading,
                                        k_offset=ctrl.k_offset,
                                        q_cutoff_hz=ctrl.q_cutoff_hz,
                                        dob=dob, n_steps=n_steps)
            name = f"step_dob_{'on' if dob else 'off'}.csv"
            rows = np.column_stack([resp["t"], resp["offset"],
                                    resp["heading"], resp["command"]])
            _write_csv(run_dir / name, STEP_COLUMNS,
                       [list(map(float, row)) for row in rows])
            outputs.append(name)
            print(f"{name}: final offset "
                  f"{resp['offset'][-1]:.3e} m over {n_steps} steps")
    elif args.kind == "bode":
        bound = (cfg.gap.variation_bound
                 if cfg.gap.kind == "param_variation" else 0.2)
        samples = sample_plant_variations(params, bound=bound,
                                          n=cfg.samples,
                                          seed=cfg.master_seed())
        table = bode_table(samples, params, vx=ctrl.vx,
                           lookahead=ctrl.lookahead)
        write_bode_csv(run_dir / "bode.csv", table)
        outputs.append("bode.csv")
        extra.update(samples=cfg.samples, variation_bound=bound)
        print(f"bode.csv: nominal + {cfg.samples} sampled magnitude curves "
              f"at {bound:.0%} variation")
    elif args.kind == "sweep":
        sweep = feedback_gains(params, ratio=ctrl.ratio,
                               lookahead=ctrl.lookahead)
        _write_csv(run_dir / "gain_sweep.csv", SWEEP_COLUMNS, sweep.rows)
        outputs.append("gain_sweep.csv")
        extra.update(k_offset=sweep.k_offset, k_heading=sweep.k_heading,
                     ratio=sweep.ratio)
        print(f"gain_sweep.csv: {len(sweep.rows)} grid points, selected "
              f"k_offset={sweep.k_offset:g}, k_heading={sweep.k_heading:g}")
    else:  # sensitivity
        design = design_controller(params, **ctrl.design_kwargs())
        omegas = np.logspace(-1.0, math.log10(math.pi / design.dt), 200)
        mags = []
        for dob in (True, False):
            s = sensitivity_tf(design, dob=dob)
            radius = s.max_pole_radius()
            if radius >= 1.0 - 1e-9:
                warnings.append(f"sensitivity (dob={'on' if dob else 'off'}) "
                                f"has pole radius {radius:.6f}")
            mags.append(np.abs(s.frequency_response(omegas)))
        rows = np.column_stack([omegas, mags[0], mags[1]])
        _write_csv(run_dir / "sensitivity.csv", SENSITIVITY_COLUMNS,
                   [list(map(float, row)) for row in rows])
        outputs.append("sensitivity.csv")
        print(f"sensitivity.csv: |S| on {len(omegas)} frequencies, "
              f"DC magnitude {mags[0][0]:.3e} with DOB")
    for line in warnings:
        print(f"warning: {line}", file=sys.stderr)
    write_manifest(run_dir, "analyze", outputs, warnings=warnings, **extra)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_export(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Write the fully resolved configuration (every default filled in)."""
    resolved = replace(cfg, ppo=cfg.ppo_config())
    text = json.dumps(config_to_dict(resolved), indent=2, sort_keys=True)
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {cfg.out}")
    else:
        print(text)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drivetransfer",
        description="Train driving policies on a nominal vehicle and "
                    "transfer them to perturbed ones through a robust "
                    "tracking pipeline.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON run configuration file")
    common.add_argument("--seed", type=int, metavar="N",
                        help="master seed (overrides config)")
    common.add_argument("--out", metavar="DIR",
                        help=f"run directory (default: fresh under "
                             f"${OUT_ENV_VAR} or ./runs)")
    common.add_argument("--task", choices=TASKS + ("all",))
    common.add_argument("--gap", choices=tuple(_GAP_FLAG_KINDS),
                        help="modeling-gap kind")
    common.add_argument("--gap-level", dest="gap_level", type=float,
                        metavar="FLOAT",
                        help="variation bound (params) or force in N (force)")
    common.add_argument("--episodes", type=int, metavar="N",
                        help="episodes per cell")
    common.add_argument("--dob", choices=("on", "off"),
                        help="disturbance observer switch")

    p = sub.add_parser("train", parents=[common],
                       help="optimize the lane-tracking policy on the "
                            "nominal vehicle")
    p.add_argument("--resume", metavar="CKPT",
                   help="checkpoint to continue training from")
    p.add_argument("--require-convergence", dest="require_convergence",
                   action="store_true",
                   help="exit nonzero if training does not converge")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="run deterministic episodes of a trained policy "
                            "on the nominal environment")
    p.add_argument("--checkpoint", metavar="CKPT", help="policy to load")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("transfer", parents=[common],
                       help="run the task x strategy x gap experiment matrix")
    p.add_argument("--checkpoint", metavar="CKPT", help="policy to load")
    p.add_argument("--gap-sweep", dest="gap_sweep", metavar="L1,L2,...",
                   help="comma-separated gap levels replacing --gap-level")
    p.add_argument("--verbose", action="store_true",
                   help="print every episode as it finishes")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("analyze", parents=[common],
                       help="controller analysis data, no vehicle simulation")
    p.add_argument("kind", choices=("bode", "step", "sweep", "sensitivity"))
    p.add_argument("--samples", type=int, metavar="N",
                   help="sampled plants for the bode envelope")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("export", parents=[common],
                       help="print or write the fully resolved configuration")
    p.set_defaults(handler=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        return args.handler(cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # CLI boundary: runtime failures become exit 3
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
