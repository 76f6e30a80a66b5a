"""Command-line entry point: ``rlroe {generate,build-rom,train,evaluate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .burgers import BlowUpError, generate_dataset, load_dataset, save_dataset
from .config import RunConfig, from_dict, load_config
from .estimators import SingularInnovationError, kf_init_covariance
from .evaluation import (
    KfEstimator,
    RlroeEstimator,
    error_vs_mu,
    error_vs_p,
    evaluate_estimator,
    policy_jacobian_norms,
    reference_trajectories,
    sample_process_noise,
    tune_kf,
    write_csv,
)
from .nn import load_policy, save_policy
from .ppo import TrainingError, train
from .rom import RankError, build_observation_matrix, build_rom, load_rom, save_rom

log = logging.getLogger("rlroe")

OUTPUTS = {
    "time_series": "error_vs_time.csv",
    "vs_mu": "error_vs_mu.csv",
    "vs_p": "error_vs_p.csv",
    "jacobian": "jacobian_norms.csv",
    "process_noise": "process_noise.csv",
}
MODES = tuple(OUTPUTS)
RUN_META = "run.json"
POLICY_FILE = "policy.bin"
ROM_FILE = "rom.bin"
CURVE_FILE = "learning_curve.csv"
KF_FILE = "kf_tuning.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(path: Path, data):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _sidecar(path: Path, cfg: RunConfig, **extra):
    _write_json(path.with_name(path.name + ".json"), cfg.metadata(**extra))


def _claim(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _config(args, **extra) -> RunConfig:
    overrides = {"seed": args.seed, "workers": getattr(args, "workers", None), **extra}
    try:
        return load_config(args.config, **overrides)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}")
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {args.config}: {e}")


# commands

def cmd_generate(args):
    cfg = _config(args, train_mus=args.mus)
    out = Path(args.out)
    _claim(out / "manifest.json", args.force)
    if any(not 0.0 <= m <= 1.0 for m in cfg.train_mus):
        raise UsageError("mu values must lie in [0, 1]")
    ds = generate_dataset(cfg.train_mus, cfg.burgers, seed=cfg.seed)
    ds.metadata.update(cfg.metadata())
    save_dataset(ds, out, force=args.force)
    print(f"wrote {len(ds)} trajectories ({ds.num_snapshots} snapshots, n={ds.n}) to {out}")


def cmd_build_rom(args):
    cfg = _config(args, rank=args.rank, p=args.p)
    out = Path(args.out)
    _claim(out, args.force)
    ds = load_dataset(args.dataset)
    obs = build_observation_matrix(cfg.p, ds.n)
    rom = build_rom(ds, obs, cfg.rank)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rom(rom, out)
    rho = float(np.max(np.abs(np.linalg.eigvals(rom.A_r))))
    _sidecar(out, cfg, dataset=str(Path(args.dataset).resolve()), spectral_radius=rho)
    print(f"rom r={rom.r} p={rom.p} sensors={list(rom.sensor_indices)} spectral_radius={rho:.6f}")


def cmd_train(args):
    extra = {"ppo.total_timesteps": args.total_timesteps}
    cfg = _config(args, **extra)
    out = Path(args.out)
    _claim(out / RUN_META, args.force)
    ds = load_dataset(args.dataset)
    rom = load_rom(args.rom)
    if rom.n != ds.n:
        raise UsageError(f"ROM state size {rom.n} does not match dataset n={ds.n}")
    cfg = replace(cfg, rank=rom.r, p=rom.p)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.rom, out / ROM_FILE)
    meta = cfg.metadata(dataset=str(Path(args.dataset).resolve()), rom=ROM_FILE, policy=POLICY_FILE,
                        checkpoint=None)

    def on_improve(policy, info):
        save_policy(policy, out / POLICY_FILE)
        meta["checkpoint"] = info
        _write_json(out / RUN_META, meta)
        log.info("checkpoint at t=%d, eval return %.6g", info["timesteps"], info["eval_return"])

    def on_update(t, mean_ret, diag):
        log.info("t=%d eval_return=%.6g", t, mean_ret)

    _, curve = train(ds, rom, cfg.env, cfg.ppo, on_improve=on_improve, on_update=on_update)
    path = write_csv(out / CURVE_FILE, ["timesteps", "mean_return", "std_return", "best_return"], curve.rows())
    _sidecar(path, cfg)
    print(f"best eval return {curve.best_return[-1]:.6g}; run written to {out}")


def _load_run(path: Path):
    meta = json.loads((path / RUN_META).read_text())
    if meta.get("checkpoint") is None:
        raise RuntimeError(f"{path} has no checkpoint")
    cfg = from_dict(meta["config"])
    return meta, cfg, load_rom(path / meta["rom"]), load_policy(path / meta["policy"])


def _kf_for(run_dir: Path, meta, cfg, rom, ds, workers):
    """Tuned (beta_q, beta_r), cached inside the run directory."""
    cache = run_dir / KF_FILE
    if cache.exists():
        kf = json.loads(cache.read_text())
        if kf.get("config_hash") == meta["config_hash"]:
            return kf["beta_q"], kf["beta_r"]
    bq, br, table = tune_kf(rom, ds, cfg.env, workers=workers)
    _write_json(cache, {"config_hash": meta["config_hash"], "beta_q": bq, "beta_r": br,
                        "table": [[q, r, e] for (q, r), e in sorted(table.items())]})
    return bq, br


def _reports(run_dir: Path, mus, args):
    meta, cfg, rom, policy = _load_run(run_dir)
    ds = load_dataset(meta["dataset"])
    env = replace(cfg.env, observation_noise_std=args.noise_std) if args.noise_std is not None else cfg.env
    seeds = args.seeds or cfg.eval_seeds
    workers = args.workers or cfg.workers
    bq, br = _kf_for(run_dir, meta, cfg, rom, ds, workers)
    trajs = reference_trajectories(mus if mus is not None else cfg.test_mus, ds, cfg.burgers)
    P0 = kf_init_covariance(cfg.env.initial_estimate_std, rom, ds)
    rl = evaluate_estimator(RlroeEstimator(policy), trajs, rom, env, seeds, workers=workers)
    kf = evaluate_estimator(KfEstimator(bq, br, P0), trajs, rom, env, seeds, workers=workers)
    return meta, cfg, rom, policy, ds, rl, kf


def cmd_evaluate(args):
    if args.mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}")
    runs = [Path(r) for r in args.runs]
    path = Path(args.out) / OUTPUTS[args.mode]
    _claim(path, args.force)
    if args.mode != "vs_p" and len(runs) != 1:
        raise UsageError(f"mode {args.mode} takes exactly one run directory")
    for r in runs:
        if not (r / RUN_META).exists():
            raise UsageError(f"{r} is not a training run directory")

    if args.mode == "time_series":
        meta, cfg, rom, _, _, rl, kf = _reports(runs[0], args.mus, args)
        rows = []
        for i, mu in enumerate(rl.mus):
            for s in range(rl.errors.shape[1]):
                for k in range(rl.errors.shape[2]):
                    rows.append((mu, s, k + 1, rl.errors[i, s, k], kf.errors[i, s, k], rl.lower_bound[i, s, k]))
        write_csv(path, ["mu", "seed", "k", "err_rlroe", "err_kf", "lower_bound"], rows)
        summary = {"rlroe": rl.overall(), "kf": kf.overall(), "lower_bound": rl.lower_bound_overall()}
    elif args.mode == "vs_mu":
        mus = args.mus or [round(0.05 * i, 10) for i in range(21)]
        meta, cfg, rom, _, _, rl, kf = _reports(runs[0], mus, args)
        lb = rl.lower_bound_time_average()
        rows = [(m, int(t), a, s, ka, ks, b) for (m, a, s, t), (_, ka, ks, _), b in
                zip(error_vs_mu(rl, cfg.train_mus), error_vs_mu(kf, cfg.train_mus), lb)]
        write_csv(path, ["mu", "in_training", "err_rlroe", "std_rlroe", "err_kf", "std_kf", "lower_bound"], rows)
        summary = {"rlroe": rl.overall(), "kf": kf.overall()}
    elif args.mode == "vs_p":
        reports = {}
        for r in runs:
            meta, cfg, rom, _, _, rl, kf = _reports(r, args.mus, args)
            if rom.p in reports:
                raise UsageError(f"two runs share p={rom.p}")
            reports[rom.p] = (rl, kf)
        if args.p and sorted(args.p) != sorted(reports):
            raise UsageError(f"--p {args.p} does not match the runs given (p={sorted(reports)})")
        rows = error_vs_p(reports)
        write_csv(path, ["p", "err_rlroe", "err_kf", "lower_bound"], rows)
        summary = {str(p): {"rlroe": a, "kf": b, "lower_bound": c} for p, a, b, c in rows}
    elif args.mode == "jacobian":
        meta, cfg, rom, policy = _load_run(runs[0])
        ds = load_dataset(meta["dataset"])
        K = cfg.env.episode_length
        rows = []
        for traj in reference_trajectories(args.mus or cfg.test_mus, ds, cfg.burgers):
            norms = policy_jacobian_norms(policy, rom, traj, episode_length=K)
            rows.extend((rom.p, traj.mu, k + 1, v) for k, v in enumerate(norms))
        write_csv(path, ["p", "mu", "k", "frobenius_norm"], rows)
        summary = {"mean_norm": float(np.mean([r[3] for r in rows]))}
    else:
        meta, cfg, rom, _ = _load_run(runs[0])
        ds = load_dataset(meta["dataset"])
        sample = sample_process_noise(rom, ds)
        write_csv(path, ["mu", "component", "mean", "std", "count"], sample.summary())
        summary = {"num_samples": int(sum(w.shape[0] for w in sample.samples.values()))}

    _sidecar(path, cfg, mode=args.mode, runs=[str(r) for r in runs], summary=summary)
    print(json.dumps(summary, sort_keys=True))


# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlroe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rlroe {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--seed", type=int)
        return p

    g = common(sub.add_parser("generate", help="simulate the training trajectories"))
    g.add_argument("--mus", type=_floats, help="comma-separated parameter values in [0, 1]")
    g.set_defaults(func=cmd_generate)

    b = common(sub.add_parser("build-rom", help="fit the DMD reduced-order model"))
    b.add_argument("dataset")
    b.add_argument("--rank", type=int)
    b.add_argument("--p", type=int, help="number of equally spaced sensors")
    b.set_defaults(func=cmd_build_rom)

    t = common(sub.add_parser("train", help="train the estimator policy with PPO"))
    t.add_argument("dataset")
    t.add_argument("rom")
    t.add_argument("--total-timesteps", type=int)
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("evaluate", help="compare RL-ROE and KF-ROE"))
    e.add_argument("runs", nargs="+", help="training run directories")
    e.add_argument("--mode", choices=MODES, default="time_series")
    e.add_argument("--mus", type=_floats)
    e.add_argument("--p", type=_ints, help="expected sensor counts (vs_p)")
    e.add_argument("--seeds", type=int, help="initial estimates per trajectory")
    e.add_argument("--noise-std", type=float)
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, --version and argparse errors
        return e.code if isinstance(e.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except UsageError as e:
        print(f"rlroe: error: {e}", file=sys.stderr)
        return 1
    except (BlowUpError, RankError, SingularInnovationError, TrainingError, RuntimeError, OSError, ValueError) as e:
        print(f"rlroe: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
