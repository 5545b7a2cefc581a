"""Command-line front end: run, sweep, verify, bounds.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 runtime
abort.  AIRMETA_THREADS overrides --threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bounds, metrics, report, rng, storage, sweeps, verify
from .protocol import ExperimentConfig, run_experiment

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _load_config(path: str, seed_override=None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = storage.read_config(p)
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from exc
    if seed_override is not None:
        cfg = cfg.replace(master_seed=int(seed_override))
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(f"invalid config {p}: {exc}") from exc
    return cfg


def _threads(args) -> int:
    env = os.environ.get("AIRMETA_THREADS")
    if env is not None:
        return max(1, int(env))
    return max(1, int(args.threads))


def _write_formatted(data: dict, path_base: Path, fmt: str) -> None:
    if fmt == "json":
        storage.write_json(data, path_base.with_suffix(".json"))


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    trial_seeds = [rng.trial_seed(cfg.master_seed, k) for k in range(cfg.trials)]

    gaps = []
    outputs = {}
    summaries = []
    for k, seed in enumerate(trial_seeds):
        tcfg = cfg.replace(master_seed=seed)
        traj = run_experiment(tcfg)
        tdir = out_dir if cfg.trials == 1 else out_dir / f"trial_{k:03d}"
        tdir.mkdir(parents=True, exist_ok=True)
        summary = report.summarize(traj)
        test_loss = summary.get("final_test_loss", float("nan"))
        storage.write_trajectory_csv(traj, tdir / "trajectory.csv", test_loss)
        storage.write_replay_csv(traj, tdir / "replay_log.csv")
        storage.write_json(summary, tdir / "summary.json")
        if args.dump_datasets:
            storage.write_datasets_csv(traj.datasets, tdir / "datasets.csv")
        if args.format == "json":
            _dump_trajectory_json(traj, tdir / "trajectory.json", test_loss)
        outputs[f"trial_{k}"] = str(tdir)
        summaries.append(summary)
        if traj.aborted_at is not None:
            storage.write_manifest(out_dir / "manifest.json", cfg, trial_seeds,
                                   outputs, time.perf_counter() - t0)
            print(f"error: trial {k} aborted with non-finite iterate at round "
                  f"{traj.aborted_at}", file=sys.stderr)
            return EXIT_RUNTIME
        if "generalization_gap" in summary:
            gaps.append((summary["final_test_loss"], summary["final_train_loss"]))
        for w in traj.warnings:
            print(f"warning: {w}", file=sys.stderr)

    top = {"trials": summaries[0] if cfg.trials == 1 else summaries}
    if len(gaps) >= 2:
        est = metrics.meta_generalization_error(gaps)
        top["generalization_gap_mean"] = est.value
        top["generalization_gap_se"] = est.stderr
    if cfg.trials > 1:
        storage.write_json(top, out_dir / "summary.json")
    storage.write_config(cfg, out_dir / "config.json")
    storage.write_manifest(out_dir / "manifest.json", cfg, trial_seeds, outputs,
                           time.perf_counter() - t0)
    print(f"run complete: {cfg.trials} trial(s) -> {out_dir}")
    return EXIT_OK


def _dump_trajectory_json(traj, path, test_loss):
    cols = storage.TRAJECTORY_COLUMNS
    rows = []
    last = len(traj.records) - 1
    for idx, rec in enumerate(traj.records):
        rows.append({
            "round": rec.t, "grad_norm_sq": rec.grad_norm_sq,
            "train_loss": rec.train_loss,
            "test_loss": test_loss if idx == last else float("nan"),
            "rho": rec.rho, "v": rec.v_realized,
            "snr_db": traj.config.snr_db, "eta": rec.eta_t, "alpha": rec.alpha_t,
            "v_model": rec.v_model, "sum_abs_h_sq": rec.sum_abs_h_sq,
            "min_g_sq_over_eta_sq": rec.min_g_sq_over_eta_sq,
            "mem_norm_sq_max": rec.mem_norm_sq_max,
            "power_margin": rec.power_margin, "pinv_fallback": rec.pinv_fallback,
        })
    storage.write_json({"columns": cols, "rows": rows}, path)


def cmd_sweep(args) -> int:
    p = Path(args.spec)
    if not p.exists():
        raise UsageError(f"sweep spec not found: {p}")
    try:
        raw = json.loads(p.read_text())
        base = ExperimentConfig.from_dict(raw["base"])
        if args.seed is not None:
            base = base.replace(master_seed=int(args.seed))
        spec = sweeps.SweepSpec(axis=raw["axis"], values=tuple(raw["values"]),
                                base=base, seeds=int(raw.get("seeds", 1)))
        base.validate()
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse sweep spec {p}: {exc}") from exc

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = _threads(args)
    results = []

    def persist(pr):
        pdir = out_dir / f"{spec.axis}_{pr.value:g}"
        pdir.mkdir(parents=True, exist_ok=True)
        storage.write_json(pr.per_seed | {"axis": spec.axis, "value": pr.value},
                           pdir / "point.json")

    try:
        if threads > 1:
            import concurrent.futures

            with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(sweeps.run_point, spec, v) for v in spec.values]
                for fut in futures:  # collect in axis order; partials persist
                    pr = fut.result()
                    persist(pr)
                    results.append(pr)
        else:
            for value in spec.values:
                pr = sweeps.run_point(spec, value)
                persist(pr)
                results.append(pr)
    finally:
        if results:
            _write_aggregate(results, out_dir / "aggregate.csv")
            if args.format == "json":
                storage.write_json(
                    {"columns": sweeps.AGGREGATE_COLUMNS,
                     "rows": sweeps.aggregate_rows(results)},
                    out_dir / "aggregate.json")
    print(f"sweep complete: {len(results)}/{len(spec.values)} points -> {out_dir}")
    return EXIT_OK if len(results) == len(spec.values) else EXIT_RUNTIME


def _write_aggregate(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(sweeps.AGGREGATE_COLUMNS)
        for row in sweeps.aggregate_rows(results):
            writer.writerow([row[0]] + [storage._fmt(v) for v in row[1:]])


def cmd_verify(args) -> int:
    results = verify.run_all(seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  [{r.seconds:6.2f}s]  {r.detail}")
        failures += not r.passed
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_VERIFY_FAIL


def cmd_bounds(args) -> int:
    cfg = _load_config(args.config, None)
    run_dir = Path(args.trajectory)
    if run_dir.is_file():
        run_dir = run_dir.parent
    manifest_path = run_dir / "manifest.json"
    traj_path = run_dir / "trajectory.csv"
    summary_path = run_dir / "summary.json"
    for path in (manifest_path, traj_path, summary_path):
        if not path.exists():
            raise UsageError(f"missing run artifact: {path}")
    manifest = storage.read_manifest(manifest_path)
    if manifest["config_sha256"] != storage.config_sha256(cfg):
        raise UsageError("config does not match the trajectory's manifest "
                         "(sha256 mismatch)")
    summary = json.loads(summary_path.read_text())
    if "constants" not in summary:
        raise UsageError("run summary carries no measured constants; "
                         "bounds need a quadratic-family air run")
    table = storage.read_trajectory_csv(traj_path)
    c = summary["constants"]
    ac = bounds.AssumptionConstants(
        l_g=c["l_g"], l_h=c["l_h"], g_sq=c["g_sq"], sigma_g_sq=c["sigma_g_sq"],
        sigma_h_sq=c["sigma_h_sq"], gamma_g_sq=c["gamma_g_sq"], gamma_h_sq=c["gamma_h_sq"],
    )
    dc = bounds.derived_constants(ac, summary["metric_alpha"], cfg.sparsify_k,
                                  cfg.dim, cfg.batch_size)
    from .channel import fading_moments

    mu, pw = fading_moments(cfg.fading)
    eta0 = float(table["eta"][0])
    alpha0 = float(table["alpha"][0])
    rep = bounds.constant_rate_bound(
        dc, ac, q=cfg.local_steps, r=cfg.active_fraction, n=cfg.n_devices,
        d=cfg.dim, m_uses=cfg.channel_uses, p_min=cfg.power_per_use, eta=eta0,
        alpha=alpha0, batch_size=cfg.batch_size, t_rounds=len(table["round"]),
        f_init=summary["f_init"], f_star=summary["f_star"],
        v_mean=float(np.mean(table["v"])), abs_mean=mu, abs_power=pw,
    )
    lhs = float(np.mean(table["grad_norm_sq"]))
    print("constant-rate convergence bound")
    for name, val in rep.terms.items():
        print(f"  {name:<26} {val:.6e}")
    print(f"  {'total':<26} {rep.total:.6e}")
    print(f"  {'measured average':<26} {lhs:.6e}  "
          f"({'<= bound' if lhs <= rep.total else 'EXCEEDS bound'})")

    eps_g = max(float(np.nanmin(table["min_g_sq_over_eta_sq"])), 1e-12)
    c_g = bounds.sparsified_update_energy(ac, dc, q=cfg.local_steps, alpha=alpha0,
                                          batch_size=cfg.batch_size)
    gen = bounds.generalization_bound(
        d=cfg.dim, n=cfg.n_devices, sigma_sq=bounds.sub_gaussian_proxy(cfg.loss_clip),
        m_uses=cfg.channel_uses, p_max=cfg.power_per_use, rn=cfg.n_active, c_g=c_g,
        sum_abs_h_sq=table["sum_abs_h_sq"], v_series=table["v"], eps_g=eps_g,
    )
    print("generalization bound")
    print(f"  {'value':<26} {gen:.6e}" + ("  (vacuous: noiseless round)"
                                          if not np.isfinite(gen) else ""))
    if "final_test_loss" in summary:
        measured_gap = summary["final_test_loss"] - summary["final_train_loss"]
        print(f"  {'measured |gap|':<26} {abs(measured_gap):.6e}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        storage.write_json(
            {"bound_constant": {"terms": rep.terms, "total": rep.total},
             "measured_convergence_error": lhs, "bound_generalization": gen},
            out_dir / "bounds.json")
    return EXIT_OK if lhs <= rep.total else EXIT_VERIFY_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airmeta",
                                     description="Over-the-air federated meta-learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out-dir", default="out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--format", choices=("csv", "json"), default="csv")
    p_run.add_argument("--dump-datasets", action="store_true",
                       help="also write the per-device datasets as CSV")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep from a spec file")
    p_sweep.add_argument("--spec", "--config", dest="spec", required=True)
    p_sweep.add_argument("--out-dir", default="sweep_out")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--threads", type=int, default=1)
    p_sweep.add_argument("--format", choices=("csv", "json"), default="csv")
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run the invariant verification suite")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--threads", type=int, default=1)
    p_verify.set_defaults(func=cmd_verify)

    p_bounds = sub.add_parser("bounds", help="evaluate bounds for a stored run")
    p_bounds.add_argument("--config", required=True)
    p_bounds.add_argument("--trajectory", required=True,
                          help="run directory (or its trajectory.csv)")
    p_bounds.add_argument("--out-dir", default=None)
    p_bounds.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime abort
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
