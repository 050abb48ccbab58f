"""Batch front-end: single runs, seeded comparisons, self-validation.

Exit codes: 0 success, 1 configuration error, 2 simulation abort, 3 oracle
failure. All CSV/SVG artifacts are written atomically under the output
directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import itertools
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .controllers import ControllerConfig, CONTROLLER_NAMES, make_controller
from .dynamics import VehicleParams, TireParams
from .simulate import (SimConfig, run_closed_loop, compute_metrics,
                       save_log_csv, save_metrics, _atomic_write)
from .track import TrackSpec, generate_track, velocity_profile, save_csv


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return cfgmod.from_file(path)


def _one_run(cfg: RunConfig, name: str, seed: int, traj):
    sim = dataclasses.replace(cfg.sim, seed=seed)
    ctrl = make_controller(name, cfg.nmpc, cfg.vehicle, cfg.tire)
    log = run_closed_loop(ctrl, traj, sim, cfg.vehicle, cfg.tire)
    return log, compute_metrics(log)


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config)
        if args.controller:
            cfg = dataclasses.replace(cfg, controller=args.controller)
        traj = cfg.trajectory()
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    seed = cfg.sim.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)

    log, metrics = _one_run(cfg, cfg.controller, seed, traj)
    save_log_csv(log, str(out / "simlog.csv"))
    save_metrics(metrics, str(out / "metrics.txt"))
    from . import plots
    plots.render_run_figures(log, traj, cfg.nmpc, out)
    for key, val in metrics.as_dict().items():
        print(f"{key}={val}")
    if log.aborted:
        print("error: simulation aborted (repeated solver failures)",
              file=sys.stderr)
        return 2
    return 0


def cmd_compare(args) -> int:
    try:
        cfg = _load_config(args.config)
        traj = cfg.trajectory()
        controllers = [c.strip() for c in args.controllers.split(",")]
        if len(controllers) < 2:
            raise ConfigError("compare needs at least two controllers")
        for c in controllers:
            if c not in CONTROLLER_NAMES:
                raise ConfigError(f"unknown controller {c!r}")
        seeds = ([int(s) for s in args.seeds.split(",")]
                 if args.seeds else [cfg.sim.seed])
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(name, seed) for seed in seeds for name in controllers]

    def work(job):
        name, seed = job
        return job, _one_run(cfg, name, seed, traj)

    results = {}
    if args.no_parallel or len(jobs) == 1:
        for job in jobs:
            results[job] = work(job)[1]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
            for job, res in pool.map(work, jobs):
                results[job] = res

    header = ("controller,seed,noise_hash,violations,violation_rate,"
              "violations_plant,violation_rate_plant,dev_mean,dev_p25,"
              "dev_p75,dev_max,solve_ms_mean,solve_ms_max,aborted")
    rows = [header]
    aborted = False
    for name, seed in jobs:
        log, m = results[(name, seed)]
        aborted |= log.aborted
        rows.append(",".join([
            name, str(seed), log.noise_hash()[:16],
            str(m.violations), f"{m.violation_rate:.6g}",
            str(m.violations_plant), f"{m.violation_rate_plant:.6g}",
            f"{m.dev_mean:.6g}", f"{m.dev_p25:.6g}", f"{m.dev_p75:.6g}",
            f"{m.dev_max:.6g}", f"{m.solve_ms_mean:.6g}",
            f"{m.solve_ms_max:.6g}", str(m.aborted)]))
    _atomic_write(str(out / "comparison.csv"), "\n".join(rows) + "\n")
    print("\n".join(rows))

    # constraint-satisfaction timeline: h on the true state per plant step
    first_seed = seeds[0]
    logs = [results[(name, first_seed)][0] for name in controllers]
    n = min(log.n_steps for log in logs)
    tl = ["t," + ",".join(f"h_{name}" for name in controllers)]
    for i in range(n):
        tl.append(f"{logs[0].t[i]:.6f}," +
                  ",".join(f"{log.h_true[i]:.12g}" for log in logs))
    _atomic_write(str(out / "constraint_timeline.csv"), "\n".join(tl) + "\n")
    return 2 if aborted else 0


def _oracle_jacobian(rng, perturb: bool) -> bool:
    from . import dynamics as dyn
    vp, tp = VehicleParams(), TireParams()
    worst = 0.0
    for _ in range(50):
        x = np.array([0, 0, rng.uniform(-3, 3), rng.uniform(5, 35),
                      rng.uniform(-2, 2), rng.uniform(-1, 1),
                      rng.uniform(-0.5, 0.5), rng.uniform(-4, 3)])
        u = np.array([rng.uniform(-20, 20), rng.uniform(-0.3, 0.3)])
        A = dyn.jacobian_A(x, u, vp, tp)
        if perturb:
            A = A + 1e-3
        h = 1e-5
        for i in range(dyn.NX):
            e = np.zeros(dyn.NX)
            e[i] = h
            fd = (dyn.continuous_dynamics(x + e, u, vp, tp)
                  - dyn.continuous_dynamics(x - e, u, vp, tp)) / (2 * h)
            denom = max(1.0, float(np.abs(fd).max()))
            worst = max(worst, float(np.abs(A[:, i] - fd).max()) / denom)
    return worst < 1e-5


def _oracle_lyapunov(rng) -> bool:
    from .ellipsoid import propagate_discrete, sample_uniform
    n, k, m = 4, 5, 20000
    A = rng.standard_normal((n, n)) * 0.4
    B = rng.standard_normal((n, 2))
    W = np.diag(rng.uniform(0.1, 1.0, size=2))
    Q = B @ W @ B.T
    ref = np.eye(n)
    for _ in range(k):
        ref = propagate_discrete(ref, A, B, W)
    # all sampled sets live in dimension n, so every term shares the uniform
    # n-ball second-moment scaling Sigma / (n + 2)
    X = sample_uniform(np.eye(n), rng, m).T
    for _ in range(k):
        X = X @ A.T + sample_uniform(Q, rng, m).T
    emp = (n + 2) * X.T @ X / m
    return bool(np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.1)


def enumerate_qp_reference(H, g, C, d):
    """Brute-force active-set enumeration for small dense QPs (Cz <= d)."""
    n = H.shape[0]
    m = C.shape[0]
    best = None
    for r in range(0, min(m, n) + 1):
        for S in itertools.combinations(range(m), r):
            S = list(S)
            K = np.zeros((n + r, n + r))
            K[:n, :n] = H
            if r:
                K[:n, n:] = C[S].T
                K[n:, :n] = C[S]
            rhs = np.concatenate([-g, d[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:n], sol[n:]
            if r and lam.min() < -1e-9:
                continue
            if (C @ z - d).max(initial=0.0) > 1e-9:
                continue
            val = 0.5 * z @ H @ z + g @ z
            if best is None or val < best[0] - 1e-12:
                best = (val, z)
    return None if best is None else best[1]


def _oracle_qp(rng) -> bool:
    from .qp import solve_dense_qp
    for _ in range(25):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 2 * n))
        M = rng.standard_normal((n, n))
        H = M @ M.T + 0.1 * np.eye(n)
        g = rng.standard_normal(n)
        C = rng.standard_normal((m, n))
        d = rng.uniform(0.1, 1.0, size=m)
        res = solve_dense_qp(H, g, C, d)
        z_ref = enumerate_qp_reference(H, g, C, d)
        if z_ref is None or not res.ok or np.abs(res.z - z_ref).max() > 1e-7:
            return False
    return True


def _oracle_backoff(rng) -> bool:
    from .ellipsoid import backoff, sample_uniform
    for _ in range(20):
        n = int(rng.integers(2, 6))
        M = rng.standard_normal((n, n))
        Sigma = M @ M.T
        grad = rng.standard_normal(n)
        bo = backoff(grad, Sigma)
        dx = sample_uniform(Sigma, rng, 20000).T
        if float((dx @ grad).max()) > bo * (1 + 1e-6) + 1e-9:
            return False
    return True


def _oracle_zero_uncertainty() -> bool:
    spec = TrackSpec(straight_a=200.0, straight_b=80.0)
    traj = velocity_profile(generate_track(spec, seed=0))
    ccfg = ControllerConfig(w_uncertainty=(0.0, 0.0, 0.0),
                            sigma0_diag=(0.0,) * 8)
    sim = SimConfig(t_sim=8.0, seed=0, w_sim_diag=(0.0,) * 7)
    logs = []
    for name in ("nominal", "r2nmpc"):
        ctrl = make_controller(name, ccfg, VehicleParams(), TireParams())
        logs.append(run_closed_loop(ctrl, traj, sim))
    return float(np.abs(logs[0].U - logs[1].U).max()) < 1e-6


def cmd_validate(args) -> int:
    rng = np.random.default_rng(0)
    oracles = [
        ("jacobian_fd", lambda: _oracle_jacobian(rng, args.perturb_jacobian)),
        ("lyapunov_mc", lambda: _oracle_lyapunov(rng)),
        ("qp_active_set", lambda: _oracle_qp(rng)),
        ("backoff_bound", lambda: _oracle_backoff(rng)),
        ("zero_uncertainty_equivalence", _oracle_zero_uncertainty),
    ]
    failed = False
    for name, fn in oracles:
        ok = fn()
        failed |= not ok
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return 3 if failed else 0


def cmd_track_gen(args) -> int:
    try:
        cfg = _load_config(args.config)
        spec = cfg.track.spec if cfg.track.spec is not None else TrackSpec()
        seed = cfg.track.seed if args.seed is None else args.seed
        traj = velocity_profile(generate_track(spec, seed=seed),
                                limits=cfg.nmpc, vehicle=cfg.vehicle)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path("track.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(traj, out)
    print(f"wrote {out} ({len(traj.s)} samples, length {traj.s[-1]:.1f} m)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustnmpc",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="single closed-loop run with artifacts")
    pr.add_argument("--config", help="YAML run configuration")
    pr.add_argument("--seed", type=int, help="seed override")
    pr.add_argument("--out", help="output directory override")
    pr.add_argument("--controller", choices=CONTROLLER_NAMES,
                    help="controller override")
    pr.set_defaults(fn=cmd_run)

    pc = sub.add_parser("compare", help="multi-controller shared-seed comparison")
    pc.add_argument("--config", help="YAML run configuration")
    pc.add_argument("--controllers", default="nominal,r2nmpc",
                    help="comma-separated controller list")
    pc.add_argument("--seeds", help="comma-separated seed list")
    pc.add_argument("--out", help="output directory override")
    pc.add_argument("--no-parallel", action="store_true",
                    help="run jobs sequentially")
    pc.set_defaults(fn=cmd_compare)

    pv = sub.add_parser("validate", help="self-validation oracle suite")
    pv.add_argument("--perturb-jacobian", action="store_true",
                    help="negative control: corrupt the Jacobian oracle input")
    pv.set_defaults(fn=cmd_validate)

    pt = sub.add_parser("track", help="track utilities")
    tsub = pt.add_subparsers(dest="track_command", required=True)
    pg = tsub.add_parser("gen", help="generate a reference-trajectory CSV")
    pg.add_argument("--config", help="YAML run configuration (geometry source)")
    pg.add_argument("--seed", type=int, help="geometry jitter seed")
    pg.add_argument("--out", help="output CSV path")
    pg.set_defaults(fn=cmd_track_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
