"""Command line entry point: ``python -m congestmfg <command> ...``.

Thread count for per-slice dual solves: environment variable CONGESTMFG_THREADS.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from . import scenario as sc
from .eikonal import fast_march
from .energy import TrajectoryEnsemble
from .grid import build_grid
from .moreau import DiscreteMeasure, solve_dual


def _cmd_run(args):
    cfg = sc.load_config(args.config)
    if args.max_iters is not None:
        cfg = sc.with_overrides(cfg, optimizer={"max_iters": args.max_iters})
    t0 = time.time()

    def progress(it, ens, b):
        if it % 25 == 0:
            print(f"iter {it:5d}  J={b.total:.10g}  |g|={np.max(np.abs(b.gradient)):.3e}  "
                  f"{time.time() - t0:.1f}s", flush=True)

    ens, rep, paths = sc.run(cfg, args.out, args.frames, callback=progress)
    b = rep.final
    print(f"{rep.termination} after {rep.iterations} iterations ({rep.evaluations} evaluations)")
    print(f"largest distance outside conv(Omega): {rep.hull_drift:.3g}")
    print(f"J={b.total:.10g}  kinetic={b.kinetic:.6g}  congestion={b.congestion:.6g}  "
          f"running={b.running_potential:.6g}  terminal={b.terminal_potential:.6g}")
    print(f"wrote {len(paths)} files to {os.path.dirname(paths[0]) if paths else args.out}")
    return 0


def _read_points(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if rows and not _isnum(rows[0][0]):
        rows = rows[1:]
    return np.array([[float(r[0]), float(r[1])] for r in rows])


def _isnum(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _cmd_moreau(args):
    cfg = sc.load_config(args.config)
    if cfg.congestion is None:
        print("config has no congestion model", file=sys.stderr)
        return 2
    grid = build_grid(cfg.domain.rects, cfg.domain.resolution, cfg.domain.margin)
    pts = _read_points(args.points) if args.points else sc.layout_points(cfg.particles.layout, cfg.particles.n)
    mass = cfg.particles.total_mass / len(pts)
    eps = args.epsilon or cfg.dynamics.epsilon
    sol = solve_dual(grid, cfg.congestion, DiscreteMeasure(pts, mass), eps)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "cells.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("particle_id", "x", "y", "weight", "cell_mass", "bary_x", "bary_y", "grad_x", "grad_y"))
        for i in range(len(pts)):
            w.writerow([i] + [repr(float(v)) for v in (
                *pts[i], sol.weights[i], sol.cell_mass[i], *sol.barycenter[i], *sol.position_gradient[i])])
    sc.render_moreau(grid, cfg.congestion, pts, sol, eps, os.path.join(args.out, "moreau.svg"))
    print(f"F_eps={sol.value:.10g}  residual={sol.residual:.3e}  iterations={sol.iterations}  "
          f"max_density={sol.max_density:.6g}")
    return 0


def _heatmap(grid, values, path, scale=20.0):
    x0, x1, y0, y1 = grid.bounds
    h = 1.0 / grid.resolution
    finite = values[np.isfinite(values)]
    lo, hi = float(finite.min()), float(finite.max())
    q = np.clip(np.round(255 * (values - lo) / max(hi - lo, 1e-300)), 0, 255).astype(int)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{(x1 - x0) * scale:.0f}" '
        f'height="{(y1 - y0) * scale:.0f}" viewBox="{x0} {-y1} {x1 - x0} {y1 - y0}">',
        '<g transform="scale(1,-1)">',
    ]
    for r in range(q.shape[0]):
        c = 0
        while c < q.shape[1]:
            e = c
            while e + 1 < q.shape[1] and q[r, e + 1] == q[r, c]:
                e += 1
            v = q[r, c]
            out.append(f'<rect x="{grid.xs[c] - h / 2:.6g}" y="{grid.ys[r] - h / 2:.6g}" '
                       f'width="{(e - c + 1) * h:.6g}" height="{h:.6g}" fill="rgb({v},{80 + v // 3},{255 - v})"/>')
            c = e + 1
    for a0, b0, a1, b1 in grid.rects:
        out.append(f'<rect x="{a0}" y="{b0}" width="{a1 - a0}" height="{b1 - b0}" fill="none" '
                   f'stroke="#fff" stroke-width="0.03"/>')
    out.append("</g></svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _cmd_eikonal(args):
    cfg = sc.load_config(args.config)
    p = cfg.potential
    if not p.sources:
        print("config has no eikonal sources", file=sys.stderr)
        return 2
    grid = build_grid(cfg.domain.rects, args.resolution or cfg.domain.resolution, cfg.domain.margin)
    pf = fast_march(grid, p.speed_inside, p.speed_outside, p.sources)
    os.makedirs(args.out, exist_ok=True)
    sc.write_grid_csv(os.path.join(args.out, "potential.csv"), pf.values)
    _heatmap(grid, pf.values, os.path.join(args.out, "potential.svg"))
    print(f"grid {grid.shape[1]}x{grid.shape[0]}  Phi in [{pf.values.min():.6g}, {pf.values.max():.6g}]")
    return 0


def _cmd_check_grad(args):
    from .optimizer import check_gradient

    cfg = sc.load_config(args.config)
    over = {}
    if args.particles:
        over["particles"] = {"n": args.particles}
    if args.steps:
        over["dynamics"] = {"steps": args.steps}
    cfg = sc.with_overrides(cfg, **over)
    built = sc.build(cfg)
    ens = sc.initial_ensemble(cfg)
    rng = np.random.default_rng(args.seed)
    pos = ens.positions.copy()
    pos[1:] += args.perturb * rng.standard_normal(pos[1:].shape)
    ens = TrajectoryEnsemble(pos, ens.mass, ens.horizon)
    err = check_gradient(ens, built.energy, step=args.step, n_coords=args.coords, seed=args.seed)
    print(f"max relative gradient error {err:.3e}")
    return 0 if args.tol is None or err <= args.tol else 1


def _cmd_sweep(args):
    from .experiments import load_plan, projection_convergence, run_sweep

    plan = load_plan(args.plan)
    rep = run_sweep(plan, args.out)
    print(rep.summary)
    model = plan.base.congestion
    if model is not None and model.kind in ("quadratic", "power"):
        rows = projection_convergence(plan, rep, args.out)
        print(f"{'N':>6} {'proj. error':>14} {'cong. gap':>14}")
        for r in rows:
            print(f"{r['n']:>6d} {r['l2_error']:>14.4e} {r['congestion_gap']:>14.4e}")
    print(f"wrote {args.out}")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="congestmfg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="optimize a scenario and write trajectories, energies and frames")
    p.add_argument("config", help="scenario file, or builtin:NAME")
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument("--frames", type=int, default=None, metavar="STRIDE", help="frame every STRIDE slices (0: none)")
    p.add_argument("--max-iters", type=int, default=None)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("moreau", help="solve one Moreau projection and draw its charged cells")
    p.add_argument("config")
    p.add_argument("--points", help="CSV of x,y (default: the config's initial layout)")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out", default="out/moreau")
    p.set_defaults(fn=_cmd_moreau)

    p = sub.add_parser("eikonal", help="fast-marching potential as CSV grid and SVG heatmap")
    p.add_argument("config")
    p.add_argument("--resolution", type=float, default=None)
    p.add_argument("--out", default="out/eikonal")
    p.set_defaults(fn=_cmd_eikonal)

    p = sub.add_parser("check-grad", help="finite-difference check of the energy gradient")
    p.add_argument("config")
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--perturb", type=float, default=0.05)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None, help="exit status 1 above this error")
    p.set_defaults(fn=_cmd_check_grad)

    p = sub.add_parser("sweep", help="run an (N, eps, delta) sweep plan")
    p.add_argument("plan")
    p.add_argument("--out", default="out/sweep")
    p.set_defaults(fn=_cmd_sweep)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (sc.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
