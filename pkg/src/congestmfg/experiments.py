"""Parameter sweeps over (N, eps, delta) and convergence diagnostics.

The finest run of a plan is the reference: there is no closed-form optimum
for these scenarios, so every trend is measured against it.
"""
from __future__ import annotations

import configparser
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as sp_minimize

from .moreau import DiscreteMeasure, projected_density, solve_dual
from .optimizer import minimize
from .scenario import ScenarioConfig, build, initial_ensemble, load_config, with_overrides

log = logging.getLogger(__name__)

SCHEDULES = ("manual", "log", "power")
SWEEP_COLUMNS = (
    "n", "epsilon", "delta", "steps", "status", "iterations", "termination",
    "kinetic", "congestion", "running_potential", "terminal_potential", "total",
    "objective_gap", "w2_discrepancy",
)
CONVERGENCE_COLUMNS = ("n", "epsilon", "delta", "l2_error", "congestion_integral", "congestion_gap")


class PlanError(ValueError):
    pass


def schedule_epsilon(rule: str, n: int, scale: float, dim: int = 2) -> float:
    """eps_N = scale * ln N / N ("log") or scale * N**(-2/dim) ("power")."""
    if rule == "log":
        return scale * np.log(n) / n
    if rule == "power":
        return scale * n ** (-2.0 / dim)
    raise PlanError(f"schedule {rule!r} has no formula")


@dataclass
class SweepPlan:
    base: ScenarioConfig
    triples: list  # (N, eps, delta), N increasing
    schedule: str = "manual"
    reference: tuple | None = None  # defaults to the last triple
    workers: int = 1

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise PlanError(f"unknown schedule {self.schedule!r}")
        if not self.triples:
            raise PlanError("plan has no runs")
        self.triples = [(int(n), float(e), float(d)) for n, e, d in self.triples]
        ns = [t[0] for t in self.triples]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise PlanError("runs must be sorted by strictly increasing N")
        T = self.base.dynamics.horizon
        for n, e, d in self.triples + ([self.reference] if self.reference else []):
            if not (e > 0 and d > 0):
                raise PlanError("epsilon and delta must be positive")
            if abs(T / d - round(T / d)) > 1e-9 * T / d:
                raise PlanError(f"delta={d:g} does not divide the horizon {T:g}")
        r = self.base.dynamics.lagrangian_exponent
        rp = r / (r - 1.0)
        ratio = [d ** (2.0 / rp) / e for _, e, d in self.triples]
        if any(b > a * (1 + 1e-12) for a, b in zip(ratio, ratio[1:])):
            raise PlanError("delta**(2/r') / eps must not increase along the plan")
        if self.reference is None:
            self.reference = self.triples[-1]
        self.reference = tuple(self.reference)

    @property
    def runs(self):
        """Distinct triples to solve, reference last."""
        out = [t for t in self.triples if t != self.reference]
        return out + [self.reference]


def load_plan(path) -> SweepPlan:
    """INI plan: [sweep] base, n, schedule, eps_scale | epsilon, delta, reference_*, workers."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        if not cp.read(path):
            raise PlanError(f"cannot read {path}")
    except configparser.Error as exc:
        raise PlanError(str(exc)) from exc
    if "sweep" not in cp:
        raise PlanError("missing [sweep] section")
    s = cp["sweep"]
    allowed = {"base", "n", "schedule", "eps_scale", "epsilon", "delta",
               "reference_n", "reference_epsilon", "reference_delta", "workers"}
    extra = set(s) - allowed
    if extra:
        raise PlanError(f"unknown keys {sorted(extra)}")
    base_path = s.get("base")
    if base_path is None:
        raise PlanError("missing base")
    if not base_path.startswith("builtin:") and not os.path.isabs(base_path):
        base_path = os.path.join(os.path.dirname(os.path.abspath(path)), base_path)
    base = load_config(base_path)
    ns = [int(v) for v in s.get("n", "").split()]
    rule = s.get("schedule", "manual")
    if rule == "manual":
        eps = [float(v) for v in s.get("epsilon", repr(base.dynamics.epsilon)).split()]
    else:
        scale = float(s.get("eps_scale", "1"))
        eps = [schedule_epsilon(rule, n, scale) for n in ns]
    deltas = [float(v) for v in s.get("delta", repr(base.dynamics.delta)).split()]
    if len(eps) == 1:
        eps = eps * len(ns)
    if len(deltas) == 1:
        deltas = deltas * len(ns)
    if not (len(ns) == len(eps) == len(deltas)):
        raise PlanError("n, epsilon and delta lists differ in length")
    ref = None
    if "reference_n" in s:
        rn = int(s["reference_n"])
        re_ = float(s["reference_epsilon"]) if "reference_epsilon" in s else (
            eps[-1] if rule == "manual" else schedule_epsilon(rule, rn, float(s.get("eps_scale", "1"))))
        ref = (rn, re_, float(s.get("reference_delta", repr(deltas[-1]))))
    return SweepPlan(base, list(zip(ns, eps, deltas)), rule, ref, int(s.get("workers", "1")))


@dataclass
class RunResult:
    triple: tuple
    config: ScenarioConfig
    ensemble: object = None
    report: object = None
    error: str | None = None


@dataclass
class SweepReport:
    rows: list
    reference: RunResult
    results: list = field(repr=False, default_factory=list)
    summary: str = ""


def configure(base: ScenarioConfig, n: int, eps: float, delta: float) -> ScenarioConfig:
    steps = int(round(base.dynamics.horizon / delta))
    return with_overrides(base, particles={"n": n}, dynamics={"epsilon": eps, "steps": steps})


def run_one(base: ScenarioConfig, triple) -> RunResult:
    cfg = configure(base, *triple)
    try:
        sc = build(cfg)
        ens, rep = minimize(initial_ensemble(cfg), sc.energy, cfg.optimizer)
        return RunResult(tuple(triple), cfg, ens, rep)
    except Exception as exc:  # recorded; the sweep goes on
        log.warning("run %s failed: %s", triple, exc)
        return RunResult(tuple(triple), cfg, error=f"{type(exc).__name__}: {exc}")


def positions_at(ens, t: float) -> np.ndarray:
    """Particle positions at time t (trajectories are affine between slices)."""
    s = np.clip(t / ens.delta, 0.0, ens.steps)
    k = min(int(np.floor(s)), ens.steps - 1)
    a = s - k
    return (1 - a) * ens.positions[k] + a * ens.positions[k + 1]


def common_times(results) -> np.ndarray:
    """Interior slice times of the coarsest run."""
    M = min(r.config.dynamics.steps for r in results)
    T = results[0].config.dynamics.horizon
    return np.arange(1, M) * (T / M)


def density_at(result: RunResult, t: float, grid=None) -> np.ndarray:
    cfg = result.config
    grid = grid if grid is not None else build(cfg).grid
    pts = positions_at(result.ensemble, t)
    m = DiscreteMeasure(pts, result.ensemble.mass)
    sol = solve_dual(grid, cfg.congestion, m, cfg.dynamics.epsilon, tol=cfg.dynamics.dual_tol)
    return projected_density(grid, cfg.congestion, sol, m, cfg.dynamics.epsilon)


def transport_distance(grid, density: np.ndarray, positions, mass: float) -> float:
    """2-Wasserstein distance between a pixel density and equal point masses.

    Semi-discrete transport with the pixel density lumped at pixel centres,
    computed from its concave dual max_psi sum w psi_i + sum_p a_p min_i (c_pi - psi_i),
    c = |x - y|^2 / 2.  The dual value at any psi is a lower bound; L-BFGS
    brings it to the optimum up to the nonsmooth kinks.
    """
    pts = np.atleast_2d(positions)
    sel = density > 0
    if not np.any(sel):
        raise ValueError("empty density")
    X, Y = np.meshgrid(grid.xs, grid.ys)
    src = np.stack([X[sel], Y[sel]], axis=1)
    a = density[sel] * grid.pixel_area
    w = np.full(len(pts), mass)
    a = a * (w.sum() / a.sum())
    C = 0.5 * ((src[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)

    def neg_dual(psi):
        R = C - psi[None, :]
        j = np.argmin(R, axis=1)
        val = w @ psi + a @ R[np.arange(len(a)), j]
        g = w - np.bincount(j, weights=a, minlength=len(w))
        return -val, -g

    res = sp_minimize(neg_dual, np.zeros(len(pts)), jac=True, method="L-BFGS-B",
                      options={"maxiter": 2000, "gtol": 1e-12, "ftol": 1e-15})
    return float(np.sqrt(max(2.0 * -res.fun / w.sum(), 0.0) * w.sum()))


def _w2_discrepancy(result, ref, times, grid) -> float:
    vals = []
    for t in times:
        rho = density_at(ref, t, grid)
        vals.append(transport_distance(grid, rho, positions_at(result.ensemble, t), result.ensemble.mass))
    return float(np.mean(vals))


def run_sweep(plan: SweepPlan, out_dir: str | None = None) -> SweepReport:
    """Optimize every triple, compare with the reference, write sweep.csv."""
    runs = plan.runs
    if plan.workers > 1:
        with ThreadPoolExecutor(plan.workers) as pool:
            results = list(pool.map(lambda t: run_one(plan.base, t), runs))
    else:
        results = [run_one(plan.base, t) for t in runs]
    ref = results[-1]
    by_triple = {r.triple: r for r in results}
    ordered = [by_triple[t] for t in plan.triples]
    if ref.triple not in plan.triples:
        ordered.append(ref)
    ok = [r for r in ordered if r.error is None]
    times = common_times(ok) if ok else np.array([])
    grid = build(plan.base).grid
    rows = []
    for r in ordered:
        n, e, d = r.triple
        row = dict(n=n, epsilon=e, delta=d, steps=r.config.dynamics.steps)
        if r.error is not None:
            row.update(status="failed", termination=r.error)
            rows.append(row)
            continue
        b = r.report.final
        row.update(
            status="ok", iterations=r.report.iterations, termination=r.report.termination,
            kinetic=b.kinetic, congestion=b.congestion, running_potential=b.running_potential,
            terminal_potential=b.terminal_potential, total=b.total,
        )
        if ref.error is None:
            row["objective_gap"] = abs(b.total - ref.report.final.total)
            if r is ref:
                row["w2_discrepancy"] = 0.0
            elif plan.base.congestion is not None and len(times):
                row["w2_discrepancy"] = _w2_discrepancy(r, ref, times, grid)
        rows.append(row)
    rep = SweepReport(rows, ref, ordered, trend_summary(rows, "objective_gap"))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS, rows)
        with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
            fh.write(rep.summary + "\n")
    return rep


def projection_convergence(plan: SweepPlan, report: SweepReport | None = None, out_dir: str | None = None):
    """L2 (or L^m) error of the Moreau projections against the reference run.

    Errors are taken over the time-space pixel grid at the common interior
    slice times, sum_k dt sum_p h^2 |rho_N - rho_ref|^m, to the power 1/m,
    with m = 2 for quadratic congestion and the exponent for power
    congestion.  Also reports the congestion integrals sum_k dt sum_p h^2 f(rho)
    and their gap to the reference.
    """
    model = plan.base.congestion
    if model is None or model.kind not in ("quadratic", "power"):
        raise PlanError("projection convergence needs quadratic or power congestion")
    p = 2.0 if model.kind == "quadratic" else model.exponent
    if report is None:
        report = run_sweep(plan)
    ref = report.reference
    if ref.error is not None:
        raise RuntimeError(f"reference run failed: {ref.error}")
    grid = build(ref.config).grid
    for r in report.results:
        g = build(r.config).grid
        if g.shape != grid.shape or g.bounds != grid.bounds:
            raise PlanError("runs use mismatched grids")
    ok = [r for r in report.results if r.error is None]
    times = common_times(ok)
    dt = ref.config.dynamics.horizon / (len(times) + 1)
    h2 = grid.pixel_area
    ref_rho = [density_at(ref, t, grid) for t in times]

    def integral(rhos):
        return float(sum(dt * h2 * np.sum(model.integrand(r)) for r in rhos))

    ref_int = integral(ref_rho)
    rows = []
    for r in ok:
        rhos = ref_rho if r is ref else [density_at(r, t, grid) for t in times]
        err = sum(dt * h2 * np.sum(np.abs(a - b) ** p) for a, b in zip(rhos, ref_rho)) ** (1.0 / p)
        I = integral(rhos)
        n, e, d = r.triple
        rows.append(dict(n=n, epsilon=e, delta=d, l2_error=float(err),
                         congestion_integral=I, congestion_gap=abs(I - ref_int)))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_rows(os.path.join(out_dir, "convergence.csv"), CONVERGENCE_COLUMNS, rows)
    return rows


def nonincreasing(values, rtol: float = 0.0) -> bool:
    v = list(values)
    return all(b <= a * (1 + rtol) + 1e-15 for a, b in zip(v, v[1:]))


def trend_summary(rows, key: str) -> str:
    runs = [r for r in rows if r.get("status") == "ok" and key in r]
    lines = [f"{'N':>6} {'eps':>10} {'delta':>10} {'J':>14} {key:>14}"]
    for r in runs:
        lines.append(f"{r['n']:>6d} {r['epsilon']:>10.4g} {r['delta']:>10.4g} {r['total']:>14.8g} {r[key]:>14.4e}")
    failed = [r for r in rows if r.get("status") == "failed"]
    vals = [r[key] for r in runs[:-1]]  # the reference closes the list at 0
    lines.append(f"{key} nonincreasing in N: {'yes' if nonincreasing(vals) else 'no'}")
    if failed:
        lines.append(f"failed runs: {', '.join(str(r['n']) for r in failed)}")
    return "\n".join(lines)


def write_rows(path, columns, rows):
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return "" if v is None else str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
