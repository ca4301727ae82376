"""Scenario configuration files, solver assembly and run outputs.

Configs are INI files with the sections ``domain``, ``congestion``,
``potential``, ``particles``, ``dynamics``, ``optimizer`` and ``output``.
Point lists use ``;`` between points and spaces between coordinates, e.g.
``rects = 0 0 8 8; 11 0 19 8``.  Analytic potentials come from a small
catalog: ``zero``, ``quadratic ax ay [scale]``, ``ring ax ay radius [scale]``;
the terminal potential may also be ``eikonal`` (fast-marching travel time to
``sources`` at ``speed_inside`` / ``speed_outside``).
"""
from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources

import numpy as np

from .congestion import CongestionModel, capacity
from .eikonal import SmoothPotential, fast_march
from .energy import (
    Energy,
    LagrangianSpec,
    QuadraticPotential,
    RingPotential,
    TrajectoryEnsemble,
    ZeroPotential,
)
from .grid import GridDomain, assign_cells, build_grid
from .moreau import DiscreteMeasure, projected_density, solve_dual
from .optimizer import OptimizerConfig

TRAJECTORY_COLUMNS = ("step", "time", "particle_id", "x", "y")
ENERGY_COLUMNS = (
    "iteration", "kinetic", "congestion", "running_potential",
    "terminal_potential", "total", "grad_sup",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainConfig:
    rects: tuple
    resolution: float = 8.0
    margin: float = 0.0


@dataclass(frozen=True)
class PotentialConfig:
    running: str = "zero"
    terminal: str = "zero"
    speed_inside: float = 1.0
    speed_outside: float = 1.0
    sources: tuple = ()


@dataclass(frozen=True)
class ParticlesConfig:
    n: int
    total_mass: float
    layout: tuple  # x0, y0, x1, y1

    @property
    def mass(self) -> float:
        return self.total_mass / self.n


@dataclass(frozen=True)
class DynamicsConfig:
    horizon: float
    steps: int
    epsilon: float
    lagrangian_exponent: float = 2.0
    dual_tol: float = 1e-9

    @property
    def delta(self) -> float:
        return self.horizon / self.steps


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    frame_stride: int = 0  # 0: no frames
    formats: tuple = ("csv", "svg")
    density: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    domain: DomainConfig
    congestion: CongestionModel | None
    potential: PotentialConfig
    particles: ParticlesConfig
    dynamics: DynamicsConfig
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


# -- parsing ---------------------------------------------------------------

def _points(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(tuple(float(v) for v in part.split()) for part in text.split(";") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _fmt_points(pts) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in p) for p in pts)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


_SCHEMA = {
    "domain": {"rects": _points, "resolution": float, "margin": float},
    "congestion": {
        "kind": str, "cap": float, "outside_cap": float,
        "exponent": float, "strong_convexity": float,
    },
    "potential": {
        "running": str, "terminal": str, "speed_inside": float,
        "speed_outside": float, "sources": _points,
    },
    "particles": {"n": int, "total_mass": float, "layout": lambda t: _points(t)[0] if _points(t) else ()},
    "dynamics": {
        "horizon": float, "steps": int, "epsilon": float,
        "lagrangian_exponent": float, "dual_tol": float,
    },
    "optimizer": {
        "memory": int, "max_iters": int,
        "grad_tol": lambda t: None if t.strip().lower() in ("", "auto", "none") else float(t),
        "wolfe_c1": float, "wolfe_c2": float, "init_strategy": str,
        "max_step": float, "max_line_search": int,
    },
    "output": {
        "directory": str, "frame_stride": int,
        "formats": lambda t: tuple(t.split()), "density": _bool,
    },
}
_REQUIRED = {
    "domain": ("rects",),
    "particles": ("n", "total_mass", "layout"),
    "dynamics": ("horizon", "steps", "epsilon"),
}


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    raw = {}
    for sec in cp.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        raw[sec] = {}
        for key, val in cp.items(sec):
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            try:
                raw[sec][key] = _SCHEMA[sec][key](val)
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{source}: [{sec}] {key}: {exc}") from exc
    for sec, keys in _REQUIRED.items():
        for k in keys:
            if k not in raw.get(sec, {}):
                raise ConfigError(f"{source}: missing [{sec}] {k}")
    try:
        cong = raw.get("congestion", {})
        cfg = ScenarioConfig(
            domain=DomainConfig(**raw["domain"]),
            congestion=None if cong.get("kind", "hard_cap") == "none" else CongestionModel(**cong),
            potential=PotentialConfig(**raw.get("potential", {})),
            particles=ParticlesConfig(**raw["particles"]),
            dynamics=DynamicsConfig(**raw["dynamics"]),
            optimizer=OptimizerConfig(**raw.get("optimizer", {})),
            output=OutputConfig(**raw.get("output", {})),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    validate(cfg)
    return cfg


def load_config(path) -> ScenarioConfig:
    """Read and validate a scenario file; ``builtin:NAME`` loads a bundled one."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        text = resources.files("congestmfg.scenarios").joinpath(f"{name}.cfg").read_text()
        return parse_config(text, path)
    with open(path) as fh:
        return parse_config(fh.read(), path)


def format_config(cfg: ScenarioConfig) -> str:
    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        if v is None:
            return "auto"
        return str(v)

    lines = []
    d = cfg.domain
    lines += ["[domain]", f"rects = {_fmt_points(d.rects)}", f"resolution = {val(d.resolution)}",
              f"margin = {val(d.margin)}", ""]
    lines.append("[congestion]")
    if cfg.congestion is None:
        lines.append("kind = none")
    else:
        for f in fields(CongestionModel):
            lines.append(f"{f.name} = {val(getattr(cfg.congestion, f.name))}")
    p = cfg.potential
    lines += ["", "[potential]", f"running = {p.running}", f"terminal = {p.terminal}",
              f"speed_inside = {val(p.speed_inside)}", f"speed_outside = {val(p.speed_outside)}",
              f"sources = {_fmt_points(p.sources)}", ""]
    q = cfg.particles
    lines += ["[particles]", f"n = {q.n}", f"total_mass = {val(q.total_mass)}",
              f"layout = {_fmt_points([q.layout])}", ""]
    lines.append("[dynamics]")
    for f in fields(DynamicsConfig):
        lines.append(f"{f.name} = {val(getattr(cfg.dynamics, f.name))}")
    lines += ["", "[optimizer]"]
    for f in fields(OptimizerConfig):
        lines.append(f"{f.name} = {val(getattr(cfg.optimizer, f.name))}")
    o = cfg.output
    lines += ["", "[output]", f"directory = {o.directory}", f"frame_stride = {o.frame_stride}",
              f"formats = {' '.join(o.formats)}", f"density = {val(o.density)}", ""]
    return "\n".join(lines)


def write_config(cfg: ScenarioConfig, path):
    with open(path, "w") as fh:
        fh.write(format_config(cfg))


# -- assembly --------------------------------------------------------------

def _catalog(text: str):
    parts = text.split()
    if not parts:
        raise ConfigError("empty potential")
    kind, args = parts[0].lower(), [float(a) for a in parts[1:]]
    if kind == "zero" and not args:
        return ZeroPotential()
    if kind == "quadratic" and len(args) in (2, 3):
        return QuadraticPotential((args[0], args[1]), *args[2:])
    if kind == "ring" and len(args) in (3, 4):
        return RingPotential((args[0], args[1]), args[2], *args[3:])
    raise ConfigError(f"unknown potential {text!r}")


def validate(cfg: ScenarioConfig):
    d, q, dyn = cfg.domain, cfg.particles, cfg.dynamics
    if not dyn.epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if not (dyn.horizon > 0 and dyn.steps >= 1):
        raise ConfigError("need horizon > 0 and steps >= 1")
    if q.n < 1 or not q.total_mass > 0:
        raise ConfigError("need at least one particle and positive total mass")
    if len(q.layout) != 4:
        raise ConfigError("layout must be one rectangle x0 y0 x1 y1")
    if not d.resolution > 0:
        raise ConfigError("resolution must be positive")
    if cfg.output.frame_stride < 0:
        raise ConfigError("frame_stride must be >= 0")
    grid = build_grid(d.rects, d.resolution, d.margin)
    if cfg.congestion is not None:
        cap = capacity(cfg.congestion, grid.area, grid.hull_area)
        if not q.total_mass < cap:
            raise ConfigError(
                f"total mass {q.total_mass:g} must be below the congestion capacity {cap:g}"
            )
    if not np.all(grid.contains(layout_points(q.layout, q.n))):
        raise ConfigError("initial layout does not fit inside the domain")
    for term in (cfg.potential.running, cfg.potential.terminal):
        if term.strip().lower() != "eikonal":
            _catalog(term)
    if cfg.potential.running.strip().lower() == "eikonal":
        raise ConfigError("the eikonal potential is terminal only")
    if cfg.potential.terminal.strip().lower() == "eikonal" and not cfg.potential.sources:
        raise ConfigError("eikonal potential needs sources")


def layout_points(rect, n: int) -> np.ndarray:
    """Regular grid over ``rect`` including its edges, row-major (x fastest)."""
    x0, y0, x1, y1 = rect
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    xs = np.linspace(x0, x1, cols) if cols > 1 else np.array([0.5 * (x0 + x1)])
    ys = np.linspace(y0, y1, rows) if rows > 1 else np.array([0.5 * (y0 + y1)])
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel()], axis=1)[:n]


@dataclass
class Scenario:
    config: ScenarioConfig
    grid: GridDomain
    energy: Energy
    field: object = None  # PotentialField for eikonal terminals


def build(cfg: ScenarioConfig) -> Scenario:
    grid = build_grid(cfg.domain.rects, cfg.domain.resolution, cfg.domain.margin)
    p = cfg.potential
    pf = None
    if p.terminal.strip().lower() == "eikonal":
        pf = fast_march(grid, p.speed_inside, p.speed_outside, p.sources)
        terminal = SmoothPotential(pf)
    else:
        terminal = _catalog(p.terminal)
    energy = Energy(
        grid, cfg.congestion, cfg.dynamics.epsilon,
        LagrangianSpec(cfg.dynamics.lagrangian_exponent),
        _catalog(p.running), terminal, dual_tol=cfg.dynamics.dual_tol,
    )
    return Scenario(cfg, grid, energy, pf)


def _target(cfg: ScenarioConfig):
    p = cfg.potential
    term = p.terminal.split()
    if term[0].lower() == "quadratic":
        return np.array([float(term[1]), float(term[2])])
    if term[0].lower() == "eikonal":
        return np.asarray(p.sources, dtype=float)
    return None


def initial_ensemble(cfg: ScenarioConfig) -> TrajectoryEnsemble:
    q, dyn = cfg.particles, cfg.dynamics
    p0 = layout_points(q.layout, q.n)
    M = dyn.steps
    pos = np.repeat(p0[None], M + 1, axis=0)
    target = _target(cfg)
    if cfg.optimizer.init_strategy == "straight_to_target" and target is not None:
        tgt = np.atleast_2d(target)
        nearest = tgt[np.argmin(np.linalg.norm(p0[:, None] - tgt[None], axis=2), axis=1)]
        s = np.linspace(0.0, 1.0, M + 1)[:, None, None]
        pos = p0[None] + s * (nearest - p0)[None]
    return TrajectoryEnsemble(pos, q.mass, dyn.horizon)


def with_overrides(cfg: ScenarioConfig, **sections) -> ScenarioConfig:
    """Copy of ``cfg`` with fields replaced per section, e.g. dynamics={"steps": 8}.

    A non-dict value replaces the whole section (``congestion=None`` turns
    congestion off).
    """
    kw = {}
    for sec, vals in sections.items():
        kw[sec] = replace(getattr(cfg, sec), **vals) if isinstance(vals, dict) else vals
    out = replace(cfg, **kw)
    validate(out)
    return out


# -- outputs ---------------------------------------------------------------

def _num(x) -> str:
    return repr(float(x))


def write_trajectories(path, ens: TrajectoryEnsemble):
    dt = ens.delta
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for k in range(ens.steps + 1):
            for i, (x, y) in enumerate(ens.positions[k]):
                w.writerow([k, _num(k * dt), i, _num(x), _num(y)])


def write_energy(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENERGY_COLUMNS)
        for it, row in enumerate(trace):
            w.writerow([it] + [_num(v) for v in row])


def write_grid_csv(path, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in values:
            w.writerow([_num(v) for v in row])


def _color(i: int) -> str:
    h = (i * 0.618033988749895) % 1.0
    r, g, b = (int(255 * (0.55 + 0.4 * np.cos(2 * np.pi * (h + o)))) for o in (0.0, 1 / 3, 2 / 3))
    return f"#{r:02x}{g:02x}{b:02x}"


def _svg_open(grid: GridDomain, scale=40.0):
    x0, x1, y0, y1 = grid.bounds
    w, h = (x1 - x0) * scale, (y1 - y0) * scale
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
        f'viewBox="{x0} {-y1} {x1 - x0} {y1 - y0}">\n'
        f'<g transform="scale(1,-1)">\n'
    )
    body = [f'<polygon class="hull" points="{" ".join(f"{a},{b}" for a, b in grid.hull)}" '
            f'fill="#f4f4f4" stroke="none"/>']
    for a0, b0, a1, b1 in grid.rects:
        body.append(f'<rect class="domain" x="{a0}" y="{b0}" width="{a1 - a0}" height="{b1 - b0}" '
                    f'fill="#ffffff" stroke="#444" stroke-width="0.02"/>')
    return head, body


def render_frame(grid, model, positions, solution, epsilon, path):
    """Charged cells (pixel runs coloured by owner), cell edges and particles."""
    head, body = _svg_open(grid)
    h = 1.0 / grid.resolution
    xs, ys = grid.xs - 0.5 * h, grid.ys - 0.5 * h
    if model is not None and solution is not None:
        mask = "hull" if model.two_region else "inside"
        cells = assign_cells(grid, positions, solution.weights, epsilon, mask=mask)
        dens = projected_density(grid, model, solution, DiscreteMeasure(positions, 1.0), epsilon)
        owner = np.where(dens > 0, cells.owner, -1)
        for r in range(owner.shape[0]):
            row = owner[r]
            c = 0
            while c < len(row):
                o = row[c]
                e = c
                while e + 1 < len(row) and row[e + 1] == o:
                    e += 1
                if o >= 0:
                    body.append(
                        f'<rect class="charged" x="{xs[c]!r}" y="{ys[r]!r}" width="{(e - c + 1) * h!r}" '
                        f'height="{h!r}" fill="{_color(int(o))}" stroke="none"/>'
                    )
                c = e + 1
        full = cells.owner
        segs = []
        vx = np.nonzero((full[:, 1:] != full[:, :-1]) & (full[:, 1:] >= 0) & (full[:, :-1] >= 0))
        for r, c in zip(*vx):
            x = xs[c + 1]
            segs.append(f"M{x:.5g} {ys[r]:.5g}v{h:.5g}")
        hz = np.nonzero((full[1:, :] != full[:-1, :]) & (full[1:, :] >= 0) & (full[:-1, :] >= 0))
        for r, c in zip(*hz):
            y = ys[r + 1]
            segs.append(f"M{xs[c]:.5g} {y:.5g}h{h:.5g}")
        if segs:
            body.append(f'<path class="edges" d="{"".join(segs)}" stroke="#333" stroke-width="0.01" fill="none"/>')
    rad = 0.25 / grid.resolution + 0.02
    for x, y in positions:
        body.append(f'<circle class="particle" cx="{x!r}" cy="{y!r}" r="{rad:.4g}" fill="#000"/>')
    with open(path, "w") as fh:
        fh.write(head + "\n".join(body) + "\n</g>\n</svg>\n")


def render_trajectories(grid, ens: TrajectoryEnsemble, path):
    head, body = _svg_open(grid)
    for i in range(ens.n):
        pts = " ".join(f"{x:.6g},{y:.6g}" for x, y in ens.positions[:, i])
        body.append(f'<polyline class="path" points="{pts}" fill="none" stroke="{_color(i)}" stroke-width="0.03"/>')
    for x, y in ens.positions[0]:
        body.append(f'<circle class="start" cx="{x!r}" cy="{y!r}" r="0.05" fill="#000"/>')
    with open(path, "w") as fh:
        fh.write(head + "\n".join(body) + "\n</g>\n</svg>\n")


def render_moreau(grid, model, positions, solution, epsilon, path):
    """Single-measure picture: charged cells plus arrows y_i -> b_i."""
    render_frame(grid, model, positions, solution, epsilon, path)
    with open(path) as fh:
        text = fh.read()
    arrows = []
    for (x, y), (bx, by) in zip(positions, solution.barycenter):
        arrows.append(f'<line class="arrow" x1="{x!r}" y1="{y!r}" x2="{bx!r}" y2="{by!r}" '
                      f'stroke="#c00" stroke-width="0.015"/>')
    text = text.replace("\n</g>\n</svg>", "\n" + "\n".join(arrows) + "\n</g>\n</svg>")
    with open(path, "w") as fh:
        fh.write(text)


def write_outputs(ens, per_slice, report, cfg: ScenarioConfig, out_dir=None, frame_stride=None, grid=None):
    """Write trajectories.csv, energy.csv, frames and the trajectory overlay.

    ``per_slice`` maps slice index to a MoreauSolution (missing slices are
    solved on demand when a frame needs them).  Returns the written paths.
    """
    out_dir = out_dir or cfg.output.directory
    stride = cfg.output.frame_stride if frame_stride is None else frame_stride
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir!r} is not writable")
    grid = grid or build_grid(cfg.domain.rects, cfg.domain.resolution, cfg.domain.margin)
    written = []
    fmts = set(cfg.output.formats)
    if "csv" in fmts:
        p = os.path.join(out_dir, "trajectories.csv")
        write_trajectories(p, ens)
        written.append(p)
        if report is not None:
            p = os.path.join(out_dir, "energy.csv")
            write_energy(p, report.trace)
            written.append(p)
    model, eps = cfg.congestion, cfg.dynamics.epsilon
    per_slice = dict(per_slice or {})

    def sol(k):
        if model is None:
            return None
        if k not in per_slice:
            per_slice[k] = solve_dual(grid, model, DiscreteMeasure(ens.positions[k], ens.mass), eps)
        return per_slice[k]

    if stride and stride > 0:
        for k in range(0, ens.steps + 1, stride):
            if "svg" in fmts:
                p = os.path.join(out_dir, f"frame_{k:05d}.svg")
                render_frame(grid, model, ens.positions[k], sol(k), eps, p)
                written.append(p)
            if cfg.output.density and model is not None:
                p = os.path.join(out_dir, f"density_{k:05d}.csv")
                s = sol(k)
                write_grid_csv(p, projected_density(grid, model, s, DiscreteMeasure(ens.positions[k], ens.mass), eps))
                written.append(p)
    if "svg" in fmts:
        p = os.path.join(out_dir, "trajectories.svg")
        render_trajectories(grid, ens, p)
        written.append(p)
    return written


def run(cfg: ScenarioConfig, out_dir=None, frame_stride=None, callback=None):
    """Optimize a scenario from its initial ensemble and write all outputs."""
    from .optimizer import minimize

    sc = build(cfg)
    ens0 = initial_ensemble(cfg)
    ens, report = minimize(ens0, sc.energy, cfg.optimizer, callback=callback)
    per_slice = {k + 1: s for k, s in enumerate(report.final.per_slice_moreau)}
    paths = write_outputs(ens, per_slice, report, cfg, out_dir, frame_stride, sc.grid)
    return ens, report, paths
