import csv
import os
import re

import numpy as np
import pytest

from congestmfg.scenario import (
    ENERGY_COLUMNS, TRAJECTORY_COLUMNS, ConfigError, format_config, initial_ensemble, layout_points,
    load_config, parse_config, run, with_overrides, write_config,
)

BUILTINS = ["square", "square_small", "corridor", "corridor_small", "room"]


def test_square_published_parameters():
    c = load_config("builtin:square")
    assert c.domain.rects == ((-1.0, -1.0, 10.0, 10.0),)
    assert c.dynamics.epsilon == 0.01 and c.dynamics.delta == 1 / 64 and c.dynamics.horizon == 15
    assert c.particles.n == 400 and c.particles.mass == 1 / 40
    assert c.particles.layout == (0.0, 0.0, 4.0, 4.0)
    assert c.potential.running == "ring 6 6 3" and c.potential.terminal == "quadratic 11 6"
    assert c.congestion.kind == "hard_cap" and c.congestion.cap == 1


def test_corridor_published_parameters():
    c = load_config("builtin:corridor")
    assert c.domain.rects == ((0, 0, 8, 8), (8, 3.5, 11, 4.5), (11, 0, 19, 8))
    assert c.dynamics.epsilon == 0.1 and c.dynamics.delta == 1 / 256 and c.dynamics.horizon == 600
    assert c.particles.n == 400 and c.particles.mass == 1 / 8
    assert c.congestion.kind == "hard_cap_two_region" and c.congestion.outside_cap == 1e-3
    assert c.potential.terminal == "eikonal" and c.potential.speed_outside == 0.1
    assert c.potential.sources == ((18, 1), (18, 7))


@pytest.mark.parametrize("name", BUILTINS)
def test_round_trip(name, tmp_path):
    c = load_config(f"builtin:{name}")
    p = tmp_path / "c.cfg"
    write_config(c, p)
    assert load_config(p) == c
    assert format_config(load_config(p)) == format_config(c)


def _text(**over):
    base = {
        "domain": "rects = 0 0 4 4\nresolution = 8",
        "particles": "n = 4\ntotal_mass = 1\nlayout = 1 1 3 3",
        "dynamics": "horizon = 1\nsteps = 4\nepsilon = 0.1",
    }
    base.update(over)
    return "\n".join(f"[{k}]\n{v}" for k, v in base.items())


def test_feasibility_boundary():
    with pytest.raises(ConfigError, match="capacity"):
        parse_config(_text(particles="n = 4\ntotal_mass = 16\nlayout = 1 1 3 3"))
    parse_config(_text(particles="n = 4\ntotal_mass = 15.9\nlayout = 1 1 3 3"))


@pytest.mark.parametrize("over,msg", [
    ({"particles": "n = 4\ntotal_mass = 1\nlayout = 1 1 5 3"}, "layout"),
    ({"dynamics": "horizon = 1\nsteps = 4\nepsilon = 0"}, "epsilon"),
    ({"dynamics": "horizon = 1\nsteps = 0\nepsilon = 0.1"}, "steps"),
    ({"domain": "rects = 0 0 4 4\ncolour = red"}, "unknown key"),
    ({"extra": "a = 1"}, "unknown section"),
    ({"potential": "terminal = cubic 1 1"}, "potential"),
    ({"domain": "rects = 0 0 x 4"}, "number"),
    ({"domain": "resolution = 8"}, "missing"),
])
def test_schema_errors(over, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(_text(**over))


def test_parse_error():
    with pytest.raises(ConfigError):
        parse_config("no section here")


def test_layouts():
    pts = layout_points((0, 0, 4, 4), 400)
    assert pts.shape == (400, 2)
    assert np.allclose(np.diff(np.unique(pts[:, 0])), 4 / 19)
    assert np.allclose(pts[:20, 1], 0) and np.allclose(pts[1, 0], 4 / 19)  # row-major, x fastest
    assert np.array_equal(layout_points((0, 0, 4, 4), 1), [[2, 2]])
    assert np.array_equal(layout_points((0, 0, 1, 1), 4), [[0, 0], [1, 0], [0, 1], [1, 1]])


def test_initial_ensemble_strategies():
    c = load_config("builtin:square_small")
    ens = initial_ensemble(c)
    assert ens.positions.shape == (41, 64, 2)
    assert np.all(ens.positions == ens.positions[0])
    c2 = with_overrides(c, optimizer={"init_strategy": "straight_to_target"})
    e2 = initial_ensemble(c2)
    assert np.array_equal(e2.positions[0], ens.positions[0])
    assert np.allclose(e2.positions[-1], [11, 6])


def test_run_outputs(tmp_path):
    c = parse_config(_text(
        potential="terminal = quadratic 3.5 2",
        dynamics="horizon = 1\nsteps = 4\nepsilon = 0.05",
        output="frame_stride = 2\ndensity = true",
    ))
    ens, rep, paths = run(c, str(tmp_path / "out"))
    names = sorted(os.path.basename(p) for p in paths)
    assert names == ["density_00000.csv", "density_00002.csv", "density_00004.csv", "energy.csv",
                     "frame_00000.svg", "frame_00002.svg", "frame_00004.svg",
                     "trajectories.csv", "trajectories.svg"]
    with open(tmp_path / "out" / "trajectories.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS and len(rows) == 1 + 5 * 4
    with open(tmp_path / "out" / "energy.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == ENERGY_COLUMNS and len(rows) == rep.iterations + 2
    svg = (tmp_path / "out" / "frame_00002.svg").read_text()
    area = sum(float(w) * float(h) for w, h in re.findall(r'class="charged" [^>]*width="([^"]+)" height="([^"]+)"', svg))
    assert area == pytest.approx(1.0, rel=0.1)
    assert svg.count('class="particle"') == 4
    dens = np.loadtxt(tmp_path / "out" / "density_00002.csv", delimiter=",")
    assert dens.sum() / 64 == pytest.approx(1.0, rel=0.1)


def test_unwritable_output(tmp_path):
    c = parse_config(_text())
    bad = tmp_path / "file"
    bad.write_text("x")
    with pytest.raises(OSError):
        run(with_overrides(c, optimizer={"max_iters": 1}), str(bad / "sub"))
