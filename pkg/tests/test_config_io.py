import numpy as np
import pytest

from memheat import config, io, ldp, solver
from memheat.exceptions import ConfigurationError

BASE = """
[simulation]
T = 0.02
dt = 1e-3
n_modes = 4
u0 = mode:1:1.0
eps = 0.1
seed = 7

[noise]
k_noise = 4
m = 4
n_mark_cells = 8
"""


def test_load_defaults_and_overrides():
    rc = config.load(text=BASE, overrides=["simulation.eps=0.5", "memory.a=0.25"])
    assert rc.eps == 0.5 and rc.sim.noise.eps == 0.5 and rc.seed == 7
    assert rc.sim.kernel.a == 0.25
    assert rc.sim.n_steps == 20
    assert np.array_equal(rc.sim.u0, [1.0, 0, 0, 0])


@pytest.mark.parametrize("override, field", [
    ("simulation.dt=0.003", "simulation.dt"),
    ("simulation.T=-1", "simulation.T"),
    ("simulation.n_modes=abc", "simulation.n_modes"),
    ("memory.form=gaussian", "memory.form"),
    ("memory.eta=0", "memory.eta"),
    ("noise.n_mark_cells=7", "noise.n_mark_cells"),
    ("noise.measure=cauchy", "noise.measure"),
    ("simulation.u0=mode:9:1", "simulation.u0"),
    ("coefficients.set=quartic", "coefficients"),
    ("coefficients.a=-1", "coefficients"),
    ("picard.m_sweep=4", "picard.m_sweep"),
])
def test_invalid_values_name_the_field(override, field):
    with pytest.raises(ConfigurationError) as info:
        config.load(text=BASE, overrides=[override])
    assert info.value.field == field


def test_bad_override_syntax():
    with pytest.raises(ConfigurationError):
        config.load(text=BASE, overrides=["dt=1"])
    with pytest.raises(ConfigurationError):
        config.load(path="/nonexistent/run.ini")


def test_parse_field():
    assert np.array_equal(config.parse_field("0.5, -1", 3, "x"), [0.5, -1, 0])
    assert np.array_equal(config.parse_field("zero", 2, "x"), [0, 0])
    with pytest.raises(ConfigurationError):
        config.parse_field("mode:a:b", 3, "x")


def test_tabulated_kernel_from_csv(tmp_path):
    p = tmp_path / "kernel.csv"
    p.write_text("-0.5,1.0\n0.0,1.0\n")
    rc = config.load(text=BASE, overrides=["memory.form=tabulated", f"memory.csv={p}"])
    assert rc.sim.kernel.l1_norm == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        config.load(text=BASE, overrides=["memory.form=tabulated"])


def test_trajectory_round_trip(tmp_path):
    rc = config.load(text=BASE)
    traj = solver.solve(rc.sim, rc.eps, path=0)
    p = io.write_trajectory(tmp_path / "t.bin", traj)
    header, times, states = io.read_trajectory(p)
    assert np.array_equal(states, traj.states)
    assert np.allclose(times, traj.times)
    assert header["config_hash"] == rc.sim.config_hash()
    assert header["seed"] == 7 and header["eps"] == 0.1 and header["n_modes"] == 4
    assert p.read_bytes()[:8] == io.MAGIC


def test_trajectory_reader_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a trajectory at all, but long enough to hold a header......")
    with pytest.raises(ConfigurationError):
        io.read_trajectory(p)
    p.write_bytes(b"short")
    with pytest.raises(ConfigurationError):
        io.read_trajectory(p)


def test_same_seed_same_bytes(tmp_path):
    rc = config.load(text=BASE)
    a = io.write_trajectory(tmp_path / "a.bin", solver.solve(rc.sim, rc.eps))
    b = io.write_trajectory(tmp_path / "b.bin", solver.solve(rc.sim, rc.eps))
    assert a.read_bytes() == b.read_bytes()


def test_controls_csv_round_trip(tmp_path):
    rc = config.load(text=BASE, overrides=["coefficients.set=linear"])
    cfg = rc.sim
    rng = np.random.default_rng(0)
    ctl = ldp.ControlPair.for_config(cfg, f=rng.standard_normal((cfg.n_steps, 4)),
                                     g=rng.uniform(0.5, 2, (cfg.n_steps, 8)))
    paths = io.write_controls(tmp_path / "ctl", ctl)
    assert [p.name for p in paths] == ["ctl_f.csv", "ctl_g.csv"]
    back = io.read_controls(tmp_path / "ctl", cfg)
    assert np.array_equal(back.f, ctl.f) and np.array_equal(back.g, ctl.g)
    with pytest.raises(ConfigurationError):
        io.read_controls(tmp_path / "missing", cfg)


def test_csv_comment_line(tmp_path):
    p = io.write_csv(tmp_path / "x.csv", ["a", "b"], [(1.5, True)], comment="seed=1")
    assert p.read_text().splitlines()[0] == "# seed=1"
    assert io.read_csv(p) == (["a", "b"], [["1.5", "true"]])
