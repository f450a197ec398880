import json
from pathlib import Path

import numpy as np
import pytest

from sbridge.cli import main, validate_config, ConfigError


def write(tmp_path: Path, name: str, body: str) -> Path:
    p = tmp_path / name
    p.write_text(body)
    return p


def manifest(out: Path) -> dict:
    return json.loads((out / "manifest.json").read_text())


def test_metric(tmp_path):
    out = tmp_path / "m"
    cfg = write(tmp_path, "m.toml", f'output_dir = "{out}"\nmatrix = [[2.0, 1.0], [1.0, 2.0]]\n')
    assert main(["metric", str(cfg)]) == 0
    assert float((out / "ratio.txt").read_text()) == pytest.approx(1 / 3, abs=1e-15)
    man = manifest(out)
    assert man["config"]["matrix"] == [[2.0, 1.0], [1.0, 2.0]]
    assert set(man["versions"]) == {"sbridge", "python", "numpy", "scipy"}
    assert man["wall_time_s"] >= 0 and man["seed"] == 0
    text = (out / "manifest.json").read_text()
    assert text.index('"artifacts"') < text.index('"config"') < text.index('"versions"')


def test_metric_infinite_diameter(tmp_path):
    out = tmp_path / "m"
    cfg = write(tmp_path, "m.toml", f'output_dir = "{out}"\nmatrix = [[1.0, 0.0], [1.0, 1.0]]\n')
    assert main(["metric", str(cfg)]) == 0
    report = json.loads((out / "metric.json").read_text())
    assert report["projective_diameter"] == "inf" and report["birkhoff_ratio"] == 1.0


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write(tmp_path, "m.toml", f'output_dir = "{tmp_path}"\nmatrix = [[1.0]]\nextra.key = 1\n')
    assert main(["metric", str(cfg)]) == 2
    assert "extra.key" in capsys.readouterr().err


def test_validation_errors():
    with pytest.raises(ConfigError, match="missing"):
        validate_config("metric", {"output_dir": "x"})
    with pytest.raises(ConfigError, match="integer"):
        validate_config("limit-study", {"output_dir": "x", "rho0": {"mean": 0, "std": 1},
                                        "rho1": {"mean": 0, "std": 1}, "epsilons": [0.1],
                                        "n_time_steps": 8.5})
    cfg = validate_config("cool", {"output_dir": "x", "target": {"T_eff": 1}})
    assert cfg["target.T_eff"] == 1.0 and cfg["sim.n_paths"] == 100_000


def test_bad_toml_and_domain_errors(tmp_path):
    assert main(["metric", str(write(tmp_path, "bad.toml", "matrix = [[1.0,\n"))]) == 2
    out = tmp_path / "d"
    cfg = write(tmp_path, "d.toml", f'output_dir = "{out}"\nmatrix = [[1.0, 0.0], [1.0, 0.0]]\n')
    assert main(["metric", str(cfg)]) == 2
    assert manifest(out)["exit_code"] == 2


def test_bridge_discrete_prior_consistent(tmp_path):
    out = tmp_path / "b"
    cfg = write(tmp_path, "b.toml", f"""
output_dir = "{out}"
prior.kernel = [[0.9, 0.1], [0.2, 0.8]]
p0.values = [0.4, 0.6]
pT.values = [0.48, 0.52]
""")
    assert main(["bridge-discrete", str(cfg)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["cycles"] <= 2
    for name in ("potentials.csv", "coupling.csv", "convergence.csv", "interpolation.csv"):
        assert (out / name).exists()


def test_bridge_discrete_nonconvergence(tmp_path):
    out = tmp_path / "b"
    cfg = write(tmp_path, "b.toml", f"""
output_dir = "{out}"
prior.epsilon = 0.05
prior.n_steps = 8
grid.lower = -4.0
grid.upper = 4.0
grid.points = 200
p0.mean = -1.0
p0.variance = 0.25
pT.mean = 1.0
pT.variance = 0.25
solver.max_cycles = 3
""")
    assert main(["bridge-discrete", str(cfg)]) == 3
    diag = json.loads((out / "diagnostic.json").read_text())
    assert diag["error"] == "NonConvergenceError" and len(diag["log"]) == 3
    assert manifest(out)["exit_code"] == 3


def test_bridge_discrete_grid_guard(tmp_path):
    body = """
output_dir = "{out}"
prior.epsilon = 2.0
grid.lower = -3.0
grid.upper = 3.0
grid.points = 100
p0.mean = -1.0
p0.variance = 0.25
pT.mean = 1.0
pT.variance = 0.25
"""
    assert main(["bridge-discrete", str(write(tmp_path, "g.toml", body.format(out=tmp_path / "g")))]) == 2
    relaxed = body.format(out=tmp_path / "h") + "grid.check_margin = false\n"
    assert main(["bridge-discrete", str(write(tmp_path, "h.toml", relaxed))]) == 0


def test_bridge_gauss_and_replay(tmp_path):
    out = tmp_path / "g"
    cfg = write(tmp_path, "g.toml", f"""
output_dir = "{out}"
system.A = [[0.0]]
system.B = [[1.0]]
start.covariance = [[1.0]]
end.covariance = [[0.25]]
solver.n_grid = 100
""")
    assert main(["bridge-gauss", str(cfg)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["terminal_error"] <= 1e-6
    first = (out / "schedule.csv").read_bytes()
    assert main(["bridge-gauss", str(out / "manifest.json")]) == 0
    assert (out / "schedule.csv").read_bytes() == first
    assert main(["metric", str(out / "manifest.json")]) == 2


def test_bridge_gauss_unsupported(tmp_path):
    cfg = write(tmp_path, "g.toml", f"""
output_dir = "{tmp_path / 'g'}"
system.A = [[0.0]]
system.B = [[1.0]]
system.B1 = [[2.0]]
start.covariance = [[1.0]]
end.covariance = [[0.25]]
""")
    assert main(["bridge-gauss", str(cfg)]) == 2


def test_maintain_reports_infeasible(tmp_path):
    out = tmp_path / "m"
    cfg = write(tmp_path, "m.toml", f"""
output_dir = "{out}"
system.A = [[0.0, 1.0], [-1.0, -1.0]]
system.B = [[0.0], [1.0]]
system.B1 = [[0.0], [1.0]]
target.covariance = [[1.0, 0.5], [0.5, 1.0]]
""")
    assert main(["maintain", str(cfg)]) == 0
    gain = json.loads((out / "gain.json").read_text())
    assert gain["feasible"] is False and gain["feasibility_residual"] >= 0.9


def test_cool_small(tmp_path):
    out = tmp_path / "c"
    cfg = write(tmp_path, "c.toml", f"""
output_dir = "{out}"
seed = 5
target.T_eff = 0.25
steering.n_grid = 100
sim.n_paths = 2000
sim.n_steps = 200
sim.hold_time = 0.5
sim.record_every = 20
""")
    assert main(["cool", str(cfg)]) == 0
    tube = np.loadtxt(out / "tube.csv", delimiter=",", skiprows=1)
    assert tube.shape == (16, 9)
    assert tube[-1, 0] == pytest.approx(1.5)
    paths = np.loadtxt(out / "paths.csv", delimiter=",", skiprows=1)
    assert paths.shape == (20 * 16, 4)


def test_cool_bad_hold_time(tmp_path):
    cfg = write(tmp_path, "c.toml", f"""
output_dir = "{tmp_path / 'c'}"
target.T_eff = 0.25
sim.n_steps = 100
sim.hold_time = 0.0033
""")
    assert main(["cool", str(cfg)]) == 2


def test_limit_study_small(tmp_path):
    out = tmp_path / "l"
    cfg = write(tmp_path, "l.toml", f"""
output_dir = "{out}"
rho0.mean = -1.0
rho0.std = 0.5
rho1.mean = 1.0
rho1.std = 0.5
grid.points = 120
epsilons = [0.5, 0.2]
""")
    assert main(["limit-study", str(cfg)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["strictly_decreasing_above_floor"] is True
    assert (out / "study.csv").read_text().startswith("# W2")
