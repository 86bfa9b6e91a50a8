"""Smoke test of the spectral_lab extension module.

Build and install first:
    pip install --no-build-isolation -e crates/spectral-lab-py
then run:
    python python/smoke_test.py
"""

import math
import pathlib
import tempfile

import spectral_lab as sl

ROOT = pathlib.Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def midpoint_of_largest(intervals):
    a, b = max(intervals, key=lambda ab: ab[1] - ab[0])
    return 0.5 * (a + b)


def check_free():
    model = sl.Model(sl.Potential.free(), 20.0, steps=1)
    phi = midpoint_of_largest(model.first_step_angles())
    assert abs(model.solve_kappa(1, phi) - 20.0) < 1e-12
    value, oracle, _, terms = model.series(phi)
    assert abs(value - 400.0) < 1e-12 * 400.0 and all(abs(g) < 1e-12 for g in terms)
    f = model.eigenfunction(1, 20.0 * math.cos(phi), 20.0 * math.sin(phi))
    assert len(f.coefficients()) >= 1 and abs(f.norm() - 1.0) < 1e-12


def check_default():
    potential = sl.Potential.from_path(CONFIGS / "default_potential.toml")
    model = sl.Model(potential, 20.0, steps=3)
    assert model.scale_cuts == [1, 2, 3]
    angles = model.first_step_angles()
    assert angles and all(a < b for a, b in angles)
    phi = midpoint_of_largest(angles)

    value, oracle, tail, terms = model.series(phi)
    assert terms[0] == 0.0 and terms[1] > 0.0
    assert abs(value - oracle) <= max(tail, 1e-8 * model.energy)

    kappa = model.solve_kappa(1, phi)
    x, y = kappa * math.cos(phi), kappa * math.sin(phi)
    assert abs(model.tracked_eigenvalue(1, x, y) - model.energy) < 1e-8 * model.energy

    oracle_f = model.eigenfunction(1, x, y)
    series_f = model.eigenfunction(1, x, y, route="series")
    assert series_f.overlap is not None and series_f.overlap > 1.0 - 1e-8
    assert abs(oracle_f.eigenvalue - series_f.eigenvalue) < 1e-9 * model.energy
    lead = dict(oracle_f.coefficients())[(0, 0)]
    assert lead[0] > 0.9 and lead[1] == 0.0

    try:
        model.eigenfunction(1, x, y, route="bogus")
    except sl.LabError as err:
        message, code = err.args
        assert code == 2 and "route" in message
    else:
        raise AssertionError("unknown route accepted")


def check_run():
    with tempfile.TemporaryDirectory() as out:
        manifest = sl.run(CONFIGS / "free.toml", out=out, steps=1)
        assert manifest["exit_code"] == 0
        energy = manifest["energies"][0]
        assert all(s["state"] in ("ok", "skipped") for s in energy["stages"])
        assert (pathlib.Path(out) / "k20" / "curves.csv").exists()


if __name__ == "__main__":
    for check in (check_free, check_default, check_run):
        check()
        print(f"{check.__name__}: ok")
