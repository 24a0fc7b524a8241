import csv

import numpy as np
import pytest

from sorpfit.models import Model
from sorpfit.sensitivity import ParamBox
from sorpfit.sgi import (
    GRID_POINTS, SGI_COLUMNS, SgiReport, _nelder_mead, curve_distance, param_distance,
    planted_control, sgi_falsify, write_sgi_table,
)


def test_identity_distance():
    box = ParamBox.from_prior(Model.FX)
    P = box.lo + np.random.default_rng(0).random((50, 4)) * box.width
    assert np.all(curve_distance(Model.FX, P, P) == 0.0)


def test_gab_p3_full_range():
    p = ParamBox.from_prior(Model.GAB).midpoint
    q = p.copy()
    p[2], q[2] = 5.0, 171.0
    d = curve_distance(Model.GAB, p, q)
    a = np.linspace(0.05, 0.95, GRID_POINTS)
    f = lambda x: x[0] * x[2] * a / ((1 - x[1] * a) * (1 + (x[2] - 1) * x[1] * a))  # noqa: E731
    assert d == pytest.approx(np.max(np.abs(f(p) - f(q))), rel=1e-12)
    assert d > 0


def test_param_distance():
    assert param_distance([1.0, -2.0], [1.001, -2.0]) == pytest.approx(1e-3)
    assert param_distance([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_nelder_mead_batched():
    target = np.array([[0.3, 0.7], [0.9, 0.1], [0.5, 0.5]])

    def fun(X, rows):
        return np.sum((X - target[rows]) ** 2, axis=1)
    x, f, stalled = _nelder_mead(fun, np.full((3, 2), 0.5), 2000)
    np.testing.assert_allclose(x, target, atol=1e-6)
    assert np.all(f < 1e-12)


def test_planted_control_caught():
    model, box = planted_control()
    r = sgi_falsify(model, box, trials=100)
    assert r.counterexample
    assert r.curve_distance < 1e-10 and r.param_distance > 1e-3
    assert r.p.sum() == pytest.approx(r.q.sum(), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_planted_control_always_caught(seed):
    model, box = planted_control()
    assert sgi_falsify(model, box, trials=100, rng=seed).counterexample


@pytest.mark.parametrize("model", list(Model), ids=lambda m: m.name)
def test_small_probe(model):
    r = sgi_falsify(model, trials=200, rng=1)
    assert r.identity_distance == 0.0
    assert r.trials == 200
    # the verdict follows from the reported numbers
    assert r.counterexample == (r.curve_distance < r.curve_tol and r.param_distance > r.param_tol)
    if np.isfinite(r.curve_distance):
        assert param_distance(r.p, r.q) >= 1e-3 * (1 - 1e-12)


def test_report_row_and_table(tmp_path):
    r = sgi_falsify(Model.SM, trials=20)
    path = write_sgi_table([r], tmp_path / "sgi.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == list(SGI_COLUMNS)
    assert rows[0]["verdict"] == r.verdict
    assert float(rows[0]["curve_distance"]) == r.curve_distance


def test_verdict_property():
    base = dict(model="X", trials=1, p=np.zeros(1), q=np.zeros(1), identity_distance=0.0,
                stalled=0, curve_tol=1e-10, param_tol=1e-3)
    assert SgiReport(curve_distance=1e-11, param_distance=0.1, verdict="counterexample", **base).counterexample
    assert not SgiReport(curve_distance=1e-9, param_distance=0.1, verdict="no-counterexample",
                         **base).counterexample


def test_argument_checks():
    with pytest.raises(ValueError):
        sgi_falsify(Model.SM, trials=0)
    with pytest.raises(ValueError):
        sgi_falsify(Model.SM, trials=1, curve_tol=0)


def test_deterministic():
    a = sgi_falsify(Model.BET, trials=50, rng=4)
    b = sgi_falsify(Model.BET, trials=50, rng=4)
    np.testing.assert_array_equal(a.q, b.q)
    assert a.curve_distance == b.curve_distance
