import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sorpfit.abc_smc import (
    AbcConfig, AbcError, AbcStall, ModelGroup, Population, _kernel_sums, kernel_scale,
    normalize_weights, perturb, prior_density, run_abc, sample_prior, tolerance_ladder,
    weight_update, write_outputs,
)
from sorpfit.dataset import SorptionDataset
from sorpfit.estimation import distance
from sorpfit.models import Model
from sorpfit.sensitivity import ParamBox


@pytest.fixture(scope="module")
def small_run(table1):
    cfg = AbcConfig(n_populations=10, n_particles=800, seed=3)
    return run_abc(cfg, table1)


@pytest.fixture(scope="module")
def default_run(table1):
    return run_abc(AbcConfig(), table1)


def test_ladder(table1):
    oracle = 1.4 * math.sqrt(math.fsum(d * d for d in table1.delta))
    lad = tolerance_ladder(table1, 22)
    assert lad[-1] == pytest.approx(oracle, rel=1e-14)
    assert lad[-1] == pytest.approx(0.080, abs=5e-4)
    assert lad[0] == pytest.approx(20 * oracle)
    assert np.all(np.diff(lad) < 0)
    np.testing.assert_allclose(lad[1:] / lad[:-1], lad[1] / lad[0])
    assert tolerance_ladder(table1, 1).tolist() == [lad[-1]]


def test_ladder_rejects_zero_uncertainty():
    ds = SorptionDataset([0.1, 0.2], [0.1, 0.2], [0, 0], [0, 0], [0, 0])
    with pytest.raises(AbcError):
        tolerance_ladder(ds, 5)


def test_config_validation():
    with pytest.raises(AbcError):
        AbcConfig(n_particles=0)
    with pytest.raises(AbcError):
        AbcConfig(n_populations=2, tolerances=[0.1, 0.2])
    with pytest.raises(AbcError):
        AbcConfig(seed=None)
    with pytest.raises(AbcError):
        AbcConfig(models=("MADS", "MADS"))


def test_sample_prior():
    box = ParamBox.from_prior(Model.MADS)
    P = sample_prior(Model.MADS, box, np.random.default_rng(0), 100_000)
    assert P[:, 0].mean() == pytest.approx(-0.75, abs=0.01)
    assert np.all((P >= box.lo) & (P <= box.hi))
    Q = sample_prior(Model.MADS, box, np.random.default_rng(0), 100_000)
    np.testing.assert_array_equal(P, Q)


def test_perturb():
    rng = np.random.default_rng(1)
    p = np.array([1.0, -2.0, 300.0])
    kappa = np.array([0.01, 0.5, 3.0])
    np.testing.assert_array_equal(perturb(p, np.zeros(3), rng), p)
    Q = perturb(np.tile(p, (100_000, 1)), kappa, rng)
    assert np.all(np.abs(Q - p) <= kappa)
    for n in range(3):
        ks = stats.kstest((Q[:, n] - p[n]) / kappa[n], stats.uniform(-1, 2).cdf)
        assert ks.pvalue > 0.01


def test_kernel_scale():
    P = np.array([[1.0, -5.0], [-3.0, 2.0]])
    np.testing.assert_allclose(kernel_scale(P, 0.01), [0.03, 0.05])


def _population(model, params, weights):
    params = np.atleast_2d(np.asarray(params, dtype=float))
    g = ModelGroup(params, np.asarray(weights, dtype=float), np.zeros(len(weights)))
    return Population(0, 1.0, {model: g}, len(weights), len(weights))


def test_weight_first_population():
    assert weight_update([-0.7, 2.5], None, Model.MADS, [0.01, 0.03]) == 1.0


def test_weight_single_parent():
    box = ParamBox.from_prior(Model.MADS)
    kappa = np.array([0.01, 0.03])
    p = np.array([-0.7, 2.5])
    prev = _population(Model.MADS, [p], [1.0])
    k0 = 1.0 / np.prod(2 * kappa)
    prior = 1.0 / np.prod(box.width)
    assert weight_update(p, prev, Model.MADS, kappa) == pytest.approx(prior / k0, rel=1e-14)
    # outside every kernel
    assert weight_update(p + 1.0, prev, Model.MADS, kappa) == 0.0
    # a model without previous particles
    assert weight_update(p, prev, Model.SM, kappa) == 0.0


def test_weight_flat_kernel():
    box = ParamBox.from_prior(Model.MADS)
    rng = np.random.default_rng(2)
    parents = sample_prior(Model.MADS, box, rng, 50)
    prev = _population(Model.MADS, parents, np.full(50, 1 / 50))
    kappa = 10 * box.width  # every kernel covers the whole box
    w = [weight_update(q, prev, Model.MADS, kappa) for q in sample_prior(Model.MADS, box, rng, 20)]
    np.testing.assert_allclose(w, w[0], rtol=1e-12)


def test_kernel_sums_match_loop():
    rng = np.random.default_rng(5)
    prev = ModelGroup(rng.random((30, 2)), rng.random(30), np.zeros(30))
    kappa = np.array([0.2, 0.3])
    Q = rng.random((40, 2))
    loop = [sum(w / np.prod(2 * kappa) for p, w in zip(prev.params, prev.weights)
                if np.all(np.abs(p - q) <= kappa)) for q in Q]
    np.testing.assert_allclose(_kernel_sums(prev, kappa, Q, chunk=7), loop, rtol=1e-13)


def test_prior_density():
    box = ParamBox((0.0, 0.0), (2.0, 0.5))
    np.testing.assert_allclose(prior_density(box, [[1.0, 0.2], [3.0, 0.2]]), [1.0, 0.0])


def test_normalize_examples():
    pop = normalize_weights(_population(Model.SM, [[0.005, 0.1], [0.006, 0.1]], [1.0, 3.0]))
    np.testing.assert_allclose(pop.groups[Model.SM].weights, [0.25, 0.75])
    pop = normalize_weights(_population(Model.SM, [[0.005, 0.1]] * 4, [2.0] * 4))
    np.testing.assert_allclose(pop.groups[Model.SM].weights, 0.25)
    again = normalize_weights(pop)
    np.testing.assert_array_equal(again.groups[Model.SM].weights, pop.groups[Model.SM].weights)
    with pytest.raises(AbcError):
        normalize_weights(_population(Model.SM, [[0.005, 0.1]], [0.0]))


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=50))
@settings(max_examples=200)
def test_normalize_sums_to_one(w):
    pop = normalize_weights(_population(Model.SM, [[0.005, 0.1]] * len(w), w))
    assert math.fsum(pop.groups[Model.SM].weights) == pytest.approx(1.0, abs=1e-12)


def test_one_model_infinite_tolerance(table1):
    res = run_abc(AbcConfig(n_populations=1, n_particles=500, tolerances=[np.inf], models=["GAB"]),
                  table1)
    assert res.final.acceptance_rate == 1.0
    assert res.final.counts([Model.GAB]) == {Model.GAB: 500}


def test_huge_tolerance_equal_counts(table1):
    res = run_abc(AbcConfig(n_populations=1, n_particles=4000, tolerances=[1e12]), table1)
    counts = res.final.counts()
    assert set(m for m, c in counts.items() if c) == set(Model)
    for c in counts.values():
        assert abs(c / 4000 - 1 / 8) <= 0.05


def test_determinism(table1):
    cfg = AbcConfig(n_populations=5, n_particles=300, seed=11)
    a, b = run_abc(cfg, table1), run_abc(cfg, table1)
    for pa, pb in zip(a.populations, b.populations):
        assert pa.attempts == pb.attempts
        for m in pa.groups:
            np.testing.assert_array_equal(pa.groups[m].params, pb.groups[m].params)
            np.testing.assert_array_equal(pa.groups[m].weights, pb.groups[m].weights)


def test_population_invariants(small_run, table1):
    prev_alive = set(Model)
    for pop in small_run.populations:
        assert pop.size == 800
        assert sum(pop.counts().values()) == 800
        alive = set(pop.alive())
        assert alive <= prev_alive  # extinct models stay extinct
        prev_alive = alive
        for m, g in pop.groups.items():
            assert math.fsum(g.weights) == pytest.approx(1.0, abs=1e-12)
            assert np.all(np.isfinite(g.weights)) and np.all(g.weights >= 0)
            box = ParamBox.from_prior(m)
            assert all(box.contains(p) for p in g.params)
            # re-evaluate every stored particle against its tolerance
            d = np.array([distance(m, p, table1) for p in g.params])
            np.testing.assert_allclose(d, g.distances, rtol=1e-12)
            assert np.all(d <= pop.epsilon)


def test_acceptance_rate_trend(table1):
    taus = []
    for seed in range(5):
        res = run_abc(AbcConfig(n_populations=12, n_particles=600, seed=seed), table1)
        taus.append([p.acceptance_rate for p in res.populations])
    mean = np.mean(taus, axis=0)
    rho = stats.spearmanr(np.arange(mean.size), mean).statistic
    assert rho < -0.8, mean
    assert mean[-1] < mean[0]


def test_stall_reports_partial_state(table1):
    cfg = AbcConfig(n_populations=3, n_particles=200, tolerances=[10.0, 1e-3, 1e-4],
                    max_attempts=5, min_batch=64)
    with pytest.raises(AbcStall) as e:
        run_abc(cfg, table1)
    assert len(e.value.populations) == 1
    assert set(e.value.partial) == {m.name for m in Model}


def test_write_outputs(small_run, tmp_path):
    paths = write_outputs(small_run, tmp_path)
    man = json.loads(paths["manifest"].read_text())
    assert len(man["populations"]) == 10
    assert man["config"]["seed"] == 3
    rows = paths["counts"].read_text().splitlines()
    assert len(rows) == 11
    assert sum(int(x) for x in rows[-1].split(",")[4:]) == 800


def test_posterior_concentration(default_run):
    # every surviving model's posterior sd is below 10% of its prior width
    for m, s in default_run.posterior.items():
        width = ParamBox.from_prior(m).width
        assert np.all(s["std"] < 0.1 * width), (m.name, s["std"] / width)
