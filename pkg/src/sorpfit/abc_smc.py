"""Sequential ABC with decreasing tolerances for joint model selection and calibration.

Each population draws a model uniformly, picks a parent particle of that
model from the previous population (by weight), perturbs it with a uniform
random walk and keeps it if the model-to-data distance is below the current
tolerance.  Models that lose all their particles cannot be proposed again.

Proposals are generated in vectorised batches from a single seeded
generator, so a run is reproducible bit for bit from its configuration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import SorptionDataset, uncertainty_norm
from .estimation import _analysis_rows, distance_batch
from .models import Model
from .sensitivity import ParamBox

MAX_PARAMS = 4


class AbcError(ValueError):
    pass


class AbcStall(RuntimeError):
    """A population could not be filled within the proposal budget."""

    def __init__(self, msg: str, populations: list, partial: dict):
        super().__init__(msg)
        self.populations = populations
        self.partial = partial


@dataclass
class AbcConfig:
    n_populations: int = 22
    n_particles: int = 4000
    kappa0: float = 0.01
    seed: int = 0
    tolerances: Sequence[float] | None = None
    scale: float = 1.4
    first_factor: float = 20.0
    max_attempts: int = 1_000_000   # per particle
    min_batch: int = 2048
    max_batch: int = 1 << 18
    models: Sequence[Model] = tuple(Model)

    def __post_init__(self):
        if self.n_populations < 1 or self.n_particles < 1:
            raise AbcError("n_populations and n_particles must be at least 1")
        if not self.kappa0 > 0:
            raise AbcError("kappa0 must be positive")
        if self.seed is None:
            raise AbcError("a seed is required for reproducible runs")
        self.models = tuple(Model.parse(m) for m in self.models)
        if not self.models or len(set(self.models)) != len(self.models):
            raise AbcError("models must be a non-empty list without repeats")
        if self.tolerances is not None:
            t = np.asarray(self.tolerances, dtype=float)
            if t.size != self.n_populations:
                raise AbcError(f"{t.size} tolerances for {self.n_populations} populations")
            if np.any(np.diff(t) >= 0) or np.any(~(t > 0)):
                raise AbcError("tolerances must be positive and strictly decreasing")


@dataclass(frozen=True)
class Particle:
    model: Model
    p: np.ndarray
    weight: float


@dataclass
class ModelGroup:
    params: np.ndarray     # (k, N)
    weights: np.ndarray    # (k,)
    distances: np.ndarray  # (k,)


@dataclass
class Population:
    index: int
    epsilon: float
    groups: dict            # Model -> ModelGroup
    attempts: int
    evaluated: int

    @property
    def size(self) -> int:
        return sum(len(g.weights) for g in self.groups.values())

    @property
    def acceptance_rate(self) -> float:
        return self.size / self.attempts if self.attempts else 0.0

    def counts(self, models: Sequence[Model] = tuple(Model)) -> dict:
        return {m: (len(self.groups[m].weights) if m in self.groups else 0) for m in models}

    @property
    def particles(self) -> list:
        return [Particle(m, g.params[i], float(g.weights[i]))
                for m, g in self.groups.items() for i in range(len(g.weights))]

    def alive(self) -> list:
        return [m for m, g in self.groups.items() if len(g.weights)]


@dataclass
class AbcResult:
    config: AbcConfig
    tolerances: np.ndarray
    populations: list
    posterior: dict = field(default_factory=dict)

    @property
    def final(self) -> Population:
        return self.populations[-1]

    def model_fractions(self, pop: Population | None = None) -> dict:
        pop = pop or self.final
        n = pop.size
        return {m: c / n for m, c in pop.counts(self.config.models).items()}

    def selected(self) -> Model:
        counts = self.final.counts(self.config.models)
        return max(counts, key=lambda m: (counts[m], -int(m)))


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def tolerance_ladder(ds: SorptionDataset, n_eps: int, scale: float = 1.4,
                     first_factor: float = 20.0) -> np.ndarray:
    """Geometric ladder from ``first_factor * eps_final`` down to ``eps_final``.

    ``eps_final = scale * sqrt(sum delta_i^2)`` over all dataset rows.
    """
    if n_eps < 1:
        raise AbcError("need at least one population")
    eps_final = scale * uncertainty_norm(ds)
    if not eps_final > 0:
        raise AbcError("dataset carries no uncertainties; the final tolerance would be zero")
    if n_eps == 1:
        return np.array([eps_final])
    return eps_final * first_factor ** (1.0 - np.arange(n_eps) / (n_eps - 1))


def sample_prior(model, box: ParamBox, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform draw(s) from the parameter box."""
    lo, hi = np.array(box.lo), np.array(box.hi)
    shape = lo.shape if size is None else (size,) + lo.shape
    return lo + (hi - lo) * rng.random(shape)


def perturb(p_star, kappa, rng: np.random.Generator) -> np.ndarray:
    """``p** = p* + kappa * U(-1, 1)`` componentwise (also for batches)."""
    p_star = np.asarray(p_star, dtype=float)
    return p_star + np.asarray(kappa, dtype=float) * rng.uniform(-1.0, 1.0, p_star.shape)


def kernel_scale(params: np.ndarray, kappa0: float) -> np.ndarray:
    """``kappa_n = kappa0 * max |p_n|`` over the particles of one model."""
    return kappa0 * np.max(np.abs(params), axis=0)


def prior_density(box: ParamBox, P) -> np.ndarray:
    P = np.atleast_2d(P)
    inside = np.all((P >= box.lo) & (P <= box.hi), axis=-1)
    return np.where(inside, 1.0 / float(np.prod(box.width)), 0.0)


def _kernel_sums(prev: ModelGroup, kappa: np.ndarray, Q: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """``sum_j w_j K(p_j, q)`` for each row of ``Q`` (uniform product kernel)."""
    dens = 1.0 / float(np.prod(2.0 * kappa))
    out = np.empty(len(Q))
    for s in range(0, len(Q), chunk):
        q = Q[s:s + chunk]
        inside = np.all(np.abs(prev.params[None, :, :] - q[:, None, :]) <= kappa, axis=-1)
        out[s:s + chunk] = (inside @ prev.weights) * dens
    return out


def weight_update(p_star2, prev: Population | None, m, kappa, box: ParamBox | None = None) -> float:
    """Importance weight of an accepted particle.

    1 in the first population (``prev is None``); otherwise
    ``pi(p**) / sum_j w_j K(p_j, p**)`` over the previous particles of model
    ``m``, or 0 when no previous kernel covers ``p**``.
    """
    if prev is None:
        return 1.0
    m = Model.parse(m)
    box = box or ParamBox.from_prior(m)
    group = prev.groups.get(m)
    if group is None or not len(group.weights):
        return 0.0
    q = np.atleast_2d(np.asarray(p_star2, dtype=float))
    denom = _kernel_sums(group, np.asarray(kappa, dtype=float), q)[0]
    if denom <= 0:
        return 0.0
    return float(prior_density(box, q)[0] / denom)


def normalize_weights(pop: Population) -> Population:
    """Scale weights so they sum to one within every model."""
    groups = {}
    for m, g in pop.groups.items():
        if not len(g.weights):
            groups[m] = g
            continue
        total = g.weights.sum()
        if not total > 0:
            raise AbcError(f"all weights of {getattr(m, 'name', m)} are zero")
        groups[m] = ModelGroup(g.params, g.weights / total, g.distances)
    return Population(pop.index, pop.epsilon, groups, pop.attempts, pop.evaluated)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def _propose(cfg, boxes, prev: Population | None, kappas, rng, B):
    """One batch of proposals: model index per row and parameter rows per model."""
    nm = len(cfg.models)
    pick = rng.integers(0, nm, size=B)
    proposals = {}
    for k, m in enumerate(cfg.models):
        rows = np.flatnonzero(pick == k)
        if prev is None:
            P = sample_prior(m, boxes[m], rng, rows.size)
        else:
            g = prev.groups.get(m)
            if g is None or not len(g.weights):
                continue  # extinct: these proposals are discarded
            parent = rng.choice(len(g.weights), size=rows.size, p=g.weights)
            P = perturb(g.params[parent], kappas[m], rng)
        ok = prior_density(boxes[m], P) > 0 if rows.size else np.zeros(0, bool)
        proposals[m] = (rows[ok], P[ok])
    return proposals


def run_abc(cfg: AbcConfig, ds: SorptionDataset, boxes: dict | None = None,
            progress: Callable[[Population], None] | None = None) -> AbcResult:
    boxes = {m: (boxes or {}).get(m) or ParamBox.from_prior(m) for m in cfg.models}
    tol = (np.asarray(cfg.tolerances, dtype=float) if cfg.tolerances is not None
           else tolerance_ladder(ds, cfg.n_populations, cfg.scale, cfg.first_factor))
    a, u = _analysis_rows(ds)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    N = cfg.n_particles
    pops: list[Population] = []
    prev = None
    for i, eps in enumerate(tol):
        kappas = {m: kernel_scale(g.params, cfg.kappa0)
                  for m, g in (prev.groups.items() if prev else []) if len(g.weights)}
        acc = {m: [] for m in cfg.models}
        n_acc = attempts = evaluated = 0
        rate = 1.0
        budget = cfg.max_attempts * N
        while n_acc < N:
            if attempts >= budget:
                partial = {m.name: int(sum(len(x[1]) for x in acc[m])) for m in cfg.models}
                raise AbcStall(f"population {i + 1} (eps={eps:.4g}) accepted {n_acc}/{N} "
                               f"particles after {attempts} proposals", pops, partial)
            need = N - n_acc
            B = int(min(cfg.max_batch, max(cfg.min_batch, math.ceil(1.25 * need / max(rate, 1e-6)))))
            B = min(B, budget - attempts)
            proposals = _propose(cfg, boxes, prev, kappas, rng, B)
            # accepted proposals in batch order, truncated at N
            hits = []
            for m, (rows, P) in proposals.items():
                if not rows.size:
                    continue
                d = distance_batch(m, P, a, u)
                evaluated += int(rows.size)
                ok = d <= eps
                hits.extend((r, m, P[j], d[j]) for j, r in zip(np.flatnonzero(ok), rows[ok]))
            hits.sort(key=lambda h: h[0])
            take = hits[:need]
            used = (take[-1][0] + 1) if len(take) == need else B
            for _, m, p, d in take:
                acc[m].append((p, d))
            n_acc += len(take)
            attempts += int(used)
            rate = max(n_acc / attempts, 1e-6)
        groups = {}
        for m in cfg.models:
            if not acc[m]:
                continue
            P = np.array([x[0] for x in acc[m]])
            d = np.array([x[1] for x in acc[m]])
            if prev is None:
                w = np.ones(len(P))
            else:
                w = prior_density(boxes[m], P) / _kernel_sums(prev.groups[m], kappas[m], P)
            groups[m] = ModelGroup(P, w, d)
        pop = normalize_weights(Population(i, float(eps), groups, attempts, evaluated))
        pops.append(pop)
        if progress:
            progress(pop)
        prev = pop
    res = AbcResult(cfg, tol, pops)
    res.posterior = posterior_summary(res)
    return res


# --------------------------------------------------------------------------
# summaries and output
# --------------------------------------------------------------------------

def posterior_summary(res: AbcResult) -> dict:
    out = {}
    for m, g in res.final.groups.items():
        w = g.weights
        mean = w @ g.params
        sd = np.sqrt(np.maximum(w @ (g.params - mean) ** 2, 0.0))
        out[m] = {"count": int(len(w)), "fraction": len(w) / res.final.size,
                  "mean": mean, "std": sd, "best_distance": float(g.distances.min())}
    return out


def manifest(res: AbcResult) -> dict:
    cfg = asdict(res.config)
    cfg["models"] = [m.name for m in res.config.models]
    cfg["tolerances"] = [float(t) for t in res.tolerances]
    pops = []
    for p in res.populations:
        pops.append({"population": p.index + 1, "epsilon": p.epsilon, "attempts": int(p.attempts),
                     "evaluated": int(p.evaluated), "acceptance_rate": p.acceptance_rate,
                     "counts": {m.name: c for m, c in p.counts(res.config.models).items()}})
    post = {m.name: {"count": s["count"], "fraction": s["fraction"],
                     "mean": [float(x) for x in s["mean"]], "std": [float(x) for x in s["std"]],
                     "best_distance": s["best_distance"]}
            for m, s in res.posterior.items()}
    return {"config": cfg, "populations": pops, "posterior": post, "selected": res.selected().name}


def write_outputs(res: AbcResult, out: Path, bins: int = 20) -> dict:
    """Manifest JSON plus counts, final particles and histogram CSVs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"manifest": out / "abc_manifest.json", "counts": out / "abc_population_counts.csv",
             "particles": out / "abc_final_particles.csv", "histograms": out / "abc_posterior_histograms.csv"}
    paths["manifest"].write_text(json.dumps(manifest(res), indent=2, sort_keys=True) + "\n")
    models = res.config.models
    with paths["counts"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["population", "epsilon", "attempts", "acceptance_rate"] + [m.name for m in models])
        for p in res.populations:
            c = p.counts(models)
            w.writerow([p.index + 1, repr(p.epsilon), p.attempts, repr(p.acceptance_rate)]
                       + [c[m] for m in models])
    with paths["particles"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"p{k + 1}" for k in range(MAX_PARAMS)] + ["weight", "distance"])
        for m, g in res.final.groups.items():
            for P, wt, d in zip(g.params, g.weights, g.distances):
                vals = [repr(float(x)) for x in P] + [""] * (MAX_PARAMS - len(P))
                w.writerow([m.name] + vals + [repr(float(wt)), repr(float(d))])
    with paths["histograms"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "parameter", "bin_lo", "bin_hi", "density"])
        for m, g in res.final.groups.items():
            box = ParamBox.from_prior(m)
            for k in range(g.params.shape[1]):
                h, edges = np.histogram(g.params[:, k], bins=bins, range=(box.lo[k], box.hi[k]),
                                        weights=g.weights, density=True)
                for j in range(bins):
                    w.writerow([m.name, f"p{k + 1}", repr(float(edges[j])), repr(float(edges[j + 1])),
                                repr(float(h[j]))])
    return paths
