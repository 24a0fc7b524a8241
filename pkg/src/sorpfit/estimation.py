"""Least-squares calibration and the model-to-data distance.

The distance is the root of the sum of squared residuals over the dataset
rows inside the analysis domain.  Fits use a projected Gauss-Newton method
with Levenberg damping, run from a fixed set of low-discrepancy starts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .dataset import SorptionDataset
from .models import OMEGA_A, ActivityDomain, ModelError, SingularityError, curve, curve_grad, resolve
from .sensitivity import ParamBox, fisher_matrix

MAX_PARAMS = 4


@dataclass
class FitOptions:
    starts: int = 16
    max_iter: int = 200
    step_tol: float = 1e-10
    seed: int = 0
    domain: ActivityDomain = OMEGA_A


@dataclass
class FitResult:
    model: object
    p_est: np.ndarray
    distance: float
    sse: float
    eta: np.ndarray
    iterations: int
    converged: bool
    starts_used: int
    eta_singular: bool = False
    history: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        name = getattr(self.model, "name", str(self.model))
        out = {"model": name}
        for k in range(MAX_PARAMS):
            out[f"p{k + 1}"] = repr(float(self.p_est[k])) if k < self.p_est.size else ""
        for k in range(MAX_PARAMS):
            out[f"eta{k + 1}"] = repr(float(self.eta[k])) if k < self.eta.size else ""
        out["distance"] = repr(float(self.distance))
        out["sse"] = repr(float(self.sse))
        out["iterations"] = str(self.iterations)
        out["converged"] = str(int(self.converged))
        return out


FIT_COLUMNS = (["model"] + [f"p{k + 1}" for k in range(MAX_PARAMS)]
               + [f"eta{k + 1}" for k in range(MAX_PARAMS)]
               + ["distance", "sse", "iterations", "converged"])


def write_fit_table(results, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, FIT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())
    return path


def _analysis_rows(ds: SorptionDataset, domain: ActivityDomain = OMEGA_A):
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if np.any(ds.activity > domain.hi):
        raise ValueError(f"dataset activities exceed {domain.hi}")
    keep = ds.activity >= domain.lo
    return ds.activity[keep], ds.moisture[keep]


def residual_profile(model, p, ds: SorptionDataset, *, domain: ActivityDomain = OMEGA_A) -> np.ndarray:
    """Rows ``(a_i, f(p, a_i) - u_i)`` in dataset order, shape ``(n, 2)``."""
    model, _ = resolve(model)
    a, u = _analysis_rows(ds, domain)
    p = np.asarray(p, dtype=float)
    if p.shape != (model.n_params,):
        raise ModelError(f"{model.name} takes {model.n_params} parameters")
    r = curve(model, p, a) - u
    return np.column_stack([a, r])


def distance(model, p, ds: SorptionDataset, *, domain: ActivityDomain = OMEGA_A) -> float:
    """``sqrt(sum_i (f(p, a_i) - u_i)^2)`` over rows with ``a_i`` in the domain."""
    r = residual_profile(model, p, ds, domain=domain)[:, 1]
    return math.sqrt(float(r @ r))


def distance_batch(model, P, a, u) -> np.ndarray:
    """Vectorised distance for parameter rows ``P`` (non-finite curves give inf)."""
    r = curve(model, P, a) - u
    d = np.sqrt(np.einsum("...i,...i->...", r, r))
    return np.where(np.isfinite(d), d, np.inf)


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

def _gauss_newton(model, a, u, lo, hi, x0, opts: FitOptions):
    """Projected, damped Gauss-Newton in unit-box coordinates.

    Returns ``(p, sse, iterations, converged)``.
    """
    width = hi - lo
    x = np.clip(x0, 0.0, 1.0)

    def evaluate(x):
        f, g = curve_grad(model, lo + width * x, a)
        r = f - u
        sse = float(r @ r)
        return (sse if np.isfinite(sse) else math.inf), r, g.T * width

    sse, r, J = evaluate(x)
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        if not np.isfinite(sse) or not np.all(np.isfinite(J)):
            break
        grad = J.T @ r
        # bound constraints: freeze variables pinned at a face and pushed outward
        active = ((x <= 0.0) & (grad > 0)) | ((x >= 1.0) & (grad < 0))
        free = ~active
        if not np.any(free):
            converged = True
            break
        Jf = J[:, free]
        H = Jf.T @ Jf
        diag = np.maximum(np.diag(H), 1e-300)
        accepted = False
        while lam <= 1e16:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -grad[free])
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H + lam * np.diag(diag), -grad[free], rcond=None)[0]
            x_new = x.copy()
            x_new[free] = np.clip(x[free] + step, 0.0, 1.0)
            sse_new, r_new, J_new = evaluate(x_new)
            if sse_new <= sse:
                accepted = True
                break
            lam = 1e-6 if lam == 0.0 else lam * 10.0
        if not accepted:
            converged = True  # no descent possible along the damped direction
            break
        dx = np.linalg.norm(x_new - x)
        done = dx <= opts.step_tol * max(np.linalg.norm(x_new), 1e-12) or sse_new == sse
        x, sse, r, J = x_new, sse_new, r_new, J_new
        lam = 0.0 if lam <= 1e-6 else lam / 10.0
        if done:
            converged = True
            break
    return lo + width * x, sse, it, converged


def sobol_starts(dim: int, n: int, seed: int = 0) -> np.ndarray:
    """``n`` scrambled Sobol points in the unit cube (deterministic)."""
    if n <= 0:
        return np.empty((0, dim))
    m = max(0, math.ceil(math.log2(n)))
    pts = qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m)
    return pts[:n]


def fit_least_squares(model, ds: SorptionDataset, box: ParamBox | None = None,
                      opts: FitOptions | None = None, *, x0=None) -> FitResult:
    """Best local least-squares fit over multiple starts.

    ``x0`` adds explicit starting points (parameter space) ahead of the
    Sobol starts.  The winner is the lowest SSE, ties broken by start order.
    ``eta`` comes from the Fisher matrix at the winner; a MADS pole inside the
    domain makes it ``inf``.
    """
    model, _ = resolve(model)
    opts = opts or FitOptions()
    box = box or ParamBox.from_prior(model)
    a, u = _analysis_rows(ds, opts.domain)
    if a.size < model.n_params:
        raise ValueError(f"{a.size} data points cannot determine {model.n_params} parameters")
    lo, hi = np.array(box.lo), np.array(box.hi)
    starts = [((np.atleast_2d(x0) - lo) / (hi - lo))] if x0 is not None else []
    starts.append(sobol_starts(model.n_params, opts.starts, opts.seed))
    starts = np.vstack(starts)

    best = None
    history = []
    for k, s in enumerate(starts):
        p, sse, it, conv = _gauss_newton(model, a, u, lo, hi, s, opts)
        history.append((k, sse, it, conv))
        if best is None or sse < best[1]:
            best = (p, sse, it, conv)
    p, sse, it, conv = best

    eta_singular = False
    try:
        eta = fisher_matrix(model, p, domain=opts.domain).eta
    except SingularityError:
        eta = np.full(model.n_params, np.inf)
        eta_singular = True
    return FitResult(model, p, math.sqrt(sse) if np.isfinite(sse) else math.inf, sse, eta, it,
                     bool(conv and np.isfinite(sse)), len(starts),
                     eta_singular, history)
