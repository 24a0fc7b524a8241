"""Derivative-based sensitivity indices, Fisher information and error estimates.

For a model ``f(p, a)`` with sensitivities ``theta_n = df/dp_n``:

* ``nu_n(a)``  integrates ``theta_n^2`` over the interval of ``p_n`` with the
  other parameters fixed at a nominal point,
* ``nu^T_n``   integrates ``theta_n^2`` over the activity domain and the
  parameter box (``mode="box"``) or the ``p_n`` interval alone (``mode="axis"``),
* ``gamma``    normalises either to fractions summing to one.

MADS has tan poles inside its prior box, where ``theta^2`` is not integrable.
There the indices are defined by the ratio of the leading pole
coefficients (see :func:`_mads_pole_strength`).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import OMEGA_A, PRIOR_BOUNDS, ActivityDomain, Model, SingularityError, curve_grad, resolve
from .quadrature import QuadratureWarning, check_doubling, gauss_legendre

P_NODES = 64
A_NODES = 128
BOX_NODES = 8
MAX_NODES = 512
RTOL = 1e-6
COND_LIMIT = 1e12


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class ParamBox:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lo and hi must have the same non-zero length")
        for k, (l, h) in enumerate(zip(lo, hi)):
            if not (math.isfinite(l) and math.isfinite(h) and l < h):
                raise ValueError(f"invalid interval for p{k + 1}: [{l}, {h}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_prior(cls, model) -> "ParamBox":
        b = PRIOR_BOUNDS[Model.parse(model)]
        return cls(tuple(x[0] for x in b), tuple(x[1] for x in b))

    @classmethod
    def from_pairs(cls, pairs) -> "ParamBox":
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    @property
    def width(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def replace(self, n: int, lo: float, hi: float) -> "ParamBox":
        l, h = list(self.lo), list(self.hi)
        l[n], h[n] = lo, hi
        return ParamBox(tuple(l), tuple(h))


def _bounds(domain) -> tuple[float, float]:
    if isinstance(domain, ActivityDomain):
        return domain.lo, domain.hi
    lo, hi = domain
    if not lo < hi:
        raise ValueError(f"invalid activity interval [{lo}, {hi}]")
    return float(lo), float(hi)


def _setup(model, box, nominal):
    model, _ = resolve(model)
    if box is None:
        box = ParamBox.from_prior(model)
    if box.dim != model.n_params:
        raise ValueError(f"box has {box.dim} intervals, {model.name} takes {model.n_params}")
    nominal = box.midpoint if nominal is None else np.asarray(nominal, dtype=float)
    if nominal.shape != (box.dim,):
        raise ValueError(f"nominal must have shape ({box.dim},)")
    if not box.contains(nominal):
        raise ValueError(f"nominal {nominal} outside the parameter box")
    return model, box, nominal


def _axis_rule(lo: float, hi: float, n: int):
    """GL rule on one parameter interval; geometric panels for wide positive ranges."""
    panels = None
    if lo > 0 and hi / lo > 8:
        panels = np.geomspace(lo, hi, int(math.ceil(math.log(hi / lo, 4))) + 1)[1:-1]
    return gauss_legendre(n, lo, hi, panels)


# --------------------------------------------------------------------------
# MADS pole asymptotics
# --------------------------------------------------------------------------
# With x = p1 + p2 a and e = x - x_k the distance to a pole x_k = pi/2 + k pi,
# theta_n ~ c(p) (dx/dp_n) / e^2 where c = K / (p2 (1 + tan^2 p1)).  Cutting
# |e| > h out of any integral over x leaves (2/3) h^-3 times a finite
# coefficient, so ratios of the coefficients are the h -> 0 limit of gamma.

def _mads_c(p1, p2):
    from .models import CONSTANTS
    return CONSTANTS.K_slope / (p2 * (1.0 + np.tan(p1) ** 2))


def _pole_indices(x_lo, x_hi):
    k0 = math.ceil((x_lo - math.pi / 2) / math.pi)
    k1 = math.floor((x_hi - math.pi / 2) / math.pi)
    return range(k0, k1 + 1)


def _mads_local_strength(box: ParamBox, nominal, a) -> np.ndarray:
    """Pole coefficients of the one-parameter sweeps, shape ``(2, len(a))``.

    Zero where the sweep of ``p_n`` at activity ``a`` crosses no pole.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    (lo1, lo2), (hi1, hi2) = box.lo, box.hi
    q1, q2 = nominal
    L = np.zeros((2, a.size))
    for j, aj in enumerate(a):
        # sweep p1: x = p1 + q2 a, dp1 = dx
        for k in _pole_indices(lo1 + q2 * aj, hi1 + q2 * aj):
            p1s = math.pi / 2 + k * math.pi - q2 * aj
            L[0, j] += _mads_c(p1s, q2) ** 2
        # sweep p2: x = q1 + p2 a, dp2 = dx / a, theta_2 ~ c a / e^2
        if aj > 0:
            for k in _pole_indices(q1 + lo2 * aj, q1 + hi2 * aj):
                p2s = (math.pi / 2 + k * math.pi - q1) / aj
                L[1, j] += _mads_c(q1, p2s) ** 2 * aj
    return L


def _mads_box_strength(box: ParamBox, domain, n_p: int = 64, n_a: int = 64) -> np.ndarray:
    """Pole coefficients of the box integrals, shape ``(2,)``.

    For each activity the pole set is the segment ``p1 = x_k - p2 a`` inside
    the box; crossing it in ``p1`` at fixed ``p2`` contributes ``c^2`` times
    ``(dx/dp_n)^2 = (1, a^2)``.
    """
    (lo1, lo2), (hi1, hi2) = box.lo, box.hi
    a_lo, a_hi = _bounds(domain)
    xs = [math.pi / 2 + k * math.pi
          for k in _pole_indices(lo1 + min(lo2 * a_lo, lo2 * a_hi, hi2 * a_lo, hi2 * a_hi),
                                 hi1 + max(lo2 * a_lo, lo2 * a_hi, hi2 * a_lo, hi2 * a_hi))]
    if not xs:
        return np.zeros(2)
    # the p2-segment endpoints are piecewise rational in a; split a at the kinks
    kinks = [(x - p1) / p2 for x in xs for p1 in (lo1, hi1) for p2 in (lo2, hi2)]
    a_nodes, a_w = gauss_legendre(n_a, a_lo, a_hi, [k for k in kinks if a_lo < k < a_hi])

    def inner(npts):
        total = np.zeros(2)
        for aj, wj in zip(a_nodes, a_w):
            for x in xs:
                s_lo, s_hi = sorted(((x - hi1) / aj, (x - lo1) / aj))
                s_lo, s_hi = max(s_lo, lo2), min(s_hi, hi2)
                if s_hi <= s_lo:
                    continue
                p2, w = gauss_legendre(npts, s_lo, s_hi)
                c2 = _mads_c(x - p2 * aj, p2) ** 2
                total += wj * (c2 @ w) * np.array([1.0, aj * aj])
        return total

    coarse, fine = inner(n_p), inner(2 * n_p)
    check_doubling(coarse, fine, RTOL, "MADS pole coefficients")
    return fine


def _is_mads(model) -> bool:
    return isinstance(model, Model) and model is Model.MADS


# --------------------------------------------------------------------------
# local indices
# --------------------------------------------------------------------------

def _near_pole_panels(box, nominal, n, a):
    """Breakpoints grading a MADS sweep towards a pole just outside it, or ``None``."""
    lo, hi = box.lo[n], box.hi[n]
    width = hi - lo
    if n == 0:
        rate, off = 1.0, nominal[1] * a
    elif a > 0:
        rate, off = a, nominal[0]
    else:
        return None
    best = None
    for k in _pole_indices(lo * rate + off - width * rate, hi * rate + off + width * rate):
        ps = (math.pi / 2 + k * math.pi - off) / rate
        if lo < ps < hi:
            return None  # crossing sweeps are handled by the pole limit
        d, end, sign = (ps - hi, hi, -1.0) if ps >= hi else (lo - ps, lo, 1.0)
        if d < width and (best is None or d < best[0]):
            best = (d, end, sign)
    if best is None:
        return None
    d, end, sign = best
    steps = d * (2.0 ** np.arange(1, 64) - 1.0)
    return end + sign * steps[steps < width]


def _nu_sweep(model, box, nominal, n, a, nodes, skip=None):
    lo, hi = box.lo[n], box.hi[n]

    def integral(k):
        x, w = _axis_rule(lo, hi, k)
        P = np.repeat(nominal[None, :], x.size, axis=0)
        P[:, n] = x
        _, g = curve_grad(model, P, a)
        out = np.einsum("b,ba->a", w, g[:, n, :] ** 2)
        if _is_mads(model):
            # steep 1/e^4 growth towards a nearby pole needs graded panels
            for j, aj in enumerate(a):
                panels = _near_pole_panels(box, nominal, n, aj)
                if panels is None:
                    continue
                x, w = gauss_legendre(k, lo, hi, panels)
                P = np.repeat(nominal[None, :], x.size, axis=0)
                P[:, n] = x
                _, g = curve_grad(model, P, a[j:j + 1])
                out[j] = w @ g[:, n, 0] ** 2
        return out

    coarse, fine = integral(nodes), integral(2 * nodes)
    keep = slice(None) if skip is None else ~skip
    ok = check_doubling(coarse[keep], fine[keep], RTOL, f"nu_{n + 1}")
    return fine, ok


def nu_local(model, box: ParamBox | None, nominal, n: int, a, *, nodes: int = P_NODES):
    """``nu_n(a)``: integral of ``theta_n^2`` over the ``p_n`` interval.

    Other parameters stay at ``nominal``.  ``a`` may be scalar or 1-D.  For
    MADS, sweeps crossing a tan pole give ``inf``.
    """
    model, box, nominal = _setup(model, box, nominal)
    if not 0 <= n < model.n_params:
        raise IndexError(f"parameter index {n} out of range for {model.name}")
    scalar = np.ndim(a) == 0
    a = np.atleast_1d(np.asarray(a, dtype=float))
    L = _mads_local_strength(box, nominal, a) if _is_mads(model) else None
    nu, _ = _nu_sweep(model, box, nominal, n, a, nodes, None if L is None else L[n] > 0)
    if L is not None:
        nu = np.where(L[n] > 0, np.inf, nu)
    return float(nu[0]) if scalar else nu


def _normalise(nu, L=None):
    """gamma from nu (..., N, A) or pole coefficients where any nu is infinite."""
    nu = np.asarray(nu, dtype=float)
    if L is not None:
        singular = np.any(L > 0, axis=0)
        nu = np.where(singular[None, :], L, nu)
    total = nu.sum(axis=0)
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise SensitivityError("all sensitivities vanish (sum of nu is zero)")
    return nu / total


def gamma_local(model, box: ParamBox | None = None, nominal=None, a=0.5, *, nodes: int = P_NODES):
    """Local indices ``gamma_n(a)``; shape ``(N,)`` for scalar ``a`` else ``(N, A)``."""
    model, box, nominal = _setup(model, box, nominal)
    scalar = np.ndim(a) == 0
    a = np.atleast_1d(np.asarray(a, dtype=float))
    L = _mads_local_strength(box, nominal, a) if _is_mads(model) else None
    skip = None if L is None else np.any(L > 0, axis=0)
    nu = np.stack([_nu_sweep(model, box, nominal, n, a, nodes, skip)[0]
                   for n in range(model.n_params)])
    g = _normalise(nu, L)
    return g[:, 0] if scalar else g


# --------------------------------------------------------------------------
# total indices
# --------------------------------------------------------------------------

@dataclass
class TotalSensitivity:
    nu: np.ndarray          # nu^T_n (inf for pole-crossing MADS integrals)
    gamma: np.ndarray
    converged: bool
    singular: bool = False
    pole_strength: np.ndarray | None = None
    nodes: tuple[int, ...] = ()


def _box_integral(model, box, domain, ns, n_a, measure, chunk=8192):
    rules = [_axis_rule(l, h, k) for l, h, k in zip(box.lo, box.hi, ns)]
    a, wa = gauss_legendre(n_a, *_bounds(domain))
    wa = wa * measure
    grids = np.meshgrid(*[x for x, _ in rules], indexing="ij")
    W = np.ones(grids[0].shape)
    for k, (_, w) in enumerate(rules):
        shape = [1] * len(rules)
        shape[k] = -1
        W = W * w.reshape(shape)
    P = np.stack([g.ravel() for g in grids], axis=-1)
    W = W.ravel()
    nu = np.zeros(len(rules))
    for s in range(0, len(P), chunk):
        _, g = curve_grad(model, P[s:s + chunk], a)
        nu += W[s:s + chunk] @ ((g * g) @ wa)
    return nu


def _axis_integral(model, box, nominal, domain, nodes, n_a, measure):
    a, wa = gauss_legendre(n_a, *_bounds(domain))
    nu = np.empty(model.n_params)
    for n in range(model.n_params):
        x, w = _axis_rule(box.lo[n], box.hi[n], nodes)
        P = np.repeat(nominal[None, :], x.size, axis=0)
        P[:, n] = x
        _, g = curve_grad(model, P, a)
        nu[n] = np.einsum("b,ba,a->", w, g[:, n, :] ** 2, wa * measure)
    return nu


def total_sensitivity(model, box: ParamBox | None = None, nominal=None, *, mode: str = "box",
                      domain=OMEGA_A, a_nodes: int = A_NODES, measure: float = 1.0) -> TotalSensitivity:
    """``nu^T`` and ``gamma^T`` with convergence diagnostics.

    ``mode="box"`` integrates over the whole parameter box, refining each
    axis by node doubling until the relative change is below 1e-6.
    ``mode="axis"`` integrates over the ``p_n`` interval only, other
    parameters at ``nominal``.  ``measure`` scales the activity measure.
    """
    model, box, nominal = _setup(model, box, nominal)
    if mode not in ("box", "axis"):
        raise ValueError(f"mode must be 'box' or 'axis', got {mode!r}")

    if _is_mads(model):
        if mode == "box":
            L = _mads_box_strength(box, domain)
        else:
            a_lo, a_hi = _bounds(domain)
            a, wa = gauss_legendre(a_nodes, a_lo, a_hi, _mads_axis_kinks(box, nominal, a_lo, a_hi))
            L = _mads_local_strength(box, nominal, a) @ wa
        L = L * measure
        if np.any(L > 0):
            nu = np.where(L > 0, np.inf, 0.0)
            if mode == "axis":
                finite = _axis_integral(model, box, nominal, domain, P_NODES, a_nodes, measure)
                nu = np.where(L > 0, np.inf, finite)
            return TotalSensitivity(nu, L / L.sum(), True, True, L)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuadratureWarning)
        if mode == "axis":
            coarse = _axis_integral(model, box, nominal, domain, P_NODES, a_nodes, measure)
            nu = _axis_integral(model, box, nominal, domain, 2 * P_NODES, a_nodes, measure)
            ok = check_doubling(coarse, nu, RTOL, "nu^T")
            ns = (2 * P_NODES,) * model.n_params
        else:
            ns = [BOX_NODES] * model.n_params
            nu = _box_integral(model, box, domain, ns, a_nodes, measure)
            ok = True
            # refine one axis at a time; an axis is settled once doubling its
            # node count moves every nu^T by at most RTOL
            for k in range(model.n_params):
                while True:
                    trial = list(ns)
                    trial[k] *= 2
                    nu2 = _box_integral(model, box, domain, trial, a_nodes, measure)
                    change = np.max(np.abs(nu2 - nu) / np.maximum(np.abs(nu2), np.finfo(float).tiny))
                    if change <= RTOL:
                        break
                    ns, nu = trial, nu2
                    if ns[k] >= MAX_NODES:
                        ok = False
                        break
            nu2 = _box_integral(model, box, domain, ns, 2 * a_nodes, measure)
            ok = check_doubling(nu, nu2, RTOL, "nu^T activity rule") and ok
            ns = tuple(ns)
    if not ok:
        warnings.warn(f"{model.name}: total sensitivity quadrature did not converge",
                      QuadratureWarning, stacklevel=2)
    return TotalSensitivity(nu, _normalise(nu[:, None])[:, 0], ok, False, None, tuple(ns))


def _mads_axis_kinks(box, nominal, a_lo, a_hi):
    (lo1, lo2), (hi1, hi2) = box.lo, box.hi
    q1, q2 = nominal
    kinks = []
    for k in range(-3, 4):
        x = math.pi / 2 + k * math.pi
        kinks += [(x - lo1) / q2, (x - hi1) / q2, (x - q1) / lo2, (x - q1) / hi2]
    return [k for k in kinks if a_lo < k < a_hi]


def gamma_total(model, box: ParamBox | None = None, nominal=None, *, mode: str = "box",
                domain=OMEGA_A) -> np.ndarray:
    """Total indices ``gamma^T_n``, summing to one."""
    return total_sensitivity(model, box, nominal, mode=mode, domain=domain).gamma


# --------------------------------------------------------------------------
# Fisher information
# --------------------------------------------------------------------------

@dataclass
class FisherResult:
    F: np.ndarray
    eta: np.ndarray
    cond: float
    min_eig: float
    converged: bool
    singular: bool = False

    @property
    def identifiable(self) -> np.ndarray:
        return self.eta <= 1.0


def fisher_matrix(model, p, *, domain=OMEGA_A, nodes: int = A_NODES) -> FisherResult:
    """``F_ij = int theta_i theta_j da`` over ``domain`` at fixed ``p``.

    Raises :class:`SingularityError` when a MADS tan pole lies in the domain.
    """
    model, _ = resolve(model)
    p = np.asarray(p, dtype=float)
    if p.shape != (model.n_params,) or not np.all(np.isfinite(p)):
        raise ValueError(f"{model.name} needs {model.n_params} finite parameters")
    a_lo, a_hi = _bounds(domain)
    if _is_mads(model):
        from .models import mads_pole_activities
        poles = mads_pole_activities(p[0], p[1], a_lo, a_hi)
        if poles.size:
            raise SingularityError(f"MADS pole at a = {poles[0]:.6g} inside [{a_lo}, {a_hi}]; "
                                   "Fisher information diverges")

    def F_at(k):
        a, w = gauss_legendre(k, a_lo, a_hi)
        _, g = curve_grad(model, p, a)
        return np.einsum("ia,ja,a->ij", g, g, w)

    coarse, F = F_at(nodes), F_at(2 * nodes)
    # off-diagonal entries are judged against their bound sqrt(F_ii F_jj)
    d = np.sqrt(np.abs(np.diag(F)))
    ok = check_doubling(coarse, F, RTOL, "Fisher matrix", atol=np.outer(d, d))
    F = 0.5 * (F + F.T)
    eig = np.linalg.eigvalsh(F)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf
    fr = FisherResult(F, np.empty(0), cond, float(eig[0]), ok)
    fr.eta = error_estimator(fr, p)
    fr.singular = bool(np.all(np.isinf(fr.eta)))
    return fr


def error_estimator(fr: FisherResult, p_est) -> np.ndarray:
    """``eta_n = sqrt((F^-1)_nn) / |p_n|``; all ``inf`` when F is singular."""
    p_est = np.asarray(p_est, dtype=float)
    F = np.atleast_2d(np.asarray(fr.F, dtype=float))
    eig = np.linalg.eigvalsh(F)
    cond = eig[-1] / eig[0] if eig[0] > 0 else math.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        return np.full(p_est.size, np.inf)
    diag = np.diag(np.linalg.inv(F))
    with np.errstate(divide="ignore"):
        return np.sqrt(np.maximum(diag, 0.0)) / np.abs(p_est)


def format_eta(eta: float) -> str:
    """Render ``eta`` the way the results table does: values above one as ``>1``."""
    return ">1" if not (eta <= 1.0) else f"{eta:.4g}"


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class SensitivityReport:
    model: object
    grid: np.ndarray
    nu_local: np.ndarray      # (N, A)
    gamma_local: np.ndarray   # (N, A)
    nu_total: np.ndarray
    gamma_total: np.ndarray
    mode: str = "box"
    converged: bool = True
    singular: bool = False
    meta: dict = field(default_factory=dict)

    def write_curves(self, path) -> Path:
        path = Path(path)
        n = self.gamma_local.shape[0]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a"] + [f"gamma{k + 1}" for k in range(n)])
            for j, a in enumerate(self.grid):
                w.writerow([repr(float(a))] + [repr(float(g)) for g in self.gamma_local[:, j]])
        return path


def sensitivity_report(model, box: ParamBox | None = None, nominal=None, *, grid=None,
                       mode: str = "box") -> SensitivityReport:
    model, box, nominal = _setup(model, box, nominal)
    grid = OMEGA_A.grid(91) if grid is None else np.asarray(grid, dtype=float)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", QuadratureWarning)
        nu = np.stack([nu_local(model, box, nominal, n, grid) for n in range(model.n_params)])
        gl = gamma_local(model, box, nominal, grid)
        tot = total_sensitivity(model, box, nominal, mode=mode)
    ok = tot.converged and not any(issubclass(c.category, QuadratureWarning) for c in caught)
    return SensitivityReport(model, grid, nu, gl, tot.nu, tot.gamma, mode, ok, tot.singular,
                             {"nominal": nominal.tolist(), "nodes": tot.nodes})
