"""Closed-form sorption isotherm models and their parameter gradients.

Eight models are available, identified by :class:`Model`.  Every model maps a
parameter vector ``p`` and a water activity ``a`` to a dimensionless moisture
content ``u``.  Gradients with respect to the parameters are hand-derived.

Two layers are exposed:

* :func:`eval_model` / :func:`eval_grad` validate their inputs and raise on
  domain, arity or singularity problems.
* :func:`curve` / :func:`curve_grad` are the unchecked, batch-vectorised
  kernels used by the analysis modules (parameters of shape ``(B, N)``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Model",
    "CustomModel",
    "PhysicalConstants",
    "ActivityDomain",
    "OMEGA_A",
    "CONSTANTS",
    "PRIOR_BOUNDS",
    "ModelError",
    "DomainError",
    "ArityError",
    "SingularityError",
    "resolve",
    "eval_model",
    "eval_grad",
    "curve",
    "curve_grad",
    "capillary_pressure",
    "mads_shape_coefficients",
    "mads_general",
    "fx_original",
    "vg_original",
    "mads_pole_activities",
    "monotonicity_violations",
]


class ModelError(ValueError):
    """Base class for model evaluation errors."""


class DomainError(ModelError):
    pass


class ArityError(ModelError):
    pass


class SingularityError(ModelError):
    pass


class Model(enum.IntEnum):
    BET = 1
    GAB = 2
    TRM = 3
    OSW = 4
    FX = 5
    VG = 6
    SM = 7
    MADS = 8

    @property
    def n_params(self) -> int:
        return _N_PARAMS[self]

    @classmethod
    def parse(cls, name: str | int | "Model") -> "Model":
        if isinstance(name, Model):
            return name
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise ModelError(f"unknown model {name!r}; expected one of "
                             f"{', '.join(m.name for m in cls)}") from None


@dataclass(frozen=True)
class CustomModel:
    """A user-supplied model with the same kernel signature as the built-ins.

    ``kernel(p, a, grad)`` receives a tuple of broadcastable parameter arrays
    and returns ``f`` or ``(f, (df/dp_1, ..., df/dp_N))``.
    """

    name: str
    n_params: int
    kernel: Callable


_N_PARAMS = {
    Model.BET: 2, Model.GAB: 3, Model.TRM: 3, Model.OSW: 2,
    Model.FX: 4, Model.VG: 3, Model.SM: 2, Model.MADS: 2,
}


@dataclass(frozen=True)
class PhysicalConstants:
    rho2: float = 1000.0      # liquid water density [kg/m3]
    R1: float = 462.0         # water vapour gas constant [J/(kg K)]
    T: float = 296.15         # temperature [K]
    K_slope: float = 0.2416   # MADS slope at the anchor activity
    a0: float = 0.0           # MADS anchor activity

    @property
    def rho_RT(self) -> float:
        return self.rho2 * self.R1 * self.T


@dataclass(frozen=True)
class ActivityDomain:
    lo: float = 0.05
    hi: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.lo < self.hi < 1.0:
            raise ValueError(f"invalid activity domain [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def grid(self, n: int) -> np.ndarray:
        return np.linspace(self.lo, self.hi, n)


CONSTANTS = PhysicalConstants()
OMEGA_A = ActivityDomain()

# Uniform prior intervals, one (lo, hi) pair per parameter.
PRIOR_BOUNDS: dict[Model, tuple[tuple[float, float], ...]] = {
    Model.GAB: ((1.06e-2, 5.31e-2), (0.95, 1.05), (5.0, 171.0)),
    Model.TRM: ((1.0, 3.0), (1.0, 1.55), (2.0, 3.0)),
    Model.OSW: ((0.013, 0.14), (0.75, 1.28)),
    Model.FX: ((4.9, 40.0), (18.0, 18.69), (7.0, 18.5), (1.46, 1.7)),
    Model.BET: ((0.034, 0.09), (0.20, 10.0)),
    Model.VG: ((0.99, 179.0), (26.6, 3.73e3), (1.7, 2.4)),
    Model.SM: ((0.0026, 0.013), (0.04, 0.20)),
    Model.MADS: ((-1.1, -0.4), (2.1, 2.9)),
}

_E = math.e
_POLE_TOL = 1e-9


# --------------------------------------------------------------------------
# kernels: p is a tuple of arrays broadcastable against a
# --------------------------------------------------------------------------

def _bet(p, a, grad):
    p1, p2 = p
    D = 1.0 + (p2 - 1.0) * a
    g1 = p2 * a / ((1.0 - a) * D)
    f = p1 * g1
    if not grad:
        return f
    return f, (g1, p1 * a / D**2)


def _gab(p, a, grad):
    p1, p2, p3 = p
    A = 1.0 - p2 * a
    B = 1.0 - p2 * a + p2 * p3 * a
    core = a / (A * B)
    f = p1 * p2 * p3 * core
    if not grad:
        return f
    g1 = p2 * p3 * core
    g2 = p1 * p3 * core + f * (a / A - a * (p3 - 1.0) / B)
    g3 = p1 * p2 * core - f * p2 * a / B
    return f, (g1, g2, g3)


def _trm(p, a, grad):
    p1, p2, p3 = p
    LE = np.log(a) * np.exp(p3 * a)
    g1 = np.exp(p2 * LE)
    f = p1 * g1
    if not grad:
        return f
    return f, (g1, f * LE, f * p2 * LE * a)


def _osw(p, a, grad):
    p1, p2 = p
    lr = np.log(a / (1.0 - a))
    g1 = np.exp(p2 * lr)
    f = p1 * g1
    if not grad:
        return f
    return f, (g1, f * lr)


def _fx(p, a, grad):
    p1, p2, p3, p4 = p
    s = -p2 * np.log(a)
    ls = np.log(s)
    q = np.exp(p3 * ls)
    G = np.log(_E + q)
    g1 = np.exp(-p4 * np.log(G))
    f = p1 * g1
    if not grad:
        return f
    dfdG = -p4 * f / G
    g2 = dfdG * p3 * q / (p2 * (_E + q))
    g3 = dfdG * q * ls / (_E + q)
    g4 = -f * np.log(G)
    return f, (g1, g2, g3, g4)


def _vg(p, a, grad):
    p1, p2, p3 = p
    s = -p2 * np.log(a)
    ls = np.log(s)
    q = np.exp(p3 * ls)
    H = 1.0 + q
    lH = np.log(H)
    e = -1.0 + 1.0 / p3
    g1 = np.exp(e * lH)
    f = p1 * g1
    if not grad:
        return f
    g2 = f * e * p3 * q / (p2 * H)
    g3 = f * (-lH / p3**2 + e * q * ls / H)
    return f, (g1, g2, g3)


def _sm(p, a, grad):
    # Written with a minus sign so that positive p2 (the prior range) gives a
    # rising isotherm.
    p1, p2 = p
    l1 = np.log1p(-a)
    f = p1 - p2 * l1
    if not grad:
        return f
    return f, (np.ones_like(f), -l1 * np.ones_like(f))


def _mads(p, a, grad):
    p1, p2 = p
    K = CONSTANTS.K_slope
    t1 = np.tan(p1)
    s1 = 1.0 + t1**2
    tx = np.tan(p1 + p2 * a)
    c = K / (p2 * s1)
    f = c * (tx - t1)
    if not grad:
        return f
    sx = 1.0 + tx**2
    g1 = -2.0 * t1 * f + c * (sx - s1)
    g2 = -f / p2 + c * a * sx
    return f, (g1, g2)


_KERNELS = {
    Model.BET: _bet, Model.GAB: _gab, Model.TRM: _trm, Model.OSW: _osw,
    Model.FX: _fx, Model.VG: _vg, Model.SM: _sm, Model.MADS: _mads,
}


# --------------------------------------------------------------------------
# batch interface
# --------------------------------------------------------------------------

def resolve(model):
    """Return ``(model, kernel)`` for a built-in id/name or a :class:`CustomModel`."""
    if isinstance(model, CustomModel):
        return model, model.kernel
    model = Model.parse(model)
    return model, _KERNELS[model]


def _split(P, n):
    P = np.asarray(P, dtype=float)
    if P.shape[-1] != n:
        raise ArityError(f"expected {n} parameters, got {P.shape[-1]}")
    return tuple(P[..., k, None] for k in range(n))


def curve(model: Model, P, a) -> np.ndarray:
    """Unchecked evaluation of ``model`` for a batch of parameter vectors.

    ``P`` has shape ``(..., N)`` and ``a`` shape ``(A,)``; the result has shape
    ``(..., A)``.  Invalid combinations yield ``nan`` or ``inf``.
    """
    model, kernel = resolve(model)
    a = np.asarray(a, dtype=float)
    P = np.asarray(P, dtype=float)
    with np.errstate(all="ignore"):
        f = kernel(_split(P, model.n_params), a, False)
    return np.broadcast_to(f, P.shape[:-1] + a.shape)


def curve_grad(model: Model, P, a) -> tuple[np.ndarray, np.ndarray]:
    """Unchecked values and gradients; gradient shape is ``(..., N, A)``."""
    model, kernel = resolve(model)
    a = np.asarray(a, dtype=float)
    P = np.asarray(P, dtype=float)
    shape = P.shape[:-1] + a.shape
    with np.errstate(all="ignore"):
        f, g = kernel(_split(P, model.n_params), a, True)
        g = np.stack([np.broadcast_to(gk, shape) for gk in g], axis=-2)
    return np.broadcast_to(f, shape), g


# --------------------------------------------------------------------------
# checked scalar/vector interface
# --------------------------------------------------------------------------

def _check(model, p, a, domain, check_domain):
    model, _ = resolve(model)
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size != model.n_params:
        raise ArityError(f"{model.name} takes {model.n_params} parameters, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ModelError(f"non-finite parameters {p}")
    a = np.asarray(a, dtype=float)
    if check_domain:
        if np.any(a < domain.lo) or np.any(a > domain.hi) or np.any(~np.isfinite(a)):
            raise DomainError(f"activity outside [{domain.lo}, {domain.hi}]")
    if model in (Model.FX, Model.VG) and p[1] <= 0:
        raise DomainError(f"{model.name} requires p2 > 0")
    if model is Model.MADS:
        x = p[0] + p[1] * a
        k = np.round((x - np.pi / 2) / np.pi)
        if np.any(np.abs(x - (np.pi / 2 + k * np.pi)) < _POLE_TOL):
            raise SingularityError("MADS argument at a tan pole")
        if math.cos(p[0]) == 0.0 or p[1] == 0.0:
            raise SingularityError("MADS normalisation undefined")
    return model, p, a


def eval_model(model, p, a, *, domain: ActivityDomain = OMEGA_A, check_domain: bool = True):
    """Moisture content ``u = f_m(p, a)``.

    ``a`` may be a scalar or an array.  With ``check_domain=False`` activities
    outside the analysis domain are accepted (formula limits at 0 or 1).
    """
    model, p, a = _check(model, p, a, domain, check_domain)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        f = resolve(model)[1](tuple(p), a, False)
    f = np.asarray(f, dtype=float)
    return float(f) if f.ndim == 0 else f


def eval_grad(model, p, a, *, domain: ActivityDomain = OMEGA_A, check_domain: bool = True):
    """Analytic sensitivities ``df/dp_n``, shape ``(N,) + shape(a)``."""
    model, p, a = _check(model, p, a, domain, check_domain)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        f, g = resolve(model)[1](tuple(p), a, True)
    return np.stack([np.broadcast_to(np.asarray(gk, dtype=float), np.shape(f)) for gk in g])


# --------------------------------------------------------------------------
# auxiliary relations
# --------------------------------------------------------------------------

def capillary_pressure(a, c: PhysicalConstants = CONSTANTS):
    """Kelvin relation ``psi = -rho2 R1 T ln(a)`` in Pa."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0) or np.any(a > 1):
        raise DomainError("capillary pressure needs 0 < a <= 1")
    psi = -c.rho_RT * np.log(a)
    psi = np.where(psi == 0.0, 0.0, psi)
    return float(psi) if psi.ndim == 0 else psi


def mads_shape_coefficients(p1: float, p2: float, c: PhysicalConstants = CONSTANTS):
    """Offset ``u0`` and amplitude ``alpha`` of ``u0 + alpha tan(p1 + p2 a)``.

    They follow from pinning the curve to zero at ``a = 0`` and its slope to
    ``K`` at the anchor activity ``a0 = 0``.
    """
    if p2 == 0.0:
        raise SingularityError("p2 must be non-zero")
    t1 = math.tan(p1)
    alpha = c.K_slope / (p2 * (1.0 + t1 * t1))
    return -alpha * t1, alpha


def mads_general(u0: float, alpha: float, poly, a):
    """``u0 + alpha tan(P(a))`` with ``poly`` the coefficients of P, lowest first."""
    a = np.asarray(a, dtype=float)
    return u0 + alpha * np.tan(np.polynomial.polynomial.polyval(a, poly))


def mads_pole_activities(p1: float, p2: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Activities in ``[lo, hi]`` where ``p1 + p2 a`` hits a tan pole."""
    if p2 == 0.0:
        return np.empty(0)
    x_lo, x_hi = sorted((p1 + p2 * lo, p1 + p2 * hi))
    k0 = math.ceil((x_lo - math.pi / 2) / math.pi)
    k1 = math.floor((x_hi - math.pi / 2) / math.pi)
    xs = math.pi / 2 + math.pi * np.arange(k0, k1 + 1)
    return np.sort((xs - p1) / p2)


def fx_original(p1, p2_tilde, p3, p4, a, c: PhysicalConstants = CONSTANTS):
    """Feng-Xing model written with capillary pressure and dimensional ``p2``."""
    psi = capillary_pressure(a, c)
    return p1 * np.log(_E + (psi / p2_tilde) ** p3) ** (-p4)


def vg_original(p1, p2_breve, p3, a, c: PhysicalConstants = CONSTANTS):
    """van Genuchten model written with capillary pressure and dimensional ``p2``."""
    psi = capillary_pressure(a, c)
    return p1 * (1.0 + (p2_breve * psi) ** p3) ** (-1.0 + 1.0 / p3)


def monotonicity_violations(model, P, a=None) -> np.ndarray:
    """Indices of parameter rows whose curve decreases somewhere on ``a``.

    Rows producing non-finite values are also reported.
    """
    a = OMEGA_A.grid(97) if a is None else np.asarray(a, dtype=float)
    P = np.atleast_2d(np.asarray(P, dtype=float))
    u = curve(model, P, a)
    bad = np.any(np.diff(u, axis=-1) < 0, axis=-1) | np.any(~np.isfinite(u), axis=-1)
    return np.flatnonzero(bad)
