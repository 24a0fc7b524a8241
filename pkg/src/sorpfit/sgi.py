"""Numerical falsification of structural global identifiability.

For a random parameter vector ``p`` the probe searches for another vector
``q`` with a (relative) separation of at least ``param_tol`` whose curve is
indistinguishable from ``f(p, .)`` on a dense activity grid.  Finding one is a
counterexample to global identifiability; not finding one is evidence only.

The local search is a derivative-free Nelder-Mead run in unit-box
coordinates, vectorised across trials.  Points closer to ``p`` than
``param_tol`` are infeasible (objective ``inf``), which keeps the search from
collapsing onto the trivial solution ``q = p``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import OMEGA_A, CustomModel, curve, resolve
from .sensitivity import ParamBox

GRID_POINTS = 97


@dataclass
class SgiReport:
    model: str
    trials: int
    p: np.ndarray            # worst case pair
    q: np.ndarray
    curve_distance: float
    param_distance: float
    verdict: str             # "counterexample" | "no-counterexample"
    identity_distance: float # max over trials of dist(f(p), f(p)); must be 0
    stalled: int
    curve_tol: float
    param_tol: float

    @property
    def counterexample(self) -> bool:
        return self.verdict == "counterexample"

    def row(self) -> dict:
        return {"model": self.model, "trials": self.trials, "verdict": self.verdict,
                "curve_distance": repr(float(self.curve_distance)),
                "param_distance": repr(float(self.param_distance)),
                "p": " ".join(repr(float(x)) for x in self.p),
                "q": " ".join(repr(float(x)) for x in self.q),
                "stalled": self.stalled, "curve_tol": repr(self.curve_tol),
                "param_tol": repr(self.param_tol)}


SGI_COLUMNS = ("model", "trials", "verdict", "curve_distance", "param_distance", "p", "q",
               "stalled", "curve_tol", "param_tol")


def write_sgi_table(reports, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, SGI_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


def curve_distance(model, p, q, grid=None) -> np.ndarray:
    """``max_a |f(p, a) - f(q, a)|`` on ``grid`` (broadcast over leading axes)."""
    grid = OMEGA_A.grid(GRID_POINTS) if grid is None else np.asarray(grid, dtype=float)
    d = np.max(np.abs(curve(model, p, grid) - curve(model, q, grid)), axis=-1)
    return np.where(np.isfinite(d), d, np.inf)


def param_distance(p, q) -> np.ndarray:
    """Largest relative component difference ``max_n |q_n - p_n| / |p_n|``."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    return np.max(np.abs(q - p) / np.maximum(np.abs(p), 1e-300), axis=-1)


def planted_control() -> tuple[CustomModel, ParamBox]:
    """``f = (p1 + p2) a``: every shift along ``p1 + p2 = const`` is invisible."""
    def kernel(p, a, grad):
        p1, p2 = p
        f = (p1 + p2) * a
        return (f, (a + 0 * p1, a + 0 * p2)) if grad else f
    return CustomModel("PLANTED", 2, kernel), ParamBox((0.5, 0.5), (1.5, 1.5))


def _nelder_mead(fun, x0, max_iter, xtol=1e-12, ftol=0.0, step=0.05):
    """Batched Nelder-Mead on ``[0, 1]^N`` (standard coefficients, clipped moves).

    ``fun(X, rows)`` evaluates points ``X`` of shape ``(M, N)`` belonging to
    problems ``rows``.  Returns ``(x, f, stalled_mask)``.
    """
    T, N = x0.shape
    S = np.repeat(x0[:, None, :], N + 1, axis=1)
    for k in range(N):
        e = np.where(x0[:, k] + step <= 1.0, step, -step)
        S[:, k + 1, k] += e
    idx = np.arange(T)
    F = fun(S.reshape(-1, N), np.repeat(idx, N + 1)).reshape(T, N + 1)
    active = np.ones(T, bool)
    for _ in range(max_iter):
        order = np.argsort(F, axis=1, kind="stable")
        S = np.take_along_axis(S, order[:, :, None], axis=1)
        F = np.take_along_axis(F, order, axis=1)
        size = np.max(np.abs(S[:, 1:] - S[:, :1]), axis=(1, 2))
        spread = F[:, -1] - F[:, 0]
        active &= ~((size <= xtol) | (np.isfinite(spread) & (spread <= ftol) & (size <= 1e-6)))
        if not active.any():
            break
        a = idx[active]
        Sa, Fa = S[a], F[a]
        c = Sa[:, :-1].mean(axis=1)
        worst = Sa[:, -1]
        xr = np.clip(c + (c - worst), 0, 1)
        xe = np.clip(c + 2.0 * (c - worst), 0, 1)
        xoc = np.clip(c + 0.5 * (c - worst), 0, 1)
        xic = np.clip(c - 0.5 * (c - worst), 0, 1)
        fr, fe, foc, fic = fun(np.concatenate([xr, xe, xoc, xic]), np.tile(a, 4)).reshape(4, -1)
        best, second, fw = Fa[:, 0], Fa[:, -2], Fa[:, -1]
        new_x, new_f = worst.copy(), fw.copy()
        shrink = np.zeros(a.size, bool)

        expand = fr < best
        use_e = expand & (fe < fr)
        new_x[use_e], new_f[use_e] = xe[use_e], fe[use_e]
        use_r = (expand & ~use_e) | ((fr >= best) & (fr < second))
        new_x[use_r], new_f[use_r] = xr[use_r], fr[use_r]
        outside = (fr >= second) & (fr < fw)
        ok = outside & (foc <= fr)
        new_x[ok], new_f[ok] = xoc[ok], foc[ok]
        shrink |= outside & ~ok
        inside = fr >= fw
        ok = inside & (fic < fw)
        new_x[ok], new_f[ok] = xic[ok], fic[ok]
        shrink |= inside & ~ok

        Sa[:, -1], Fa[:, -1] = new_x, new_f
        if shrink.any():
            s = np.flatnonzero(shrink)
            Ss = Sa[s]
            Ss[:, 1:] = Ss[:, :1] + 0.5 * (Ss[:, 1:] - Ss[:, :1])
            Sa[s] = Ss
            Fa[s, 1:] = fun(Ss[:, 1:].reshape(-1, N), np.repeat(a[s], N)).reshape(s.size, N)
        S[a], F[a] = Sa, Fa
    k = np.argmin(F, axis=1)
    return S[idx, k], F[idx, k], active


def sgi_falsify(model, box: ParamBox | None = None, trials: int = 1000, curve_tol: float = 1e-10,
                param_tol: float = 1e-3, rng: np.random.Generator | int | None = 0,
                *, grid=None, max_iter: int | None = None, restarts: int = 1) -> SgiReport:
    """Search for distinct parameter vectors with indistinguishable curves."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not (curve_tol > 0 and param_tol > 0):
        raise ValueError("tolerances must be positive")
    model, _ = resolve(model)
    box = box or ParamBox.from_prior(model)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    grid = OMEGA_A.grid(GRID_POINTS) if grid is None else np.asarray(grid, dtype=float)
    lo, width = np.array(box.lo), box.width
    N = box.dim
    max_iter = max_iter or 200 * N

    P = lo + width * rng.random((trials, N))
    fP = curve(model, P, grid)
    identity = float(np.max(np.abs(fP - curve(model, P, grid))))

    best_q = np.full((trials, N), np.nan)
    best_d = np.full(trials, np.inf)
    stalled = 0
    for _ in range(restarts):
        # start from a random point well separated from p
        U0 = rng.random((trials, N))
        for _attempt in range(100):
            close = param_distance(P, lo + width * U0) < 10 * param_tol
            if not close.any():
                break
            U0[close] = rng.random((int(close.sum()), N))

        def objective(U, rows):
            Q = lo + width * U
            d = np.max(np.abs(curve(model, Q, grid) - fP[rows]), axis=-1)
            d = np.where(np.isfinite(d), d, np.inf)
            return np.where(param_distance(P[rows], Q) >= param_tol, d, np.inf)

        U, Fbest, stall = _nelder_mead(objective, U0, max_iter)
        stalled += int(stall.sum())
        better = Fbest < best_d
        best_d[better] = Fbest[better]
        best_q[better] = lo + width * U[better]

    k = int(np.argmin(best_d))
    sep = float(param_distance(P[k], best_q[k])) if np.isfinite(best_d[k]) else float("nan")
    verdict = "counterexample" if best_d[k] < curve_tol and sep > param_tol else "no-counterexample"
    name = getattr(model, "name", str(model))
    return SgiReport(name, trials, P[k], best_q[k], float(best_d[k]), sep, verdict, identity,
                     stalled, curve_tol, param_tol)
