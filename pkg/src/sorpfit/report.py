"""SVG figures and the HTML index for batch runs (matplotlib, Agg backend)."""

from __future__ import annotations

import html
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .models import OMEGA_A, curve  # noqa: E402

# fixed ids and no timestamps so reruns produce identical files
plt.rcParams.update({
    "svg.hashsalt": "sorpfit",
    "svg.fonttype": "none",
    "figure.figsize": (6.4, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
})
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_fits(ds, results, path):
    fig, ax = plt.subplots()
    a = OMEGA_A.grid(181)
    ax.errorbar(ds.activity, ds.moisture, yerr=ds.delta, fmt="ko", ms=3, capsize=2,
                label="measurements", zorder=3)
    for r in results:
        u = curve(r.model, r.p_est, a)
        ax.plot(a, u, lw=1.2, label=f"{r.model.name} (d={r.distance:.3g})")
    ax.set_xlabel("water activity a [-]")
    ax.set_ylabel("moisture content u [-]")
    top = float(np.max(ds.moisture)) * 1.3
    ax.set_ylim(0, top)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_residuals(profiles: dict, ds, path):
    fig, ax = plt.subplots()
    keep = ds.activity >= OMEGA_A.lo
    ax.fill_between(ds.activity[keep], -ds.delta[keep], ds.delta[keep], color="0.85",
                    label="±δ", zorder=0)
    for name, prof in profiles.items():
        ax.plot(prof[:, 0], prof[:, 1], "o-", ms=3, lw=0.8, label=name)
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xlabel("water activity a [-]")
    ax.set_ylabel("residual f(p°, a) − û [-]")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_gamma(report, path):
    fig, ax = plt.subplots()
    for n in range(report.gamma_local.shape[0]):
        ax.plot(report.grid, report.gamma_local[n], lw=1.4, label=f"γ{n + 1}")
    ax.set_xlabel("water activity a [-]")
    ax.set_ylabel("γ(a) [-]")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(getattr(report.model, "name", ""))
    ax.legend()
    return _save(fig, path)


def plot_selection(res, path):
    models = res.config.models
    pops = np.arange(1, len(res.populations) + 1)
    counts = np.array([[p.counts(models)[m] for m in models] for p in res.populations])
    fig, ax = plt.subplots()
    bottom = np.zeros(len(pops))
    for k, m in enumerate(models):
        ax.bar(pops, counts[:, k], bottom=bottom, label=m.name, width=0.85)
        bottom += counts[:, k]
    ax.set_xlabel("population")
    ax.set_ylabel("particles")
    ax.legend(fontsize=7, ncol=4, loc="lower left")
    return _save(fig, path)


def plot_tolerance(res, path):
    pops = np.arange(1, len(res.populations) + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.6))
    ax1.semilogy(pops, res.tolerances, "o-", ms=3)
    ax1.set_xlabel("population")
    ax1.set_ylabel("tolerance ε")
    ax2.semilogy(pops, [100 * p.acceptance_rate for p in res.populations], "o-", ms=3)
    ax2.set_xlabel("population")
    ax2.set_ylabel("acceptance rate τ [%]")
    return _save(fig, path)


def plot_posterior(res, path):
    groups = res.final.groups
    n = sum(g.params.shape[1] for g in groups.values())
    if n == 0:
        return None
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.2 * rows), squeeze=False)
    k = 0
    for m, g in groups.items():
        for j in range(g.params.shape[1]):
            ax = axes.flat[k]
            ax.hist(g.params[:, j], bins=30, weights=g.weights, color="C0")
            ax.set_title(f"{m.name} p{j + 1}", fontsize=8)
            ax.tick_params(labelsize=7)
            k += 1
    for ax in list(axes.flat)[k:]:
        ax.set_visible(False)
    return _save(fig, path)


def _table(path: Path, limit: int = 40) -> str:
    import csv
    with path.open() as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:limit + 1]
    out = ["<table><tr>" + "".join(f"<th>{html.escape(h)}</th>" for h in head) + "</tr>"]
    for r in body:
        cells = []
        for c in r:
            try:
                c = f"{float(c):.4g}"
            except ValueError:
                pass
            cells.append(f"<td>{html.escape(c)}</td>")
        out.append("<tr>" + "".join(cells) + "</tr>")
    out.append("</table>")
    if len(rows) - 1 > limit:
        out.append(f"<p>… {len(rows) - 1 - limit} more rows in {html.escape(path.name)}</p>")
    return "\n".join(out)


def write_index(out: Path, sections: list, title: str = "sorpfit report") -> Path:
    """``sections`` is a list of ``(heading, [paths])``; CSVs become tables, SVGs images."""
    out = Path(out)
    parts = [f"<!DOCTYPE html>\n<html><head><meta charset='utf-8'><title>{html.escape(title)}</title>",
             "<style>body{font-family:sans-serif;max-width:60em;margin:auto}"
             "table{border-collapse:collapse;font-size:80%}td,th{border:1px solid #bbb;padding:2px 6px}"
             "img{max-width:100%}</style></head><body>", f"<h1>{html.escape(title)}</h1>"]
    for heading, paths in sections:
        parts.append(f"<h2>{html.escape(heading)}</h2>")
        for p in paths:
            p = Path(p)
            rel = html.escape(p.relative_to(out).as_posix())
            if p.suffix == ".svg":
                parts.append(f"<p><img src='{rel}' alt='{rel}'></p>")
            elif p.suffix == ".csv":
                parts.append(f"<h3><a href='{rel}'>{rel}</a></h3>")
                parts.append(_table(p))
            else:
                parts.append(f"<p><a href='{rel}'>{rel}</a></p>")
    parts.append("</body></html>\n")
    path = out / "index.html"
    path.write_text("\n".join(parts), encoding="utf-8")
    return path
