"""Static svg figures for CLI reports.

Figures are rendered off-screen and written atomically.  The svg hash salt
and metadata are pinned so repeated runs give identical bytes.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._util import atomic_write  # noqa: E402

_RC = {"svg.hashsalt": "flowforge", "svg.fonttype": "path", "font.size": 9}


def _save(fig, path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def _loglog(ax, x, y, label, marker="o"):
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(y) & (y > 0)
    if ok.any():
        ax.loglog(x[ok], y[ok], marker=marker, label=label)


def plot_convergence(report, path) -> None:
    """Pair sup distances and mean drift across the epsilon ladder, counterterm on and off."""
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
        for mode in ("on", "off"):
            rows = report.pairs.get(mode, [])
            _loglog(a1, [r["eps"] for r in rows], [r["sup_median"] for r in rows], f"counterterm {mode}")
            rows = report.per_eps.get(mode, [])
            _loglog(a2, [r["eps"] for r in rows], [r["abs_drift_median"] for r in rows],
                    f"counterterm {mode}", marker="s")
        a1.set_xlabel("eps (coarser member of pair)")
        a1.set_ylabel("median sup |psi_eps - psi_eps/2|")
        a2.set_xlabel("eps")
        a2.set_ylabel("median |spatial mean drift|")
        for ax in (a1, a2):
            if ax.get_lines():
                ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_estimates(report, path) -> None:
    """Measured kernel norms against mu, one line per estimate."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for eid in dict.fromkeys(r.estimate_id for r in report.rows):
            rows = [r for r in report.rows if r.estimate_id == eid]
            _loglog(ax, [r.mu for r in rows], [r.measured for r in rows],
                    f"{eid} (fit {rows[0].fitted_exponent:.3g})")
        ax.set_xlabel("mu")
        ax.set_ylabel("measured")
        if ax.get_lines():
            ax.legend(fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def plot_constants(eps, c1, c2, path, slope: float | None = None) -> None:
    """Counterterm constants against epsilon."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        label = "C1" if slope is None else f"C1 (slope {slope:.3f})"
        _loglog(ax, eps, np.abs(c1), label)
        _loglog(ax, eps, np.abs(c2), "|C2|", marker="s")
        ax.set_xlabel("eps")
        ax.set_ylabel("constant")
        if ax.get_lines():
            ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_flow_norms(result, path) -> None:
    """Mean triple norm of a flow coefficient against mu."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        _loglog(ax, result.mus, result.mean_norms, f"fit {result.fitted_exponent:.3f}")
        ax.set_xlabel("mu")
        ax.set_ylabel("mean triple norm")
        ax.set_title(f"target exponent {result.target_exponent}")
        if ax.get_lines():
            ax.legend()
        fig.tight_layout()
        _save(fig, path)
