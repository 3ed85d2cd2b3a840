"""Matplotlib figures for study reports (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def rate_figure(records, predicted_exponent: float, title: str, out_path):
    """Log-log error-vs-N plot with bootstrap CIs and the predicted-slope
    reference line anchored at the first data point."""
    ns = np.array([r.N for r in records], dtype=float)
    errs = np.array([r.error for r in records])
    lo = np.array([r.ci_low for r in records])
    hi = np.array([r.ci_high for r in records])
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    ax.errorbar(
        ns, errs, yerr=[errs - lo, hi - errs], fmt="o-", capsize=3, label="estimate"
    )
    ref = errs[0] * (ns / ns[0]) ** predicted_exponent
    ax.plot(ns, ref, "k--", label=f"slope {predicted_exponent:+.3f} (predicted)")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def corrector_figure(rows, out_path):
    """Ratio ||S - C'_d kappa Delta|| / (kappa D_N^alpha) against N, one
    line per alpha."""
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    alphas = sorted({r["alpha"] for r in rows})
    for a in alphas:
        pts = sorted((r["N"], r["ratio"]) for r in rows if r["alpha"] == a)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"alpha={a}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("op norm / (kappa D_N^alpha)")
    ax.set_title("corrector convergence factor")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def energy_figure(times, energies, title: str, out_path):
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(times, energies)
    ax.set_xlabel("t")
    ax.set_ylabel("L2 energy")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
