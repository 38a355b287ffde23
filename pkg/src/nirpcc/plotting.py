"""Matplotlib figures written next to the CSV reports."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from nirpcc.metrics import cap_psnr  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def figure_size(width=6.0, height=None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, height or width * golden


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_rd(points, path, title=None):
    """Rate-distortion curves: D1 PSNR (and Y PSNR when present) against bpp."""
    points = sorted(points, key=lambda p: p.bpp)
    has_y = any(p.y_psnr is not None for p in points)
    with plt.rc_context(_RC):
        ncols = 2 if has_y else 1
        fig, axes = plt.subplots(1, ncols, figsize=figure_size(4.0 * ncols))
        axes = [axes] if ncols == 1 else list(axes)
        x = [p.bpp for p in points]
        axes[0].plot(x, [cap_psnr(p.d1_psnr) for p in points], "o-", color="C0")
        axes[0].set_xlabel("bits per point")
        axes[0].set_ylabel("D1 PSNR (dB)")
        if has_y:
            ys = [(p.bpp, p.y_psnr) for p in points if p.y_psnr is not None]
            axes[1].plot([a for a, _ in ys], [cap_psnr(b) for _, b in ys], "s-", color="C1")
            axes[1].set_xlabel("bits per point")
            axes[1].set_ylabel("Y PSNR (dB)")
        for p in points:
            if p.lambda_f is not None:
                axes[0].annotate(f"{p.lambda_f:g}", (p.bpp, cap_psnr(p.d1_psnr)),
                                 textcoords="offset points", xytext=(3, 3), fontsize=7)
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_threshold_curve(curve, path, chosen_tau=None):
    """D1 PSNR and scaling ratio over the threshold grid."""
    taus = [c[0] for c in curve]
    psnr = [float("nan") if c[1] == -math.inf else cap_psnr(c[1]) for c in curve]
    ratio = [c[2] for c in curve]
    with plt.rc_context(_RC):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=figure_size(8.0))
        a0.plot(taus, psnr, "o-")
        a0.set_xlabel("threshold")
        a0.set_ylabel("D1 PSNR (dB)")
        a1.plot(taus, ratio, "o-", color="C2")
        a1.axhline(1.0, color="0.5", lw=0.8)
        a1.set_xlabel("threshold")
        a1.set_ylabel("|reconstructed| / |original|")
        if chosen_tau is not None:
            for ax in (a0, a1):
                ax.axvline(chosen_tau, ls="--", color="k", lw=0.8)
        _save(fig, path)


def plot_loss_trace(traces, path):
    """Training loss against step; ``traces`` maps a label to ``(step, loss, lr)`` rows."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=figure_size(5.0))
        for label, rows in traces.items():
            if rows:
                ax.semilogy([r[0] for r in rows], [r[1] for r in rows], label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        _save(fig, path)
