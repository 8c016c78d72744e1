"""Figure rendering for run reports.

Figures are auxiliary views of the same data the CSV exports carry; they
are written next to the delimited output as PNG files.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def render_run_figures(out_dir, grid, tg, y_final, u_final, ys, weights,
                       trace, state):
    paths = []
    if trace:
        paths.append(fig_convergence(out_dir, trace))
    paths.append(fig_weights(out_dir, grid, weights))
    if y_final is not None:
        paths.append(fig_state(out_dir, grid, y_final, ys))
    if u_final is not None and grid.ndim == 1:
        paths.append(fig_control(out_dir, grid, u_final))
    if state is not None:
        paths.append(fig_terminal_decay(out_dir, grid, y_final, ys))
    return [p for p in paths if p]


def fig_convergence(out_dir, trace):
    it = [row["iteration"] for row in trace]
    dist = [max(row["sup_distance"], 1e-300) for row in trace]
    term = [max(row["terminal_error"], 1e-300) for row in trace]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.semilogy(it, dist, "o-", label="sup distance")
    ax.semilogy(it, term, "s--", label="terminal error")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("value")
    ax.legend(frameon=False)
    ax.set_title("fixed-point convergence")
    return _save(fig, out_dir, "convergence.png")


def fig_weights(out_dir, grid, weights):
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    mid = len(weights.times) // 2
    picks = sorted({1, mid // 2, mid, len(weights.times) - 2})
    if grid.ndim == 1:
        x = grid.nodes[:, 0]
        for k in picks:
            axes[0].plot(x, weights.alpha[k], label=f"t={weights.times[k]:.3f}")
            axes[1].plot(x, weights.phi[k], label=f"t={weights.times[k]:.3f}")
        axes[0].set_xlabel("x")
        axes[1].set_xlabel("x")
    else:
        axes[0].plot(weights.times, weights.alpha0, "o-")
        axes[1].plot(weights.times, weights.phi0, "o-")
        axes[0].set_xlabel("t")
        axes[1].set_xlabel("t")
    axes[0].set_title("alpha")
    axes[1].set_title("phi")
    axes[1].set_yscale("log")
    axes[0].legend(frameon=False, fontsize=7)
    return _save(fig, out_dir, "weights.png")


def fig_state(out_dir, grid, y_final, ys):
    vals = y_final.values - np.asarray(ys)[None, :]
    times = y_final.state.times
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    if grid.ndim == 1:
        im = ax.imshow(
            vals.T, aspect="auto", origin="lower",
            extent=(times[0], times[-1], grid.domain.bounds[0][0],
                    grid.domain.bounds[0][1]),
            cmap="RdBu_r",
        )
        fig.colorbar(im, ax=ax, label="y - y_s")
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    else:
        shaped = vals[-1].reshape(grid.shape)
        im = ax.imshow(shaped.T, origin="lower", cmap="RdBu_r")
        fig.colorbar(im, ax=ax, label="y(T) - y_s")
    ax.set_title("state deviation")
    return _save(fig, out_dir, "state.png")


def fig_control(out_dir, grid, u_final):
    times = u_final.times
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    im = ax.imshow(
        u_final.values.T, aspect="auto", origin="lower",
        extent=(times[0], times[-1], grid.domain.bounds[0][0],
                grid.domain.bounds[0][1]),
        cmap="PuOr",
    )
    fig.colorbar(im, ax=ax, label="u")
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    ax.set_title("control")
    return _save(fig, out_dir, "control.png")


def fig_terminal_decay(out_dir, grid, y_final, ys):
    w = grid.trapezoid_weights
    vals = y_final.values - np.asarray(ys)[None, :]
    norms = np.sqrt((vals ** 2) @ w)
    times = y_final.state.times
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.semilogy(times, np.maximum(norms, 1e-300))
    ax.set_xlabel("t")
    ax.set_ylabel("||y - y_s||_2")
    ax.set_title("approach to the target")
    return _save(fig, out_dir, "terminal_decay.png")


def fig_power_fit(out_dir, xs, ys_vals, slope, intercept, name, label):
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.loglog(xs, ys_vals, "o", label="measured")
    xs_line = np.array([min(xs), max(xs)])
    ax.loglog(xs_line, np.exp(intercept) * xs_line ** slope, "-",
              label=f"slope {slope:.3f}")
    ax.set_xlabel("||y0 - y_s||_2")
    ax.set_ylabel(label)
    ax.legend(frameon=False)
    return _save(fig, out_dir, name)
