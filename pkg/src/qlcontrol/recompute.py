"""Independent recomputation of report estimates from exported artifacts.

This module deliberately avoids the package's field/norm helpers: it reads
the run directory's binaries, manifest, and weight table with stdlib
parsing and recomputes every estimate with plain numpy quadrature.  It
exists so that report values can be cross-checked through a second code
path.
"""

import configparser
import csv
import os
import struct

import numpy as np

CLAMP = 700.0


def _read_bin(path):
    with open(path, "rb") as fh:
        if fh.read(4) != b"QLF1":
            raise ValueError(f"{path}: unexpected header")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(shape)


def _read_weights_csv(path):
    times, alpha0 = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        last_t = None
        for row in reader:
            t = float(row["t"])
            if t != last_t:
                times.append(t)
                alpha0.append(float(row["alpha0"]))
                last_t = t
    return np.array(times), np.array(alpha0)


def _trapz_weights(n, h):
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0
    return w


def recompute_estimates(run_dir):
    """Rebuild the [estimates] block of a run report from its exports."""
    manifest = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    manifest.read(os.path.join(run_dir, "manifest.txt"))
    s = float(manifest["params"]["s"])
    T = float(manifest["grid"]["horizon"])
    q = float(manifest.get("diagnostics", "estimate_q", fallback="4.0"))
    axis_bounds = [tuple(float(v) for v in chunk.split(","))
                   for chunk in manifest["domain"]["bounds"].split(";")]
    shape = tuple(int(v) for v in manifest["domain"]["nodes"].split(","))
    spacing = [(hi - lo) / (m - 1) for (lo, hi), m in zip(axis_bounds, shape)]

    y = _read_bin(os.path.join(run_dir, "y.bin"))
    u = _read_bin(os.path.join(run_dir, "u.bin"))
    ys = _read_bin(os.path.join(run_dir, "y_s.bin"))
    y0 = _read_bin(os.path.join(run_dir, "y0.bin"))
    mids, alpha0 = _read_weights_csv(os.path.join(run_dir, "weights.csv"))

    layers, n = y.shape
    K = layers - 1
    w = np.ones(1)
    for m, hh in zip(shape, spacing):
        w = np.multiply.outer(w, _trapz_weights(m, hh))
    w = w.ravel()
    dt = T / K
    t_layers = np.arange(layers) * dt

    def lq(v, qq):
        if qq == np.inf:
            return np.abs(v).max()
        return float((w @ np.abs(v) ** qq) ** (1.0 / qq))

    e_neg = np.exp(np.clip(-s * alpha0, -CLAMP, CLAMP))

    control_weighted_sup = float(
        (e_neg * np.abs(u[1:]).max(axis=1)).max())

    diff = y - ys[None, :]
    tq_sup = max(t_layers[k] * lq(diff[k], q) for k in range(layers))
    tq_deriv = max(
        lq((t_layers[k] * diff[k] - t_layers[k - 1] * diff[k - 1]) / dt, q)
        for k in range(1, layers))

    # gradients: centered inside, one-sided at the ends
    t_grad = 0.0
    for k in range(layers):
        v = diff[k].reshape(shape)
        if len(shape) == 1:
            mag = np.abs(np.gradient(v, spacing[0]))
        else:
            gx, gy = np.gradient(v, spacing[0], spacing[1])
            mag = np.sqrt(gx ** 2 + gy ** 2)
        t_grad = max(t_grad, t_layers[k] * mag.max())

    late = mids >= T / 2.0
    terminal_weighted = 0.0
    for idx in np.flatnonzero(late):
        t = mids[idx]
        k = min(int(np.floor(t / dt)), K - 1)
        frac = (t - t_layers[k]) / dt
        dm = (1.0 - frac) * diff[k] + frac * diff[k + 1]
        terminal_weighted = max(terminal_weighted, e_neg[idx] * lq(dm, q))

    d0 = y0 - ys
    driver_l2 = lq(d0, 2.0)
    return {
        "control_weighted_sup": control_weighted_sup,
        "state_tq_time_deriv": float(tq_deriv),
        "state_tq_sup": float(tq_sup),
        "state_t_grad_sup": float(t_grad),
        "terminal_weighted": float(terminal_weighted),
        "state_sup": float(np.abs(diff).max()),
        "driver_l2": driver_l2,
        "driver_sup": float(np.abs(d0).max()),
        "driver_l2_pow": driver_l2 ** (2.0 / q),
        "q": q,
    }


def read_reported_estimates(run_dir):
    """Parse the [estimates] block out of a written report."""
    path = os.path.join(run_dir, "report.txt")
    out = {}
    in_block = False
    for line in open(path):
        line = line.strip()
        if line == "[estimates]":
            in_block = True
            continue
        if in_block:
            if line.startswith("[") or not line:
                break
            key, val = line.split("=", 1)
            out[key.strip()] = float(val)
    return out
