"""Tile-binned CPU compositing kernels (forward and backward).

All arrays are float64; Gaussians arrive pre-sorted front to back. A pixel's
center is at (x + 0.5, y + 0.5). Per-splat alpha is
``min(cap, opacity * exp(power))`` and is skipped below ``min_alpha``;
compositing stops once transmittance drops under ``t_min``.

Both kernels run tile rows in parallel. The backward pass accumulates into
per-row partial buffers that are summed in row order, so gradients do not
depend on the thread count.
"""

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is often too old and numba warns on every import
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

TILE = 16


@njit(cache=True)
def bin_tiles(means, radii, width, height, tile):
    """Per-tile lists of Gaussian indices, preserving input (depth) order."""
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    n_tiles = tx_n * ty_n
    g_n = means.shape[0]
    rect = np.zeros((g_n, 4), dtype=np.int64)
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in range(g_n):
        r = radii[g]
        if r <= 0.0:
            rect[g, 0] = 0
            rect[g, 1] = 0
            rect[g, 2] = 0
            rect[g, 3] = 0
            continue
        x0 = int(np.floor((means[g, 0] - r) / tile))
        x1 = int(np.floor((means[g, 0] + r) / tile)) + 1
        y0 = int(np.floor((means[g, 1] - r) / tile))
        y1 = int(np.floor((means[g, 1] + r) / tile)) + 1
        x0 = min(max(x0, 0), tx_n)
        x1 = min(max(x1, 0), tx_n)
        y0 = min(max(y0, 0), ty_n)
        y1 = min(max(y1, 0), ty_n)
        rect[g, 0] = x0
        rect[g, 1] = x1
        rect[g, 2] = y0
        rect[g, 3] = y1
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * tx_n + tx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    lists = np.empty(counts[n_tiles], dtype=np.int64)
    fill = counts[:n_tiles].copy()
    for g in range(g_n):
        for ty in range(rect[g, 2], rect[g, 3]):
            for tx in range(rect[g, 0], rect[g, 1]):
                t = ty * tx_n + tx
                lists[fill[t]] = g
                fill[t] += 1
    return counts, lists


@njit(cache=True)
def _log_thresholds(opac, min_alpha):
    # power below log(min_alpha / opacity) cannot reach min_alpha; slack keeps
    # the exact comparison authoritative
    out = np.empty(opac.shape[0])
    for g in range(opac.shape[0]):
        if min_alpha > 0.0 and opac[g] > 0.0:
            out[g] = np.log(min_alpha / opac[g]) - 1e-9
        else:
            out[g] = -np.inf
    return out


@njit(cache=True, parallel=True)
def composite_forward(means, conics, opac, feats, offsets, lists, width, height, tile,
                      min_alpha, alpha_cap, t_min):
    n_ch = feats.shape[1]
    log_thr = _log_thresholds(opac, min_alpha)
    out = np.zeros((height, width, n_ch))
    final_t = np.ones((height, width))
    n_used = np.zeros((height, width), dtype=np.int64)
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    for ty in prange(ty_n):
        for y in range(ty * tile, min(height, (ty + 1) * tile)):
            for x in range(width):
                t_idx = ty * tx_n + (x // tile)
                start = offsets[t_idx]
                end = offsets[t_idx + 1]
                px = x + 0.5
                py = y + 0.5
                T = 1.0
                last = start
                for i in range(start, end):
                    g = lists[i]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power > 0.0 or power < log_thr[g]:
                        continue
                    a = opac[g] * np.exp(power)
                    if a < min_alpha:
                        continue
                    if a > alpha_cap:
                        a = alpha_cap
                    w = a * T
                    for c in range(n_ch):
                        out[y, x, c] += w * feats[g, c]
                    T *= 1.0 - a
                    last = i + 1
                    if T < t_min:
                        break
                final_t[y, x] = T
                n_used[y, x] = last - start
    return out, final_t, n_used


@njit(cache=True, parallel=True)
def composite_backward(means, conics, opac, feats, offsets, lists, n_used, width, height, tile,
                       min_alpha, alpha_cap, grad_out, grad_alpha):
    g_n = means.shape[0]
    n_ch = feats.shape[1]
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    log_thr = _log_thresholds(opac, min_alpha)
    max_len = 0
    for t in range(offsets.shape[0] - 1):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    p_means = np.zeros((ty_n, g_n, 2))
    p_conics = np.zeros((ty_n, g_n, 3))
    p_opac = np.zeros((ty_n, g_n))
    p_feats = np.zeros((ty_n, g_n, n_ch))
    for ty in prange(ty_n):
        s_alpha = np.empty(max_len)
        s_trans = np.empty(max_len)
        s_power = np.empty(max_len)
        s_gauss = np.empty(max_len, dtype=np.int64)
        s_clamped = np.zeros(max_len, dtype=np.bool_)
        acc = np.zeros(n_ch)
        d_means = p_means[ty]
        d_conics = p_conics[ty]
        d_opac = p_opac[ty]
        d_feats = p_feats[ty]
        for y in range(ty * tile, min(height, (ty + 1) * tile)):
            for x in range(width):
                t_idx = ty * tx_n + (x // tile)
                start = offsets[t_idx]
                end = start + n_used[y, x]
                px = x + 0.5
                py = y + 0.5
                # replay the forward pass, recording the contributing splats
                T = 1.0
                k = 0
                for i in range(start, end):
                    g = lists[i]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power > 0.0 or power < log_thr[g]:
                        continue
                    a = opac[g] * np.exp(power)
                    if a < min_alpha:
                        continue
                    clamped = a > alpha_cap
                    if clamped:
                        a = alpha_cap
                    s_alpha[k] = a
                    s_trans[k] = T
                    s_power[k] = power
                    s_gauss[k] = g
                    s_clamped[k] = clamped
                    k += 1
                    T *= 1.0 - a
                ga = grad_alpha[y, x]
                for c in range(n_ch):
                    acc[c] = 0.0
                acc_a = 0.0
                for j in range(k - 1, -1, -1):
                    g = s_gauss[j]
                    a = s_alpha[j]
                    Ti = s_trans[j]
                    w = a * Ti
                    inv = 1.0 / (1.0 - a)
                    dL_da = ga * (Ti - acc_a * inv)
                    for c in range(n_ch):
                        go = grad_out[y, x, c]
                        dL_da += go * (Ti * feats[g, c] - acc[c] * inv)
                        d_feats[g, c] += go * w
                        acc[c] += w * feats[g, c]
                    acc_a += w
                    if s_clamped[j]:
                        continue
                    e = np.exp(s_power[j])
                    d_opac[g] += dL_da * e
                    dL_dp = dL_da * a
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    d_means[g, 0] += dL_dp * (conics[g, 0] * dx + conics[g, 1] * dy)
                    d_means[g, 1] += dL_dp * (conics[g, 1] * dx + conics[g, 2] * dy)
                    d_conics[g, 0] += dL_dp * (-0.5 * dx * dx)
                    d_conics[g, 1] += dL_dp * (-dx * dy)
                    d_conics[g, 2] += dL_dp * (-0.5 * dy * dy)
    d_means = np.zeros((g_n, 2))
    d_conics = np.zeros((g_n, 3))
    d_opac = np.zeros(g_n)
    d_feats = np.zeros((g_n, n_ch))
    for ty in range(ty_n):
        d_means += p_means[ty]
        d_conics += p_conics[ty]
        d_opac += p_opac[ty]
        d_feats += p_feats[ty]
    return d_means, d_conics, d_opac, d_feats
