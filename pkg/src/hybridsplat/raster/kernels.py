"""Numba kernels: tile binning, per-tile sorting, compositing and its adjoint.

Primitive arrays arrive family-blocked (free, then inlier, then sky), so after
binning every tile list is three contiguous runs in insertion order.
"""
import numpy as np
from numba import njit

T_MIN = 1e-4


@njit(cache=True)
def bin_tiles(rect, n_tiles):
    """CSR tile lists from per-primitive tile rectangles (tx0, tx1, ty0, ty1, inclusive).

    Rows with tx0 > tx1 are skipped. Within a tile, primitives keep their
    global order.
    """
    ntx = n_tiles[0]
    nty = n_tiles[1]
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    P = rect.shape[0]
    for i in range(P):
        if rect[i, 0] > rect[i, 1]:
            continue
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for i in range(P):
        if rect[i, 0] > rect[i, 1]:
            continue
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                t = ty * ntx + tx
                lists[fill[t]] = i
                fill[t] += 1
    return offsets, lists


@njit(cache=True)
def insertion_sort_counted(keys, idx, lo, hi):
    """Stable binary-insertion sort of ``idx[lo:hi]`` by ``keys[idx]``; returns comparisons.

    Each insertion point is found with a fixed-depth halving search, so
    inserting into a sorted run of length m costs exactly ceil(log2 m) + 1
    comparisons whatever the data. The total is therefore a function of the
    run length alone, non-decreasing per element, and superadditive.
    """
    comps = 0
    for i in range(lo + 1, hi):
        item = idx[i]
        k = keys[item]
        base = lo
        n = i - lo
        while n > 1:
            half = n // 2
            comps += 1
            if keys[idx[base + half]] <= k:
                base += half
            n -= half
        comps += 1
        pos = base + 1 if keys[idx[base]] <= k else base
        j = i
        while j > pos:
            idx[j] = idx[j - 1]
            j -= 1
        idx[pos] = item
    return comps


@njit(cache=True)
def sort_tiles(offsets, lists, depth, family, mode):
    """Sort every tile list in place.

    mode 0: grouped (free by depth, inliers untouched, sky by depth)
    mode 1: grouped with inliers depth-sorted too
    mode 2: unified single depth sort (oracle)
    Returns the per-tile comparison counts.
    """
    n = offsets.shape[0] - 1
    comps = np.zeros(n, dtype=np.int64)
    for t in range(n):
        lo = offsets[t]
        hi = offsets[t + 1]
        if mode == 2:
            comps[t] = insertion_sort_counted(depth, lists, lo, hi)
            continue
        a = lo
        while a < hi and family[lists[a]] == 0:
            a += 1
        b = a
        while b < hi and family[lists[b]] == 1:
            b += 1
        c = insertion_sort_counted(depth, lists, lo, a)
        if mode == 1:
            c += insertion_sort_counted(depth, lists, a, b)
        c += insertion_sort_counted(depth, lists, b, hi)
        comps[t] = c
    return comps


@njit(cache=True)
def composite_forward(offsets, lists, mean2d, conic, opacity, color, depth,
                      H, W, tile, out_color, out_depth, out_sil, out_T, n_contrib):
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo = offsets[t]
            hi = offsets[t + 1]
            for py in range(ty * tile, min(H, (ty + 1) * tile)):
                for px in range(tx * tile, min(W, (tx + 1) * tile)):
                    T = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    d = 0.0
                    s = 0.0
                    n = 0
                    for k in range(lo, hi):
                        if T < T_MIN:
                            break
                        i = lists[k]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                                        + conic[i, 2] * dy * dy)
                        f = opacity[i] * np.exp(power)
                        w = f * T
                        c0 += w * color[i, 0]
                        c1 += w * color[i, 1]
                        c2 += w * color[i, 2]
                        d += w * depth[i]
                        s += w
                        T *= 1.0 - f
                        n += 1
                    out_color[py, px, 0] = c0
                    out_color[py, px, 1] = c1
                    out_color[py, px, 2] = c2
                    out_depth[py, px] = d
                    out_sil[py, px] = s
                    out_T[py, px] = T
                    n_contrib[py, px] = n


@njit(cache=True)
def composite_backward(offsets, lists, mean2d, conic, opacity, color, depth,
                       H, W, tile, n_contrib, g_color_img, g_depth_img, g_sil_img,
                       g_mean2d, g_conic, g_opacity, g_color, g_depth):
    """Accumulate dL/d(primitive attributes) given dL/d(C, D, S) per pixel.

    Transmittances are recomputed front-to-back; the adjoint then runs
    back-to-front carrying the colour/depth/silhouette accumulated behind
    the current primitive, which avoids dividing by (1 - f).
    """
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    maxlen = 0
    for t in range(ntx * nty):
        maxlen = max(maxlen, offsets[t + 1] - offsets[t])
    Ts = np.empty(maxlen + 1)
    fs = np.empty(maxlen + 1)
    gs = np.empty(maxlen + 1)
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo = offsets[t]
            for py in range(ty * tile, min(H, (ty + 1) * tile)):
                for px in range(tx * tile, min(W, (tx + 1) * tile)):
                    n = n_contrib[py, px]
                    if n == 0:
                        continue
                    gc0 = g_color_img[py, px, 0]
                    gc1 = g_color_img[py, px, 1]
                    gc2 = g_color_img[py, px, 2]
                    gd = g_depth_img[py, px]
                    gsil = g_sil_img[py, px]
                    if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and gsil == 0.0:
                        continue
                    T = 1.0
                    for k in range(n):
                        i = lists[lo + k]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                                        + conic[i, 2] * dy * dy)
                        g = np.exp(power)
                        Ts[k] = T
                        gs[k] = g
                        fs[k] = opacity[i] * g
                        T *= 1.0 - fs[k]
                    b0 = 0.0
                    b1 = 0.0
                    b2 = 0.0
                    bd = 0.0
                    bs = 0.0
                    for k in range(n - 1, -1, -1):
                        i = lists[lo + k]
                        f = fs[k]
                        Tk = Ts[k]
                        w = f * Tk
                        g_color[i, 0] += w * gc0
                        g_color[i, 1] += w * gc1
                        g_color[i, 2] += w * gc2
                        g_depth[i] += w * gd
                        dLdf = Tk * ((color[i, 0] - b0) * gc0 + (color[i, 1] - b1) * gc1
                                     + (color[i, 2] - b2) * gc2 + (depth[i] - bd) * gd
                                     + (1.0 - bs) * gsil)
                        b0 = color[i, 0] * f + (1.0 - f) * b0
                        b1 = color[i, 1] * f + (1.0 - f) * b1
                        b2 = color[i, 2] * f + (1.0 - f) * b2
                        bd = depth[i] * f + (1.0 - f) * bd
                        bs = f + (1.0 - f) * bs
                        g_opacity[i] += dLdf * gs[k]
                        dLdp = dLdf * f
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        # d(power)/d(mean) = conic @ delta
                        g_mean2d[i, 0] += dLdp * (conic[i, 0] * dx + conic[i, 1] * dy)
                        g_mean2d[i, 1] += dLdp * (conic[i, 1] * dx + conic[i, 2] * dy)
                        g_conic[i, 0] += dLdp * (-0.5 * dx * dx)
                        g_conic[i, 1] += dLdp * (-dx * dy)
                        g_conic[i, 2] += dLdp * (-0.5 * dy * dy)


@njit(cache=True)
def footprint_hits(mean2d, conic, radius, H, W):
    """Pixels within each primitive's 3-sigma ellipse (Mahalanobis^2 <= 9)."""
    P = mean2d.shape[0]
    hits = np.zeros(P, dtype=np.int64)
    for i in range(P):
        r = radius[i]
        if r <= 0.0:
            continue
        x0 = max(0, int(np.ceil(mean2d[i, 0] - r)))
        x1 = min(W - 1, int(np.floor(mean2d[i, 0] + r)))
        y0 = max(0, int(np.ceil(mean2d[i, 1] - r)))
        y1 = min(H - 1, int(np.floor(mean2d[i, 1] + r)))
        c = 0
        for py in range(y0, y1 + 1):
            dy = py - mean2d[i, 1]
            for px in range(x0, x1 + 1):
                dx = px - mean2d[i, 0]
                m = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if m <= 9.0:
                    c += 1
        hits[i] = c
    return hits
