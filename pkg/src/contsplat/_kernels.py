"""Numba kernels for tile binning, forward compositing and backward accumulation.

All kernels are generic over float32/float64: every floating constant is read
from a ``consts`` array of the working dtype so single-precision inputs stay
single precision. Work is organised per 16x16 tile; tiles run in row-major
order and per-entry gradient buffers are reduced in that same order, so the
results do not depend on scheduling.
"""

import numpy as np
from numba import njit

TILE = 16

# consts layout
C_HALF = 0
C_ALPHA_MIN = 1
C_ALPHA_MAX = 2
C_T_MIN = 3
C_ONE = 4
C_ZERO = 5


def make_consts(dtype):
    return np.array([0.5, 1.0 / 255.0, 0.999, 1e-4, 1.0, 0.0], dtype=dtype)


@njit(cache=True)
def tile_rects(mean, ext, valid, width, height, tiles_x, tiles_y):
    """Inclusive tile-index rectangles (x0, y0, x1, y1) of each splat's 3-sigma box; x0 = -1 when empty."""
    n = mean.shape[0]
    rect = np.full((n, 4), -1, dtype=np.int64)
    for i in range(n):
        if not valid[i]:
            continue
        lo_x = mean[i, 0] - ext[i, 0]
        hi_x = mean[i, 0] + ext[i, 0]
        lo_y = mean[i, 1] - ext[i, 1]
        hi_y = mean[i, 1] + ext[i, 1]
        # pixels with centres inside the box; pixel centres sit at integer coordinates
        px0 = np.int64(np.ceil(lo_x))
        px1 = np.int64(np.floor(hi_x))
        py0 = np.int64(np.ceil(lo_y))
        py1 = np.int64(np.floor(hi_y))
        if px0 < 0:
            px0 = 0
        if py0 < 0:
            py0 = 0
        if px1 > width - 1:
            px1 = width - 1
        if py1 > height - 1:
            py1 = height - 1
        if px0 > px1 or py0 > py1:
            continue
        rect[i, 0] = px0 // TILE
        rect[i, 1] = py0 // TILE
        rect[i, 2] = px1 // TILE
        rect[i, 3] = py1 // TILE
    return rect


@njit(cache=True)
def bin_pairs(rect, tiles_x, tile_active):
    """(tile_id, splat) pairs for every splat/tile overlap restricted to active tiles."""
    n = rect.shape[0]
    total = 0
    for i in range(n):
        if rect[i, 0] < 0:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                if tile_active[ty * tiles_x + tx]:
                    total += 1
    tiles = np.empty(total, dtype=np.int64)
    splats = np.empty(total, dtype=np.int64)
    k = 0
    for i in range(n):
        if rect[i, 0] < 0:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                t = ty * tiles_x + tx
                if tile_active[t]:
                    tiles[k] = t
                    splats[k] = i
                    k += 1
    return tiles, splats


@njit(cache=True)
def rect_mask(rect, select, tiles_x, tiles_y):
    """Tiles covered by the rectangles of the selected splats."""
    out = np.zeros(tiles_x * tiles_y, dtype=np.bool_)
    for j in range(select.shape[0]):
        i = select[j]
        if rect[i, 0] < 0:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                out[ty * tiles_x + tx] = True
    return out


@njit(cache=True)
def forward(width, height, tiles_x, tiles_y, tile_active, offsets, order, mean, conic, opac, color, xs, ys, consts,
            out_img, out_T, out_last, out_count, touched):
    half = consts[C_HALF]
    a_min = consts[C_ALPHA_MIN]
    a_max = consts[C_ALPHA_MAX]
    t_min = consts[C_T_MIN]
    one = consts[C_ONE]
    zero = consts[C_ZERO]
    for tile in range(tiles_x * tiles_y):
        if not tile_active[tile]:
            continue
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        touched[tile] = end - start
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            fy = ys[py]
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                fx = xs[px]
                T = one
                r = zero
                g = zero
                b = zero
                last = start
                cnt = 0
                for k in range(start, end):
                    s = order[k]
                    dx = fx - mean[s, 0]
                    dy = fy - mean[s, 1]
                    power = -half * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > zero:
                        continue
                    alpha = opac[s] * np.exp(power)
                    if alpha > a_max:
                        alpha = a_max
                    if alpha < a_min:
                        continue
                    test_T = T * (one - alpha)
                    if test_T < t_min:
                        break
                    w = alpha * T
                    r += color[s, 0] * w
                    g += color[s, 1] * w
                    b += color[s, 2] * w
                    T = test_T
                    last = k + 1
                    cnt += 1
                out_img[py, px, 0] = r
                out_img[py, px, 1] = g
                out_img[py, px, 2] = b
                out_T[py, px] = T
                out_last[py, px] = last
                out_count[py, px] = cnt


@njit(cache=True)
def backward(width, height, tiles_x, tiles_y, tile_active, offsets, order, mean, conic, opac, color, want, xs, ys,
             consts, final_T, last_idx, grad_img, g_mean, g_conic, g_opac, g_color):
    """Per-entry gradients (entry = position in the tile-sorted pair list)."""
    half = consts[C_HALF]
    a_min = consts[C_ALPHA_MIN]
    a_max = consts[C_ALPHA_MAX]
    one = consts[C_ONE]
    zero = consts[C_ZERO]
    for tile in range(tiles_x * tiles_y):
        if not tile_active[tile]:
            continue
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            fy = ys[py]
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                last = last_idx[py, px]
                if last <= start:
                    continue
                fx = xs[px]
                gr = grad_img[py, px, 0]
                gg = grad_img[py, px, 1]
                gb = grad_img[py, px, 2]
                T = final_T[py, px]
                acc_r = zero
                acc_g = zero
                acc_b = zero
                last_alpha = zero
                last_r = zero
                last_g = zero
                last_b = zero
                for k in range(last - 1, start - 1, -1):
                    s = order[k]
                    dx = fx - mean[s, 0]
                    dy = fy - mean[s, 1]
                    power = -half * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > zero:
                        continue
                    gauss = np.exp(power)
                    raw = opac[s] * gauss
                    alpha = raw
                    if alpha > a_max:
                        alpha = a_max
                    if alpha < a_min:
                        continue
                    T = T / (one - alpha)
                    # colour of everything composited behind this splat, renormalised
                    acc_r = last_alpha * last_r + (one - last_alpha) * acc_r
                    acc_g = last_alpha * last_g + (one - last_alpha) * acc_g
                    acc_b = last_alpha * last_b + (one - last_alpha) * acc_b
                    cr = color[s, 0]
                    cg = color[s, 1]
                    cb = color[s, 2]
                    last_alpha = alpha
                    last_r = cr
                    last_g = cg
                    last_b = cb
                    if not want[s]:
                        continue
                    w = alpha * T
                    g_color[k, 0] += w * gr
                    g_color[k, 1] += w * gg
                    g_color[k, 2] += w * gb
                    if raw > a_max:
                        continue
                    d_alpha = ((cr - acc_r) * gr + (cg - acc_g) * gg + (cb - acc_b) * gb) * T
                    g_opac[k] += gauss * d_alpha
                    d_power = alpha * d_alpha
                    g_conic[k, 0] += -half * dx * dx * d_power
                    g_conic[k, 1] += -dx * dy * d_power
                    g_conic[k, 2] += -half * dy * dy * d_power
                    g_mean[k, 0] += (conic[s, 0] * dx + conic[s, 1] * dy) * d_power
                    g_mean[k, 1] += (conic[s, 1] * dx + conic[s, 2] * dy) * d_power


@njit(cache=True)
def reduce_entries(order, n_splats, g_mean, g_conic, g_opac, g_color):
    """Sum per-entry gradients into per-splat totals in entry (tile row-major) order."""
    out = np.zeros((n_splats, 9), dtype=g_mean.dtype)
    for k in range(order.shape[0]):
        s = order[k]
        out[s, 0] += g_mean[k, 0]
        out[s, 1] += g_mean[k, 1]
        out[s, 2] += g_conic[k, 0]
        out[s, 3] += g_conic[k, 1]
        out[s, 4] += g_conic[k, 2]
        out[s, 5] += g_opac[k]
        out[s, 6] += g_color[k, 0]
        out[s, 7] += g_color[k, 1]
        out[s, 8] += g_color[k, 2]
    return out
