"""Numba tile kernels for alpha compositing, forward and backward.

Tiles own disjoint pixel blocks and disjoint slices of the (tile, splat)
pair arrays, so the parallel loops are race-free and bit-deterministic
regardless of thread count. fastmath stays off: reassociation would break
the determinism contract.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

TILE = 16
TERMINATION_T = 1e-4       # stop compositing once transmittance drops below
ALPHA_CLAMP = 0.99         # keeps (1 - alpha) bounded away from zero
ALPHA_SKIP = 1.0 / 255.0   # contributions below this are dropped entirely


@njit(parallel=True, cache=True)
def composite_forward(pair_splat, tile_starts, mean2d, conic, colors, alphas,
                      background, width, height, n_tiles_x,
                      image, transmittance, n_contrib):
    n_tiles = tile_starts.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        s0 = tile_starts[tile]
        s1 = tile_starts[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                t = 1.0
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                cnt = 0
                for s in range(s0, s1):
                    g = pair_splat[s]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = (conic[g, 0] * dx * dx
                         + 2.0 * conic[g, 1] * dx * dy
                         + conic[g, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    a = alphas[g] * math.exp(-0.5 * q)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < ALPHA_SKIP:
                        continue
                    w = t * a
                    acc0 += w * colors[g, 0]
                    acc1 += w * colors[g, 1]
                    acc2 += w * colors[g, 2]
                    t -= w  # keeps sum(weights) + t == 1 exactly
                    cnt += 1
                    if t < TERMINATION_T:
                        break
                image[py, px, 0] = acc0 + t * background[0]
                image[py, px, 1] = acc1 + t * background[1]
                image[py, px, 2] = acc2 + t * background[2]
                transmittance[py, px] = t
                n_contrib[py, px] = cnt


@njit(parallel=True, cache=True)
def composite_backward(pair_splat, tile_starts, mean2d, conic, colors, alphas,
                       width, height, n_tiles_x, image, grad_pixels,
                       pg_mean2d, pg_conic, pg_color, pg_alpha):
    n_tiles = tile_starts.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        s0 = tile_starts[tile]
        s1 = tile_starts[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                gp0 = grad_pixels[py, px, 0]
                gp1 = grad_pixels[py, px, 1]
                gp2 = grad_pixels[py, px, 2]
                if gp0 == 0.0 and gp1 == 0.0 and gp2 == 0.0:
                    continue
                # Replay the forward pass; rest_i = pixel - partial_i is
                # everything composited behind splat i, background included.
                t = 1.0
                part0 = 0.0
                part1 = 0.0
                part2 = 0.0
                for s in range(s0, s1):
                    g = pair_splat[s]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    qa = conic[g, 0]
                    qb = conic[g, 1]
                    qc = conic[g, 2]
                    q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                    if q < 0.0:
                        continue
                    gexp = math.exp(-0.5 * q)
                    a = alphas[g] * gexp
                    clamped = a > ALPHA_CLAMP
                    if clamped:
                        a = ALPHA_CLAMP
                    if a < ALPHA_SKIP:
                        continue
                    w = t * a
                    part0 += w * colors[g, 0]
                    part1 += w * colors[g, 1]
                    part2 += w * colors[g, 2]

                    pg_color[s, 0] += w * gp0
                    pg_color[s, 1] += w * gp1
                    pg_color[s, 2] += w * gp2

                    inv_one_minus = 1.0 / (1.0 - a)
                    rest0 = image[py, px, 0] - part0
                    rest1 = image[py, px, 1] - part1
                    rest2 = image[py, px, 2] - part2
                    d_alpha = (gp0 * (t * colors[g, 0] - rest0 * inv_one_minus)
                               + gp1 * (t * colors[g, 1] - rest1 * inv_one_minus)
                               + gp2 * (t * colors[g, 2] - rest2 * inv_one_minus))
                    if not clamped:
                        pg_alpha[s] += d_alpha * gexp
                        dq = d_alpha * alphas[g] * gexp * -0.5
                        dq_ddx = 2.0 * (qa * dx + qb * dy)
                        dq_ddy = 2.0 * (qb * dx + qc * dy)
                        pg_mean2d[s, 0] -= dq * dq_ddx
                        pg_mean2d[s, 1] -= dq * dq_ddy
                        pg_conic[s, 0] += dq * dx * dx
                        pg_conic[s, 1] += dq * 2.0 * dx * dy
                        pg_conic[s, 2] += dq * dy * dy

                    t -= w
                    if t < TERMINATION_T:
                        break


@njit(cache=True)
def step_events(prev_log, cur_log, ref, t0, t1, delta_pos, delta_neg):
    """Threshold-crossing events for one frame step; updates ref in place.

    Every full threshold multiple between the reference level and the new
    log value fires one event; crossing times interpolate linearly between
    the two frames. Returns exact-size flat arrays (t, x, y, p).
    """
    h, w = cur_log.shape
    total = 0
    for py in range(h):
        for px in range(w):
            diff = cur_log[py, px] - ref[py, px]
            if diff >= delta_pos:
                total += int(diff / delta_pos)
            elif -diff >= delta_neg:
                total += int(-diff / delta_neg)
    out_t = np.empty(total, dtype=np.int64)
    out_x = np.empty(total, dtype=np.int32)
    out_y = np.empty(total, dtype=np.int32)
    out_p = np.empty(total, dtype=np.int8)
    count = 0
    span = float(t1 - t0)
    for py in range(h):
        for px in range(w):
            prev = prev_log[py, px]
            cur = cur_log[py, px]
            diff = cur - ref[py, px]
            if diff >= delta_pos:
                n = int(diff / delta_pos)
                step = delta_pos
                pol = 1
            elif -diff >= delta_neg:
                n = int(-diff / delta_neg)
                step = -delta_neg
                pol = -1
            else:
                continue
            denom = cur - prev
            for j in range(1, n + 1):
                crossing = ref[py, px] + j * step
                if (pol == 1 and denom > 0.0) or (pol == -1 and denom < 0.0):
                    frac = (crossing - prev) / denom
                else:
                    frac = 1.0
                if frac < 0.0:
                    frac = 0.0
                elif frac > 1.0:
                    frac = 1.0
                out_t[count] = t0 + int(round(frac * span))
                out_x[count] = px
                out_y[count] = py
                out_p[count] = pol
                count += 1
            ref[py, px] += n * step
    return out_t, out_x, out_y, out_p
