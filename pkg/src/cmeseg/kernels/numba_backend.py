"""Numba-jitted kernels mirroring numpy_backend's signatures.

Parallel loops partition over independent output elements only, and every
reduction runs in a fixed order, so results are deterministic run to run.
Accumulators take the dtype of the input arrays.
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange

NAME = "numba"

_JIT = dict(parallel=True, cache=True, fastmath=False)


# ---------------------------------------------------------------- conv2d

@njit(**_JIT)
def _conv2d_forward(xp, w, b, stride, out):
    B, _, _, _ = xp.shape
    OC, IC, KH, KW = w.shape
    OH, OW = out.shape[2], out.shape[3]
    for boc in prange(B * OC):
        bb = boc // OC
        oc = boc % OC
        acc = np.zeros((OH, OW), dtype=xp.dtype)
        for ic in range(IC):
            for ky in range(KH):
                for kx in range(KW):
                    wv = w[oc, ic, ky, kx]
                    for oy in range(OH):
                        xrow = xp[bb, ic, oy * stride + ky]
                        arow = acc[oy]
                        for ox in range(OW):
                            arow[ox] += wv * xrow[ox * stride + kx]
        for oy in range(OH):
            for ox in range(OW):
                out[bb, oc, oy, ox] = acc[oy, ox] + b[oc]


def conv2d_forward(xp, w, b, stride):
    B = xp.shape[0]
    OC, _, KH, KW = w.shape
    OH = (xp.shape[2] - KH) // stride + 1
    OW = (xp.shape[3] - KW) // stride + 1
    out = np.empty((B, OC, OH, OW), dtype=xp.dtype)
    _conv2d_forward(xp, w, b.astype(xp.dtype), stride, out)
    return out


@njit(**_JIT)
def _conv2d_grad_input(w, gout, stride, gxp):
    B, OC, OH, OW = gout.shape
    _, IC, KH, KW = w.shape
    for bic in prange(B * IC):
        bb = bic // IC
        ic = bic % IC
        for oc in range(OC):
            for ky in range(KH):
                for kx in range(KW):
                    wv = w[oc, ic, ky, kx]
                    for oy in range(OH):
                        grow = gout[bb, oc, oy]
                        xrow = gxp[bb, ic, oy * stride + ky]
                        for ox in range(OW):
                            xrow[ox * stride + kx] += wv * grow[ox]


def conv2d_grad_input(w, gout, stride, hp, wp):
    B, IC = gout.shape[0], w.shape[1]
    gxp = np.zeros((B, IC, hp, wp), dtype=gout.dtype)
    _conv2d_grad_input(w, gout, stride, gxp)
    return gxp


@njit(**_JIT)
def _conv2d_grad_kernel(xp, gout, stride, gw):
    B, OC, OH, OW = gout.shape
    _, IC, KH, KW = gw.shape
    for oc in prange(OC):
        for ic in range(IC):
            for ky in range(KH):
                for kx in range(KW):
                    acc = xp.dtype.type(0)
                    for bb in range(B):
                        for oy in range(OH):
                            grow = gout[bb, oc, oy]
                            xrow = xp[bb, ic, oy * stride + ky]
                            for ox in range(OW):
                                acc += grow[ox] * xrow[ox * stride + kx]
                    gw[oc, ic, ky, kx] = acc


def conv2d_grad_kernel(xp, gout, stride, kh, kw):
    OC, C = gout.shape[1], xp.shape[1]
    gw = np.empty((OC, C, kh, kw), dtype=xp.dtype)
    _conv2d_grad_kernel(xp, gout, stride, gw)
    return gw


# ----------------------------------------------------- transposed conv2d

@njit(**_JIT)
def _deconv2d_forward(x, w, b, stride, out):
    B, CIN, H, W = x.shape
    _, COUT, KH, KW = w.shape
    for bco in prange(B * COUT):
        bb = bco // COUT
        co = bco % COUT
        acc = np.zeros((out.shape[2], out.shape[3]), dtype=x.dtype)
        for ci in range(CIN):
            for y in range(H):
                xrow = x[bb, ci, y]
                for ky in range(KH):
                    arow = acc[y * stride + ky]
                    for kx in range(KW):
                        wv = w[ci, co, ky, kx]
                        for xx in range(W):
                            arow[xx * stride + kx] += wv * xrow[xx]
        for oy in range(out.shape[2]):
            for ox in range(out.shape[3]):
                out[bb, co, oy, ox] = acc[oy, ox] + b[co]


def deconv2d_forward(x, w, b, stride):
    B, _, H, W = x.shape
    _, COUT, KH, KW = w.shape
    out = np.empty((B, COUT, (H - 1) * stride + KH, (W - 1) * stride + KW),
                   dtype=x.dtype)
    _deconv2d_forward(x, w, b.astype(x.dtype), stride, out)
    return out


@njit(**_JIT)
def _deconv2d_grad_input(w, gout, stride, gx):
    B, CIN, H, W = gx.shape
    _, COUT, KH, KW = w.shape
    for bci in prange(B * CIN):
        bb = bci // CIN
        ci = bci % CIN
        for co in range(COUT):
            for ky in range(KH):
                for kx in range(KW):
                    wv = w[ci, co, ky, kx]
                    for y in range(H):
                        grow = gout[bb, co, y * stride + ky]
                        xrow = gx[bb, ci, y]
                        for xx in range(W):
                            xrow[xx] += wv * grow[xx * stride + kx]


def deconv2d_grad_input(w, gout, stride):
    CIN, _, KH, KW = w.shape
    B = gout.shape[0]
    H = (gout.shape[2] - KH) // stride + 1
    W = (gout.shape[3] - KW) // stride + 1
    gx = np.zeros((B, CIN, H, W), dtype=gout.dtype)
    _deconv2d_grad_input(w, gout, stride, gx)
    return gx


@njit(**_JIT)
def _deconv2d_grad_kernel(x, gout, stride, gw):
    B, CIN, H, W = x.shape
    _, COUT, KH, KW = gw.shape
    for ci in prange(CIN):
        for co in range(COUT):
            for ky in range(KH):
                for kx in range(KW):
                    acc = x.dtype.type(0)
                    for bb in range(B):
                        for y in range(H):
                            xrow = x[bb, ci, y]
                            grow = gout[bb, co, y * stride + ky]
                            for xx in range(W):
                                acc += xrow[xx] * grow[xx * stride + kx]
                    gw[ci, co, ky, kx] = acc


def deconv2d_grad_kernel(x, gout, stride, kh, kw):
    CIN, COUT = x.shape[1], gout.shape[1]
    gw = np.empty((CIN, COUT, kh, kw), dtype=x.dtype)
    _deconv2d_grad_kernel(x, gout, stride, gw)
    return gw


# --------------------------------------------------------------- maxpool

@njit(**_JIT)
def _maxpool2x2_forward(x, out, arg):
    B, C, H, W = x.shape
    OH, OW = out.shape[2], out.shape[3]
    for bc in prange(B * C):
        bb = bc // C
        cc = bc % C
        for oy in range(OH):
            for ox in range(OW):
                iy, ix = 2 * oy, 2 * ox
                best = x[bb, cc, iy, ix]
                by, bx = iy, ix
                for wy in range(2):
                    for wx in range(2):
                        v = x[bb, cc, iy + wy, ix + wx]
                        if v > best:
                            best = v
                            by, bx = iy + wy, ix + wx
                out[bb, cc, oy, ox] = best
                arg[bb, cc, oy, ox] = by * W + bx


def maxpool2x2_forward(x):
    B, C, H, W = x.shape
    OH, OW = H // 2, W // 2
    out = np.empty((B, C, OH, OW), dtype=x.dtype)
    arg = np.empty((B, C, OH, OW), dtype=np.int64)
    _maxpool2x2_forward(x, out, arg)
    return out, arg


@njit(**_JIT)
def _maxpool2x2_backward(arg, gout, gx):
    B, C, OH, OW = gout.shape
    for bc in prange(B * C):
        bb = bc // C
        cc = bc % C
        plane = gx[bb, cc]
        for oy in range(OH):
            for ox in range(OW):
                plane[arg[bb, cc, oy, ox]] += gout[bb, cc, oy, ox]


def maxpool2x2_backward(arg, gout, h, w):
    B, C = gout.shape[0], gout.shape[1]
    gx = np.zeros((B, C, h * w), dtype=gout.dtype)
    _maxpool2x2_backward(arg, gout, gx)
    return gx.reshape(B, C, h, w)


# ------------------------------------------------------ CRF message passing

@njit(**_JIT)
def _crf_spatial_messages(q, table, radius, msg):
    K, H, W = q.shape
    for p in prange(H * W):
        y = p // W
        x = p % W
        for dy in range(-radius, radius + 1):
            yy = y + dy
            if yy < 0 or yy >= H:
                continue
            for dx in range(-radius, radius + 1):
                xx = x + dx
                if xx < 0 or xx >= W:
                    continue
                wgt = table[dy + radius, dx + radius]
                if wgt == 0.0:
                    continue
                for k in range(K):
                    msg[k, y, x] += wgt * q[k, yy, xx]


def crf_spatial_messages(q, table):
    msg = np.zeros_like(q)
    _crf_spatial_messages(q, table, table.shape[0] // 2, msg)
    return msg


@njit(**_JIT)
def _crf_bilateral_messages(q, intensity, table, radius, inv_two_sr2, msg):
    K, H, W = q.shape
    for p in prange(H * W):
        y = p // W
        x = p % W
        ival = intensity[y, x]
        for dy in range(-radius, radius + 1):
            yy = y + dy
            if yy < 0 or yy >= H:
                continue
            for dx in range(-radius, radius + 1):
                xx = x + dx
                if xx < 0 or xx >= W:
                    continue
                wgt = table[dy + radius, dx + radius]
                if wgt == 0.0:
                    continue
                di = ival - intensity[yy, xx]
                pix = wgt * np.exp(-(di * di) * inv_two_sr2)
                for k in range(K):
                    msg[k, y, x] += pix * q[k, yy, xx]


def crf_bilateral_messages(q, intensity, table, inv_two_sr2):
    msg = np.zeros_like(q)
    _crf_bilateral_messages(q, intensity, table, table.shape[0] // 2,
                            inv_two_sr2, msg)
    return msg


@njit(cache=True)
def _crf_pairwise_energy(labels, ys, xs, intensity, mu,
                         kinds, weights, inv_two_ss2, inv_two_sr2):
    n = labels.size
    total = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            dy = ys[j] - ys[i]
            dx = xs[j] - xs[i]
            d2 = float(dy * dy + dx * dx)
            kv = 0.0
            for m in range(kinds.size):
                term = np.exp(-d2 * inv_two_ss2[m])
                if kinds[m] == 1:
                    di = intensity[j] - intensity[i]
                    term *= np.exp(-(di * di) * inv_two_sr2[m])
                kv += weights[m] * term
            total += kv * mu[labels[i], labels[j]]
    return total


def crf_pairwise_energy(labels, ys, xs, intensity, mu,
                        kinds, weights, inv_two_ss2, inv_two_sr2):
    return float(_crf_pairwise_energy(labels, ys, xs, intensity, mu,
                                      kinds, weights, inv_two_ss2,
                                      inv_two_sr2))


# ------------------------------------------------- block-matching distances

@njit(**_JIT)
def _bm3d_block_distances(img, ref_ys, ref_xs, dys, dxs, patch, out):
    H, W = img.shape
    R = ref_ys.size
    C = dys.size
    for r in prange(R):
        ry = ref_ys[r]
        rx = ref_xs[r]
        for c in range(C):
            ty = ry + dys[c]
            tx = rx + dxs[c]
            if ty < 0 or tx < 0 or ty + patch > H or tx + patch > W:
                out[r, c] = np.inf
                continue
            ssd = 0.0
            for py in range(patch):
                arow = img[ry + py]
                brow = img[ty + py]
                for px in range(patch):
                    d = float(arow[rx + px]) - float(brow[tx + px])
                    ssd += d * d
            out[r, c] = ssd / (patch * patch)


def bm3d_block_distances(img, ref_ys, ref_xs, dys, dxs, patch):
    out = np.empty((ref_ys.size, dys.size), dtype=np.float64)
    _bm3d_block_distances(img, ref_ys, ref_xs, dys, dxs, patch, out)
    return out
