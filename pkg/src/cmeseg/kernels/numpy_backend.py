"""Pure-numpy kernels: the reference implementations of every hot loop.

All functions accumulate in the dtype of their array arguments and use a
fixed reduction order, so repeated calls are bit-identical. The numba
backend mirrors these signatures exactly.
"""

import numpy as np

NAME = "numpy"


# ---------------------------------------------------------------- conv2d

def conv2d_forward(xp, w, b, stride):
    """Cross-correlate a pre-padded input (B,C,HP,WP) with w (OC,IC,KH,KW)."""
    B, _, HP, WP = xp.shape
    OC, _, KH, KW = w.shape
    OH = (HP - KH) // stride + 1
    OW = (WP - KW) // stride + 1
    out = np.zeros((B, OC, OH, OW), dtype=xp.dtype)
    for ky in range(KH):
        for kx in range(KW):
            xs = xp[:, :, ky:ky + (OH - 1) * stride + 1:stride,
                    kx:kx + (OW - 1) * stride + 1:stride]
            out += np.tensordot(w[:, :, ky, kx], xs,
                                axes=([1], [1])).transpose(1, 0, 2, 3)
    out += b.reshape(1, OC, 1, 1).astype(xp.dtype)
    return out


def conv2d_grad_input(w, gout, stride, hp, wp):
    """Gradient w.r.t. the padded input; scatter-adjoint of conv2d_forward."""
    B, _, OH, OW = gout.shape
    _, IC, KH, KW = w.shape
    gxp = np.zeros((B, IC, hp, wp), dtype=gout.dtype)
    for ky in range(KH):
        for kx in range(KW):
            g = np.tensordot(w[:, :, ky, kx], gout,
                             axes=([0], [1])).transpose(1, 0, 2, 3)
            gxp[:, :, ky:ky + (OH - 1) * stride + 1:stride,
                kx:kx + (OW - 1) * stride + 1:stride] += g
    return gxp


def conv2d_grad_kernel(xp, gout, stride, kh, kw):
    C = xp.shape[1]
    _, OC, OH, OW = gout.shape
    gw = np.zeros((OC, C, kh, kw), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, :, ky:ky + (OH - 1) * stride + 1:stride,
                    kx:kx + (OW - 1) * stride + 1:stride]
            gw[:, :, ky, kx] = np.tensordot(gout, xs, axes=([0, 2, 3], [0, 2, 3]))
    return gw


# ----------------------------------------------------- transposed conv2d

def deconv2d_forward(x, w, b, stride):
    """Transposed convolution; w laid out (CIN, COUT, KH, KW), no padding."""
    B, _, H, W = x.shape
    _, COUT, KH, KW = w.shape
    OH = (H - 1) * stride + KH
    OW = (W - 1) * stride + KW
    out = np.zeros((B, COUT, OH, OW), dtype=x.dtype)
    for ky in range(KH):
        for kx in range(KW):
            contrib = np.tensordot(w[:, :, ky, kx], x,
                                   axes=([0], [1])).transpose(1, 0, 2, 3)
            out[:, :, ky:ky + (H - 1) * stride + 1:stride,
                kx:kx + (W - 1) * stride + 1:stride] += contrib
    out += b.reshape(1, COUT, 1, 1).astype(x.dtype)
    return out


def deconv2d_grad_input(w, gout, stride):
    CIN, COUT, KH, KW = w.shape
    B, _, OHd, OWd = gout.shape
    H = (OHd - KH) // stride + 1
    W = (OWd - KW) // stride + 1
    gx = np.zeros((B, CIN, H, W), dtype=gout.dtype)
    for ky in range(KH):
        for kx in range(KW):
            gs = gout[:, :, ky:ky + (H - 1) * stride + 1:stride,
                      kx:kx + (W - 1) * stride + 1:stride]
            gx += np.tensordot(w[:, :, ky, kx], gs,
                               axes=([1], [1])).transpose(1, 0, 2, 3)
    return gx


def deconv2d_grad_kernel(x, gout, stride, kh, kw):
    B, CIN, H, W = x.shape
    COUT = gout.shape[1]
    gw = np.zeros((CIN, COUT, kh, kw), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            gs = gout[:, :, ky:ky + (H - 1) * stride + 1:stride,
                      kx:kx + (W - 1) * stride + 1:stride]
            gw[:, :, ky, kx] = np.tensordot(x, gs, axes=([0, 2, 3], [0, 2, 3]))
    return gw


# --------------------------------------------------------------- maxpool

def maxpool2x2_forward(x):
    """2x2/2 max pool with floor semantics; returns (out, flat plane argmax).

    Ties resolve to the first window element in row-major scan order.
    """
    B, C, H, W = x.shape
    OH, OW = H // 2, W // 2
    xc = x[:, :, :OH * 2, :OW * 2]
    # window candidates stacked in row-major order (0,0),(0,1),(1,0),(1,1)
    cand = np.stack([xc[:, :, 0::2, 0::2], xc[:, :, 0::2, 1::2],
                     xc[:, :, 1::2, 0::2], xc[:, :, 1::2, 1::2]], axis=-1)
    pick = np.argmax(cand, axis=-1)
    out = np.take_along_axis(cand, pick[..., None], axis=-1)[..., 0]
    oy, ox = np.meshgrid(np.arange(OH), np.arange(OW), indexing="ij")
    iy = 2 * oy[None, None] + pick // 2
    ix = 2 * ox[None, None] + pick % 2
    arg = (iy * W + ix).astype(np.int64)
    return out, arg


def maxpool2x2_backward(arg, gout, h, w):
    B, C, OH, OW = gout.shape
    gx = np.zeros((B, C, h * w), dtype=gout.dtype)
    bidx = np.arange(B)[:, None, None, None]
    cidx = np.arange(C)[None, :, None, None]
    np.add.at(gx, (bidx, cidx, arg), gout)
    return gx.reshape(B, C, h, w)


# ------------------------------------------------------ CRF message passing

def crf_spatial_messages(q, table):
    """Windowed color-independent messages: sum_j k(i,j) q_j, self excluded.

    q is (K,H,W); table is the (2R+1,2R+1) Gaussian window with center 0.
    """
    K, H, W = q.shape
    R = table.shape[0] // 2
    msg = np.zeros_like(q)
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            wgt = table[dy + R, dx + R]
            if wgt == 0.0:
                continue
            ys0, ys1 = max(0, -dy), min(H, H - dy)
            xs0, xs1 = max(0, -dx), min(W, W - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            msg[:, ys0:ys1, xs0:xs1] += wgt * q[:, ys0 + dy:ys1 + dy,
                                                xs0 + dx:xs1 + dx]
    return msg


def crf_bilateral_messages(q, intensity, table, inv_two_sr2):
    """Windowed color-dependent messages; intensity is (H,W) in [0,1]."""
    K, H, W = q.shape
    R = table.shape[0] // 2
    msg = np.zeros_like(q)
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            wgt = table[dy + R, dx + R]
            if wgt == 0.0:
                continue
            ys0, ys1 = max(0, -dy), min(H, H - dy)
            xs0, xs1 = max(0, -dx), min(W, W - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            di = (intensity[ys0:ys1, xs0:xs1]
                  - intensity[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx])
            pix = wgt * np.exp(-(di * di) * inv_two_sr2)
            msg[:, ys0:ys1, xs0:xs1] += pix[None] * q[:, ys0 + dy:ys1 + dy,
                                                      xs0 + dx:xs1 + dx]
    return msg


def crf_pairwise_energy(labels, ys, xs, intensity, mu,
                        kinds, weights, inv_two_ss2, inv_two_sr2):
    """Exact pairwise Gibbs energy, sum over i<j. O(N^2); oracle-grade.

    labels/ys/xs/intensity are flat (N,) arrays; kinds[m] is 0 for
    spatial-only and 1 for bilateral kernels.
    """
    n = labels.size
    total = 0.0
    chunk = 256
    for i0 in range(0, n - 1, chunk):
        i1 = min(i0 + chunk, n - 1)
        for i in range(i0, i1):
            dy = ys[i + 1:] - ys[i]
            dx = xs[i + 1:] - xs[i]
            d2 = (dy * dy + dx * dx).astype(np.float64)
            kv = np.zeros(n - i - 1)
            for m in range(kinds.size):
                term = np.exp(-d2 * inv_two_ss2[m])
                if kinds[m] == 1:
                    di = intensity[i + 1:] - intensity[i]
                    term = term * np.exp(-(di * di) * inv_two_sr2[m])
                kv += weights[m] * term
            total += float(np.sum(kv * mu[labels[i], labels[i + 1:]]))
    return total


# ------------------------------------------------- block-matching distances

def bm3d_block_distances(img, ref_ys, ref_xs, dys, dxs, patch):
    """Mean-squared distances between each reference patch and each offset
    candidate; +inf where the candidate patch leaves the image.

    Returns an (n_refs, n_offsets) float64 matrix.
    """
    H, W = img.shape
    R = ref_ys.size
    C = dys.size
    out = np.full((R, C), np.inf)
    imgf = img.astype(np.float64)
    for c in range(C):
        dy, dx = int(dys[c]), int(dxs[c])
        y0, y1 = max(0, -dy), min(H - patch, H - patch - dy)
        x0, x1 = max(0, -dx), min(W - patch, W - patch - dx)
        if y0 > y1 or x0 > x1:
            continue
        e = imgf[y0:y1 + patch, x0:x1 + patch] \
            - imgf[y0 + dy:y1 + dy + patch, x0 + dx:x1 + dx + patch]
        e *= e
        s = np.zeros((e.shape[0] + 1, e.shape[1] + 1))
        np.cumsum(np.cumsum(e, axis=0), axis=1, out=s[1:, 1:])
        valid = ((ref_ys >= y0) & (ref_ys <= y1)
                 & (ref_xs >= x0) & (ref_xs <= x1))
        ry = ref_ys[valid] - y0
        rx = ref_xs[valid] - x0
        ssd = (s[ry + patch, rx + patch] - s[ry, rx + patch]
               - s[ry + patch, rx] + s[ry, rx])
        out[valid, c] = ssd / (patch * patch)
    return out
