"""Shared test oracles: naive references and finite-difference checking.

Everything here is deliberately independent of the library's kernel
implementations (plain Python loops, direct formulas) so that the tests
cross-check rather than echo the production code paths.
"""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Quadruple-loop cross-correlation reference, float64 throughout."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    OC, IC, KH, KW = w.shape
    if padding:
        xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        xp[:, :, padding:padding + H, padding:padding + W] = x
    else:
        xp = x
    OH = (H + 2 * padding - KH) // stride + 1
    OW = (W + 2 * padding - KW) // stride + 1
    out = np.zeros((B, OC, OH, OW))
    for bb in range(B):
        for oc in range(OC):
            for oy in range(OH):
                for ox in range(OW):
                    acc = 0.0
                    for ic in range(IC):
                        for ky in range(KH):
                            for kx in range(KW):
                                acc += (w[oc, ic, ky, kx]
                                        * xp[bb, ic, oy * stride + ky,
                                             ox * stride + kx])
                    out[bb, oc, oy, ox] = acc + b[oc]
    return out


def numeric_grad_at(f, arr, flat_index, h=1e-4):
    """Central finite difference of scalar f w.r.t. one entry of arr."""
    flat = arr.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    fp = f()
    flat[flat_index] = orig - h
    fm = f()
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def assert_grad_matches(f, arr, analytic, rng, n_samples=8, h=1e-4,
                        rtol=1e-4, exclude=None, label=""):
    """Compare analytic gradients against central differences.

    f() recomputes the scalar objective from current array contents;
    exclude(flat_index) may veto entries (e.g. near a ReLU kink).
    """
    flat_an = np.asarray(analytic).reshape(-1)
    n = flat_an.size
    idx = rng.permutation(n)[:min(n_samples, n)]
    for i in idx:
        if exclude is not None and exclude(int(i)):
            continue
        num = numeric_grad_at(f, arr, int(i), h=h)
        an = flat_an[i]
        denom = max(abs(an), abs(num))
        if denom < 1e-6:
            assert abs(an - num) < 1e-8, (
                f"{label}[{i}]: analytic {an} vs numeric {num}")
        else:
            rel = abs(an - num) / denom
            assert rel < rtol, (
                f"{label}[{i}]: analytic {an} vs numeric {num}, rel {rel}")


def rand_tensor(rng, shape, dtype=np.float64):
    return rng.standard_normal(shape).astype(dtype)
