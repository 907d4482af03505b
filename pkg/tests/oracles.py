"""Independent reference implementations used as test oracles.

None of these import the package's numerical kernels; they are deliberately
slow, loop-based, or symbolic.
"""

from __future__ import annotations

import math

import numpy as np
import sympy

HASH_PRIMES = (1, 2654435761, 805459861)


def exact_schedule(n_min, n_max, levels):
    """floor(n_min * (n_max/n_min)^(l/(L-1))) in exact arithmetic."""
    if levels == 1:
        return [n_min]
    ratio = sympy.Rational(n_max, n_min)
    return [int(sympy.floor(n_min * ratio ** sympy.Rational(l, levels - 1))) for l in range(levels)]


def spatial_hash(point, table_size):
    h = 0
    for c, p in zip(point, HASH_PRIMES):
        h ^= c * p
    return h % table_size


def vertex_weight(x, v):
    """Multilinear weight of lattice vertex ``v`` for scaled point ``x``."""
    w = 1.0
    for xi, vi in zip(x, v):
        w *= 1.0 - abs(xi - vi)
    return w


def _cell(u, n):
    lo = min(max(math.floor(u), 0), max(n - 1, 0))
    return lo, u - lo


def bilinear(arr, u, v, n):
    """Same arithmetic order as a corner loop (c = 0..3, bit j = upper on axis j)."""
    i0, fu = _cell(u, n)
    j0, fv = _cell(v, n)
    out = np.zeros(arr.shape[-1])
    for c in range(4):
        i = min(i0 + 1, n) if c & 1 else i0
        j = min(j0 + 1, n) if c & 2 else j0
        w = 1.0 * (fu if c & 1 else 1.0 - fu)
        w = w * (fv if c & 2 else 1.0 - fv)
        out = out + w * arr[i, j]
    return out


def trilinear(arr, u, n):
    lo, fr = zip(*(_cell(x, n) for x in u))
    out = np.zeros(arr.shape[-1])
    for c in range(8):
        idx, w = [], 1.0
        for j in range(3):
            if (c >> j) & 1:
                idx.append(min(lo[j] + 1, n))
                w = w * fr[j]
            else:
                idx.append(lo[j])
                w = w * (1.0 - fr[j])
        out = out + w * arr[tuple(idx)]
    return out


PLANES = ((0, 1), (1, 2), (2, 0))


def triplane_encode(x, plane_arrays, resolutions):
    """Explicit tri-plane features: ``plane_arrays[p][l]`` has shape (N+1, N+1, F)."""
    feats = []
    for l, n in enumerate(resolutions):
        h = None
        for p, (a, b) in enumerate(PLANES):
            f = bilinear(plane_arrays[p][l], x[a] * n, x[b] * n, n)
            h = f if h is None else h * f
        feats.append(h)
    return np.concatenate(feats)


def dense_encode(x, grids, resolutions):
    return np.concatenate([trilinear(grids[l], [xi * n for xi in x], n) for l, n in enumerate(resolutions)])


def composite_weights(alphas):
    """w_k = alpha_k * prod_{l<k} (1 - alpha_l), by explicit loop."""
    out, trans = [], 1.0
    for a in alphas:
        out.append(a * trans)
        trans *= 1.0 - a
    return np.array(out), trans


def distortion_double_sum(w, s, ds):
    total = 0.0
    for i in range(len(w)):
        for j in range(len(w)):
            total += w[i] * w[j] * abs(s[i] - s[j])
    for i in range(len(w)):
        total += w[i] ** 2 * ds[i] / 3.0
    return total


def psnr_loop(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    acc = 0.0
    for p, q in zip(a, b):
        acc += (p - q) ** 2
    mse = acc / len(a)
    return 99.0 if mse == 0 else min(99.0, 10.0 * math.log10(1.0 / mse))


def ssim_sliding(a, b, size=11, sigma=1.5):
    """Direct sliding-window SSIM on Rec.601 luma over valid positions."""
    luma = np.array([0.299, 0.587, 0.114])
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a, b = a @ luma, b @ luma
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-r**2 / (2 * sigma**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa = a[i : i + size, j : j + size]
            pb = b[i : i + size, j : j + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def real_sh_scipy(direction, lmax=3):
    """Real SH without Condon-Shortley phase, from scipy's complex harmonics.

    Ordering: degree-major, m ascending.
    """
    from scipy.special import sph_harm_y

    x, y, z = direction
    theta = math.atan2(y, x)  # azimuth
    phi = math.acos(max(-1.0, min(1.0, z)))  # polar
    out = []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            # scipy includes (-1)^m; undo it to drop the Condon-Shortley phase
            ylm = sph_harm_y(l, abs(m), phi, theta) * (-1) ** abs(m)
            if m == 0:
                out.append(ylm.real)
            elif m > 0:
                out.append(math.sqrt(2) * ylm.real)
            else:
                out.append(math.sqrt(2) * ylm.imag)
    return np.array(out)


def mlp_forward(x, layers, final=None):
    """Dense matmul chain with ReLU between layers; layers are (W, b) numpy pairs."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h if final is None else final(h)


def adam_trajectory(theta0, grad_fn, lr, b1, b2, eps, steps):
    """Hand-stepped Adam with bias correction."""
    theta, m, v = float(theta0), 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def sphere_ray_interval(o, d, center, radius):
    oc = np.asarray(o) - center
    b = float(np.dot(oc, d))
    c = float(np.dot(oc, oc)) - radius**2
    disc = b * b - c
    if disc <= 0:
        return None
    r = math.sqrt(disc)
    return -b - r, -b + r
