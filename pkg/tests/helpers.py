"""Independent oracles shared by the test suite.

Everything here is deliberately naive (loop nests, per-pixel formulas) and
stays independent of the library code paths it checks.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# convolution loop oracles (float64 accumulation, zero 'same' padding)

def conv_dense_loop(x, kernel, bias):
    """Direct loop-nest dense cross-correlation oracle."""
    n, ci, h, w = x.shape
    co, _, k, _ = kernel.shape
    p = k // 2
    out = np.zeros((n, co, h, w))
    for ni in range(n):
        for o in range(co):
            for y in range(h):
                for xpos in range(w):
                    acc = 0.0
                    for i in range(ci):
                        for u in range(k):
                            for v in range(k):
                                yy, xx = y + u - p, xpos + v - p
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += float(kernel[o, i, u, v]) * float(x[ni, i, yy, xx])
                    out[ni, o, y, xpos] = acc + float(bias[o])
    return out


def conv_dw_loop(x, kernel, bias):
    """Direct loop-nest depth-wise cross-correlation oracle."""
    n, c, h, w = x.shape
    k = kernel.shape[-1]
    p = k // 2
    out = np.zeros((n, c, h, w))
    for ni in range(n):
        for ch in range(c):
            for y in range(h):
                for xpos in range(w):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            yy, xx = y + u - p, xpos + v - p
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += float(kernel[ch, 0, u, v]) * float(x[ni, ch, yy, xx])
                    out[ni, ch, y, xpos] = acc + float(bias[ch])
    return out


def pixel_unshuffle_loop(y, r):
    """Inverse of pixel shuffle, written from the layout contract."""
    n, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    out = np.zeros((n, c * r * r, h, w), dtype=y.dtype)
    for ni in range(n):
        for ch in range(c):
            for i in range(r):
                for j in range(r):
                    out[ni, ch * r * r + i * r + j] = y[ni, ch, i::r, j::r]
    return out


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_grad(param_data, loss_fn, eps=1e-3):
    """Central finite differences of loss_fn over every scalar of param_data.

    ``param_data`` is mutated in place and restored; ``loss_fn`` must rerun the
    forward pass from scratch and return a float.
    """
    flat = param_data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(param_data.shape)


def max_rel_err(analytic, reference, floor=1e-6):
    a = np.asarray(analytic, np.float64)
    f = np.asarray(reference, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom))


# ---------------------------------------------------------------------------
# resampling / metric oracles

def keys_kernel(x):
    ax = abs(float(x))
    if ax <= 1.0:
        return 1.5 * ax ** 3 - 2.5 * ax ** 2 + 1.0
    if ax <= 2.0:
        return -0.5 * ax ** 3 + 2.5 * ax ** 2 - 4.0 * ax + 2.0
    return 0.0


def bicubic_point_oracle(src, out_h, out_w):
    """Per-pixel Keys (a=-0.5) separable resampling with antialiasing.

    Evaluates the weighted sum directly for every output pixel; indices clamp
    at the edges and weights are normalized per output position.
    """
    src = np.asarray(src, np.float64)
    in_h, in_w = src.shape[:2]

    def axis_taps(n_in, n_out, pos):
        scale = n_out / n_in
        kscale = min(scale, 1.0)
        support = 2.0 / kscale
        center = (pos + 0.5) / scale - 0.5
        first = math.floor(center - support) + 1
        taps = []
        for j in range(first, first + int(math.ceil(2 * support)) + 2):
            taps.append((j, keys_kernel((center - j) * kscale) * kscale))
        total = sum(wt for _, wt in taps)
        return [(min(max(j, 0), n_in - 1), wt / total) for j, wt in taps]

    out = np.zeros((out_h, out_w) + src.shape[2:])
    for oy in range(out_h):
        rows = axis_taps(in_h, out_h, oy)
        for ox in range(out_w):
            cols = axis_taps(in_w, out_w, ox)
            acc = 0.0
            for jy, wy in rows:
                for jx, wx in cols:
                    acc = acc + wy * wx * src[jy, jx]
            out[oy, ox] = acc
    return out


def ssim_reference(ya, yb):
    """Brute-force per-window SSIM oracle (11x11 Gaussian, sigma 1.5)."""
    ya = np.asarray(ya, np.float64)
    yb = np.asarray(yb, np.float64)
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    win = np.empty((size, size))
    for u in range(size):
        for v in range(size):
            win[u, v] = math.exp(-((u - half) ** 2 + (v - half) ** 2) / (2 * sigma ** 2))
    win /= win.sum()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    h, w = ya.shape
    values = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            pa = ya[y:y + size, x:x + size]
            pb = yb[y:y + size, x:x + size]
            mu_a = float((win * pa).sum())
            mu_b = float((win * pb).sum())
            var_a = float((win * pa * pa).sum()) - mu_a ** 2
            var_b = float((win * pb * pb).sum()) - mu_b ** 2
            cov = float((win * pa * pb).sum()) - mu_a * mu_b
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# fixtures

def make_test_image(h, w, seed=0):
    """Synthetic HR image with edges, texture and smooth gradients, in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h, 1)
    xx /= max(w, 1)
    base = np.stack(
        [
            0.5 + 0.35 * np.sin(9.0 * xx + 4.0 * yy),
            0.5 + 0.35 * np.cos(6.0 * xx - 8.0 * yy),
            0.5 + 0.35 * np.sin(5.0 * (xx + yy)),
        ],
        axis=-1,
    )
    # hard-edged random rectangles: bicubic upsampling struggles on these
    for _ in range(6):
        top, left = rng.integers(0, h - 2), rng.integers(0, w - 2)
        bh, bw = rng.integers(2, max(3, h // 3)), rng.integers(2, max(3, w // 3))
        base[top:top + bh, left:left + bw] = rng.uniform(0, 1, size=3)
    base += rng.uniform(-0.08, 0.08, size=base.shape)
    return np.clip(base, 0.0, 1.0).astype(np.float32)
