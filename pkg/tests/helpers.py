"""Shared test oracles: naive reference implementations and finite differences."""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Direct six-nested-loop convolution in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    bs, c_in, h, ww = x.shape
    c_out, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (ww + 2 * padding - k) // stride + 1
    out = np.zeros((bs, c_out, h_out, w_out))
    for n in range(bs):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for c in range(c_in):
                        for a in range(k):
                            for q in range(k):
                                acc += x[n, c, i * stride + a, j * stride + q] * w[o, c, a, q]
                    out[n, o, i, j] = acc + b[o]
    return out


def central_diff(f, x, h=1e-3):
    """Central finite differences of a scalar function, element by element.

    ``f`` receives a float64 copy of ``x`` and must do its math in float64 so
    the difference quotient is clean against float32 autodiff gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(got, want, floor=1e-6):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))


def naive_ssim(ys, yh, window):
    """Per-window SSIM loop, averaged over all valid positions."""
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    size = window.shape[0]
    h, w = ys.shape
    values = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            a = ys[i : i + size, j : j + size]
            b = yh[i : i + size, j : j + size]
            mu_a = float((window * a).sum())
            mu_b = float((window * b).sum())
            var_a = float((window * a * a).sum()) - mu_a**2
            var_b = float((window * b * b).sum()) - mu_b**2
            cov = float((window * a * b).sum()) - mu_a * mu_b
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))
