"""Independent reference implementations used only by the tests.

Everything here is written as plain scalar loops and never calls into the
package's numeric kernels.
"""

import math

import numpy as np


def naive_conv1d(x, w, b, stride=1, padding=0):
    """Triple loop; accumulates bias, then channel-major, then tap, in the dtype of ``w``."""
    x = np.asarray(x)
    f_n, c_n, k_n = w.shape
    t_n = x.shape[1]
    t_out = (t_n + 2 * padding - k_n) // stride + 1
    dt = w.dtype.type
    out = np.empty((f_n, t_out), dtype=w.dtype)
    for f in range(f_n):
        for t in range(t_out):
            acc = dt(b[f])
            for c in range(c_n):
                for k in range(k_n):
                    idx = t * stride + k - padding
                    v = dt(x[c, idx]) if 0 <= idx < t_n else dt(0)
                    acc = dt(acc + dt(w[f, c, k] * v))
            out[f, t] = acc
    return out


def naive_bn(x, gamma, beta, mean, var, eps):
    out = np.empty(x.shape, dtype=np.float64)
    for c in range(x.shape[0]):
        for t in range(x.shape[1]):
            out[c, t] = gamma[c] * (x[c, t] - mean[c]) / math.sqrt(var[c] + eps) + beta[c]
    return out


def naive_relu(x):
    out = np.array(x, dtype=np.float64)
    for idx in np.ndindex(out.shape):
        if out[idx] < 0:
            out[idx] = 0.0
    return out


def naive_residual(x, blk):
    """Straight-line re-evaluation of one inference-mode residual block from raw arrays."""
    c1, c2 = blk.conv1, blk.conv2
    h = naive_conv1d(x.astype(np.float64), c1.weight.astype(np.float64), c1.bias.astype(np.float64), c1.stride, c1.padding)
    h = naive_relu(naive_bn(h, blk.bn1.gamma, blk.bn1.beta, blk.bn1.running_mean, blk.bn1.running_var, blk.bn1.eps))
    h = naive_conv1d(h, c2.weight.astype(np.float64), c2.bias.astype(np.float64), c2.stride, c2.padding)
    h = naive_bn(h, blk.bn2.gamma, blk.bn2.beta, blk.bn2.running_mean, blk.bn2.running_var, blk.bn2.eps)
    if blk.shortcut is None:
        side = x.astype(np.float64)
    else:
        s = blk.shortcut
        side = naive_conv1d(x.astype(np.float64), s.weight.astype(np.float64), s.bias.astype(np.float64), s.stride, s.padding)
    return naive_relu(h + side)


def naive_backbone(x, bb):
    s = bb.stem
    h = naive_conv1d(x.astype(np.float64), s.weight.astype(np.float64), s.bias.astype(np.float64), s.stride, s.padding)
    bn = bb.stem_bn
    h = naive_relu(naive_bn(h, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps))
    for blk in bb.blocks:
        h = naive_residual(h, blk)
    return [v for row in h for v in row]


def naive_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def central_diff(fn, arr, h=1e-4):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated and restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = fn()
        arr[idx] = old - h
        fm = fn()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    """Norm-wise relative error.

    The 1e-6 norm floor covers gradients that are identically zero (a conv
    bias feeding batch-norm), where central differences return pure roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


def windows_bruteforce(length, w):
    """All start offsets ``s`` with ``s % (w/2) == 0`` and ``s + w <= length``."""
    hop = w // 2
    return [s for s in range(length) if s % hop == 0 and s + w <= length]


def sgd_ema_scalar(w, b, feats, labels, lr, decay):
    """Hand-rolled EMA-momentum SGD for a 1-feature, 2-class softmax head.

    ``w`` and ``b`` are 2-lists; returns the trajectory of (w, b) after each step.
    """
    w, b = list(w), list(b)
    mw, mb = [0.0, 0.0], [0.0, 0.0]
    traj = []
    for f, y in zip(feats, labels):
        z0 = w[0] * f + b[0]
        z1 = w[1] * f + b[1]
        m = max(z0, z1)
        e0, e1 = math.exp(z0 - m), math.exp(z1 - m)
        p = [e0 / (e0 + e1), e1 / (e0 + e1)]
        for j in range(2):
            d = p[j] - (1.0 if j == y else 0.0)
            mw[j] = decay * mw[j] + d * f
            mb[j] = decay * mb[j] + d
            w[j] = w[j] - lr * mw[j]
            b[j] = b[j] - lr * mb[j]
        traj.append((list(w), list(b)))
    return traj
