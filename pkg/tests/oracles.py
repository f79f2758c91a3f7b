"""Independent reference computations used by the tests.

None of these call into the package's solver or backward code.
"""

import numpy as np


def ridge_gd(x, y, lam, tol=1e-14, max_iter=500_000):
    """Minimize ||XW - Y||^2 + lam ||W||^2 by accelerated gradient descent.

    Uses only matrix-vector products; the step and momentum come from the
    extreme eigenvalues of the Hessian 2(X^T X + lam I).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    eig = np.linalg.eigvalsh(x.T @ x)
    big, small = 2 * (eig[-1] + lam), 2 * (max(eig[0], 0.0) + lam)
    step = 1.0 / big
    kappa = big / small
    beta = (np.sqrt(kappa) - 1) / (np.sqrt(kappa) + 1)
    w = np.zeros((x.shape[1], y.shape[1]))
    prev = w.copy()
    scale = 1.0 + np.abs(x.T @ y).max()
    for _ in range(max_iter):
        v = w + beta * (w - prev)
        grad = 2 * (x.T @ (x @ v - y)) + 2 * lam * v
        prev, w = w, v - step * grad
        full = 2 * (x.T @ (x @ w - y)) + 2 * lam * w
        if np.abs(full).max() <= tol * scale:
            break
    return w


def ridge_objective(x, y, w, lam):
    r = x @ w - y
    return float(np.sum(r * r) + lam * np.sum(w * w))


def central_difference(f, x, step):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


def conv2d_direct(image, kernels, bias, stride, pad=1):
    """Loop-based 3x3 convolution, (C, H, W) -> (O, ceil(H/s), ceil(W/s))."""
    cin, h, w = image.shape
    cout, _, kh, kw = kernels.shape
    xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = image
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += kernels[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out
