"""Central finite-difference checks for the ridge adjoint, the encoder and the full episode."""

import numpy as np

from . import solver
from .encoder import bce_with_logits, encode, encode_backward, init_encoder
from .pipeline import episode_gradients, episode_loss
from .solver import RidgeConfig

RIDGE_TOL = 1e-6
ENCODER_TOL = 1e-4
EPISODE_TOL = 1e-4


def max_rel_error(analytic, numeric):
    """Largest absolute deviation, relative to the tensor's largest entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(f, x, step):
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def check_ridge(rows=6, c_dim=4, splits=1, lam=1.0, bias=True, seed=0, step=1e-6):
    """Compare ridge_backward with finite differences of (X, Y, F_Q) -> BCE(P_Q)."""
    rng = np.random.default_rng(seed)
    cfg = RidgeConfig(lam, splits, bias)
    x = rng.standard_normal((rows, c_dim))
    y = rng.uniform(-1, 1, (rows, 1))
    f_q = rng.standard_normal((rows + 2, c_dim))
    t = rng.uniform(0, 1, (rows + 2, 1))

    def loss():
        w = solver.block_split_fit(x, y, cfg)
        return bce_with_logits(solver.ridge_predict(f_q, w), t)[0]

    w = solver.block_split_fit(x, y, cfg)
    _, d_logits = bce_with_logits(solver.ridge_predict(f_q, w), t)
    _, g = solver.predict_backward(f_q, w, d_logits)
    adj = solver.ridge_backward(x, y, cfg, w, g, d_logits=d_logits)
    return {
        "ridge.d_x": max_rel_error(adj.d_x, numeric_gradient(loss, x, step)),
        "ridge.d_y": max_rel_error(adj.d_y, numeric_gradient(loss, y, step)),
        "ridge.d_fq": max_rel_error(adj.d_fq, numeric_gradient(loss, f_q, step)),
    }


def check_encoder(size=16, widths=(4,), c_out=6, seed=0, step=1e-5):
    """Two stride-2 layers by default; loss is a fixed random projection of the features."""
    rng = np.random.default_rng(seed)
    params = init_encoder(c_out, widths, seed=seed)
    for layer in params.layers:
        layer.bias[:] = rng.uniform(-0.1, 0.1, layer.bias.shape)
    image = rng.uniform(0, 1, (3, size, size))
    proj = rng.standard_normal(encode(params, image).shape)

    def loss():
        return float(np.sum(proj * encode(params, image)))

    grads, d_image = encode_backward(params, image, proj)
    errs = {}
    for name, tensor in params.named_tensors().items():
        errs[f"encoder.{name}"] = max_rel_error(grads[name], numeric_gradient(loss, tensor, step))
    errs["encoder.image"] = max_rel_error(d_image, numeric_gradient(loss, image, step))
    return errs


def _blob_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    cx, cy = rng.uniform(size * 0.3, size * 0.7, 2)
    r = rng.uniform(size * 0.2, size * 0.35)
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.uint8)


def check_episode(c_dim=8, splits=2, lam=1.0, size=16, widths=(4, 8), seed=0, step=1e-5):
    """Encoder -> ridge fit on reference -> predict on query -> BCE, vs finite differences."""
    rng = np.random.default_rng(seed)
    cfg = RidgeConfig(lam, splits, True)
    params = init_encoder(c_dim, widths, seed=seed)
    for layer in params.layers:
        layer.bias[:] = rng.uniform(-0.1, 0.1, layer.bias.shape)
    ref = rng.uniform(0, 1, (3, size, size))
    query = rng.uniform(0, 1, (3, size, size))
    ref_mask = _blob_mask(rng, size)
    query_mask = _blob_mask(rng, size)

    def loss():
        return episode_loss(params, ref, ref_mask, query, query_mask, cfg)

    _, grads = episode_gradients(params, ref, ref_mask, query, query_mask, cfg)
    errs = {}
    for name, tensor in params.named_tensors().items():
        errs[f"episode[S={splits}].{name}"] = max_rel_error(grads[name], numeric_gradient(loss, tensor, step))
    return errs


def run_all(c_dim=8, splits=2, seed=0):
    """Every suite at its tolerance: list of (name, error, tolerance)."""
    results = []
    for name, err in check_ridge(c_dim=c_dim, splits=splits, seed=seed).items():
        results.append((name, err, RIDGE_TOL))
    for name, err in check_encoder(seed=seed).items():
        results.append((name, err, ENCODER_TOL))
    for name, err in check_episode(c_dim=c_dim, splits=splits, seed=seed).items():
        results.append((name, err, EPISODE_TOL))
    return results
