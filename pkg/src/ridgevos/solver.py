"""Closed-form ridge regression with block splitting and its analytic adjoint.

For a design matrix ``X`` (rows = pixels, columns = feature channels) and
targets ``Y`` the ridge mapping is

    W = (X^T X + lam I)^-1 X^T Y

Block splitting partitions the columns of ``X`` into ``S`` contiguous
blocks and solves each block independently. This is the same as replacing
the Gram matrix by its block-diagonal restriction, so the ``C x C``
factorization becomes ``S`` factorizations of size ``C/S``. Predictions
are the sum of the per-block predictions.

With ``bias=True`` every block gets its own constant-1 column, which is
regularized like the other weights.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import as_matrix, cho_solve, cholesky

DEFAULT_LAMBDA = 5.0


@dataclass(frozen=True)
class RidgeConfig:
    lam: float = DEFAULT_LAMBDA
    splits: int = 1
    bias: bool = True

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be a finite non-negative number, got {self.lam}")
        if int(self.splits) != self.splits or self.splits < 1:
            raise ConfigError(f"splits must be a positive integer, got {self.splits}")

    def block_width(self, feature_dim):
        if feature_dim % self.splits:
            raise ConfigError(f"splits={self.splits} does not divide feature dimension {feature_dim}")
        return feature_dim // self.splits


@dataclass
class RidgeSolution:
    blocks: list
    feature_dim: int
    split_count: int
    bias: bool = True
    # Cholesky factors of each block's regularized Gram matrix, kept for the backward pass.
    factors: list = field(default=None, repr=False, compare=False)

    @property
    def block_width(self):
        return self.feature_dim // self.split_count

    def stacked(self):
        """All block weights concatenated into one column."""
        return np.concatenate(self.blocks, axis=0)


@dataclass
class RidgeAdjoints:
    d_x: np.ndarray
    d_y: np.ndarray
    d_fq: np.ndarray = None


def _augment(xb, bias):
    if not bias:
        return xb
    return np.hstack([xb, np.ones((xb.shape[0], 1))])


def _column_blocks(x, splits):
    width = x.shape[1] // splits
    return [x[:, i * width:(i + 1) * width] for i in range(splits)]


def _check_xy(x, y):
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if y.shape[1] != 1:
        raise DimensionError(f"targets must be a single column, got {y.shape[0]}x{y.shape[1]}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    return x, y


def _solve_block(xb, y, lam):
    gram = xb.T @ xb
    gram[np.diag_indices_from(gram)] += lam
    factor = cholesky(gram)
    return cho_solve(factor, xb.T @ y), factor


def block_split_fit(x, y, cfg):
    """Fit one ridge mapping per contiguous column block of ``x``."""
    x, y = _check_xy(x, y)
    cfg.block_width(x.shape[1])
    blocks, factors = [], []
    for xb in _column_blocks(x, cfg.splits):
        wb, factor = _solve_block(_augment(xb, cfg.bias), y, cfg.lam)
        blocks.append(wb)
        factors.append(factor)
    return RidgeSolution(blocks, x.shape[1], cfg.splits, cfg.bias, factors)


def ridge_fit(x, y, cfg):
    """Full (unsplit) ridge fit; ``cfg.splits`` must be 1."""
    if cfg.splits != 1:
        raise ConfigError(f"ridge_fit solves the full system; got splits={cfg.splits}, use block_split_fit")
    return block_split_fit(x, y, cfg)


def ridge_predict(f_q, w):
    """Logits ``sum_i [X_i, 1] W_i`` for query features ``f_q`` of shape (h*w, C)."""
    f_q = as_matrix(f_q, "f_q")
    if f_q.shape[1] != w.feature_dim:
        raise DimensionError(f"query features have {f_q.shape[1]} columns, mapping expects {w.feature_dim}")
    out = np.zeros((f_q.shape[0], 1))
    for xb, wb in zip(_column_blocks(f_q, w.split_count), w.blocks):
        out += _augment(xb, w.bias) @ wb
    return out


def predict_backward(f_q, w, d_logits):
    """Gradients of the prediction w.r.t. query features and block weights.

    Returns ``(d_fq, d_blocks)`` where ``d_blocks[i] = [X_i, 1]^T d_logits``.
    """
    f_q = as_matrix(f_q, "f_q")
    d_logits = as_matrix(d_logits, "d_logits")
    if d_logits.shape != (f_q.shape[0], 1):
        raise DimensionError(f"d_logits shape {d_logits.shape} does not match logits ({f_q.shape[0]}, 1)")
    width = w.block_width
    d_fq = np.empty_like(f_q)
    d_blocks = []
    for i, (xb, wb) in enumerate(zip(_column_blocks(f_q, w.split_count), w.blocks)):
        d_fq[:, i * width:(i + 1) * width] = d_logits @ wb[:width].T
        d_blocks.append(_augment(xb, w.bias).T @ d_logits)
    return d_fq, d_blocks


def ridge_backward(x, y, cfg, w, g, d_logits=None):
    """Adjoint of the ridge fit.

    ``g`` is dLoss/dW, one array per block (a bare array is accepted when
    there is a single block). For each block with ``A = X_i^T X_i + lam I``,
    ``u = A^-1 g_i`` and ``r = Y - X_i W_i``::

        dL/dX_i = r u^T - X_i u W_i^T
        dL/dY  += X_i u

    When ``d_logits`` (dLoss/dP_Q) is given, ``d_fq = d_logits W_i^T`` is
    filled in per block as well.
    """
    x, y = _check_xy(x, y)
    if isinstance(g, np.ndarray):
        g = [g]
    if len(g) != w.split_count:
        raise DimensionError(f"expected {w.split_count} weight gradients, got {len(g)}")
    width = cfg.block_width(x.shape[1])
    if width != w.block_width:
        raise DimensionError(f"solution block width {w.block_width} does not match x ({width})")

    d_x = np.empty_like(x)
    d_y = np.zeros_like(y)
    factors = w.factors
    for i, xb in enumerate(_column_blocks(x, cfg.splits)):
        xa = _augment(xb, cfg.bias)
        wb = w.blocks[i]
        gi = as_matrix(g[i], "g")
        if gi.shape != wb.shape:
            raise DimensionError(f"block {i}: gradient shape {gi.shape} does not match weights {wb.shape}")
        if factors is None:
            _, factor = _solve_block(xa, y, cfg.lam)
        else:
            factor = factors[i]
        u = cho_solve(factor, gi)
        xu = xa @ u
        r = y - xa @ wb
        d_xa = r @ u.T - xu @ wb.T
        d_x[:, i * width:(i + 1) * width] = d_xa[:, :width]
        d_y += xu

    d_fq = None
    if d_logits is not None:
        d_fq = np.empty((d_logits.shape[0], x.shape[1]))
        for i, wb in enumerate(w.blocks):
            d_fq[:, i * width:(i + 1) * width] = d_logits @ wb[:width].T
    return RidgeAdjoints(d_x, d_y, d_fq)


def inversion_cost(feature_dim, splits):
    """Total entry count of the block Gram matrices, ``C^2 / S``."""
    if splits < 1 or feature_dim % splits:
        raise ConfigError(f"splits={splits} does not divide feature dimension {feature_dim}")
    width = feature_dim // splits
    return splits * width * width
