"""Small convolutional feature encoder with hand-written backward pass.

The default network is three 3x3 convolutions (3 -> 16 -> 32 -> C), each
with stride 2 and padding 1, so features come out at 1/8 of the input
resolution. ReLU follows every layer except the last.

Also holds the logistic loss and the momentum SGD optimizer used to train it.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

KERNEL = 3
PAD = 1


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray  # (out_ch,)
    stride: int = 2

    @property
    def out_channels(self):
        return self.kernels.shape[0]

    @property
    def in_channels(self):
        return self.kernels.shape[1]


@dataclass
class EncoderParams:
    layers: list

    @property
    def c_out(self):
        return self.layers[-1].out_channels

    @property
    def total_stride(self):
        return int(np.prod([layer.stride for layer in self.layers]))

    @property
    def strides(self):
        return [layer.stride for layer in self.layers]

    def named_tensors(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"conv{i}.kernels"] = layer.kernels
            out[f"conv{i}.bias"] = layer.bias
        return out

    @classmethod
    def from_named(cls, tensors, strides):
        layers = []
        for i, stride in enumerate(strides):
            layers.append(ConvLayer(
                np.asarray(tensors[f"conv{i}.kernels"], dtype=np.float64),
                np.asarray(tensors[f"conv{i}.bias"], dtype=np.float64),
                int(stride),
            ))
        return cls(layers)


def init_encoder(c_out=64, widths=(16, 32), in_channels=3, strides=None, seed=0):
    """He-scaled uniform kernels, zero biases, drawn from a seeded PCG64 stream."""
    chans = [in_channels, *widths, c_out]
    if strides is None:
        strides = [2] * (len(chans) - 1)
    if len(strides) != len(chans) - 1:
        raise ValueError(f"need {len(chans) - 1} strides, got {len(strides)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for cin, cout, stride in zip(chans[:-1], chans[1:], strides):
        fan_in = cin * KERNEL * KERNEL
        bound = np.sqrt(6.0 / fan_in)
        k = rng.uniform(-bound, bound, size=(cout, cin, KERNEL, KERNEL))
        layers.append(ConvLayer(k, np.zeros(cout), stride))
    return EncoderParams(layers)


def _im2col(x, stride):
    # x: (C, H, W) -> (C*9, Ho*Wo)
    xp = np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * KERNEL * KERNEL, ho * wo)
    return cols, ho, wo


def _col2im(dcols, shape, stride, ho, wo):
    c, h, w = shape
    d = dcols.reshape(c, KERNEL, KERNEL, ho, wo)
    dxp = np.zeros((c, h + 2 * PAD, w + 2 * PAD))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += d[:, ky, kx]
    return dxp[:, PAD:PAD + h, PAD:PAD + w]


def conv_forward(layer, x):
    cols, ho, wo = _im2col(x, layer.stride)
    kmat = layer.kernels.reshape(layer.out_channels, -1)
    out = kmat @ cols + layer.bias[:, None]
    return out.reshape(layer.out_channels, ho, wo), cols


def conv_backward(layer, x_shape, cols, dout):
    _, ho, wo = dout.shape
    dmat = dout.reshape(layer.out_channels, -1)
    dk = (dmat @ cols.T).reshape(layer.kernels.shape)
    db = dmat.sum(axis=1)
    kmat = layer.kernels.reshape(layer.out_channels, -1)
    dx = _col2im(kmat.T @ dmat, x_shape, layer.stride, ho, wo)
    return dk, db, dx


def _check_image(params, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"image must be (C, H, W), got shape {image.shape}")
    if image.shape[0] != params.layers[0].in_channels:
        raise DimensionError(f"image has {image.shape[0]} channels, encoder expects {params.layers[0].in_channels}")
    s = params.total_stride
    if image.shape[1] % s or image.shape[2] % s:
        raise DomainError(f"image size {image.shape[1]}x{image.shape[2]} is not divisible by {s}")
    return image


def encode_with_cache(params, image):
    image = _check_image(params, image)
    cache = []
    x = image
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        z, cols = conv_forward(layer, x)
        cache.append((x.shape, cols, z))
        x = z if i == last else np.maximum(z, 0.0)
    return x, cache


def encode(params, image):
    """Features of shape (C, H/s, W/s), where s is the product of layer strides."""
    return encode_with_cache(params, image)[0]


def encode_backward(params, image, upstream_grad, cache=None):
    """Return ``(param_grads, image_grad)``; param_grads keyed like ``named_tensors``."""
    if cache is None:
        out, cache = encode_with_cache(params, image)
        out_shape = out.shape
    else:
        out_shape = cache[-1][2].shape
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != out_shape:
        raise DimensionError(f"upstream gradient shape {g.shape} does not match encoder output {out_shape}")
    grads = {}
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        layer = params.layers[i]
        x_shape, cols, z = cache[i]
        if i != last:
            g = g * (z > 0)
        dk, db, g = conv_backward(layer, x_shape, cols, g)
        grads[f"conv{i}.kernels"] = dk
        grads[f"conv{i}.bias"] = db
    ordered = {name: grads[name] for name in params.named_tensors()}
    return ordered, g


def bce_with_logits(logits, targets, weight=1.0):
    """Mean binary cross-entropy on logits, computed in the overflow-free form.

    loss = mean(w * (max(x, 0) - x*y + log1p(exp(-|x|))))
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"logits shape {x.shape} does not match targets {y.shape}")
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise DomainError("targets must lie in [0, 1]")
    n = x.size
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = weight * per.sum() / n
    # sigmoid via tanh never overflows
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    d = weight * (sig - y) / n
    return float(loss), d


@dataclass
class OptimizerState:
    velocity: dict
    momentum: float = 0.9
    weight_decay: float = 5e-4
    learning_rate: float = 1e-3

    @classmethod
    def zeros_like(cls, tensors, **kwargs):
        if isinstance(tensors, EncoderParams):
            tensors = tensors.named_tensors()
        return cls({k: np.zeros_like(v) for k, v in tensors.items()}, **kwargs)


def sgd_momentum_step(params, grads, state):
    """One step of ``v <- mu v + (g + wd theta); theta <- theta - lr v``.

    ``params`` is an EncoderParams or a dict of arrays; the same kind is
    returned together with a new OptimizerState. Inputs are not mutated.
    """
    named = params.named_tensors() if isinstance(params, EncoderParams) else params
    if set(named) != set(grads) or set(named) != set(state.velocity):
        raise DimensionError("parameters, gradients and velocity must share the same tensor names")
    new_params, new_vel = {}, {}
    for name, theta in named.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v = state.velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise DimensionError(f"{name}: shapes differ (param {theta.shape}, grad {g.shape}, velocity {v.shape})")
        v = state.momentum * v + (g + state.weight_decay * theta)
        new_vel[name] = v
        new_params[name] = theta - state.learning_rate * v
    new_state = OptimizerState(new_vel, state.momentum, state.weight_decay, state.learning_rate)
    if isinstance(params, EncoderParams):
        return EncoderParams.from_named(new_params, params.strides), new_state
    return new_params, new_state
