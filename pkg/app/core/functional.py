"""
Differentiable NCHW operations recorded on the tape
"""
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit, logsumexp

from app.core.errors import ShapeError
from app.core.tensor import Function, Mean, Sum, Variable, as_variable


LEAKY_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "relu", "sigmoid", "tanh")


def _require_4d(op: str, name: str, shape: Tuple[int, ...]) -> None:
    if len(shape) != 4:
        raise ShapeError(f"{op}: {name} must be NCHW (rank 4), got rank {len(shape)}")


def conv_output_size(op: str, dim: str, size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"{op}: {dim} {size} with kernel {kernel}, stride {stride}, padding {padding} "
            f"does not give an integer output size"
        )
    return span // stride + 1


# ---------------------------------------------------------------- convolution

def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw), columns ordered (C, kh, kw)"""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape: Tuple[int, ...], kh: int, kw: int,
           stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of im2col; taps are accumulated in fixed row-major order"""
    n, c, h, w = x_shape
    blocks = cols.reshape(n, ho, wo, c, kh, kw)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return padded[:, :, padding:padding + h, padding:padding + w].copy()


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, weight, bias, stride=1, padding=0):
        n, c, h, w = x.shape
        c_out, _, kh, kw = weight.shape
        ho = conv_output_size(self.name, "height", h, kh, stride, padding)
        wo = conv_output_size(self.name, "width", w, kw, stride, padding)

        cols = im2col(x, kh, kw, stride, padding, ho, wo)
        wmat = weight.reshape(c_out, -1)
        out = cols @ wmat.T
        if bias is not None:
            out = out + bias

        self.x_shape, self.w_shape = x.shape, weight.shape
        self.cols, self.wmat = cols, wmat
        self.stride, self.padding, self.ho, self.wo = stride, padding, ho, wo
        return np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(self, grad):
        c_out, _, kh, kw = self.w_shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grad_x = grad_w = grad_b = None
        if self.needs_grad[0]:
            grad_x = col2im(g @ self.wmat, self.x_shape, kh, kw, self.stride, self.padding, self.ho, self.wo)
        if self.needs_grad[1]:
            grad_w = (g.T @ self.cols).reshape(self.w_shape)
        if len(self.needs_grad) > 2 and self.needs_grad[2]:
            grad_b = g.sum(axis=0)
        return grad_x, grad_w, grad_b


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Variable:
    """Cross-correlation with zero padding"""
    x, weight = as_variable(x), as_variable(weight)
    _require_4d("conv2d", "input", x.shape)
    _require_4d("conv2d", "weight", weight.shape)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {padding}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input channels (Cin={x.shape[1]}) do not match weight in-channels ({weight.shape[1]})"
        )
    if bias is not None:
        bias = as_variable(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out-channels (Cout={weight.shape[0]})")
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------- normalisation

class BatchNorm(Function):
    name = "batch_norm"

    def forward(self, x, gamma, beta, eps=1e-5):
        c = x.shape[1]
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma.reshape(1, c, 1, 1)
        return self.gamma * self.xhat + beta.reshape(1, c, 1, 1)

    def backward(self, grad):
        axes = (0, 2, 3)
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        grad_x = grad_gamma = grad_beta = None
        if self.needs_grad[0]:
            dxhat = grad * self.gamma
            grad_x = (self.inv_std / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True)
            )
        if self.needs_grad[1]:
            grad_gamma = (grad * self.xhat).sum(axis=axes)
        if self.needs_grad[2]:
            grad_beta = grad.sum(axis=axes)
        return grad_x, grad_gamma, grad_beta


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Variable:
    """Per-channel normalisation with batch statistics (train and generate alike)"""
    x, gamma, beta = as_variable(x), as_variable(gamma), as_variable(beta)
    _require_4d("batch_norm", "input", x.shape)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match input channels (C={c})"
        )
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    return BatchNorm.apply(x, gamma, beta, eps=eps)


# ---------------------------------------------------------------- activations

class LeakyReLU(Function):
    name = "leaky_relu"

    def forward(self, x):
        self.slope = np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype)
        return x * self.slope

    def backward(self, grad):
        return (grad * self.slope,)


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = (x > 0).astype(x.dtype)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        # expit saturates to exactly 0 / 1 in floating point; gates stay strictly inside (0, 1)
        y = expit(x)
        info = np.finfo(y.dtype)
        self.y = np.clip(y, info.tiny, 1.0 - info.epsneg)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Tanh(Function):
    name = "tanh"

    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


_ACTIVATION_FUNCTIONS = {
    "leaky_relu": LeakyReLU,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
}


def activation(kind: str, x) -> Variable:
    """Elementwise nonlinearity; leaky slope is fixed at 0.2"""
    key = kind.replace("-", "_").lower()
    if key not in _ACTIVATION_FUNCTIONS:
        raise ValueError(f"Unknown activation '{kind}', expected one of: {', '.join(ACTIVATIONS)}")
    return _ACTIVATION_FUNCTIONS[key].apply(x)


class LogSigmoid(Function):
    name = "log_sigmoid"

    def forward(self, x):
        self.x = x
        return log_expit(x)

    def backward(self, grad):
        return (grad * expit(-self.x),)


def log_sigmoid(x) -> Variable:
    """log(sigmoid(x)) without ever evaluating log(0)"""
    return LogSigmoid.apply(x)


class LogSoftmax(Function):
    """Log-softmax over the channel axis"""

    name = "log_softmax"

    def forward(self, x):
        out = x - logsumexp(x, axis=1, keepdims=True)
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=1, keepdims=True),)


def log_softmax(x) -> Variable:
    return LogSoftmax.apply(x)


class Abs(Function):
    name = "abs"

    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


def absolute(x) -> Variable:
    return Abs.apply(x)


# ---------------------------------------------------------------- structure

class Concat(Function):
    name = "concat_channels"

    def forward(self, *parts):
        self.bounds = np.cumsum([0] + [p.shape[1] for p in parts])
        return np.concatenate(parts, axis=1)

    def backward(self, grad):
        return tuple(grad[:, start:stop] for start, stop in zip(self.bounds[:-1], self.bounds[1:]))


def concat_channels(parts: Sequence) -> Variable:
    """Channel-wise concatenation (⊕), part order preserved"""
    parts = [as_variable(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels: at least one part is required")
    for p in parts:
        _require_4d("concat_channels", "part", p.shape)
    n, _, h, w = parts[0].shape
    for index, p in enumerate(parts[1:], start=1):
        for dim, expected, got in (("N", n, p.shape[0]), ("H", h, p.shape[2]), ("W", w, p.shape[3])):
            if expected != got:
                raise ShapeError(f"concat_channels: part {index} has {dim}={got}, expected {dim}={expected}")
    if len(parts) == 1:
        return parts[0]
    return Concat.apply(*parts)


class Slice(Function):
    name = "slice"

    def forward(self, x, index=()):
        self.shape, self.index = x.shape, index
        return np.array(x[index], copy=True)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


def crop(x, index: Tuple) -> Variable:
    """Basic (slice-only) indexing"""
    return Slice.apply(x, index=tuple(index))


class Upsample2x(Function):
    """Nearest-neighbour 2x spatial upsampling"""

    name = "upsample2x"

    def forward(self, x):
        self.shape = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = self.shape
        return (grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


def upsample2x(x) -> Variable:
    x = as_variable(x)
    _require_4d("upsample2x", "input", x.shape)
    return Upsample2x.apply(x)


# ---------------------------------------------------------------- reductions

class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        h, w = self.shape[2:]
        return (np.broadcast_to(grad / (h * w), self.shape).copy(),)


class GlobalMaxPool(Function):
    """Max over H, W; the gradient goes to the first maximal position"""

    name = "global_max_pool"

    def forward(self, x):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        self.shape = x.shape
        self.argmax = flat.argmax(axis=2)[..., None]
        return np.take_along_axis(flat, self.argmax, axis=2).reshape(n, c, 1, 1)

    def backward(self, grad):
        n, c, h, w = self.shape
        out = np.zeros((n, c, h * w), dtype=grad.dtype)
        np.put_along_axis(out, self.argmax, grad.reshape(n, c, 1), axis=2)
        return (out.reshape(self.shape),)


class ChannelMean(Function):
    name = "channel_mean"

    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=1, keepdims=True)

    def backward(self, grad):
        return (np.broadcast_to(grad / self.shape[1], self.shape).copy(),)


class ChannelMax(Function):
    """Max over C; the gradient goes to the first maximal channel"""

    name = "channel_max"

    def forward(self, x):
        self.shape = x.shape
        self.argmax = x.argmax(axis=1)[:, None]
        return np.take_along_axis(x, self.argmax, axis=1)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.argmax, grad, axis=1)
        return (out,)


def global_avg_pool(x) -> Variable:
    return GlobalAvgPool.apply(x)


def global_max_pool(x) -> Variable:
    return GlobalMaxPool.apply(x)


def channel_mean(x) -> Variable:
    return ChannelMean.apply(x)


def channel_max(x) -> Variable:
    return ChannelMax.apply(x)


def total(x) -> Variable:
    return Sum.apply(x)


def mean(x) -> Variable:
    return Mean.apply(x)


def weighted_sum(x, weights: Optional[np.ndarray] = None) -> Variable:
    """sum(x * weights); used to turn a tensor into a scalar probe loss"""
    x = as_variable(x)
    if weights is None:
        return Sum.apply(x)
    return Sum.apply(x * weights)
