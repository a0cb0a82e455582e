"""
Bilinear sampling and deformable convolution (single deformable group, no modulation)
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import sparse

from app.core.errors import ShapeError
from app.core.functional import conv2d, conv_output_size
from app.core.tensor import Function, Variable, as_variable, parameter


_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


class BilinearSampler:
    """
    Samples x (N, C, H, W) at real coordinates py, px of shape (N, ...).

    Neighbours outside [0, H) x [0, W) read as zero. The gather is a sparse
    (points x pixels) matrix so the adjoint is its transpose.
    """

    def __init__(self, x: np.ndarray, py: np.ndarray, px: np.ndarray):
        n, c, h, w = x.shape
        self.x_shape = x.shape
        self.point_shape = py.shape

        y0 = np.floor(py)
        x0 = np.floor(px)
        self.dy = py - y0
        self.dx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)

        batch = np.arange(n).reshape((n,) + (1,) * (py.ndim - 1))
        points = py.size
        self.table = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)

        self.corners = []
        rows, cols, data = [], [], []
        for oy, ox in _CORNERS:
            yi = y0 + oy
            xi = x0 + ox
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            flat = (batch * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)
            flat = np.where(valid, flat, 0).reshape(-1)
            weight = (self._wy(oy) * self._wx(ox) * valid).reshape(-1)
            self.corners.append((oy, ox, flat, valid.reshape(-1)))
            rows.append(np.arange(points))
            cols.append(flat)
            data.append(weight)

        self.gather = sparse.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(points, n * h * w),
        )
        self.values = np.asarray(self.gather @ self.table).reshape(self.point_shape + (c,))

    def _wy(self, oy: int) -> np.ndarray:
        return self.dy if oy else 1.0 - self.dy

    def _wx(self, ox: int) -> np.ndarray:
        return self.dx if ox else 1.0 - self.dx

    def input_grad(self, grad_values: np.ndarray) -> np.ndarray:
        n, c, h, w = self.x_shape
        table = np.asarray(self.gather.T @ grad_values.reshape(-1, c))
        return table.reshape(n, h, w, c).transpose(0, 3, 1, 2).copy()

    def coordinate_grads(self, grad_values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        c = self.x_shape[1]
        g = grad_values.reshape(-1, c)
        grad_y = np.zeros(self.point_shape, dtype=g.dtype)
        grad_x = np.zeros(self.point_shape, dtype=g.dtype)
        for oy, ox, flat, valid in self.corners:
            pixels = self.table[flat] * valid[:, None]
            s = (g * pixels).sum(axis=1).reshape(self.point_shape)
            grad_y = grad_y + (1.0 if oy else -1.0) * self._wx(ox) * s
            grad_x = grad_x + (1.0 if ox else -1.0) * self._wy(oy) * s
        return grad_y, grad_x


class BilinearSample(Function):
    name = "bilinear_sample"

    def forward(self, feature_map, y, x):
        self.map_shape = feature_map.shape
        fmap = feature_map.reshape((1,) + feature_map.shape[-3:])
        self.y_shape, self.x_shape = y.shape, x.shape
        coords = (1, 1, 1, 1)
        self.sampler = BilinearSampler(fmap, y.reshape(coords), x.reshape(coords))
        c = fmap.shape[1]
        return self.sampler.values.reshape(1, c, 1, 1)

    def backward(self, grad):
        c = self.map_shape[-3]
        g = grad.reshape(1, 1, 1, 1, c)
        grad_map = self.sampler.input_grad(g).reshape(self.map_shape) if self.needs_grad[0] else None
        grad_y = grad_x = None
        if self.needs_grad[1] or self.needs_grad[2]:
            gy, gx = self.sampler.coordinate_grads(g)
            grad_y = gy.reshape(self.y_shape)
            grad_x = gx.reshape(self.x_shape)
        return grad_map, grad_y, grad_x


def bilinear_sample(feature_map, y, x) -> Variable:
    """
    Value of a (C, H, W) or (1, C, H, W) map at real (y, x), returned as (1, C, 1, 1).
    Differentiable with respect to the map and both coordinates.
    """
    feature_map = as_variable(feature_map)
    if feature_map.ndim not in (3, 4) or (feature_map.ndim == 4 and feature_map.shape[0] != 1):
        raise ShapeError(f"bilinear_sample: map must be (C, H, W) or (1, C, H, W), got {feature_map.shape}")
    y, x = as_variable(y), as_variable(x)
    if y.size != 1 or x.size != 1:
        raise ShapeError("bilinear_sample: y and x must be scalars")
    return BilinearSample.apply(feature_map, y, x)


def sampling_grid(kh: int, kw: int, ho: int, wo: int, stride: int, padding: int) -> Tuple[np.ndarray, np.ndarray]:
    """Regular grid positions per tap, shaped (1, T, Ho, 1) and (1, T, 1, Wo)"""
    ky, kx = np.divmod(np.arange(kh * kw), kw)
    grid_y = (np.arange(ho) * stride - padding)[None, None, :, None] + ky[None, :, None, None]
    grid_x = (np.arange(wo) * stride - padding)[None, None, None, :] + kx[None, :, None, None]
    return grid_y.astype(np.float64), grid_x.astype(np.float64)


class DeformConv2d(Function):
    name = "deform_conv2d"

    def forward(self, x, offsets, weight, bias, stride=1, padding=0):
        n, c, h, w = x.shape
        c_out, _, kh, kw = weight.shape
        taps = kh * kw
        ho = conv_output_size(self.name, "height", h, kh, stride, padding)
        wo = conv_output_size(self.name, "width", w, kw, stride, padding)

        grid_y, grid_x = sampling_grid(kh, kw, ho, wo, stride, padding)
        py = grid_y + offsets[:, 0::2]
        px = grid_x + offsets[:, 1::2]
        self.sampler = BilinearSampler(x, py, px)

        # (N, T, Ho, Wo, C) -> rows (N, Ho, Wo), columns ordered (C, T) like the weight
        self.cols = self.sampler.values.transpose(0, 2, 3, 4, 1).reshape(n * ho * wo, c * taps)
        self.wmat = weight.reshape(c_out, -1)
        out = self.cols @ self.wmat.T
        if bias is not None:
            out = out + bias

        self.dims = (n, c, ho, wo, taps)
        self.w_shape = weight.shape
        return np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(self, grad):
        n, c, ho, wo, taps = self.dims
        c_out = self.w_shape[0]
        g = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)

        grad_x = grad_offsets = grad_w = grad_b = None
        if self.needs_grad[0] or self.needs_grad[1]:
            grad_values = (g @ self.wmat).reshape(n, ho, wo, c, taps).transpose(0, 4, 1, 2, 3)
            if self.needs_grad[0]:
                grad_x = self.sampler.input_grad(grad_values)
            if self.needs_grad[1]:
                gy, gx = self.sampler.coordinate_grads(grad_values)
                grad_offsets = np.empty((n, 2 * taps, ho, wo), dtype=g.dtype)
                grad_offsets[:, 0::2] = gy
                grad_offsets[:, 1::2] = gx
        if self.needs_grad[2]:
            grad_w = (g.T @ self.cols).reshape(self.w_shape)
        if self.needs_grad[3]:
            grad_b = g.sum(axis=0)
        return grad_x, grad_offsets, grad_w, grad_b


def deform_conv2d_with_offsets(x, offsets, weight, bias=None, stride: int = 1, padding: int = 0) -> Variable:
    """Deformable convolution driven by an explicit offset map (N, 2*kH*kW, Hout, Wout)"""
    x, offsets, weight = as_variable(x), as_variable(offsets), as_variable(weight)
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"deform_conv2d: input channels (Cin={c}) do not match weight in-channels ({c_in})")
    ho = conv_output_size("deform_conv2d", "height", h, kh, stride, padding)
    wo = conv_output_size("deform_conv2d", "width", w, kw, stride, padding)
    expected = (n, 2 * kh * kw, ho, wo)
    if offsets.shape != expected:
        raise ShapeError(f"deform_conv2d: offset map shape {offsets.shape} does not match output grid {expected}")
    if bias is not None:
        bias = as_variable(bias)
    return DeformConv2d.apply(x, offsets, weight, bias, stride=stride, padding=padding)


@dataclass
class DeformConvLayer:
    """Deformable convolution plus its offset-predicting convolution"""
    weight: Variable
    bias: Variable
    offset_weight: Variable
    offset_bias: Variable
    stride: int = 1
    padding: int = 0

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        init_std: float = 0.02,
        dtype=np.float64,
    ) -> "DeformConvLayer":
        taps = kernel_size * kernel_size
        return cls(
            weight=parameter(rng.normal(0.0, init_std, (out_channels, in_channels, kernel_size, kernel_size)).astype(dtype)),
            bias=parameter(np.zeros(out_channels, dtype=dtype)),
            # zero offsets: training starts exactly at standard convolution
            offset_weight=parameter(np.zeros((2 * taps, in_channels, kernel_size, kernel_size), dtype=dtype)),
            offset_bias=parameter(np.zeros(2 * taps, dtype=dtype)),
            stride=stride,
            padding=padding,
        )

    def named_parameters(self, prefix: str = "") -> Dict[str, Variable]:
        return {
            f"{prefix}weight": self.weight,
            f"{prefix}bias": self.bias,
            f"{prefix}offset.weight": self.offset_weight,
            f"{prefix}offset.bias": self.offset_bias,
        }

    def offset_parameter_count(self) -> int:
        return self.offset_weight.size + self.offset_bias.size

    def offsets(self, x) -> Variable:
        return conv2d(x, self.offset_weight, self.offset_bias, stride=self.stride, padding=self.padding)


def deform_conv2d(layer: DeformConvLayer, x, offsets: Optional[Variable] = None) -> Variable:
    """Offsets come from the layer's predictor unless given explicitly"""
    if offsets is None:
        offsets = layer.offsets(x)
    return deform_conv2d_with_offsets(x, offsets, layer.weight, layer.bias, layer.stride, layer.padding)
