"""Layers: standard and sorted convolutions, pooling, ReLU and the linear head.

A sorted convolution is a drop-in replacement for a same-padded stride-1
convolution: it expands the input with :func:`sortconv.sorter.sort_expand`
and convolves the canvas with stride ``2n+1`` and no padding, so both layer
kinds map ``N x C_in x h x w`` to ``N x C_out x h x w`` with identical
parameter shapes.
"""
import numpy as np

from .errors import ConfigurationError, ShapeError
from .sampler import build_sample_plan, sampling_mode
from .sorter import build_sort_plan, sort_expand, sorted_conv2d, sorting_mode
from .tensor import (
    Parameter, add, conv2d_strided, global_avgpool, global_maxpool, matmul,
    maxpool2d, relu, reshape,
)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_kernel(k):
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {k}")
    return int(k)


class Layer:
    def parameters(self):
        return []

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    """Same-padded, stride-1 convolution with a per-channel bias."""

    def __init__(self, in_channels, out_channels, kernel_size, rng=None, dtype=np.float64):
        k = _check_kernel(kernel_size)
        rng = np.random.default_rng() if rng is None else rng
        fan_in = in_channels * k * k
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, k, k), fan_in, dtype))
        self.bias = Parameter(_uniform(rng, (out_channels,), fan_in, dtype))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return std_forward(x, self.weight, self.bias)

    def __repr__(self):
        k = self.kernel_size
        return f"Conv2d({self.in_channels}->{self.out_channels}, {k}x{k})"


class SortedConv2d(Conv2d):
    """Sorted convolution: neighbourhoods are sorted before being weighted.

    ``sampling`` is ``'square'`` or ``'polar'``; ``sorting`` is ``'global'``
    or ``'ring'``. Weights and bias have exactly the shapes of
    :class:`Conv2d`, so swapping one for the other keeps the parameter count.
    With ``fused=False`` the expanded canvas is materialized and convolved
    with stride ``2n+1``; the default fused path gives identical results
    with fewer copies.
    """

    def __init__(self, in_channels, out_channels, kernel_size, sampling="polar",
                 sorting="ring", rng=None, dtype=np.float64, phase=0.0, fused=True):
        super().__init__(in_channels, out_channels, kernel_size, rng=rng, dtype=dtype)
        self.fused = bool(fused)
        self.n = (self.kernel_size - 1) // 2
        self.sampling = sampling_mode(sampling)
        self.sorting = sorting_mode(sorting)
        self.phase = float(phase)
        if self.n >= 1:
            self.sample_plan = build_sample_plan(self.n, self.sampling, self.phase)
            self.sort_plan = build_sort_plan(self.sample_plan, self.sorting)
        else:
            self.sample_plan = self.sort_plan = None

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return sc_forward(x, self)

    def __repr__(self):
        k = self.kernel_size
        return (f"SortedConv2d({self.in_channels}->{self.out_channels}, {k}x{k}, "
                f"{self.sampling}/{self.sorting})")


def sc_forward(x, layer):
    """Sorted convolution of ``x`` with ``layer``'s weights; keeps ``h x w``."""
    if layer.n == 0:
        # Sorting a single value is the identity.
        return std_forward(x, layer.weight, layer.bias)
    if layer.fused:
        return sorted_conv2d(x, layer.weight, layer.bias, layer.sample_plan, layer.sort_plan)
    canvas = sort_expand(x, layer.sample_plan, layer.sort_plan)
    k = layer.kernel_size
    return conv2d_strided(canvas, layer.weight, layer.bias, stride=k, padding=0, exact=True)


def std_forward(x, kernel, bias=None, stride=1, padding=None):
    """Standard convolution; ``padding`` defaults to ``k // 2`` (same size)."""
    if padding is None:
        padding = kernel.shape[-1] // 2
    return conv2d_strided(x, kernel, bias, stride=stride, padding=padding)


def global_avgpool_to_1x1(x):
    return global_avgpool(x)


def global_maxpool_to_1x1(x):
    return global_maxpool(x)


class ReLU(Layer):
    def forward(self, x):
        return relu(x)

    def __repr__(self):
        return "ReLU()"


class MaxPool2d(Layer):
    def __init__(self, size=2):
        self.size = size

    def forward(self, x):
        return maxpool2d(x, self.size)

    def __repr__(self):
        return f"MaxPool2d({self.size})"


class GlobalAvgPool(Layer):
    def forward(self, x):
        return global_avgpool(x)

    def __repr__(self):
        return "GlobalAvgPool()"


class Flatten(Layer):
    def forward(self, x):
        return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))

    def __repr__(self):
        return "Flatten()"


class Linear(Layer):
    """Fully connected layer ``y = x @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_uniform(rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(_uniform(rng, (out_features,), in_features, dtype))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects N x {self.in_features}, got {x.shape}")
        return add(matmul(x, self.weight), self.bias)

    def __repr__(self):
        return f"Linear({self.in_features}->{self.out_features})"
