"""The six-layer baseline CNN and its sorted-convolution (SCNN) variants.

Architecture (28 x 28 inputs)::

    conv K (1->32)   conv K (32->32)   maxpool 2
    conv K (32->64)  conv K (64->64)   maxpool 2
    conv 3 (64->128) conv 3 (128->128) global average pool -> linear 128->10

ReLU follows every convolution. Variants are named ``baseline-K`` or
``{S|P}-{GS|RS}-K``, e.g. ``P-RS-5`` = polar sampling, ring sorting, 5 x 5
kernels in the first four layers.
"""
import re
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ShapeError, UnsupportedOperationError
from .layers import (
    Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d, ReLU, SortedConv2d,
)
from .tensor import Tensor

CHANNELS = (32, 32, 64, 64, 128, 128)
KERNEL_SIZES = (3, 5, 7)

_SCNN_RE = re.compile(r"^(S|P)-(GS|RS)-(3|5|7)$")
_BASELINE_RE = re.compile(r"^baseline-(3|5|7)$")
_SAMPLING = {"S": "square", "P": "polar"}
_SORTING = {"GS": "global", "RS": "ring"}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "scnn"
    K: int = 3
    sampling: str = "P"
    sorting: str = "RS"
    num_classes: int = 10
    input_channels: int = 1

    def __post_init__(self):
        if self.kind not in ("baseline", "scnn"):
            raise ConfigurationError(f"model kind must be 'baseline' or 'scnn', got {self.kind!r}")
        if self.K not in KERNEL_SIZES:
            raise ConfigurationError(f"K must be one of {KERNEL_SIZES}, got {self.K}")
        if self.sampling not in _SAMPLING:
            raise ConfigurationError(f"sampling must be 'S' or 'P', got {self.sampling!r}")
        if self.sorting not in _SORTING:
            raise ConfigurationError(f"sorting must be 'GS' or 'RS', got {self.sorting!r}")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ConfigurationError("num_classes and input_channels must be positive")

    @property
    def name(self):
        if self.kind == "baseline":
            return f"baseline-{self.K}"
        return f"{self.sampling}-{self.sorting}-{self.K}"


def parse_variant(name, num_classes=10, input_channels=1):
    """``'P-RS-5'`` or ``'baseline-3'`` -> :class:`ModelSpec`."""
    m = _SCNN_RE.match(str(name))
    if m:
        return ModelSpec("scnn", int(m.group(3)), m.group(1), m.group(2),
                         num_classes, input_channels)
    m = _BASELINE_RE.match(str(name))
    if m:
        return ModelSpec("baseline", int(m.group(1)), num_classes=num_classes,
                         input_channels=input_channels)
    raise ConfigurationError(
        f"invalid variant {name!r}: expected '{{S|P}}-{{GS|RS}}-{{3|5|7}}' or 'baseline-{{3|5|7}}'")


def all_variants():
    """The twelve SCNN variant names in S/P x GS/RS x 3/5/7 order."""
    return [f"{s}-{o}-{k}" for s in _SAMPLING for o in _SORTING for k in KERNEL_SIZES]


class Model:
    """A feed-forward stack of named layers."""

    def __init__(self, spec, layers, dtype):
        self.spec = spec
        self.layers = list(layers)  # (name, layer) pairs
        self.dtype = np.dtype(dtype)

    @property
    def name(self):
        return self.spec.name

    def _as_input(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ShapeError(
                f"{self.name} expects N x {self.spec.input_channels} x H x W input, got {x.shape}")
        return x

    def forward(self, x, stop_at=None):
        x = self._as_input(x)
        for name, layer in self.layers:
            x = layer(x)
            if name == stop_at:
                break
        return x

    __call__ = forward

    def features(self, x):
        """Pooled 128-d activations just before the linear head, as an N x 128 tensor."""
        return self.forward(x, stop_at="flatten")

    def parameters(self):
        out = []
        for lname, layer in self.layers:
            for pname, p in layer.parameters():
                p.name = f"{lname}.{pname}"
                out.append((p.name, p))
        return out

    def parameter_count(self):
        return sum(p.size for _, p in self.parameters())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state_dict(self, state):
        params = dict(self.parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(
                f"state does not match {self.name}: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)
            p.moment1 = np.zeros_like(p.data)
            p.moment2 = np.zeros_like(p.data)
            p.step_count = 0

    def save(self, path, **metadata):
        meta = {"variant": self.name, "dtype": self.dtype.name,
                "num_classes": self.spec.num_classes,
                "input_channels": self.spec.input_channels,
                "phase": self._phase()}
        meta.update(metadata)
        save_checkpoint(path, self.state_dict(), meta)

    def _phase(self):
        for _, layer in self.layers:
            if isinstance(layer, SortedConv2d):
                return layer.phase
        return 0.0

    def __repr__(self):
        inner = ", ".join(repr(layer) for _, layer in self.layers)
        return f"Model({self.name}: {inner})"


def build_model(spec, seed=0, dtype=np.float64, phase=0.0):
    """Instantiate ``spec`` (a :class:`ModelSpec` or variant name).

    Weights are drawn in layer order from ``numpy.random.default_rng(seed)``,
    so a baseline and an SCNN with the same ``K`` and seed start from
    identical weights.
    """
    if isinstance(spec, str):
        spec = parse_variant(spec)
    rng = np.random.default_rng(seed)
    kernels = (spec.K,) * 4 + (3, 3)
    layers = []
    in_ch = spec.input_channels
    for i, (out_ch, k) in enumerate(zip(CHANNELS, kernels), start=1):
        if spec.kind == "scnn":
            conv = SortedConv2d(in_ch, out_ch, k, _SAMPLING[spec.sampling],
                                _SORTING[spec.sorting], rng=rng, dtype=dtype, phase=phase)
        else:
            conv = Conv2d(in_ch, out_ch, k, rng=rng, dtype=dtype)
        layers.append((f"conv{i}", conv))
        layers.append((f"relu{i}", ReLU()))
        if i in (2, 4):
            layers.append((f"pool{i // 2}", MaxPool2d(2)))
        in_ch = out_ch
    layers.append(("avgpool", GlobalAvgPool()))
    layers.append(("flatten", Flatten()))
    layers.append(("fc", Linear(in_ch, spec.num_classes, rng=rng, dtype=dtype)))
    return Model(spec, layers, dtype)


def load_model(path, dtype=None):
    """Rebuild a model from a checkpoint written by :meth:`Model.save`."""
    arrays, meta = load_checkpoint(path)
    if "variant" not in meta:
        raise ShapeError(f"{path}: checkpoint metadata lacks a variant name")
    spec = parse_variant(meta["variant"], meta.get("num_classes", 10),
                         meta.get("input_channels", 1))
    dtype = dtype or meta.get("dtype", "float64")
    model = build_model(spec, seed=0, dtype=dtype, phase=meta.get("phase", 0.0))
    model.load_state_dict(arrays)
    return model, meta


def invariant_feature(model, image):
    """Rotation-invariant 128-d descriptor of one image (SCNN models only)."""
    if model.spec.kind != "scnn":
        raise UnsupportedOperationError(
            f"{model.name} is not rotation invariant; invariant_feature needs an SCNN variant")
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=model.dtype)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:
        img = img[None]
    if img.shape[0] != 1:
        raise ShapeError(f"invariant_feature takes a single image, got batch of {img.shape[0]}")
    return model.features(img).data[0]
