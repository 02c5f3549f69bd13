"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the op set the sorted-convolution networks need is provided. Every op
takes :class:`Tensor` inputs, returns a new :class:`Tensor` and, unless
graph recording is disabled via :func:`sortconv.no_grad`, attaches a closure
that maps the output gradient onto its inputs.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._config import is_deterministic, is_grad_enabled
from .errors import ConfigurationError, ContractError, ShapeError


class Tensor:
    """N-dimensional array node of a computation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``.grad`` of every reachable tensor that tracks gradients.

        The tensor must hold a single element; its seed gradient is 1.
        """
        if self.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment buffers."""

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.moment1 = np.zeros_like(self.data)
        self.moment2 = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _result(data, parents, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require_rank(t, rank, what):
    if t.ndim != rank:
        raise ShapeError(f"{what} must be rank {rank}, got shape {t.shape}")


# elementwise --------------------------------------------------------------

def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def mul_scalar(a, scalar):
    scalar = float(scalar)

    def backward(g):
        _accumulate(a, g * scalar)

    return _result(a.data * a.data.dtype.type(scalar), (a,), backward, "mul-scalar")


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), backward, "relu")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(data, (a,), backward, "reshape")


def tensor_sum(a):
    def backward(g):
        _accumulate(a, np.broadcast_to(g.reshape(()), a.shape))

    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


def matmul(a, b):
    """2-D matrix product."""
    _require_rank(a, 2, "matmul lhs")
    _require_rank(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# convolution --------------------------------------------------------------

# Columns are stored channel-major, (C*k*k, N*out_h*out_w), so every copy
# below moves whole image rows and the GEMMs see contiguous operands.

def _im2col(xp, k, stride, out_h, out_w):
    n, c = xp.shape[:2]
    if stride == k:
        blocks = xp[:, :, :out_h * k, :out_w * k].reshape(n, c, out_h, k, out_w, k)
        return blocks.transpose(1, 3, 5, 0, 2, 4).reshape(c * k * k, n * out_h * out_w)
    cols = np.empty((c, k, k, n, out_h, out_w), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * (out_h - 1) + 1:stride,
                               j:j + stride * (out_w - 1) + 1:stride]
    return cols.reshape(c * k * k, n * out_h * out_w)


def _col2im(dcols, padded_shape, k, stride, out_h, out_w):
    n, c, hp, wp = padded_shape
    d = dcols.reshape(c, k, k, n, out_h, out_w)
    if stride == k:
        dxp = np.zeros(padded_shape, dtype=dcols.dtype)
        dxp[:, :, :out_h * k, :out_w * k] = (
            d.transpose(3, 0, 4, 1, 5, 2).reshape(n, c, out_h * k, out_w * k))
        return dxp
    dxt = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxt[:, :, i:i + stride * (out_h - 1) + 1:stride,
                j:j + stride * (out_w - 1) + 1:stride] += d[:, i, j]
    return dxt.transpose(1, 0, 2, 3)


def _conv_output(wmat, cols, bias, n, out_h, out_w):
    """``wmat @ cols`` (+ bias) reshaped to N x F x out_h x out_w."""
    if is_deterministic():
        # Output positions on GEMM rows: every position then runs the same
        # reduction code path, keeping results layout-independent.
        out = (cols.T @ wmat.T).T
    else:
        out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    f = wmat.shape[0]
    return np.ascontiguousarray(out.reshape(f, n, out_h, out_w).transpose(1, 0, 2, 3))


def conv2d_strided(x, weight, bias=None, stride=1, padding=0, exact=False):
    """Cross-correlation of an NCHW input with a (C_out, C_in, k, k) kernel.

    Output extent is ``(H + 2*padding - k) // stride + 1``. With
    ``exact=True`` (sorted-conv usage) the division must leave no remainder.
    """
    _require_rank(x, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d kernel")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if kh != kw:
        raise ConfigurationError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel extent must be odd, got {k}")
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: bad stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {k}")
    if exact and ((hp - k) % stride or (wp - k) % stride):
        raise ContractError(
            f"conv2d: stride {stride} does not tile {hp}x{wp} exactly with kernel {k}")
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = weight.data.reshape(f, -1)
    data = _conv_output(wmat, cols, bias, n, out_h, out_w)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        if weight.requires_grad:
            _accumulate(weight, (gmat @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=1))
        if x.requires_grad:
            dxp = _col2im(wmat.T @ gmat, xp.shape, k, stride, out_h, out_w)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward, "conv2d-strided")


# pooling ------------------------------------------------------------------

def _pool_blocks(x, size, what):
    _require_rank(x, 4, what)
    n, c, h, w = x.shape
    if size < 1 or h < size or w < size:
        raise ShapeError(f"{what}: window {size} does not fit input {h}x{w}")
    oh, ow = h // size, w // size
    blocks = x.data[:, :, :oh * size, :ow * size].reshape(n, c, oh, size, ow, size)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)


def _unpool(dblocks, x_shape, size):
    n, c, h, w = x_shape
    oh, ow = dblocks.shape[2:4]
    full = np.zeros(x_shape, dtype=dblocks.dtype)
    full[:, :, :oh * size, :ow * size] = (
        dblocks.reshape(n, c, oh, ow, size, size)
        .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size))
    return full


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; trailing rows/columns are dropped.

    Gradient goes to the first maximal element of each window.
    """
    blocks = _pool_blocks(x, size, "maxpool2d")
    arg = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        d = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        _accumulate(x, _unpool(d, x.shape, size))

    return _result(data, (x,), backward, "maxpool2d")


def avgpool2d(x, size=2):
    """Non-overlapping mean pooling."""
    blocks = _pool_blocks(x, size, "avgpool2d")
    area = size * size

    def backward(g):
        d = np.broadcast_to(g[..., None] / area, blocks.shape)
        _accumulate(x, _unpool(d, x.shape, size))

    return _result(blocks.mean(axis=-1), (x,), backward, "avgpool2d")


def global_avgpool(x):
    """Per-channel spatial mean, N x C x h x w -> N x C x 1 x 1.

    In deterministic mode values are summed in ascending order, so the result
    depends only on the multiset of activations and not on their layout.
    """
    _require_rank(x, 4, "global_avgpool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if is_deterministic():
        data = np.sort(flat, axis=-1).sum(axis=-1) / flat.dtype.type(h * w)
    else:
        data = flat.mean(axis=-1)
    data = data.reshape(n, c, 1, 1)

    def backward(g):
        _accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return _result(data, (x,), backward, "avgpool2d")


def global_maxpool(x):
    _require_rank(x, 4, "global_maxpool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(n, c, 1, 1)

    def backward(g):
        d = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(d, arg[..., None], g.reshape(n, c, 1), axis=-1)
        _accumulate(x, d.reshape(x.shape))

    return _result(data, (x,), backward, "maxpool2d")


# loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of N x K logits against integer labels."""
    _require_rank(logits, 2, "softmax_cross_entropy logits")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        _accumulate(logits, d * (g / n))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward,
                   "softmax-cross-entropy")


# dispatch -----------------------------------------------------------------

def _sort_expand(*args, **kwargs):
    from .sorter import sort_expand
    return sort_expand(*args, **kwargs)


OPS = {
    "add": add,
    "mul": mul,
    "mul-scalar": mul_scalar,
    "matmul": matmul,
    "conv2d-strided": conv2d_strided,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "reshape": reshape,
    "sum": tensor_sum,
    "softmax-cross-entropy": softmax_cross_entropy,
    "sort-expand": _sort_expand,
}


def forward_op(kind, *inputs, **params):
    """Apply the op named ``kind``; e.g. ``forward_op("relu", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown op kind {kind!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **params)
