"""Sorting of sampled neighbourhoods and the block-expansion used by SC layers.

Every pixel of every channel is processed on its own. Its neighbourhood
samples (see :mod:`sortconv.sampler`) are sorted ascending, either all
together (``global``) or ring by ring (``ring``). The sorted values are then
written into a ``(2n+1) x (2n+1)`` block, and the blocks are tiled into a
canvas that is ``2n+1`` times larger in both directions. A convolution with
stride ``2n+1`` and no padding over that canvas gives back an ``h x w`` map.

Channels are never mixed: each channel's neighbourhood is sorted
independently of the others.
"""
import math

import numpy as np
from numba import njit

from .errors import ConfigurationError, ContractError, ShapeError
from .sampler import POLAR, pad_margin
from .tensor import Tensor, _accumulate, _conv_output, _require_rank, _result

GLOBAL = "global"
RING = "ring"

_SORTING_ALIASES = {"global": GLOBAL, "gs": GLOBAL, "ring": RING, "rs": RING}


def sorting_mode(mode):
    """Normalise ``'global'``/``'GS'``/``'ring'``/``'RS'`` to a canonical name."""
    try:
        return _SORTING_ALIASES[str(mode).lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown sorting mode {mode!r}; use 'global' or 'ring'") from None


class SortPlan:
    """Partition of the sample slots into sort groups and their destinations.

    ``groups[g]`` holds sample indices (plan order) sorted together and
    ``placement[g]`` the row-major block cells that receive the ascending
    values, in order.
    """

    def __init__(self, n, mode, sampling, groups, placement):
        self.n = n
        self.mode = mode
        self.sampling = sampling
        self.groups = tuple(np.asarray(g, dtype=np.int64) for g in groups)
        self.placement = tuple(np.asarray(p, dtype=np.int64) for p in placement)
        size = (2 * n + 1) ** 2
        members = np.concatenate(self.groups)
        slots = np.concatenate(self.placement)
        if not (np.array_equal(np.sort(members), np.arange(size))
                and np.array_equal(np.sort(slots), np.arange(size))):
            raise ConfigurationError("sort groups/placement must be bijections on the block")
        if any(len(g) != len(p) for g, p in zip(self.groups, self.placement)):
            raise ConfigurationError("each sort group needs as many destination cells")
        self.group_ptr = np.cumsum([0] + [len(g) for g in self.groups]).astype(np.int64)
        self.members = members
        self.slots = slots
        cmp_a, cmp_b, cmp_ptr = [], [], [0]
        for g in self.groups:
            for a, b in network_pairs(len(g)):
                cmp_a.append(a)
                cmp_b.append(b)
            cmp_ptr.append(len(cmp_a))
        self.cmp_a = np.array(cmp_a, dtype=np.int64)
        self.cmp_b = np.array(cmp_b, dtype=np.int64)
        self.cmp_ptr = np.array(cmp_ptr, dtype=np.int64)

    def __repr__(self):
        return f"SortPlan(n={self.n}, mode={self.mode!r}, sampling={self.sampling!r})"


def _ring_cells(n, r, by_angle):
    """Block cells (row-major flat indices) whose Chebyshev radius is ``r``."""
    size = 2 * n + 1
    cells = [(dy, dx) for dy in range(-n, n + 1) for dx in range(-n, n + 1)
             if max(abs(dy), abs(dx)) == r]
    if by_angle:
        cells.sort(key=lambda c: math.atan2(c[0], c[1]) % (2 * math.pi))
    return [(dy + n) * size + (dx + n) for dy, dx in cells]


def build_sort_plan(sample_plan, mode="ring"):
    """Sort plan matching ``sample_plan``.

    Global sorting places the full ascending sequence row-major over the
    block. Ring sorting keeps ring ``r``'s values on the block's Chebyshev
    ring ``r``: row-major scan for square sampling, ascending angle for polar
    sampling. The centre is ring 0 and never moves.
    """
    mode = sorting_mode(mode)
    n = sample_plan.n
    size = (2 * n + 1) ** 2
    if mode == GLOBAL:
        groups, placement = [np.arange(size)], [np.arange(size)]
    else:
        by_angle = sample_plan.mode == POLAR
        groups, placement = [], []
        for r in range(n + 1):
            idx = [i for i, p in enumerate(sample_plan.points) if p.ring_index == r]
            idx.sort(key=lambda i: sample_plan.points[i].within_ring_order)
            groups.append(idx)
            placement.append(_ring_cells(n, r, by_angle))
    return SortPlan(n, mode, sample_plan.mode, groups, placement)


def sort_neighborhood(values, plan):
    """Sort one neighbourhood's samples per ``plan``.

    Returns ``(block, permutation)``: ``block[cell]`` is the value placed at
    row-major cell ``cell`` and ``permutation[cell]`` the sample index it
    came from. Ties keep sample order.
    """
    values = np.asarray(values)
    size = (2 * plan.n + 1) ** 2
    if values.shape != (size,):
        raise ContractError(f"expected {size} neighbourhood values, got shape {values.shape}")
    block = np.empty_like(values)
    perm = np.empty(size, dtype=np.int64)
    for group, cells in zip(plan.groups, plan.placement):
        order = np.argsort(values[group], kind="stable")
        block[cells] = values[group][order]
        perm[cells] = group[order]
    return block, perm


# batched kernels ----------------------------------------------------------

def network_pairs(size):
    """Comparators of Batcher's odd-even merge sort for ``size`` inputs."""
    pairs = []
    span = 1
    while span < size:
        span *= 2
    p = 1
    while p < span:
        k = p
        while k >= 1:
            for j in range(k % p, span - k, 2 * k):
                for i in range(min(k, span - j - k)):
                    a, b = i + j, i + j + k
                    if a // (2 * p) == b // (2 * p) and b < size:
                        pairs.append((a, b))
            k //= 2
        p *= 2
    return pairs


# The kernels work one image row at a time with samples laid out
# (point, column), so every comparator is a branch-free loop over columns.
# Comparators order by (value, sample index), which reproduces a stable sort.

@njit(cache=True, nogil=True)
def _expand_forward(xp, h, w, wp, n_corner, corner_off, corner_wt, group_ptr, members,
                    slots, cmp_ptr, cmp_a, cmp_b, out, base, slot_off, row_step, col_step, src):
    # xp: (planes, hp*wp) padded input; src: (planes, h*w*cells) source indices.
    # Cell `slot` of pixel (y, x) of plane p goes to flat position
    # base[p] + slot_off[slot] + y*row_step + x*col_step of `out`.
    n_planes = xp.shape[0]
    n_pts = n_corner.shape[0]
    vals = np.empty((n_pts, w), dtype=xp.dtype)
    bv = np.empty((n_pts, w), dtype=xp.dtype)
    bi = np.empty((n_pts, w), dtype=np.int32)
    n_groups = group_ptr.shape[0] - 1
    for plane in range(n_planes):
        img = xp[plane]
        b0 = base[plane]
        dsrc = src[plane]
        for y in range(h):
            row = y * wp
            for p in range(n_pts):
                off = row + corner_off[p, 0]
                wt = corner_wt[p, 0]
                for x in range(w):
                    vals[p, x] = wt * img[off + x]
                for j in range(1, n_corner[p]):
                    off = row + corner_off[p, j]
                    wt = corner_wt[p, j]
                    for x in range(w):
                        vals[p, x] += wt * img[off + x]
            for g in range(n_groups):
                start = group_ptr[g]
                cnt = group_ptr[g + 1] - start
                for t in range(cnt):
                    mem = members[start + t]
                    for x in range(w):
                        bv[t, x] = vals[mem, x]
                        bi[t, x] = mem
                for c in range(cmp_ptr[g], cmp_ptr[g + 1]):
                    i = cmp_a[c]
                    j = cmp_b[c]
                    for x in range(w):
                        va = bv[i, x]
                        vb = bv[j, x]
                        ia = bi[i, x]
                        ib = bi[j, x]
                        swap = (vb < va) | ((vb == va) & (ib < ia))
                        bv[i, x] = vb if swap else va
                        bv[j, x] = va if swap else vb
                        bi[i, x] = ib if swap else ia
                        bi[j, x] = ia if swap else ib
                for t in range(cnt):
                    slot = slots[start + t]
                    cpos = b0 + slot_off[slot] + y * row_step
                    for x in range(w):
                        out[cpos + x * col_step] = bv[t, x]
                        dsrc[(y * w + x) * n_pts + slot] = bi[t, x]


@njit(cache=True, nogil=True)
def _expand_backward(gout, base, slot_off, row_step, col_step, src, h, w, wp, n_corner,
                     corner_off, corner_wt, gxp):
    # Inverse of _expand_forward; gout uses the same flat layout as `out`.
    n_planes = gxp.shape[0]
    n_pts = n_corner.shape[0]
    gs = np.empty((n_pts, w), dtype=gout.dtype)
    for plane in range(n_planes):
        b0 = base[plane]
        s_in = src[plane]
        acc = gxp[plane]
        for y in range(h):
            row = y * wp
            for x in range(w):
                blk = (y * w + x) * n_pts
                pos = b0 + y * row_step + x * col_step
                for cell in range(n_pts):
                    gs[s_in[blk + cell], x] = gout[pos + slot_off[cell]]
            for p in range(n_pts):
                for j in range(n_corner[p]):
                    off = row + corner_off[p, j]
                    wt = corner_wt[p, j]
                    for x in range(w):
                        acc[off + x] += wt * gs[p, x]


class PermutationRecord:
    """Everything the backward pass of :func:`sort_expand` needs.

    ``source`` has shape ``(N*C, h*w*(2n+1)**2)``; entry
    ``[b*C + c, (y*w + x)*(2n+1)**2 + cell]`` is the sample index whose value
    landed on block cell ``cell`` of pixel ``(y, x)``.
    """

    def __init__(self, source, sample_plan, input_shape, dtype):
        self.source = source
        self.sample_plan = sample_plan
        self.input_shape = tuple(input_shape)
        self.dtype = dtype

    @property
    def expanded_shape(self):
        n, c, h, w = self.input_shape
        k = self.sample_plan.size
        return (n, c, h * k, w * k)


def _kernel_geometry(sample_plan, padded_width, dtype):
    """Non-zero bilinear corners as flat offsets from the window's top-left."""
    m = pad_margin(sample_plan.n)
    n_pts = len(sample_plan)
    n_corner = np.zeros(n_pts, dtype=np.int64)
    corner_off = np.zeros((n_pts, 4), dtype=np.int64)
    corner_wt = np.zeros((n_pts, 4), dtype=dtype)
    for p in range(n_pts):
        for (dy, dx), wt in zip(sample_plan.corner_offsets[p], sample_plan.corner_weights[p]):
            if wt != 0:
                j = n_corner[p]
                corner_off[p, j] = (dy + m) * padded_width + (dx + m)
                corner_wt[p, j] = wt
                n_corner[p] += 1
    return n_corner, corner_off, corner_wt


def _canvas_layout(n_b, n_c, h, w, k):
    planes = np.arange(n_b * n_c, dtype=np.int64)
    cells = np.arange(k * k, dtype=np.int64)
    return (planes * (h * k * w * k), (cells // k) * (w * k) + cells % k, k * w * k, k)


def _column_layout(n_b, n_c, h, w, k):
    # Channel-major im2col matrix (C*k*k, N*h*w) of the canvas at stride k.
    npix = n_b * h * w
    b, c = np.divmod(np.arange(n_b * n_c, dtype=np.int64), n_c)
    return (c * (k * k * npix) + b * (h * w), np.arange(k * k, dtype=np.int64) * npix, w, 1)


def _check_plans(sample_plan, sort_plan):
    if sort_plan.n != sample_plan.n or sort_plan.sampling != sample_plan.mode:
        raise ConfigurationError(
            f"sort plan {sort_plan!r} was not built for sample plan {sample_plan!r}")


def _expand(x, sample_plan, sort_plan, layout):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"sort_expand input must be N x C x h x w, got {x.shape}")
    n_b, n_c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"sort_expand needs non-empty spatial extents, got {h}x{w}")
    k = sample_plan.size
    m = pad_margin(sample_plan.n)
    wp = w + 2 * m
    xp = np.pad(x, ((0, 0), (0, 0), (m, m), (m, m))).reshape(n_b * n_c, -1)
    out = np.empty(n_b * n_c * h * w * k * k, dtype=x.dtype)
    src_dtype = np.uint8 if k * k <= 256 else np.int32
    src = np.empty((n_b * n_c, h * w * k * k), dtype=src_dtype)
    n_corner, corner_off, corner_wt = _kernel_geometry(sample_plan, wp, x.dtype)
    _expand_forward(xp, h, w, wp, n_corner, corner_off, corner_wt, sort_plan.group_ptr,
                    sort_plan.members, sort_plan.slots, sort_plan.cmp_ptr, sort_plan.cmp_a,
                    sort_plan.cmp_b, out, *layout(n_b, n_c, h, w, k), src)
    return out, PermutationRecord(src, sample_plan, x.shape, x.dtype)


def _expand_grad(gout, record, layout):
    n_b, n_c, h, w = record.input_shape
    plan = record.sample_plan
    k = plan.size
    m = pad_margin(plan.n)
    hp, wp = h + 2 * m, w + 2 * m
    gxp = np.zeros((n_b * n_c, hp * wp), dtype=gout.dtype)
    n_corner, corner_off, corner_wt = _kernel_geometry(plan, wp, gout.dtype)
    _expand_backward(np.ascontiguousarray(gout).reshape(-1), *layout(n_b, n_c, h, w, k),
                     record.source, h, w, wp, n_corner, corner_off, corner_wt, gxp)
    return gxp.reshape(n_b, n_c, hp, wp)[:, :, m:m + h, m:m + w]


def expand_array(x, sample_plan, sort_plan):
    """ndarray version of :func:`sort_expand`; returns ``(canvas, record)``."""
    _check_plans(sample_plan, sort_plan)
    out, record = _expand(x, sample_plan, sort_plan, _canvas_layout)
    return out.reshape(record.expanded_shape), record


def sort_expand_backward(upstream_grad, record):
    """Route a canvas gradient back onto the input pixels.

    Each canvas cell's gradient goes to the sample it came from and is split
    over that sample's bilinear corners; contributions landing in the zero
    padding are discarded.
    """
    g = np.asarray(upstream_grad.data if isinstance(upstream_grad, Tensor) else upstream_grad)
    if g.shape != record.expanded_shape:
        raise ContractError(
            f"upstream gradient shape {g.shape} != expanded shape {record.expanded_shape}")
    return _expand_grad(g, record, _canvas_layout)


def sort_expand(x, sample_plan, sort_plan):
    """Sort every pixel's neighbourhood and tile the blocks into a canvas.

    N x C x h x w -> N x C x (2n+1)h x (2n+1)w. Adds no parameters.
    """
    _require_rank(x, 4, "sort_expand input")
    data, record = expand_array(x.data, sample_plan, sort_plan)

    def backward(g):
        _accumulate(x, sort_expand_backward(g, record))

    out = _result(data, (x,), backward, "sort-expand")
    out.record = record
    return out


def sorted_conv2d(x, weight, bias, sample_plan, sort_plan):
    """Fused ``conv2d_strided(sort_expand(x), weight, bias, stride=k)``.

    The sorted blocks are written straight into the convolution's column
    matrix instead of a canvas, which skips two full-size copies. Results
    are identical to the unfused composition.
    """
    _require_rank(x, 4, "sorted_conv2d input")
    _check_plans(sample_plan, sort_plan)
    n_b, n_c, h, w = x.shape
    k = sample_plan.size
    f = weight.shape[0]
    if weight.shape != (f, n_c, k, k):
        raise ShapeError(f"sorted_conv2d: kernel shape {weight.shape} != ({f}, {n_c}, {k}, {k})")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"sorted_conv2d: bias shape {bias.shape} != ({f},)")
    cols, record = _expand(x.data, sample_plan, sort_plan, _column_layout)
    cols = cols.reshape(n_c * k * k, n_b * h * w)
    wmat = weight.data.reshape(f, -1)
    data = _conv_output(wmat, cols, bias, n_b, h, w)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        if weight.requires_grad:
            _accumulate(weight, (gmat @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=1))
        if x.requires_grad:
            _accumulate(x, _expand_grad(wmat.T @ gmat, record, _column_layout))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward, "sorted-conv2d")
