import itertools

import numpy as np
import pytest

from helpers import draw_stable_input, plans
from oracles import finite_difference, global_sorted_expand, max_rel_error
from sortconv import (
    ConfigurationError, ContractError, Parameter, Tensor, build_sample_plan, build_sort_plan,
    sample_neighborhood, sort_expand, sort_expand_backward, sort_neighborhood, sorted_conv2d,
)
from sortconv.sampler import pad_margin
from sortconv.sorter import expand_array, network_pairs
from sortconv.tensor import conv2d_strided, mul, tensor_sum

COMBOS = list(itertools.product(["square", "polar"], ["global", "ring"]))


def reference_expand(x, sp, so):
    """Per-pixel path: scalar sampling then stable argsort per group."""
    n_b, n_c, h, w = x.shape
    k = sp.size
    m = pad_margin(sp.n)
    out = np.zeros((n_b, n_c, h * k, w * k))
    perms = np.zeros((n_b, n_c, h, w, k * k), dtype=np.int64)
    for b in range(n_b):
        for c in range(n_c):
            padded = np.pad(x[b, c], m)
            for y in range(h):
                for xx in range(w):
                    vals = sample_neighborhood(padded, y + m, xx + m, sp)
                    block, perm = sort_neighborhood(vals, so)
                    out[b, c, y * k:(y + 1) * k, xx * k:(xx + 1) * k] = block.reshape(k, k)
                    perms[b, c, y, xx] = perm
    return out, perms


class TestSortNeighborhood:
    def test_global_example(self):
        sp, so = plans(1, "square", "global")
        block, _ = sort_neighborhood(np.array([5, 1, 3, 2, 9, 4, 7, 6, 8.0]), so)
        np.testing.assert_array_equal(block, np.arange(1, 10))

    def test_ring_example(self):
        sp, so = plans(1, "square", "ring")
        # Ring scan (-1,-1),(-1,0),(-1,1),(0,-1),(0,1),(1,-1),(1,0),(1,1) = 5,1,3,2,4,7,6,8.
        values = np.array([5, 1, 3, 2, 9, 4, 7, 6, 8.0])
        block, _ = sort_neighborhood(values, so)
        np.testing.assert_array_equal(block, [1, 2, 3, 4, 9, 5, 6, 7, 8])

    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_sorted_input_identity(self, sampling, sorting):
        sp, so = plans(2, sampling, sorting)
        vals = np.empty(25)
        for group, cells in zip(so.groups, so.placement):
            vals[group] = np.arange(len(group)) + 100 * cells.min()
        block, perm = sort_neighborhood(vals, so)
        for group, cells in zip(so.groups, so.placement):
            np.testing.assert_array_equal(perm[cells], group)

    def test_ties_keep_sample_order(self):
        sp, so = plans(1, "polar", "global")
        _, perm = sort_neighborhood(np.zeros(9), so)
        np.testing.assert_array_equal(perm, np.arange(9))

    def test_length_mismatch(self):
        _, so = plans(1, "square", "global")
        with pytest.raises(ContractError, match="9"):
            sort_neighborhood(np.zeros(8), so)


class TestSortPlan:
    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("sampling", ["square", "polar"])
    def test_ring_groups(self, n, sampling):
        sp, so = plans(n, sampling, "ring")
        assert [len(g) for g in so.groups] == [1] + [8 * r for r in range(1, n + 1)]
        centre = (2 * n + 1) ** 2 // 2
        assert so.placement[0].tolist() == [centre]

    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_bijections(self, n, sampling, sorting):
        _, so = plans(n, sampling, sorting)
        size = (2 * n + 1) ** 2
        assert sorted(np.concatenate(so.groups).tolist()) == list(range(size))
        assert sorted(np.concatenate(so.placement).tolist()) == list(range(size))

    def test_global_row_major(self):
        _, so = plans(2, "polar", "global")
        np.testing.assert_array_equal(so.placement[0], np.arange(25))

    def test_polar_ring_cells_by_angle(self):
        # Ring 1 of a 3x3 block from east, counterclockwise in (row, col) with +y down.
        _, so = plans(1, "polar", "ring")
        assert so.placement[1].tolist() == [5, 8, 7, 6, 3, 0, 1, 2]

    def test_square_ring_cells_row_major(self):
        _, so = plans(1, "square", "ring")
        assert so.placement[1].tolist() == [0, 1, 2, 3, 5, 6, 7, 8]

    @pytest.mark.parametrize("size", [1, 2, 8, 9, 16, 24, 25, 49])
    def test_network_sorts_all_binary_inputs(self, size):
        pairs = network_pairs(size)
        cases = itertools.product([0, 1], repeat=size) if size <= 16 else (
            np.random.default_rng(size).integers(0, 2, size) for _ in range(4000))
        for bits in cases:
            v = list(bits)
            for a, b in pairs:
                if v[b] < v[a]:
                    v[a], v[b] = v[b], v[a]
            assert v == sorted(v)


class TestSortExpand:
    def test_constant(self):
        sp, so = plans(2, "polar", "ring")
        out = sort_expand(Tensor(np.full((1, 2, 9, 9), 0.3)), sp, so)
        assert out.shape == (1, 2, 45, 45)
        # Pixels within n of the border read zero padding; pixels 2..6 do not.
        np.testing.assert_allclose(out.data[:, :, 10:35, 10:35], 0.3, atol=1e-15)

    def test_constant_everywhere_with_full_interior(self):
        sp, so = plans(1, "square", "global")
        x = np.full((1, 1, 5, 5), 0.8)
        out = sort_expand(Tensor(x), sp, so).data
        np.testing.assert_array_equal(out[0, 0, 3:12, 3:12], 0.8)

    def test_single_pixel(self):
        sp, so = plans(1, "square", "global")
        out = sort_expand(Tensor(np.array([[[[0.6]]]])), sp, so).data
        np.testing.assert_array_equal(out.ravel(), [0, 0, 0, 0, 0, 0, 0, 0, 0.6])

    @pytest.mark.parametrize("n", [1, 2])
    def test_brute_force_oracle(self, rng, n):
        img = rng.uniform(size=(5, 5))
        sp, so = plans(n, "square", "global")
        out = sort_expand(Tensor(img[None, None]), sp, so).data[0, 0]
        np.testing.assert_array_equal(out, global_sorted_expand(img, n))

    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_kernel_matches_reference(self, rng, n, sampling, sorting):
        x = rng.normal(size=(2, 3, 5, 6))
        x[0, 0, 1:3, 1:3] = 0.25  # some ties
        sp, so = plans(n, sampling, sorting, phase=0.2)
        canvas, record = expand_array(x, sp, so)
        ref, perms = reference_expand(x, sp, so)
        np.testing.assert_array_equal(canvas, ref)
        k = sp.size
        src = record.source.reshape(2, 3, 5, 6, k * k)
        np.testing.assert_array_equal(src, perms)

    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_float32_matches_float64_reference(self, rng, sampling, sorting):
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        sp, so = plans(1, sampling, sorting)
        canvas, _ = expand_array(x, sp, so)
        ref, _ = reference_expand(x.astype(np.float64), sp, so)
        assert canvas.dtype == np.float32
        np.testing.assert_allclose(canvas, ref, atol=1e-6)

    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_monotone_and_permutation(self, rng, sampling, sorting):
        x = rng.normal(size=(2, 2, 6, 6))
        sp, so = plans(2, sampling, sorting)
        canvas, record = expand_array(x, sp, so)
        k = sp.size
        blocks = canvas.reshape(2, 2, 6, k, 6, k).transpose(0, 1, 2, 4, 3, 5).reshape(-1, k * k)
        for cells in so.placement:
            assert (np.diff(blocks[:, cells], axis=1) >= 0).all()
        src = record.source.reshape(-1, k * k).astype(np.int64)
        np.testing.assert_array_equal(np.sort(src, axis=1), np.broadcast_to(np.arange(k * k),
                                                                             src.shape))

    @pytest.mark.parametrize("sorting", ["global", "ring"])
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_square_rot90_blockwise(self, rng, sorting, n):
        x = rng.normal(size=(1, 2, 7, 7))
        sp, so = plans(n, "square", sorting)
        k = sp.size
        a = expand_array(x, sp, so)[0].reshape(1, 2, 7, k, 7, k)
        b = expand_array(np.rot90(x, 1, axes=(2, 3)).copy(), sp, so)[0].reshape(1, 2, 7, k, 7, k)
        # Block at the rotated position equals the original block.
        a_blocks = a.transpose(0, 1, 2, 4, 3, 5)
        b_blocks = b.transpose(0, 1, 2, 4, 3, 5)
        np.testing.assert_array_equal(np.rot90(a_blocks, 1, axes=(2, 3)), b_blocks)

    def test_plan_mismatch(self):
        sp1, _ = plans(1, "square", "global")
        _, so2 = plans(2, "square", "global")
        with pytest.raises(ConfigurationError):
            sort_expand(Tensor(np.zeros((1, 1, 3, 3))), sp1, so2)
        _, so_polar = plans(1, "polar", "global")
        with pytest.raises(ConfigurationError):
            sort_expand(Tensor(np.zeros((1, 1, 3, 3))), sp1, so_polar)

    def test_large_block_uses_wide_index(self, rng):
        sp, so = plans(8, "square", "global")  # 289 cells
        canvas, record = expand_array(rng.normal(size=(1, 1, 3, 3)), sp, so)
        assert record.source.dtype == np.int32
        ref, _ = reference_expand(rng.normal(size=(1, 1, 3, 3)) * 0, sp, so)
        assert canvas.shape == ref.shape


class TestBackward:
    @pytest.mark.parametrize("sorting", ["global", "ring"])
    def test_square_mass_conservation(self, rng, sorting):
        x = rng.normal(size=(1, 1, 6, 6))
        sp, so = plans(1, "square", sorting)
        canvas, record = expand_array(x, sp, so)
        g = rng.normal(size=canvas.shape)
        gx = sort_expand_backward(g, record)
        # Mass routed to padding is dropped: compare with the mass of cells
        # whose source sample lies inside the image.
        k = sp.size
        src = record.source.reshape(6, 6, k * k).astype(int)
        blocks = g.reshape(6, k, 6, k).transpose(0, 2, 1, 3).reshape(6, 6, k * k)
        offs = sp.offsets.astype(int)
        inside = 0.0
        for y in range(6):
            for x_ in range(6):
                for cell in range(k * k):
                    dy, dx = offs[src[y, x_, cell]]
                    if 0 <= y + dy < 6 and 0 <= x_ + dx < 6:
                        inside += blocks[y, x_, cell]
        assert gx.sum() == pytest.approx(inside, abs=1e-12)

    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_all_equal_input_conserves_mass(self, sampling, sorting):
        sp, so = plans(1, sampling, sorting)
        x = np.full((1, 1, 7, 7), 0.5)
        canvas, record = expand_array(x, sp, so)
        g = np.ones(canvas.shape)
        g_zero_pad = sort_expand_backward(g, record)
        ref, _ = expand_array(np.ones((1, 1, 7, 7)), sp, so)
        # With unit upstream gradient each pixel collects its total sampling weight,
        # which is the same linear map applied to an all-ones image: sum of canvas.
        assert g_zero_pad.sum() == pytest.approx(ref.sum(), abs=1e-10)

    def test_shape_mismatch(self, rng):
        sp, so = plans(1, "square", "global")
        _, record = expand_array(rng.normal(size=(1, 1, 4, 4)), sp, so)
        with pytest.raises(ContractError, match="shape"):
            sort_expand_backward(np.zeros((1, 1, 12, 13)), record)

    @pytest.mark.parametrize("rep", range(20))
    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_finite_differences(self, rep, sampling, sorting):
        rng = np.random.default_rng(rep)
        n = 1 + rep % 2
        sp, so = plans(n, sampling, sorting, phase=0.1 * rep)
        x = draw_stable_input(rng, (1, 2, 4, 4), sp, so)
        t = Tensor(x.copy(), requires_grad=True)
        out = sort_expand(t, sp, so)
        g = rng.normal(size=out.shape)
        tensor_sum(mul(out, Tensor(g))).backward()

        def loss():
            return float((expand_array(x, sp, so)[0] * g).sum())

        (num,) = finite_difference(loss, [x], step=1e-5)
        assert max_rel_error(t.grad, num) < 1e-4


class TestFused:
    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("sampling,sorting", COMBOS)
    def test_matches_canvas_composition(self, rng, n, sampling, sorting):
        sp, so = plans(n, sampling, sorting)
        k = sp.size
        x = Tensor(rng.normal(size=(2, 3, 5, 4)), requires_grad=True)
        w = Parameter(rng.normal(size=(4, 3, k, k)))
        b = Parameter(rng.normal(size=4))
        ref = conv2d_strided(sort_expand(x, sp, so), w, b, stride=k, exact=True)
        g = Tensor(rng.normal(size=ref.shape))
        tensor_sum(mul(ref, g)).backward()
        grads = [x.grad.copy(), w.grad.copy(), b.grad.copy()]
        x.grad = w.grad = b.grad = None
        out = sorted_conv2d(x, w, b, sp, so)
        tensor_sum(mul(out, g)).backward()
        np.testing.assert_array_equal(out.data, ref.data)
        for got, expect in zip([x.grad, w.grad, b.grad], grads):
            np.testing.assert_array_equal(got, expect)
