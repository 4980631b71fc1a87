"""
Tests for core.attention
========================

- 分解核积分与逐点暴力求和的对照 (随机形状、维数与 head 数)
- 分解注意力 / 线性注意力的手写反向与中心差分对照
- 乘加计数的闭式表达
- 核导出文件
"""

import numpy as np
import pytest

from core.attention import (
    AttentionLayerParams,
    AxialKernelSet,
    LinearAttentionParams,
    attention_block,
    attention_update,
    axial_project,
    brute_force_kernel_integral,
    build_axial_kernels,
    compute_axial_kernels,
    export_kernels,
    factorized_attention,
    factorized_attention_premix,
    flatten_field,
    full_kernel_matrix,
    linear_attention,
    linear_attention_core,
)
from core.errors import (
    ConfigurationError,
    ContractViolationError,
    OracleScaleError,
    ResourceBudgetError,
    TruncatedFileError,
)
from core.spectrum import load_kernel_dump
from core.tensor import FieldTensor
from utils.counters import op_counter

from .helpers import finite_difference, relative_error, sample_indices


def _random_config(rng):
    n_axes = int(rng.integers(1, 4))
    upper = {1: 13, 2: 8, 3: 5}[n_axes]
    shape = tuple(int(s) for s in rng.integers(2, upper, size=n_axes))
    heads = int(rng.integers(1, 3))
    width = heads * int(rng.integers(1, 3))
    kernel_dim = 2 * int(rng.integers(1, 3))
    return shape, heads, width, kernel_dim


def _layer(rng, n_axes, width, heads, kernel_dim, scale=None):
    params = AttentionLayerParams("test.att", n_axes, width, heads, kernel_dim, rng)
    if scale is not None:
        for p in params.params():
            p.value[...] = rng.standard_normal(p.shape) * scale
    return params


# =============================================================================
# Brute-force oracle
# =============================================================================


class TestKernelIntegralOracle:
    """V ×₁ A^(1) ⋯ ×ₙ A^(n) 与逐点直接求和一致。"""

    def test_random_configurations(self, rng):
        for _ in range(200):
            shape, heads, width, kernel_dim = _random_config(rng)
            params = _layer(rng, len(shape), width, heads, kernel_dim)
            u = FieldTensor(rng.standard_normal(shape + (width,)))
            premix, v, kernels = factorized_attention_premix(u, params)
            for h in range(heads):
                sl = params.head_slice(h)
                expected = brute_force_kernel_integral(FieldTensor(v.data[..., sl]), kernels, h)
                scale = max(1.0, float(np.max(np.abs(expected.data))))
                np.testing.assert_allclose(
                    premix.data[..., sl], expected.data, rtol=1e-10, atol=1e-12 * scale,
                    err_msg=f"shape={shape} heads={heads} width={width} d_k={kernel_dim}",
                )

    def test_identity_kernels_return_values(self, rng):
        params = _layer(rng, 2, 4, 2, 2)
        u = FieldTensor(rng.standard_normal((5, 3, 4)))
        premix, v, kernels = factorized_attention_premix(u, params, identity_kernels=True)
        np.testing.assert_allclose(premix.data, v.data, atol=1e-15)
        assert kernels.weights == [1.0 / 5, 1.0 / 3]

    def test_oracle_refuses_large_grids(self):
        v = FieldTensor.zeros((101, 100), 1)
        with pytest.raises(OracleScaleError):
            brute_force_kernel_integral(v, AxialKernelSet.identity((101, 100), 1))

    def test_oracle_checks_kernel_shapes(self):
        v = FieldTensor.zeros((3, 4), 1)
        with pytest.raises(ContractViolationError):
            brute_force_kernel_integral(v, AxialKernelSet.identity((3, 5), 1))


class TestAxialKernels:
    def test_kernel_is_scaled_query_key_product(self, rng):
        params = _layer(rng, 2, 4, 2, 4)
        u = FieldTensor(rng.standard_normal((6, 5, 4)))
        kernels = compute_axial_kernels(u, params)
        assert kernels.n_axes == 2 and kernels.n_heads == 2
        for m, size in enumerate((6, 5)):
            for h in range(2):
                q, k = kernels.queries[m][h], kernels.keys[m][h]
                np.testing.assert_allclose(kernels.matrices[m][h], q @ k.T / size, atol=1e-14)
                assert np.linalg.matrix_rank(kernels.matrices[m][h]) <= 4

    def test_zero_queries_give_zero_kernels(self, rng):
        params = _layer(rng, 2, 4, 1, 2)
        for per_axis in params.query:
            for p in per_axis:
                p.value[...] = 0.0
        kernels = compute_axial_kernels(FieldTensor(rng.standard_normal((4, 4, 4))), params)
        for per_axis in kernels.matrices:
            assert not np.any(per_axis[0])

    def test_shape_contract(self, rng):
        params = _layer(rng, 2, 4, 2, 2)
        with pytest.raises(ContractViolationError):
            factorized_attention(FieldTensor(rng.standard_normal((4, 4, 6))), params)
        with pytest.raises(ContractViolationError):
            factorized_attention(FieldTensor(rng.standard_normal((4, 4))), params)

    def test_width_must_split_into_heads(self, rng):
        with pytest.raises(ConfigurationError):
            AttentionLayerParams("bad", 2, 6, 4, 2, rng)


def _rotate(row: np.ndarray, x: float, mesh_weight: float = 64.0) -> np.ndarray:
    """逐对旋转一行，角度 λ·x·10000^(−2l/d)。"""
    d = row.shape[0]
    out = np.empty(d)
    for l in range(d // 2):
        angle = mesh_weight * x * 10000.0 ** (-2.0 * l / d)
        c, s = np.cos(angle), np.sin(angle)
        out[2 * l] = row[2 * l] * c - row[2 * l + 1] * s
        out[2 * l + 1] = row[2 * l] * s + row[2 * l + 1] * c
    return out


def _projections(u, params):
    return [axial_project(u, params.projector, m)[0] for m in range(params.n_axes)]


class TestKernelProperties:
    def test_entries_match_rotated_dot_products(self, rng):
        params = _layer(rng, 2, 4, 2, 4)
        u = FieldTensor(rng.standard_normal((5, 4, 4)))
        phis = _projections(u, params)
        kernels, _ = build_axial_kernels(phis, params)
        for m, phi in enumerate(phis):
            size = phi.rows
            for h in range(params.heads):
                phi_h = phi.data[:, params.head_slice(h)]
                q = phi_h @ params.query[m][h].value
                k = phi_h @ params.key[m][h].value
                for i in range(size):
                    for j in range(size):
                        expected = _rotate(q[i], i / size) @ _rotate(k[j], j / size) / size
                        assert abs(kernels.matrices[m][h][i, j] - expected) < 1e-12

    def test_kernels_are_shift_invariant(self, rng):
        params = _layer(rng, 2, 4, 2, 4)
        u = FieldTensor(rng.standard_normal((6, 5, 4)))
        phis = _projections(u, params)
        base = [np.arange(6) / 6.0, np.arange(5) / 5.0]
        original, _ = build_axial_kernels(phis, params, base)
        shifted, _ = build_axial_kernels(phis, params, [xs + 0.37 for xs in base])
        for m in range(2):
            for h in range(2):
                np.testing.assert_allclose(
                    shifted.matrices[m][h], original.matrices[m][h], rtol=0, atol=1e-10
                )

    def test_unit_extent_axis(self, rng):
        params = _layer(rng, 2, 4, 2, 2)
        u = FieldTensor(rng.standard_normal((1, 5, 4)))
        premix, v, kernels = factorized_attention_premix(u, params)
        phi = _projections(u, params)[0].data
        for h in range(params.heads):
            sl = params.head_slice(h)
            a = kernels.matrices[0][h]
            assert a.shape == (1, 1)
            # x = 0 时旋转是恒等变换，w = 1
            q = phi[:, sl] @ params.query[0][h].value
            k = phi[:, sl] @ params.key[0][h].value
            np.testing.assert_allclose(a, q @ k.T, rtol=1e-12)
            expected = brute_force_kernel_integral(FieldTensor(v.data[..., sl]), kernels, h)
            np.testing.assert_allclose(premix.data[..., sl], expected.data, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("path", ["associative", "direct"])
    def test_one_dimensional_case_is_linear_attention(self, rng, path):
        params = _layer(rng, 1, 4, 2, 4)
        u = FieldTensor(rng.standard_normal((9, 4)))
        premix, v, kernels = factorized_attention_premix(u, params)
        for h in range(params.heads):
            sl = params.head_slice(h)
            z = linear_attention_core(
                kernels.queries[0][h], kernels.keys[0][h], v.data[:, sl], 1.0 / 9, path
            )
            np.testing.assert_allclose(premix.data[:, sl], z, rtol=1e-12, atol=1e-12)

    def test_oracle_independent_of_summation_order(self, rng):
        params = _layer(rng, 3, 2, 1, 2)
        u = FieldTensor(rng.standard_normal((3, 4, 2, 2)))
        premix, v, kernels = factorized_attention_premix(u, params)
        mats = kernels.for_head(0)
        shape = v.spatial_shape
        points = list(np.ndindex(*shape))
        order = rng.permutation(len(points))
        expected = np.zeros(v.shape)
        for target in reversed(points):
            for s in order:
                source = points[s]
                weight = np.prod([mats[m][target[m], source[m]] for m in range(3)])
                expected[target] += weight * v.data[source]
        np.testing.assert_allclose(premix.data, expected, rtol=1e-10, atol=1e-12)
        oracle = brute_force_kernel_integral(v, kernels, 0)
        np.testing.assert_allclose(oracle.data, expected, rtol=1e-10, atol=1e-12)


# =============================================================================
# Gradients
# =============================================================================


class TestFactorizedGradients:
    """手写反向与中心差分的相对误差。"""

    @pytest.mark.parametrize(
        "shape, width, heads",
        [((7,), 4, 2), ((3, 4), 4, 2), ((2, 3, 2), 2, 1)],
    )
    def test_input_gradient(self, rng, shape, width, heads):
        params = _layer(rng, len(shape), width, heads, 2, scale=0.5)
        x = rng.standard_normal(shape + (width,))
        direction = rng.standard_normal(shape + (width,))
        _, back = factorized_attention(FieldTensor(x), params)
        grad = back(direction)

        def loss():
            return float(np.sum(factorized_attention(FieldTensor(x), params)[0].data * direction))

        assert relative_error(grad, finite_difference(loss, x)) < 1e-6

    def test_parameter_gradients(self, rng):
        params = _layer(rng, 2, 4, 2, 2, scale=0.5)
        x = rng.standard_normal((3, 4, 4))
        direction = rng.standard_normal((3, 4, 4))
        _, back = factorized_attention(FieldTensor(x), params)
        back(direction)

        def loss():
            return float(np.sum(factorized_attention(FieldTensor(x), params)[0].data * direction))

        for p in params.params():
            if p.name.startswith("test.att.ffn"):
                assert not np.any(p.grad)
                continue
            idx = sample_indices(p.shape, 6, rng)
            numeric = finite_difference(loss, p.value, indices=idx)
            analytic = np.zeros_like(p.grad)
            for i in idx:
                analytic[i] = p.grad[i]
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7, err_msg=p.name)

    def test_block_gradient_includes_norm_and_residual(self, rng):
        params = _layer(rng, 2, 4, 2, 2, scale=0.5)
        x = rng.standard_normal((4, 3, 4))
        direction = rng.standard_normal((4, 3, 4))
        out, back = attention_block(FieldTensor(x), params)
        update, _ = attention_update(FieldTensor(x), params)
        np.testing.assert_allclose(out.data, update + x, atol=1e-14)
        for p in params.params():
            p.zero_grad()
        grad = back(direction)

        def loss():
            return float(np.sum(attention_block(FieldTensor(x), params)[0].data * direction))

        assert relative_error(grad, finite_difference(loss, x)) < 1e-5


# =============================================================================
# Linear attention baseline
# =============================================================================


class TestLinearAttention:
    def _setup(self, rng, shape=(4, 4), width=4, heads=2, kernel_dim=4):
        params = LinearAttentionParams("test.lin", len(shape), width, heads, kernel_dim, rng)
        points, coords = flatten_field(FieldTensor(rng.standard_normal(shape + (width,))))
        return params, points, coords

    def test_associative_and_direct_paths_agree(self, rng):
        params, points, coords = self._setup(rng)
        fast, _ = linear_attention(points, coords, params, path="associative")
        slow, _ = linear_attention(points, coords, params, path="direct")
        np.testing.assert_allclose(fast, slow, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("path", ["associative", "direct"])
    def test_input_gradient(self, rng, path):
        params, points, coords = self._setup(rng, shape=(3, 4))
        x = np.array(points)
        direction = rng.standard_normal(x.shape)
        _, back = linear_attention(x, coords, params, path=path)
        grad = back(direction)

        def loss():
            return float(np.sum(linear_attention(x, coords, params, path=path)[0] * direction))

        assert relative_error(grad, finite_difference(loss, x)) < 1e-5

    def test_query_weight_gradient(self, rng):
        params, points, coords = self._setup(rng, shape=(3, 4))
        direction = rng.standard_normal(points.shape)
        _, back = linear_attention(points, coords, params)
        back(direction)

        def loss():
            return float(np.sum(linear_attention(points, coords, params)[0] * direction))

        idx = sample_indices(params.query.weight.shape, 8, rng)
        numeric = finite_difference(loss, params.query.weight.value, indices=idx)
        analytic = np.zeros_like(numeric)
        for i in idx:
            analytic[i] = params.query.weight.grad[i]
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)

    def test_full_kernel_rank_is_bounded_by_kernel_dim(self, rng):
        params, points, coords = self._setup(rng, shape=(6, 6), kernel_dim=4)
        kernel = full_kernel_matrix(points, coords, params, head=1)
        assert kernel.shape == (36, 36)
        assert np.linalg.matrix_rank(kernel.data) <= 4

    def test_kernel_dim_must_split_over_axes(self, rng):
        with pytest.raises(ConfigurationError):
            LinearAttentionParams("bad", 2, 4, 2, 6, rng)

    def test_memory_budget(self, rng):
        params, points, coords = self._setup(rng)
        with pytest.raises(ResourceBudgetError):
            linear_attention(points, coords, params, path="direct", memory_budget=1024)

    def test_unknown_path(self, rng):
        params, points, coords = self._setup(rng)
        with pytest.raises(ConfigurationError):
            linear_attention(points, coords, params, path="sideways")


# =============================================================================
# Operation counts
# =============================================================================


class TestOperationCounts:
    """前向乘加计数只依赖形状，不依赖墙钟时间。"""

    @pytest.mark.parametrize("size, width, heads, kernel_dim", [(8, 8, 2, 4), (6, 4, 1, 2)])
    def test_factorized_closed_form(self, rng, size, width, heads, kernel_dim):
        params = _layer(rng, 2, width, heads, kernel_dim)
        u = FieldTensor(rng.standard_normal((size, size, width)))
        with op_counter.measuring() as counts:
            factorized_attention(u, params)
        assert counts["kernel"] == 2 * heads * size * size * kernel_dim
        assert counts["mode_product"] == 2 * size ** 3 * width
        assert "mode_product_backward" not in counts

    def test_kernel_count_quadruples_when_extent_doubles(self, rng):
        params = _layer(rng, 2, 4, 2, 4)
        totals = []
        for size in (8, 16):
            u = FieldTensor(rng.standard_normal((size, size, 4)))
            with op_counter.measuring() as counts:
                compute_axial_kernels(u, params)
            totals.append(counts["kernel"])
        assert totals[1] == 4 * totals[0]

    def test_linear_closed_form(self, rng):
        params = LinearAttentionParams("count.lin", 2, 8, 2, 4, rng)
        points, coords = flatten_field(FieldTensor(rng.standard_normal((5, 6, 8))))
        with op_counter.measuring() as counts:
            linear_attention(points, coords, params)
        assert counts["linear"] == 2 * 30 * 4 * 8


# =============================================================================
# Kernel export
# =============================================================================


class TestKernelExport:
    def test_dump_and_load(self, rng, tmp_path):
        params = _layer(rng, 2, 4, 2, 2)
        kernels = compute_axial_kernels(FieldTensor(rng.standard_normal((5, 3, 4))), params)
        written = export_kernels(kernels, tmp_path, layer=1)
        assert len(written) == 4
        assert (tmp_path / "layer1_axis1_head0.f64").is_file()
        for path in written:
            axis, head, matrix = load_kernel_dump(path)
            np.testing.assert_array_equal(matrix.data, kernels.matrices[axis][head])

    def test_truncated_dump(self, rng, tmp_path):
        params = _layer(rng, 1, 2, 1, 2)
        kernels = compute_axial_kernels(FieldTensor(rng.standard_normal((4, 2))), params)
        (path,) = export_kernels(kernels, tmp_path, layer=0)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedFileError):
            load_kernel_dump(path)
