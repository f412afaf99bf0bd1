import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inrlab.diffcore import DomainError
from inrlab.encodings import (
    FullResTable,
    MultiResHashGrid,
    PositionalEncoding,
    cell_corners,
    spatial_hash,
)
from inrlab.gradcheck import check_fullres, check_hashgrid, check_positional


def table_with(values, resolution, extent=1.0):
    t = FullResTable(resolution, np.asarray(values).shape[1], extent=extent)
    t.entries.values[...] = values
    return t


class TestPositionalEncoding:
    def test_width(self):
        assert PositionalEncoding(3, 10).out_width == 60

    def test_origin(self):
        out, _ = PositionalEncoding(1, 6).forward(np.zeros((1, 1)))
        np.testing.assert_array_equal(out[0, 0::2], 0.0)
        np.testing.assert_array_equal(out[0, 1::2], 1.0)

    def test_layout(self):
        out, _ = PositionalEncoding(1, 2).forward(np.array([[0.5], [0.25]]))
        np.testing.assert_allclose(out[0, :2], [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(out[1, 2:4], [1.0, 0.0], atol=1e-15)

    def test_dimension_major(self):
        pe = PositionalEncoding(2, 3)
        out, _ = pe.forward(np.array([[0.1, 0.7]]))
        np.testing.assert_allclose(out[0, :6], PositionalEncoding(1, 3).forward(np.array([[0.1]]))[0][0])
        np.testing.assert_allclose(out[0, 6:], PositionalEncoding(1, 3).forward(np.array([[0.7]]))[0][0])

    def test_bounded(self):
        out, _ = PositionalEncoding(2, 10).forward(np.random.default_rng(0).uniform(size=(100, 2)))
        assert np.all(np.abs(out) <= 1.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        assert max(check_positional(rng) for _ in range(100)) <= 1.0


class TestFullResTable:
    def test_on_node(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(5 * 4, 3))
        t = table_with(vals, (5, 4))
        # node (2, 1) sits at (2/4, 1/3)
        out, _ = t.forward(np.array([[2 / 4, 1 / 3]]))
        np.testing.assert_array_equal(out[0], vals[2 * 4 + 1])

    def test_midpoint_average(self):
        t = table_with([[0.0], [2.0]], (2,))
        out, _ = t.forward(np.array([[0.5]]))
        assert out[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_cell_center_partition(self):
        t = table_with([[1.0], [0.0], [0.0], [0.0]], (2, 2))
        out, _ = t.forward(np.array([[0.5, 0.5]]))
        assert out[0, 0] == pytest.approx(0.25, abs=1e-15)

    def test_entry_count(self):
        assert FullResTable((64, 64), 2).entries.size == 8192

    def test_domain(self):
        t = FullResTable((3, 3), 1)
        with pytest.raises(DomainError):
            t.forward(np.array([[0.5, 1.2]]))
        with pytest.raises(DomainError):
            t.forward(np.array([[-0.1, 0.5]]))

    def test_extent_puts_training_samples_on_nodes(self):
        # 7 samples, keys on the even ones; sample 6 is the last key
        vals = np.array([[0.0], [10.0], [20.0], [30.0]])
        t = table_with(vals, (4,), extent=1.0)
        x = np.arange(7)[:, None] / 6
        out, _ = t.forward(x)
        np.testing.assert_allclose(out[::2, 0], vals[:, 0], atol=1e-12)
        np.testing.assert_allclose(out[1::2, 0], [5.0, 15.0, 25.0], atol=1e-12)
        # extent < 1: the last coordinate clamps to the last key
        t2 = table_with(vals, (4,), extent=6 / 7)
        out2, _ = t2.forward(np.array([[1.0], [6 / 7]]))
        np.testing.assert_allclose(out2[:, 0], [30.0, 30.0], atol=1e-12)

    def test_no_coordinate_gradient(self):
        rng = np.random.default_rng(2)
        t = table_with(rng.normal(size=(9, 2)), (3, 3))
        x = np.array([[0.3, 0.6]])
        out, cache = t.forward(x)
        assert t.backward(cache, np.ones_like(out)) is None
        moved, _ = t.forward(x + 0.05)
        assert not np.allclose(moved, out)

    def test_backward_touches_support_only(self):
        t = FullResTable((5, 5), 1)
        _, cache = t.forward(np.array([[0.1, 0.1]]))
        t.backward(cache, np.ones((1, 1)))
        touched = set(np.flatnonzero(t.entries.grads[:, 0]))
        assert touched == {0, 1, 5, 6}
        assert t.entries.grads.sum() == pytest.approx(1.0, abs=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        assert max(check_fullres(rng) for _ in range(100)) <= 1.0

    def test_coord_slope_matches_differences(self):
        rng = np.random.default_rng(4)
        t = table_with(rng.normal(size=(16, 2)), (4, 4))
        x = np.array([[0.4, 0.55]])  # strictly inside a cell
        h = 1e-6
        slope = t.coord_slope(x)[0]
        for k in range(2):
            e = np.zeros((1, 2))
            e[0, k] = h
            fd = (t.forward(x + e)[0] - t.forward(x - e)[0])[0] / (2 * h)
            np.testing.assert_allclose(slope[:, k], fd, rtol=1e-6)


class TestSpatialHash:
    def test_formula(self):
        expected = (1 ^ (2 * 2654435761)) % 16384  # independent evaluation
        assert spatial_hash([1, 2], 2 ** 14) == expected

    def test_three_dims(self):
        expected = (5 ^ (7 * 2654435761) ^ (9 * 805459861)) % 4096
        assert spatial_hash(np.array([[5, 7, 9]]), 4096)[0] == expected

    def test_deterministic(self):
        idx = np.random.default_rng(5).integers(0, 1000, size=(100, 3))
        np.testing.assert_array_equal(spatial_hash(idx, 2 ** 14), spatial_hash(idx.copy(), 2 ** 14))

    def test_range(self):
        idx = np.random.default_rng(6).integers(0, 10 ** 6, size=(1000, 2))
        h = spatial_hash(idx, 2 ** 10)
        assert h.min() >= 0 and h.max() < 2 ** 10


class TestHashGrid:
    def test_level_layout(self):
        g = MultiResHashGrid(2)
        assert g.resolutions == [16, 24, 36, 54, 81, 121, 182, 273]
        # N^2 <= 2^14 up to N = 121
        assert g.dense == [True] * 6 + [False] * 2
        assert [p.shape[0] for p in g.levels] == [256, 576, 1296, 2916, 6561, 14641, 16384, 16384]
        assert g.out_width == 16

    def test_dense_level_row_major(self):
        g = MultiResHashGrid(2, num_levels=1, base_resolution=4)
        assert g.level_index(0, np.array([[2, 3]]))[0] == 2 * 4 + 3

    def test_zero_table(self):
        g = MultiResHashGrid(3, num_levels=3, log2_table_size=8, base_resolution=4)
        for p in g.parameters():
            p.values[...] = 0.0
        out, _ = g.forward(np.random.default_rng(7).uniform(size=(20, 3)))
        assert np.all(out == 0.0)

    def test_single_dense_level_on_node(self):
        g = MultiResHashGrid(2, num_levels=1, base_resolution=5, feature_width=3)
        g.levels[0].values[...] = np.random.default_rng(8).normal(size=g.levels[0].shape)
        out, _ = g.forward(np.array([[3 / 4, 1 / 4]]))
        np.testing.assert_array_equal(out[0], g.levels[0].values[3 * 5 + 1])

    def test_level_order_coarse_to_fine(self):
        g = MultiResHashGrid(1, num_levels=2, base_resolution=2, growth_factor=2.0, feature_width=1)
        g.levels[0].values[...] = 1.0
        g.levels[1].values[...] = 2.0
        out, _ = g.forward(np.array([[0.3]]))
        np.testing.assert_allclose(out[0], [1.0, 2.0])

    def test_collisions_accumulate(self):
        # 2 slots for a 1-D level with 8 nodes: every slot is shared
        g = MultiResHashGrid(1, num_levels=1, log2_table_size=1, base_resolution=8, feature_width=1)
        assert not g.dense[0]
        x = np.array([[0.1], [0.45], [0.9]])
        _, cache = g.forward(x)
        up = np.array([[1.0], [2.0], [3.0]])
        g.backward(cache, up)
        expected = np.zeros(2)  # brute force over corners
        for xi, ui in zip(x[:, 0], up[:, 0]):
            u = xi * 7
            i0 = int(np.floor(u))
            f = u - i0
            expected[spatial_hash([i0], 2)] += (1 - f) * ui
            expected[spatial_hash([i0 + 1], 2)] += f * ui
        np.testing.assert_allclose(g.levels[0].grads[:, 0], expected, rtol=1e-12)

    def test_no_coordinate_gradient(self):
        g = MultiResHashGrid(2, num_levels=2, base_resolution=4)
        out, cache = g.forward(np.array([[0.2, 0.3]]))
        assert g.backward(cache, np.ones_like(out)) is None

    def test_finite_differences(self):
        rng = np.random.default_rng(9)
        assert max(check_hashgrid(rng) for _ in range(100)) <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3), st.integers(2, 40), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_partition_of_unity(d, res, a, b, c):
    x = np.array([[a, b, c][:d]])
    _, w, _, _ = cell_corners(x, np.full(d, res))
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_continuous_across_cell_faces(res, seed):
    rng = np.random.default_rng(seed)
    t = FullResTable((res,), 2, rng)
    t.entries.values[...] = rng.normal(size=t.entries.shape)
    faces = np.arange(1, res - 1) / (res - 1)
    if len(faces) == 0:
        return
    eps = 1e-9
    lo, _ = t.forward(faces[:, None] - eps)
    hi, _ = t.forward(faces[:, None] + eps)
    assert np.max(np.abs(hi - lo)) < 1e-6
