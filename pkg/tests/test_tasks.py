import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inrlab.diffcore import ConfigError, UsageError
from inrlab.models import ModelConfig, build_model
from inrlab.tasks import (
    ImageTask,
    SdfTask,
    StripeTask,
    band_agreement,
    continuity_profile,
    export_slices,
    fit,
    iou,
    lattice,
    profile_csv,
    psnr,
)


class TestPsnr:
    def test_uniform_error(self):
        gt = np.full((8, 8, 3), 0.5)
        assert abs(psnr(gt + 0.1, gt) - 20.0) <= 1e-9
        assert abs(psnr(gt - 0.01, gt) - 40.0) <= 1e-9

    def test_cap(self):
        gt = np.random.default_rng(0).uniform(size=(4, 4))
        assert psnr(gt, gt) == 100.0

    def test_clamps_prediction(self):
        gt = np.ones((3, 3))
        assert psnr(np.full((3, 3), 5.0), gt) == 100.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            psnr(np.zeros(3), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-4, 0.4), st.floats(1e-4, 0.4))
    def test_monotone_in_error(self, a, b):
        gt = np.full(10, 0.5)
        if a < b:
            assert psnr(gt + a, gt) >= psnr(gt + b, gt)


class TestIou:
    def test_counting_case(self):
        cells = np.arange(20)
        pred = np.where(cells < 10, -1.0, 1.0)
        gt = np.where((cells >= 5) & (cells < 15), -1.0, 1.0)
        assert iou(pred, gt) == 1 / 3

    def test_identical_and_disjoint(self):
        g = np.random.default_rng(1).normal(size=(5, 5, 5))
        assert iou(g, g) == 1.0
        assert iou(np.where(g <= 0, 1.0, -1.0), g) == 0.0

    def test_empty_union(self):
        assert iou(np.ones(4), np.ones(4)) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        v = iou(rng.normal(size=50), rng.normal(size=50))
        assert 0.0 <= v <= 1.0


class TestSplits:
    def test_image_mask(self):
        t = ImageTask(size=64)
        assert t.mask2d.sum() == 32 * 32
        rows, cols = np.nonzero(t.mask2d)
        assert np.all(rows % 2 == 0) and np.all(cols % 2 == 0)
        odd = ImageTask(np.zeros((7, 5, 3)))
        assert odd.mask2d.sum() == 4 * 3

    def test_image_keys_sit_on_training_pixels(self):
        t = ImageTask(size=64)
        m = build_model("diner", 2, 3, ModelConfig(kind="diner", feature_width=1), rng=0, key_lattice=t.key_lattice)
        m.encoder.entries.values[:, 0] = np.arange(32 * 32)
        keys, _ = m.encoder.forward(t.train_coords)
        np.testing.assert_allclose(keys[:, 0], np.arange(32 * 32), atol=1e-9)

    def test_bad_sampling_factor(self):
        with pytest.raises(ConfigError):
            ImageTask(np.zeros((4, 4, 3)), sampling_factor=3)

    def test_stripe(self):
        t = StripeTask()
        assert len(t.attrs) == 256
        assert len(np.unique(t.band)) == 8
        assert np.all(np.bincount(t.band) == 32)
        ho = t.heldout_index
        assert np.all(ho % 2 == 1)
        # every held-out point has two trained neighbours
        assert np.all(t.train_mask[ho - 1]) and np.all(t.train_mask[ho + 1])

    def test_batches_never_contain_heldout(self):
        t = ImageTask(size=16)
        rng = np.random.default_rng(2)
        for it in range(20):
            x, _ = t.sample_batch(rng, it, 17)
            idx = np.rint(x * 15).astype(int)
            assert np.all(t.mask2d[idx[:, 0], idx[:, 1]])

    def test_heldout_batch_rejected(self):
        t = StripeTask(n_points=16, n_bands=2)
        t.train_index = np.arange(16)
        with pytest.raises(UsageError):
            t.sample_batch(np.random.default_rng(0), 1, None)

    def test_lattice(self):
        np.testing.assert_array_equal(lattice((2, 3)), [[0, 0], [0, .5], [0, 1], [1, 0], [1, .5], [1, 1]])


class TestSdf:
    def test_sampler_is_pure(self):
        t = SdfTask()
        a = t.points(3, 17, 1000)
        b = SdfTask().points(3, 17, 1000)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, t.points(3, 18, 1000))
        assert a.min() >= 0 and a.max() <= 1

    def test_sampler_mixture(self):
        t = SdfTask()
        pts = t.points(0, 1, 10_000)
        near = np.abs(t.sdf(pts[5000:]))
        assert np.median(near) < 0.03
        assert pts.shape == (10_000, 3)

    def test_ground_truth_exact(self):
        t = SdfTask(eval_resolution=5)
        assert t.eval_sdf[np.argmin(np.linalg.norm(t.eval_coords - 0.5, axis=1))] == -0.3
        assert SdfTask(eval_resolution=8).evaluate(_sdf_oracle(t)) == {"iou": 1.0}

    def test_torus(self):
        t = SdfTask("torus")
        assert abs(t.sdf(np.array([[0.75, 0.5, 0.5]]))[0] + 0.1) < 1e-12

    def test_same_stream_for_all_models(self):
        t = SdfTask(eval_resolution=8)
        seen = []

        class Spy:
            d_in, d_out = 3, 1

            def __init__(self):
                self.log = []

            def parameters(self):
                return []

            def zero_grads(self):
                pass

            def forward(self, x, record=False):
                self.log.append(x.copy())
                return np.zeros((len(x), 1))

            predict = forward

            def backward(self, g):
                return None

        for _ in range(2):
            spy = Spy()
            fit(t, spy, 3, batch_size=100, seed=5)
            seen.append(np.concatenate(spy.log[:3]))
        assert seen[0].tobytes() == seen[1].tobytes()


def _sdf_oracle(task):
    class Exact:
        def predict(self, x):
            return task.sdf(x)[:, None]
    return Exact()


class TestFit:
    def test_constant_image(self):
        task = ImageTask(np.full((8, 8, 3), [0.2, 0.5, 0.7]))
        m = build_model("pe_mlp", 2, 3, rng=0)
        rec = fit(task, m, 500)
        assert rec.final["train_mse"] < 1e-5

    @pytest.mark.parametrize("kind", ["diner", "rhino_ngp"])
    def test_constant_image_hash_models(self, kind):
        task = ImageTask(np.full((8, 8, 3), [0.2, 0.5, 0.7]))
        m = build_model(kind, 2, 3, ModelConfig(kind=kind, hash_levels=2, log2_table_size=8, base_resolution=4),
                        rng=0, key_lattice=task.key_lattice)
        assert fit(task, m, 500).final["train_mse"] < 1e-5

    def test_record(self):
        task = StripeTask(n_points=32, n_bands=4)
        m = build_model("pe_mlp", 1, 3, ModelConfig(kind="pe_mlp", hidden_width=8), rng=0)
        rec = fit(task, m, 10, eval_interval=4, config={"x": 1})
        assert len(rec.losses) == 10
        assert [it for it, _ in rec.evals] == [4, 8, 10]
        csv_text = rec.metrics_csv(task.metric_names)
        lines = csv_text.strip().split("\n")
        assert lines[0] == "iteration,loss,train_psnr,heldout_psnr,heldout_mse"
        assert len(lines) == 11
        assert json.loads(rec.to_json())["config"] == {"x": 1}
        assert rec.summary()["iterations"] == 10

    def test_deterministic(self):
        task = StripeTask(n_points=64, n_bands=4)

        def run():
            m = build_model("rhino_ngp", 1, 3, ModelConfig(kind="rhino_ngp", hash_levels=2, log2_table_size=6,
                                                           base_resolution=4, hidden_width=8), rng=1)
            return fit(task, m, 30, batch_size=16, seed=1, eval_interval=10).metrics_csv(task.metric_names)

        assert run() == run()

    def test_nonfinite_stops(self):
        task = StripeTask(n_points=32, n_bands=4)
        m = build_model("pe_mlp", 1, 3, ModelConfig(kind="pe_mlp", hidden_width=8), rng=0)
        m.trunk.layers[-1].linear.bias.values[0, 0] = np.inf
        rec = fit(task, m, 5)
        assert rec.status == "nonfinite"
        assert rec.error

    def test_mismatched_model(self):
        with pytest.raises(ConfigError):
            fit(StripeTask(), build_model("pe_mlp", 2, 3), 1)


class TestDiagnostics:
    def test_constant_model_profile(self):
        m = build_model("pe_mlp", 2, 3, rng=0)
        for p in m.parameters():
            p.values[...] = 0.0
        assert np.all(continuity_profile(m, [0, 0], [1, 1]) == 0.0)

    def test_linear_model_profile(self):
        m = build_model("rhino_diner", 1, 1, ModelConfig(kind="rhino_diner", transform="identity", hidden_layers=1, feature_width=1,
                                                         table_resolution=[4]), rng=0)
        # linear trunk: relu hidden layer kept in its positive region
        hidden = m.trunk.layers[0].linear
        hidden.weight.values[...] = 0.0
        hidden.weight.values[0, 1] = 2.0
        hidden.bias.values[...] = 1.0
        m.trunk.layers[1].linear.weight.values[...] = 0.0
        m.trunk.layers[1].linear.weight.values[0, 0] = 1.5
        slopes = continuity_profile(m, [0.1], [0.9], samples=50)
        np.testing.assert_allclose(slopes, 3.0, rtol=1e-9)
        assert profile_csv(slopes[:2]).split("\n")[0] == "k,slope"

    def test_slices_zero_trunk(self):
        task = StripeTask(n_points=16, n_bands=2)
        m = build_model("rhino_diner", 1, 3, ModelConfig(kind="rhino_diner", feature_width=1), rng=0,
                        key_lattice=task.key_lattice)
        for p in m.trunk.parameters():
            p.values[...] = 0.0
        s = export_slices(m, task, m=9)
        assert s.raster.shape == (9, 9, 3)
        assert np.all(s.raster == 0.0)

    def test_slice_corners_match_trunk(self):
        task = StripeTask(n_points=16, n_bands=2)
        m = build_model("rhino_diner", 1, 3, ModelConfig(kind="rhino_diner", feature_width=1), rng=3,
                        key_lattice=task.key_lattice)
        m.encoder.entries.values[...] = np.random.default_rng(3).normal(size=m.encoder.entries.shape)
        s = export_slices(m, task, m=7)
        for i, j in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
            direct = m.trunk_predict(np.array([[s.h_axis[j], s.t_axis[i]]]))
            np.testing.assert_allclose(s.raster[i, j], direct[0], rtol=1e-13)
        assert len(s.train_points) == len(task.train_index)
        assert len(s.heldout_points) == len(task.heldout_index)

    def test_slices_refuse_wide_trunk(self):
        task = ImageTask(size=8)
        m = build_model("rhino_diner", 2, 3, rng=0, key_lattice=task.key_lattice)
        with pytest.raises(ConfigError):
            export_slices(m, task)
        s = export_slices(m, task, m=5, axes=(0, 2), fixed={1: 0.0, 3: 0.0})
        assert s.raster.shape == (5, 5, 3)

    def test_band_agreement_counts(self):
        task = StripeTask(n_points=32, n_bands=4)

        class Oracle:
            def predict(self, x):
                return task.palette[np.minimum((x[:, 0] * 31.0 + 0.5).astype(int) * 4 // 32, 3)]

        assert band_agreement(Oracle(), task) == len(task.heldout_index)
