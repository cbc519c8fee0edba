import numpy as np
import pytest
from scipy.special import expit

from ebt.datapipe import SynthSpec, synth_dataset
from ebt.errors import NumericError, ShapeError, UsageError
from ebt.evaluator import EvalConfig, evaluate_dataset, uniform_thresholds
from ebt.gradcheck import finite_difference, relative_error
from ebt.losses import LossKind, LossParams
from ebt.toymodel import (
    GAUSS_S1,
    GAUSS_S2,
    K,
    LAPLACIAN,
    SOBEL_X,
    SOBEL_Y,
    ChannelScaling,
    ModelWeights,
    OptimState,
    adam_step,
    featurize,
    forward,
    load_weights,
    predict,
    region_mean_probability,
    save_weights,
    smoothed,
    train,
    weight_grad,
)


def _naive_correlate(img, kernel):
    """Direct correlation with replicated borders."""
    h, w = img.shape
    kh, kw = kernel.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    y = min(max(i + a - kh // 2, 0), h - 1)
                    x = min(max(j + b - kw // 2, 0), w - 1)
                    acc += kernel[a, b] * img[y, x]
            out[i, j] = acc
    return out


class TestFeaturize:
    def test_constant_image(self):
        stack = featurize(np.full((7, 9), 0.4)).channels
        assert stack.shape == (K, 7, 9)
        np.testing.assert_allclose(stack[:4], 0.0, atol=1e-12)
        np.testing.assert_allclose(stack[4:7], 0.4, rtol=1e-12)
        np.testing.assert_array_equal(stack[7], 1.0)

    def test_vertical_step(self):
        img = np.zeros((6, 8))
        img[:, 4:] = 1.0
        stack = featurize(img).channels
        assert set(np.nonzero(stack[0])[1]) == {3, 4}
        np.testing.assert_array_equal(stack[0][:, 3], 0.5)
        np.testing.assert_array_equal(stack[1], 0.0)
        np.testing.assert_array_equal(stack[2], np.abs(stack[0]))
        np.testing.assert_array_equal(stack[3][:, 3], 1.0)
        np.testing.assert_array_equal(stack[3][:, 4], -1.0)

    def test_matches_direct_correlation(self, rng):
        img = rng.random((12, 10))
        stack = featurize(img).channels
        for channel, kernel in ((0, SOBEL_X), (1, SOBEL_Y), (3, LAPLACIAN), (4, GAUSS_S1), (5, GAUSS_S2)):
            np.testing.assert_allclose(stack[channel], _naive_correlate(img, kernel), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(stack[2], np.hypot(stack[0], stack[1]))

    def test_gaussian_kernels_are_normalized(self):
        assert GAUSS_S1.shape == (7, 7) and GAUSS_S2.shape == (13, 13)
        assert GAUSS_S1.sum() == pytest.approx(1.0) and GAUSS_S2.sum() == pytest.approx(1.0)

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            featurize(np.zeros((2, 2, 2)))


class TestForward:
    def test_zero_weights_give_half(self, rng):
        np.testing.assert_array_equal(predict(rng.random((5, 5)), ModelWeights.zeros()), 0.5)

    def test_bias_only(self, rng):
        w = np.zeros(K)
        w[-1] = 2.0
        np.testing.assert_allclose(predict(rng.random((4, 6)), ModelWeights(w)), expit(2.0))

    def test_logistic_of_weighted_sum(self, rng):
        features = featurize(rng.random((6, 6)))
        w = rng.normal(size=K)
        expected = expit(np.einsum("k,kij->ij", w, features.channels))
        np.testing.assert_allclose(forward(features, ModelWeights(w)), expected, rtol=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ShapeError):
            ModelWeights(np.zeros(K - 1))
        with pytest.raises(NumericError):
            ModelWeights(np.full(K, np.nan))


class TestWeightGrad:
    @pytest.mark.parametrize("kind", [LossKind.WBCE, LossKind.EBT])
    def test_edge_free_gt_is_flat(self, rng, kind):
        features = featurize(rng.random((8, 8)))
        loss, grad = weight_grad(features, ModelWeights(rng.normal(size=K)), np.zeros((8, 8), dtype=np.uint8),
                                 loss_kind=kind)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_matches_finite_differences(self, rng):
        params = LossParams(r=3)
        for _ in range(50):
            image = rng.random((16, 16))
            gt = (rng.random((16, 16)) < 0.1).astype(np.uint8)
            gt[8, 8] = 1
            features = featurize(image)
            weights = ModelWeights(rng.normal(0.0, 0.5, size=K))
            for kind in (LossKind.WBCE, LossKind.EBT):
                _, analytic = weight_grad(features, weights, gt, params, kind)
                numeric = finite_difference(
                    lambda w: weight_grad(features, ModelWeights(w), gt, params, kind)[0], weights.w
                )
                assert relative_error(analytic, numeric) < 1e-4

    def test_mirror_symmetric_input_has_no_horizontal_gradient(self, rng):
        base = rng.random((12, 12))
        image = (base + np.fliplr(base)) / 2
        edges = rng.random((12, 12)) < 0.15
        gt = (edges | np.fliplr(edges)).astype(np.uint8)
        w = rng.normal(size=K)
        w[0] = 0.0
        _, grad = weight_grad(featurize(image), ModelWeights(w), gt, LossParams(r=2))
        assert abs(grad[0]) < 1e-10

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            weight_grad(featurize(rng.random((4, 4))), ModelWeights.zeros(), np.zeros((4, 5), dtype=np.uint8))


class TestChannelScaling:
    def test_fit_standardizes_pooled_pixels(self, rng):
        stacks = [featurize(rng.random((9, 7))), featurize(rng.random((5, 11)))]
        scaling = ChannelScaling.fit(stacks)
        pooled = np.concatenate([s.channels.reshape(K, -1) for s in stacks], axis=1)
        standardized = (pooled - scaling.shift[:, None]) / scaling.scale[:, None]
        np.testing.assert_allclose(standardized[:-1].mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(standardized[:-1].std(axis=1), 1.0, rtol=1e-8)
        assert (scaling.shift[-1], scaling.scale[-1]) == (0.0, 1.0)

    def test_flat_channels_are_left_alone(self):
        scaling = ChannelScaling.fit([featurize(np.full((6, 6), 0.3))])
        np.testing.assert_array_equal(scaling.scale, 1.0)
        np.testing.assert_array_equal(scaling.shift, 0.0)

    def test_weights_reproduce_standardized_logits(self, rng):
        features = featurize(rng.random((8, 8)))
        scaling = ChannelScaling.fit([features])
        u = rng.normal(size=K)
        standardized = (features.channels - scaling.shift[:, None, None]) / scaling.scale[:, None, None]
        expected = expit(np.einsum("k,kij->ij", u, standardized))
        np.testing.assert_allclose(forward(features, scaling.to_weights(u)), expected, rtol=1e-10)

    def test_pull_back_matches_finite_differences(self, rng):
        image = rng.random((16, 16))
        gt = (rng.random((16, 16)) < 0.1).astype(np.uint8)
        gt[8, 8] = 1
        features = featurize(image)
        scaling = ChannelScaling.fit([features])
        u = rng.normal(0.0, 0.5, size=K)
        params = LossParams(r=3)
        _, grad_w = weight_grad(features, scaling.to_weights(u), gt, params)
        numeric = finite_difference(lambda v: weight_grad(features, scaling.to_weights(v), gt, params)[0], u)
        assert relative_error(scaling.pull_back(grad_w), numeric) < 1e-4

    def test_standardize_switch(self, small_synth):
        plain = train(small_synth.pairs(), epochs=4, lr=1e-2, standardize=False)
        assert plain.losses[-1] < plain.losses[0]
        scaled = train(small_synth.pairs(), epochs=4, lr=1e-2)
        assert scaled.weights.w.shape == (K,)
        assert not np.array_equal(plain.weights.w, scaled.weights.w)


class TestAdam:
    def test_zero_gradient_only_decays(self):
        w = ModelWeights(np.arange(1.0, K + 1))
        new_w, state = adam_step(OptimState.fresh(lr=0.1, weight_decay=0.01), w, np.zeros(K))
        np.testing.assert_allclose(new_w.w, w.w * (1 - 0.1 * 0.01), rtol=1e-15)
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        g = np.array([1.0, -2.0, 0.5, -0.25, 3.0, -1.0, 0.1, -4.0])
        new_w, _ = adam_step(OptimState.fresh(lr=1e-3, weight_decay=0.0), ModelWeights.zeros(), g)
        np.testing.assert_allclose(new_w.w, -1e-3 * np.sign(g), rtol=1e-6)

    def test_quadratic_descends(self):
        target = 50.0
        weights, state = ModelWeights.zeros(), OptimState.fresh(lr=0.1, weight_decay=0.0)
        losses = []
        for _ in range(100):
            losses.append(0.5 * float(np.sum((weights.w - target) ** 2)))
            weights, state = adam_step(state, weights, weights.w - target)
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert state.step == 100

    def test_inputs_are_not_mutated(self):
        state = OptimState.fresh(lr=0.1)
        weights = ModelWeights.zeros()
        adam_step(state, weights, np.ones(K))
        assert state.step == 0
        np.testing.assert_array_equal(state.m, 0.0)
        np.testing.assert_array_equal(weights.w, 0.0)

    def test_non_finite_gradient(self):
        g = np.zeros(K)
        g[3] = np.inf
        with pytest.raises(NumericError):
            adam_step(OptimState.fresh(), ModelWeights.zeros(), g)


class TestTrain:
    def test_zero_learning_rate_keeps_zero_weights(self, small_synth):
        record = train(small_synth.pairs(), epochs=1, lr=0.0)
        assert len(record.losses) == 1
        np.testing.assert_array_equal(record.weights.w, 0.0)

    def test_same_seed_same_run(self, small_synth):
        runs = [train(small_synth.pairs(), epochs=5, seed=3, lr=1e-2) for _ in range(2)]
        assert runs[0].losses == runs[1].losses
        np.testing.assert_array_equal(runs[0].weights.w, runs[1].weights.w)

    @pytest.mark.parametrize("kind", [LossKind.BCE, LossKind.WBCE, LossKind.EBT])
    def test_loss_goes_down(self, small_synth, kind):
        record = train(small_synth.pairs(), loss_kind=kind, epochs=30, lr=1e-2)
        assert record.losses[-1] < record.losses[0]

    def test_crops_and_mini_batches(self, small_synth):
        kwargs = dict(epochs=6, seed=1, lr=1e-2, batch_size=3, crop_size=16, crop_every=5)
        first, second = train(small_synth.pairs(), **kwargs), train(small_synth.pairs(), **kwargs)
        assert len(first.losses) == 6
        assert np.all(np.isfinite(first.losses))
        assert first.losses == second.losses

    def test_edge_free_images_are_skipped(self, small_synth):
        pairs = small_synth.pairs()
        pairs.insert(1, (np.zeros((32, 32)), np.zeros((32, 32), dtype=np.uint8)))
        record = train(pairs, epochs=2, lr=1e-2)
        assert record.skipped == [1]

    def test_epoch_without_edges_records_nan(self, small_synth, monkeypatch):
        monkeypatch.setattr("ebt.toymodel._prepare", lambda *args, **kwargs: [])
        record = train(small_synth.pairs(), epochs=3, lr=1e-2, crop_size=16)
        assert len(record.losses) == 3
        assert np.isnan(record.losses).all()
        np.testing.assert_array_equal(record.weights.w, 0.0)

    def test_usage_errors(self):
        blank = [(np.zeros((8, 8)), np.zeros((8, 8), dtype=np.uint8))]
        with pytest.raises(UsageError):
            train(blank, epochs=1)
        with pytest.raises(UsageError):
            train([], epochs=1)
        with pytest.raises(UsageError):
            train(blank, epochs=0)

    def test_record_frame(self, small_synth):
        frame = train(small_synth.pairs(), epochs=3, lr=1e-2).to_frame()
        assert list(frame.columns) == ["epoch", "loss"]
        assert frame["epoch"].tolist() == [1, 2, 3]


def test_smoothed_windows():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4, 5, 6], window=5), [3.0, 6.0])
    np.testing.assert_allclose(smoothed([float("nan"), 2, 4, 6], window=2), [2.0, 5.0])


class TestWeightsFile:
    def test_round_trip_is_exact(self, tmp_path, rng):
        weights = ModelWeights(rng.normal(size=K))
        path = tmp_path / "w" / "weights.txt"
        save_weights(weights, str(path))
        np.testing.assert_array_equal(load_weights(str(path)).w, weights.w)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "weights.txt"
        save_weights(ModelWeights.zeros(), str(path))
        path.write_text(path.read_text().replace("version=1", "version=9"))
        with pytest.raises(UsageError):
            load_weights(str(path))

    def test_missing_channel(self, tmp_path):
        path = tmp_path / "weights.txt"
        save_weights(ModelWeights.zeros(), str(path))
        kept = [line for line in path.read_text().splitlines() if not line.startswith("laplacian=")]
        path.write_text("\n".join(kept) + "\n")
        with pytest.raises(UsageError):
            load_weights(str(path))

    def test_comments_and_blank_lines(self, tmp_path, rng):
        weights = ModelWeights(rng.normal(size=K))
        path = tmp_path / "weights.txt"
        save_weights(weights, str(path))
        path.write_text("# trained on synthetic scenes\n\n" + path.read_text())
        np.testing.assert_array_equal(load_weights(str(path)).w, weights.w)

    def test_malformed_weight(self, tmp_path):
        path = tmp_path / "weights.txt"
        save_weights(ModelWeights.zeros(), str(path))
        path.write_text(path.read_text().replace("bias=0.0", "bias=zero"))
        with pytest.raises(UsageError):
            load_weights(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_weights(str(tmp_path / "nope.txt"))


@pytest.mark.slow
def test_boundary_suppression_at_desk_scale():
    """32 synthetic 64x64 scenes, 200 full-batch epochs per loss in standardized coordinates."""
    train_set = synth_dataset(SynthSpec(seed=42), count=32)
    held_out = synth_dataset(SynthSpec(seed=42 + 32), count=8)
    params = LossParams()

    records = {
        kind: train(train_set.pairs(), loss_kind=kind, params=params, epochs=200, seed=42, lr=1e-2)
        for kind in (LossKind.WBCE, LossKind.EBT)
    }

    for record in records.values():
        windows = smoothed(record.losses, window=5)
        assert np.all(np.diff(windows) <= 1e-7)

    boundary = {
        kind: region_mean_probability(record.weights, train_set.pairs(), r=params.r)
        for kind, record in records.items()
    }
    assert boundary[LossKind.EBT] < boundary[LossKind.WBCE]

    # 0.005 steps resolve the low-probability range EBT predictions sit in
    dense = EvalConfig(thresholds=uniform_thresholds(199))
    ap = {}
    for kind, record in records.items():
        preds = [predict(image, record.weights) for image in held_out.images]
        ap[kind] = evaluate_dataset(preds, held_out.gts, dense).ap
    assert ap[LossKind.EBT] >= ap[LossKind.WBCE] - 0.01
