import numpy as np
import pytest
from scipy.special import expit

from mrfica import autodiff, model, phantom
from mrfica.errors import DomainError


def tiny_patchset(m=24, p=4, c=6, seed=0):
    rng = np.random.default_rng(seed)
    return model.PatchSet(
        patches=rng.uniform(0.0, 1.0, (m, p, p, c)).astype(np.float32),
        targets=rng.uniform(0.1, 0.9, (m, 2)).astype(np.float32),
        anchors=np.zeros((m, 2), dtype=np.int32))


class TestChannelAttention:
    def test_zero_params_give_half(self):
        net = model.build_conv_ica(6, 4, seed=0)
        for name in ("att_w1", "att_b1", "att_w2", "att_b2"):
            net.graph.params[name][:] = 0.0
        patch = np.random.default_rng(1).uniform(0, 1, (4, 4, 6))
        weighted, scores = model.channel_attention_forward(patch, net)
        np.testing.assert_allclose(scores, 0.5, rtol=0, atol=1e-7)
        np.testing.assert_allclose(weighted, 0.5 * patch, rtol=1e-6)

    def test_spatially_constant_input_merges_branches(self):
        net = model.build_conv_ica(5, 4, seed=2)
        const = np.tile(np.array([0.3, 0.7, 0.1, 0.9, 0.5],
                                 dtype=np.float32), (4, 4, 1))
        _, scores = model.channel_attention_forward(const, net)
        # max-pool equals avg-pool, so alpha = sigmoid(2 * mlp(pooled))
        p = const[0, 0].astype(np.float64)
        w1 = net.graph.params["att_w1"].astype(np.float64)
        b1 = net.graph.params["att_b1"].astype(np.float64)
        w2 = net.graph.params["att_w2"].astype(np.float64)
        b2 = net.graph.params["att_b2"].astype(np.float64)
        mlp = np.maximum(p @ w1 + b1, 0.0) @ w2 + b2
        np.testing.assert_allclose(scores, expit(2.0 * mlp), rtol=1e-5,
                                   atol=1e-6)

    def test_against_straight_line_reference(self):
        # independent float64 re-implementation of the whole module
        rng = np.random.default_rng(3)
        net = model.build_conv_ica(8, 4, seed=4)
        patch = rng.uniform(0, 1, (4, 4, 8)).astype(np.float32)
        weighted, scores = model.channel_attention_forward(patch, net)

        x = patch.astype(np.float64)
        w1 = net.graph.params["att_w1"].astype(np.float64)
        b1 = net.graph.params["att_b1"].astype(np.float64)
        w2 = net.graph.params["att_w2"].astype(np.float64)
        b2 = net.graph.params["att_b2"].astype(np.float64)
        pooled_max = x.max(axis=(0, 1))
        pooled_avg = x.mean(axis=(0, 1))

        def mlp(v):
            return np.maximum(v @ w1 + b1, 0.0) @ w2 + b2

        alpha = 1.0 / (1.0 + np.exp(-(mlp(pooled_max) + mlp(pooled_avg))))
        np.testing.assert_allclose(scores, alpha, rtol=0, atol=1e-5)
        np.testing.assert_allclose(weighted, x * alpha, rtol=0, atol=1e-5)

    def test_unit_scores_are_identity(self):
        # alpha forced to one reproduces the input exactly
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 2, (3, 4, 4, 7)).astype(np.float32)
        ones = np.ones((3, 7), dtype=np.float32)
        out = x * ones[:, None, None, :]
        np.testing.assert_array_equal(out, x)
        g = autodiff.Graph()
        xn = g.input("x")
        sn = g.input("s")
        node = g.scale_channels(xn, sn)
        val, _ = autodiff.forward(g, {"x": x, "s": ones}, output=node)
        np.testing.assert_array_equal(val, x)

    def test_scores_strictly_inside_unit_interval(self):
        # magnitude-scale inputs; float32 sigmoid only saturates to an
        # exact 0/1 for logits beyond +-17, far outside this regime
        rng = np.random.default_rng(6)
        net = model.build_conv_ica(12, 4, seed=7)
        for _ in range(10):
            patch = rng.uniform(0, 1, (4, 4, 12)).astype(np.float32)
            _, scores = model.channel_attention_forward(patch, net)
            assert np.all(scores > 0.0)
            assert np.all(scores < 1.0)


class TestBuildConvIca:
    def test_parameter_count_formula(self):
        for c, p in ((8, 4), (60, 4), (16, 8), (1, 4)):
            net = model.build_conv_ica(c, p, seed=0)
            assert net.parameter_count() == model.parameter_count(c, p)

    def test_degenerate_single_channel(self):
        net = model.build_conv_ica(1, 4, seed=0)
        out, _ = autodiff.forward(
            net.graph, {"x": np.ones((2, 4, 4, 1), dtype=np.float32)},
            output=net.output_node)
        assert out.shape == (2, 2)

    def test_same_seed_same_parameters(self):
        a = model.build_conv_ica(10, 4, seed=42)
        b = model.build_conv_ica(10, 4, seed=42)
        for name in a.graph.params:
            np.testing.assert_array_equal(a.graph.params[name],
                                          b.graph.params[name])

    def test_output_shape_law(self):
        for c, p in ((3, 2), (9, 4), (5, 6)):
            net = model.build_conv_ica(c, p, seed=1)
            out, _ = autodiff.forward(
                net.graph,
                {"x": np.ones((1, p, p, c), dtype=np.float32)},
                output=net.output_node)
            assert out.shape == (1, 2)

    def test_attention_receives_gradient(self):
        net = model.build_conv_ica(8, 4, seed=3)
        rng = np.random.default_rng(4)
        feeds = {"x": rng.uniform(0, 1, (4, 4, 4, 8)).astype(np.float32),
                 "target": rng.uniform(0, 1, (4, 2)).astype(np.float32)}
        _, values = autodiff.forward(net.graph, feeds,
                                     output=net.loss_node)
        grads = autodiff.backward(net.graph, values, net.loss_node)
        assert np.any(grads["att_w1"] != 0.0)
        assert np.any(grads["att_w2"] != 0.0)


class TestExtractPatches:
    def _uniform_phantom(self, h, w):
        labels = np.full((h, w), phantom.LABEL_WM, dtype=np.uint8)
        return phantom.Phantom(labels=labels,
                               t1_map=np.full((h, w), 800.0),
                               t2_map=np.full((h, w), 70.0))

    def test_exact_fit_single_patch(self):
        ph = self._uniform_phantom(4, 4)
        img = np.ones((4, 4, 3), dtype=np.float32)
        ps = model.extract_patches(img, ph, patch=4)
        assert len(ps) == 1

    def test_six_by_six_gives_nine(self):
        ph = self._uniform_phantom(6, 6)
        img = np.ones((6, 6, 3), dtype=np.float32)
        ps = model.extract_patches(img, ph, patch=4, stride=1)
        assert len(ps) == 9

    def test_masked_center_excludes_covering_patches(self):
        ph = self._uniform_phantom(8, 8)
        ph.labels[4, 4] = phantom.LABEL_BACKGROUND
        img = np.ones((8, 8, 3), dtype=np.float32)
        ps = model.extract_patches(img, ph, patch=4, stride=1)
        # 25 windows total, 16 of them cover the masked pixel
        assert len(ps) == 9
        for r, c in np.stack([ps.anchors[:, 0] - 2,
                              ps.anchors[:, 1] - 2], axis=1):
            assert not (r <= 4 < r + 4 and c <= 4 < c + 4)

    def test_anchor_targets(self):
        ph = self._uniform_phantom(5, 5)
        ph.t1_map[3, 3] = 1234.0
        img = np.ones((5, 5, 2), dtype=np.float32)
        ps = model.extract_patches(img, ph, patch=4, stride=1)
        sel = (ps.anchors[:, 0] == 3) & (ps.anchors[:, 1] == 3)
        assert sel.sum() == 1
        assert ps.targets[sel][0, 0] == pytest.approx(1234.0 / 4000.0)

    def test_no_valid_patches(self):
        ph = self._uniform_phantom(6, 6)
        ph.labels[:] = phantom.LABEL_BACKGROUND
        img = np.ones((6, 6, 2), dtype=np.float32)
        with pytest.raises(DomainError):
            model.extract_patches(img, ph, patch=4)


class TestTraining:
    def test_descent_on_toy_task(self):
        ps = tiny_patchset(m=10, seed=8)
        tr, va = model.split_patchset(ps, val_fraction=0.2, seed=0)
        net = model.build_conv_ica(6, 4, seed=9)
        cfg = model.TrainConfig(lr=2e-3, batch=4, max_epochs=50,
                                patience=50, seed=1)
        hist = model.train(net, tr, va, cfg)
        assert hist.epochs[-1].train_loss < hist.epochs[0].train_loss

    def test_patience_one_stops_after_second_epoch(self):
        # validation targets anti-correlated with training targets make
        # the validation loss worsen monotonically from epoch one
        ps = tiny_patchset(m=16, seed=10)
        val = model.PatchSet(patches=ps.patches.copy(),
                             targets=(1.0 - ps.targets).astype(np.float32),
                             anchors=ps.anchors.copy())
        net = model.build_conv_ica(6, 4, seed=11)
        cfg = model.TrainConfig(lr=2e-4, batch=16, max_epochs=20,
                                patience=1, seed=2)
        hist = model.train(net, ps, val, cfg)
        assert hist.stopped_early
        assert len(hist.epochs) == 2

    def test_best_params_restored(self):
        ps = tiny_patchset(m=16, seed=12)
        val = model.PatchSet(patches=ps.patches.copy(),
                             targets=(1.0 - ps.targets).astype(np.float32),
                             anchors=ps.anchors.copy())
        net = model.build_conv_ica(6, 4, seed=13)
        cfg = model.TrainConfig(lr=5e-3, batch=16, max_epochs=10,
                                patience=3, seed=3)
        hist = model.train(net, ps, val, cfg)
        # rerun the best-epoch evaluation with the restored parameters
        loss, _ = autodiff.forward(net.graph,
                                   {"x": val.patches,
                                    "target": val.targets},
                                   output=net.loss_node)
        assert float(loss) == pytest.approx(hist.best_val_loss, rel=1e-6)

    def test_training_deterministic(self):
        ps = tiny_patchset(m=20, seed=14)
        tr, va = model.split_patchset(ps, seed=4)

        def run():
            net = model.build_conv_ica(6, 4, seed=15)
            cfg = model.TrainConfig(lr=1e-3, batch=8, max_epochs=4,
                                    patience=10, seed=5)
            model.train(net, tr, va, cfg)
            return {k: v.copy() for k, v in net.graph.params.items()}

        a = run()
        b = run()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_divergence_raises_with_epoch(self):
        ps = tiny_patchset(m=8, seed=16)
        net = model.build_conv_ica(6, 4, seed=17)
        net.graph.params["head_w"][:] = np.inf
        cfg = model.TrainConfig(lr=1e-3, batch=8, max_epochs=3,
                                patience=5, seed=6)
        with pytest.raises(Exception) as exc_info:
            model.train(net, ps, ps, cfg)
        assert getattr(exc_info.value, "epoch", None) == 1

    def test_empty_sets_rejected(self):
        ps = tiny_patchset(m=4)
        empty = model.PatchSet(patches=ps.patches[:0],
                               targets=ps.targets[:0],
                               anchors=ps.anchors[:0])
        net = model.build_conv_ica(6, 4, seed=18)
        cfg = model.TrainConfig()
        with pytest.raises(DomainError):
            model.train(net, empty, ps, cfg)


class TestPredictMaps:
    def test_constant_model_gives_constant_maps(self):
        net = model.build_conv_ica(3, 4, seed=19)
        for name, arr in net.graph.params.items():
            arr[:] = 0.0
        net.graph.params["head_b"][:] = [0.25, 0.5]
        img = np.ones((8, 8, 3), dtype=np.float32)
        maps = model.predict_maps(net, img)
        assert np.all(maps.t1_map == 0.25 * net.t1_scale)
        assert np.all(maps.t2_map == 0.5 * net.t2_scale)

    def test_nonoverlapping_stride_single_prediction(self):
        net = model.build_conv_ica(2, 4, seed=20)
        img = np.random.default_rng(21).uniform(
            0.2, 1.0, (8, 8, 2)).astype(np.float32)
        patches, anchors, _ = model.extract_image_patches(img, 4, stride=4)
        assert len(anchors) == 4
        assert len(np.unique(anchors[:, 0] * 8 + anchors[:, 1])) == 4

    def test_overlap_averaging_matches_oracle(self):
        net = model.build_conv_ica(2, 4, seed=22)
        img = np.random.default_rng(23).uniform(
            0.2, 1.0, (8, 8, 2)).astype(np.float32)
        maps = model.predict_maps(net, img, stride=1)

        patches, anchors, fg = model.extract_image_patches(img, 4, stride=1)
        preds = model.predict_patches(net, patches)
        preds[:, 0] *= net.t1_scale
        preds[:, 1] *= net.t2_scale
        sums = np.zeros((8, 8))
        counts = np.zeros((8, 8))
        for (r, c), (p1, _) in zip(anchors, preds):
            sums[r, c] += p1
            counts[r, c] += 1
        covered = counts > 0
        np.testing.assert_allclose(maps.t1_map[covered],
                                   sums[covered] / counts[covered],
                                   rtol=0, atol=1e-9)


class TestChannelSelection:
    def test_mean_scores_single_patch(self):
        net = model.build_conv_ica(5, 4, seed=24)
        patch = np.random.default_rng(25).uniform(
            0, 1, (1, 4, 4, 5)).astype(np.float32)
        mean = model.mean_attention_scores(net, patch)
        _, single = model.channel_attention_forward(patch[0], net)
        np.testing.assert_allclose(mean, single.astype(np.float64),
                                   rtol=0, atol=1e-7)

    def test_mean_scores_duplication_invariant(self):
        net = model.build_conv_ica(5, 4, seed=26)
        patch = np.random.default_rng(27).uniform(
            0, 1, (3, 4, 4, 5)).astype(np.float32)
        a = model.mean_attention_scores(net, patch)
        b = model.mean_attention_scores(net, np.concatenate([patch, patch]))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_mean_scores_against_accumulation_oracle(self):
        net = model.build_conv_ica(6, 4, seed=28)
        patches = np.random.default_rng(29).uniform(
            0, 1, (100, 4, 4, 6)).astype(np.float32)
        mean = model.mean_attention_scores(net, patches, batch=16)
        acc = np.zeros(6, dtype=np.float64)
        for i in range(100):
            _, s = model.channel_attention_forward(patches[i], net)
            acc += s.astype(np.float64)
        np.testing.assert_allclose(mean, acc / 100.0, rtol=0, atol=1e-6)

    def test_attention_selection_basics(self):
        idx = model.select_channels_attention(np.array([0.1, 0.9, 0.5]), 2)
        np.testing.assert_array_equal(idx, [1, 2])
        idx = model.select_channels_attention(np.array([0.3, 0.3, 0.1]), 1)
        np.testing.assert_array_equal(idx, [0])   # tie -> lower index
        full = model.select_channels_attention(np.arange(5) / 5.0, 5)
        np.testing.assert_array_equal(full, np.arange(5))

    def test_attention_selection_matches_sort_oracle(self):
        rng = np.random.default_rng(30)
        scores = rng.uniform(0.2, 0.8, 500)
        idx = model.select_channels_attention(scores, 200)
        oracle = np.sort(np.argsort(-scores, kind="stable")[:200])
        np.testing.assert_array_equal(idx, oracle)

    def test_selection_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(31)
        scores = rng.uniform(0.01, 0.99, 64)
        base = model.select_channels_attention(scores, 10)
        for f in (lambda s: 3.0 * s + 1.0, np.exp,
                  lambda s: np.log(s + 1.0)):
            np.testing.assert_array_equal(
                model.select_channels_attention(f(scores), 10), base)

    def test_selection_range_errors(self):
        with pytest.raises(DomainError):
            model.select_channels_attention(np.ones(4), 0)
        with pytest.raises(DomainError):
            model.select_channels_attention(np.ones(4), 5)

    def test_random_selection(self):
        full = model.select_channels_random(6, 6, seed=0)
        np.testing.assert_array_equal(full, np.arange(6))
        a = model.select_channels_random(100, 10, seed=3)
        b = model.select_channels_random(100, 10, seed=3)
        np.testing.assert_array_equal(a, b)
        assert len(np.unique(a)) == 10

    def test_random_selection_uniformity(self):
        # 1e4 single-channel draws from C=4: frequencies within 3 sigma
        counts = np.zeros(4)
        for s in range(10_000):
            counts[model.select_channels_random(4, 1, seed=s)[0]] += 1
        p = 0.25
        sigma = np.sqrt(10_000 * p * (1 - p))
        assert np.all(np.abs(counts - 2500) <= 3 * sigma)


class TestPca:
    def test_complete_basis_reconstructs(self):
        rng = np.random.default_rng(32)
        sig = rng.uniform(0, 1, (20, 6))
        basis, proj = model.pca_reduce(sig, 6)
        centered = sig - basis.mean
        np.testing.assert_allclose(proj @ basis.components.T, centered,
                                   rtol=0, atol=1e-6)

    def test_line_data_first_component(self):
        rng = np.random.default_rng(33)
        direction = np.array([1.0, 2.0, -0.5, 0.25])
        sig = np.outer(rng.uniform(-1, 1, 50), direction) + 3.0
        basis, _ = model.pca_reduce(sig, 2)
        assert basis.variance_fractions[0] >= 1.0 - 1e-9

    def test_variance_fractions_vs_gram_oracle(self):
        rng = np.random.default_rng(34)
        sig = rng.normal(0, 1, (40, 8)) @ rng.normal(0, 1, (8, 8))
        basis, _ = model.pca_reduce(sig, 3)
        centered = sig - sig.mean(axis=0)
        evals = np.sort(np.linalg.eigvalsh(centered.T @ centered))[::-1]
        oracle = evals[:3] / evals.sum()
        np.testing.assert_allclose(basis.variance_fractions, oracle,
                                   rtol=0, atol=1e-6)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(35)
        basis, _ = model.pca_reduce(rng.normal(0, 1, (30, 7)), 4)
        np.testing.assert_allclose(basis.components.T @ basis.components,
                                   np.eye(4), rtol=0, atol=1e-10)

    def test_n_out_of_range(self):
        with pytest.raises(DomainError):
            model.pca_reduce(np.ones((5, 3)), 4)


class TestPersistence:
    def test_model_round_trip(self, tmp_path):
        net = model.build_conv_ica(6, 4, seed=36)
        ckpt = tmp_path / "m.mrfw"
        sidecar = tmp_path / "m.json"
        reduction = {"method": "random", "indices": [0, 2, 3, 5, 7, 9]}
        model.save_model(net, ckpt, sidecar, reduction=reduction)
        back, red = model.load_model(ckpt, sidecar)
        assert red == reduction
        assert back.channels == 6
        for name in net.graph.params:
            np.testing.assert_array_equal(back.graph.params[name],
                                          net.graph.params[name])

    def test_apply_reduction_paths(self):
        rng = np.random.default_rng(37)
        img = rng.uniform(0.1, 1.0, (6, 6, 10)).astype(np.float32)
        sel = model.apply_reduction(img, {"method": "random",
                                          "indices": [1, 4, 6]})
        np.testing.assert_array_equal(sel, img[:, :, [1, 4, 6]])
        basis, _ = model.pca_reduce(img.reshape(-1, 10), 3)
        out = model.apply_reduction(
            img, {"method": "pca", "mean": basis.mean.tolist(),
                  "components": basis.components.tolist()})
        assert out.shape == (6, 6, 3)
        assert model.apply_reduction(img, None) is img
