"""Tests for branches, fusion rules and losses."""

import math

import numpy as np
import pytest

from taxafuse import ndiff as nd
from taxafuse.model import (
    ContextBranch,
    FusionError,
    FusionMode,
    ImageBranch,
    ModelBundle,
    ModelConfig,
    ModelError,
    SatelliteBranch,
    binary_cross_entropy,
    cross_entropy,
    fuse_early_features,
    fuse_late,
    hierarchical_nll,
    infer_separate,
    marginalisation_loss,
)
from taxafuse.ndiff import Tensor
from taxafuse.taxonomy import build_taxonomy

TOY_RECORDS = [
    ("s1", "gA", "fX", "o", "c", "p"),
    ("s2", "gA", "fX", "o", "c", "p"),
    ("s3", "gA", "fX", "o", "c", "p"),
    ("s4", "gB", "fX", "o", "c", "p"),
    ("s5", "gB", "fX", "o", "c", "p"),
    ("s6", "gC", "fY", "o", "c", "p"),
]


def small_config(n_species=6):
    return ModelConfig(
        n_species=n_species,
        image_widths=(4, 8),
        context_hidden=(8,),
        satellite_widths=(4,),
        satellite_bands=4,
    )


def rng_for(seed):
    return np.random.default_rng(seed)


class TestImageBranch:
    def test_zero_head_gives_uniform_softmax(self):
        branch = ImageBranch(small_config(), rng_for(0))
        branch.head.w.data[:] = 0.0
        branch.head.b.data[:] = 0.0
        images = rng_for(1).standard_normal((2, 3, 16, 16))
        logits = branch.logits(Tensor(images))
        np.testing.assert_array_equal(logits.data, 0.0)
        post = nd.softmax(logits)
        np.testing.assert_allclose(post.data, 1 / 6)

    def test_eval_deterministic(self):
        branch = ImageBranch(small_config(), rng_for(0))
        images = rng_for(2).standard_normal((1, 3, 16, 16))
        a = branch.logits(Tensor(images)).data
        b = branch.logits(Tensor(images)).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_through_ce(self):
        config = ModelConfig(n_species=3, image_widths=(2,), context_hidden=(4,))
        branch = ImageBranch(config, rng_for(3))
        images = Tensor(rng_for(4).standard_normal((2, 3, 6, 6)))
        labels = np.array([0, 2])

        def f():
            return cross_entropy(nd.softmax(branch.logits(images)), labels)

        err = nd.check_gradients(f, branch.params, h=1e-5)
        assert err < 1e-4


class TestContextBranch:
    def test_zero_final_layer_gives_half(self):
        branch = ContextBranch(small_config(), rng_for(0))
        branch.out.w.data[:] = 0.0
        branch.out.b.data[:] = 0.0
        probs = branch.probabilities(Tensor(np.zeros((3, 5))))
        np.testing.assert_array_equal(probs.data, 0.5)

    def test_outputs_strictly_in_unit_interval(self):
        branch = ContextBranch(small_config(), rng_for(1))
        ctx = rng_for(2).uniform(-1, 1, (10, 5))
        probs = branch.probabilities(Tensor(ctx)).data
        assert (probs > 0).all() and (probs < 1).all()

    def test_rejects_wrong_width(self):
        branch = ContextBranch(small_config(), rng_for(1))
        with pytest.raises(ModelError):
            branch.probabilities(Tensor(np.zeros((2, 4))))

    def test_gradient(self):
        config = small_config(3)
        branch = ContextBranch(config, rng_for(5))
        ctx = Tensor(rng_for(6).uniform(-1, 1, (4, 5)))
        target = np.zeros((4, 3))
        target[np.arange(4), [0, 1, 2, 0]] = 1.0

        def f():
            return binary_cross_entropy(branch.probabilities(ctx), target)

        assert nd.check_gradients(f, branch.params, h=1e-5) < 1e-4


class TestSatelliteBranch:
    def test_zero_head_gives_half(self):
        branch = SatelliteBranch(small_config(), rng_for(0))
        branch.head.w.data[:] = 0.0
        branch.head.b.data[:] = 0.0
        patches = rng_for(1).standard_normal((2, 4, 8, 8))
        probs = branch.probabilities(Tensor(patches))
        np.testing.assert_array_equal(probs.data, 0.5)

    def test_range_and_gradient(self):
        config = ModelConfig(
            n_species=3, satellite_widths=(2,), satellite_bands=4, image_widths=(2,)
        )
        branch = SatelliteBranch(config, rng_for(2))
        patches = Tensor(rng_for(3).standard_normal((2, 4, 6, 6)))
        probs = branch.probabilities(patches).data
        assert (probs > 0).all() and (probs < 1).all()
        target = np.eye(3)[:2]

        def f():
            return binary_cross_entropy(branch.probabilities(patches), target)

        assert nd.check_gradients(f, branch.params, h=1e-5) < 1e-4

    def test_dropout_train_only(self):
        branch = SatelliteBranch(small_config(), rng_for(4))
        patches = Tensor(rng_for(5).standard_normal((1, 4, 8, 8)))
        eval_a = branch.probabilities(patches, use_dropout=True, train=False).data
        eval_b = branch.probabilities(patches, use_dropout=False).data
        np.testing.assert_array_equal(eval_a, eval_b)
        train = branch.probabilities(
            patches, use_dropout=True, train=True, rng=rng_for(6)
        ).data
        assert not np.allclose(train, eval_a)


class TestLateFusion:
    def test_uniform_context_keeps_image_posterior(self):
        logits = Tensor(np.array([[1.0, 2.0, 0.5]]))
        ctx = Tensor(np.full((1, 3), 0.5))
        fused = fuse_late(logits, ctx).data
        np.testing.assert_allclose(fused, nd.softmax(logits).data, atol=1e-12)

    def test_hand_example(self):
        # image (0.5, 0.5) x context (0.9, 0.1) -> (0.9, 0.1)
        logits = Tensor(np.zeros((1, 2)))
        ctx = Tensor(np.array([[0.9, 0.1]]))
        fused = fuse_late(logits, ctx).data
        np.testing.assert_allclose(fused, [[0.9, 0.1]], atol=1e-12)

    def test_normalised(self):
        rng = rng_for(7)
        logits = Tensor(rng.standard_normal((5, 11)))
        ctx = Tensor(rng.uniform(0.01, 0.99, (5, 11)))
        sat = Tensor(rng.uniform(0.01, 0.99, (5, 11)))
        fused = fuse_late(logits, ctx, sat).data
        np.testing.assert_allclose(fused.sum(axis=1), 1.0, atol=1e-12)

    def test_positive_rescaling_keeps_argmax(self):
        rng = rng_for(8)
        logits = Tensor(rng.standard_normal((6, 9)))
        ctx_raw = rng.uniform(0.01, 0.99, (6, 9))
        base = fuse_late(logits, Tensor(ctx_raw)).data.argmax(axis=1)
        for const in (1e-3, 0.5, 7.3):
            scaled = fuse_late(logits, Tensor(ctx_raw * const)).data.argmax(axis=1)
            np.testing.assert_array_equal(base, scaled)

    def test_log_domain_matches_direct_product(self):
        rng = rng_for(9)
        logits = rng.standard_normal((4, 7))
        ctx = rng.uniform(0.05, 0.95, (4, 7))
        fused = fuse_late(Tensor(logits), Tensor(ctx)).data
        soft = np.exp(logits - logits.max(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        direct = soft * ctx
        direct /= direct.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(fused, direct, atol=1e-9)

    def test_all_zero_context_row_raises(self):
        logits = Tensor(np.zeros((1, 3)))
        with pytest.raises(FusionError):
            fuse_late(logits, Tensor(np.zeros((1, 3))))

    def test_nonfinite_logits_raise(self):
        with pytest.raises(FusionError):
            fuse_late(Tensor(np.array([[np.nan, 0.0]])), Tensor(np.full((1, 2), 0.5)))

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            fuse_late(Tensor(np.zeros((1, 3))), Tensor(np.full((1, 4), 0.5)))


class TestSeparateInference:
    def test_fallback_without_context(self):
        logits = Tensor(np.array([[2.0, 1.0, 0.0]]))
        post = infer_separate(logits).data
        np.testing.assert_allclose(post, nd.softmax(logits).data)

    def test_uniform_image_follows_context(self):
        logits = Tensor(np.zeros((1, 3)))
        ctx = Tensor(np.array([[0.1, 0.7, 0.2]]))
        post = infer_separate(logits, ctx).data
        assert post.argmax() == 1

    def test_matches_fuse_late(self):
        rng = rng_for(10)
        logits = Tensor(rng.standard_normal((3, 5)))
        ctx = Tensor(rng.uniform(0.1, 0.9, (3, 5)))
        np.testing.assert_array_equal(
            infer_separate(logits, ctx).data, fuse_late(logits, ctx).data
        )


class TestEarlyFusion:
    def test_concat_length(self):
        feats = Tensor(np.zeros((2, 8)))
        ctx = Tensor(np.zeros((2, 5)))
        fused = fuse_early_features(feats, ctx)
        assert fused.shape == (2, 13)

    def test_missing_context_rejected(self):
        with pytest.raises(ModelError):
            fuse_early_features(Tensor(np.zeros((2, 8))), None)

    def test_zero_head_uniform(self):
        config = small_config()
        bundle = ModelBundle(config, FusionMode("early"), use_context=True, fingerprint="f")
        bundle.early_head.head.w.data[:] = 0.0
        bundle.early_head.head.b.data[:] = 0.0
        images = rng_for(11).standard_normal((2, 3, 16, 16))
        ctx = rng_for(12).uniform(-1, 1, (2, 5))
        post = bundle.eval_posterior(images, ctx)
        np.testing.assert_allclose(post, 1 / 6)

    def test_gradient_reaches_both_branches(self):
        config = ModelConfig(n_species=4, image_widths=(2,), context_hidden=(4,))
        bundle = ModelBundle(config, FusionMode("early"), use_context=True, fingerprint="f")
        images = Tensor(rng_for(13).standard_normal((3, 3, 8, 8)))
        ctx = Tensor(rng_for(14).uniform(-1, 1, (3, 5)))
        labels = np.array([0, 1, 2])
        feats = bundle.image.features(images)
        post = bundle.early_head.posterior(fuse_early_features(feats, ctx))
        loss = cross_entropy(post, labels)
        loss.backward()
        assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in bundle.image.conv_params)
        assert any(
            p.grad is not None and np.abs(p.grad).max() > 0 for p in bundle.early_head.params
        )


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        post = Tensor(np.array([[0.0, 1.0, 0.0]]))
        assert float(cross_entropy(post, [1]).data) == 0.0

    def test_uniform_is_log_c(self):
        c = 7
        post = Tensor(np.full((3, c), 1.0 / c))
        assert float(cross_entropy(post, [0, 3, 6]).data) == pytest.approx(math.log(c))

    def test_zero_probability_clamped_with_warning(self):
        post = Tensor(np.array([[1.0, 0.0]]))
        with pytest.warns(RuntimeWarning):
            loss = cross_entropy(post, [1])
        assert float(loss.data) == pytest.approx(-math.log(1e-12))

    def test_gradient(self):
        rng = rng_for(15)
        x = nd.parameter(rng.standard_normal((4, 5)), "x")
        labels = np.array([0, 2, 4, 1])

        def f():
            return cross_entropy(nd.softmax(x), labels)

        assert nd.check_gradients(f, [x], h=1e-5) < 1e-4


class TestMarginalisationLoss:
    def setup_method(self):
        self.tree = build_taxonomy(TOY_RECORDS)

    def test_one_hot_correct_species_zero_at_every_level(self):
        labels = [self.tree.name_to_id("species")["s3"]]
        post = np.zeros((1, 6))
        post[0, labels[0]] = 1.0
        loss = marginalisation_loss(Tensor(post), labels, self.tree)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_toy_hand_value(self):
        # uniform posterior, label s1 in the 3-species genus gA of family fX:
        # species ln6, genus -ln(1/2), family -ln(5/6), coarser levels 0
        label = self.tree.name_to_id("species")["s1"]
        post = np.full((1, 6), 1 / 6)
        loss = float(marginalisation_loss(Tensor(post), [label], self.tree).data)
        expected = math.log(6) - math.log(0.5) - math.log(5 / 6)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_at_least_species_ce(self):
        rng = rng_for(16)
        for _ in range(10):
            post = rng.dirichlet(np.ones(6), size=3)
            labels = rng.integers(0, 6, size=3)
            marg = float(marginalisation_loss(Tensor(post), labels, self.tree).data)
            ce = float(cross_entropy(Tensor(post), labels).data)
            assert marg >= ce - 1e-12

    def test_single_level_equals_ce_exactly(self):
        rng = rng_for(17)
        post = Tensor(rng.dirichlet(np.ones(4), size=2))
        labels = np.array([1, 3])
        nll = hierarchical_nll(post, labels, [], [labels])
        ce = cross_entropy(post, labels)
        assert float(nll.data) == float(ce.data)

    def test_degenerate_six_level_tree_matches_ce(self):
        records = [(f"s{i}", f"g{i}", "f", "o", "c", "p") for i in range(4)]
        tree = build_taxonomy(records)  # levels above genus have one node
        rng = rng_for(18)
        post = rng.dirichlet(np.ones(4), size=3)
        labels = rng.integers(0, 4, size=3)
        marg = float(marginalisation_loss(Tensor(post), labels, tree).data)
        # genus level is a bijection of species; coarser levels contribute ~0
        ce = float(cross_entropy(Tensor(post), labels).data)
        assert marg == pytest.approx(2 * ce, abs=1e-9)

    def test_gradient_through_marginalise_chain(self):
        rng = rng_for(19)
        x = nd.parameter(rng.standard_normal((3, 6)), "x")
        labels = np.array([0, 3, 5])

        def f():
            return marginalisation_loss(nd.softmax(x), labels, self.tree)

        assert nd.check_gradients(f, [x], h=1e-5) < 1e-4

    def test_three_level_chain_gradient(self):
        # generic hierarchy chain: 6 classes -> 3 -> 1
        rng = rng_for(20)
        x = nd.parameter(rng.standard_normal((2, 6)), "x")
        parents = [np.array([0, 0, 1, 1, 2, 2]), np.array([0, 0, 0])]
        labels = np.array([2, 5])
        level_labels = [labels, parents[0][labels], np.zeros(2, dtype=int)]

        def f():
            return hierarchical_nll(nd.softmax(x), labels, parents, level_labels)

        assert nd.check_gradients(f, [x], h=1e-5) < 1e-4


class TestBundlePersistence:
    def test_round_trip_identical_posteriors(self, tmp_path):
        config = small_config()
        bundle = ModelBundle(
            config, FusionMode("late"), use_context=True, fingerprint="fp123", seed=5
        )
        from taxafuse.model import PreprocessState

        bundle.preprocess = PreprocessState(
            bounds_array=np.array([[6.0, 10.0], [45.5, 47.5], [200.0, 4000.0]]),
            image_mean=np.zeros(3),
            image_std=np.ones(3),
            resize_to=16,
            crop_to=16,
        )
        path = tmp_path / "m.ckpt"
        bundle.save(path)
        again = ModelBundle.load(path)
        assert again.fingerprint == "fp123"
        assert again.mode == bundle.mode
        assert again.use_context
        images = rng_for(21).standard_normal((2, 3, 16, 16))
        ctx = rng_for(22).uniform(-1, 1, (2, 5))
        np.testing.assert_array_equal(
            bundle.eval_posterior(images, ctx), again.eval_posterior(images, ctx)
        )
        assert again.preprocess.resize_to == 16

    def test_fusion_tag_validated(self):
        with pytest.raises(ModelError):
            FusionMode("mid")
