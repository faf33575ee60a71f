"""Identity encoder: feature extraction, margin loss, triplet AUC."""

import math

import numpy as np
import pytest
import torch

from facepersona.encoder import (
    EncoderConfig,
    MarginHead,
    MultiScaleIdentityEncoder,
    MultiScaleIdentityFeature,
    SimilarityDistribution,
    extract_multiscale_identity,
    margin_softmax_loss,
    multiscale_arcface_loss,
    roc_auc,
    similarity_distribution,
)
from facepersona.errors import ConfigError, EmptyInputError, InputShapeError, SamplingError
from facepersona.synthetic import make_identity_dataset

from conftest import ENCODER_CFG


def margin_loss_oracle(vec, label, W, m, s):
    """Straight numpy transcription of the margin-softmax definition."""
    v = vec / np.linalg.norm(vec)
    Wn = W / np.linalg.norm(W, axis=0, keepdims=True)
    cos = v @ Wn
    theta_y = math.acos(np.clip(cos[label], -1 + 1e-7, 1 - 1e-7))
    logits = s * cos
    logits[label] = s * math.cos(theta_y + m)
    shifted = logits - logits.max()
    return float(-(shifted[label] - math.log(np.exp(shifted).sum())))


class TestExtraction:
    def test_same_image_twice_is_bit_identical(self, toy_stack, face_batch):
        images, _, _ = face_batch
        f1 = extract_multiscale_identity(images[0], toy_stack.identity_encoder)
        f2 = extract_multiscale_identity(images[0], toy_stack.identity_encoder)
        assert torch.equal(f1.concatenated, f2.concatenated)

    def test_concatenated_width_from_config(self):
        cfg = EncoderConfig(num_layers=12, depth_set=(3, 6, 9, 12), embed_dim=64,
                            image_size=32, patch_size=8, num_identities=4)
        torch.manual_seed(0)
        encoder = MultiScaleIdentityEncoder(cfg)
        feat = encoder.extract(torch.rand(3, 32, 32))
        assert feat.concatenated.shape == (256,)
        assert len(feat.per_level) == 4

    def test_concatenation_is_in_order(self, toy_stack, face_batch):
        images, _, _ = face_batch
        feat = toy_stack.identity_encoder.extract(images[0])
        manual = torch.cat(feat.per_level)
        assert torch.equal(feat.concatenated, manual)

    def test_resolution_mismatch_raises(self, toy_stack):
        with pytest.raises(InputShapeError):
            toy_stack.identity_encoder.extract(torch.rand(3, 16, 16))

    def test_depth_set_beyond_num_layers_is_config_error(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=4, depth_set=(1, 2, 5), embed_dim=32,
                          image_size=32, patch_size=8)

    def test_depth_set_must_increase(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=4, depth_set=(2, 2, 3), embed_dim=32,
                          image_size=32, patch_size=8)

    def test_flip_keeps_identity_closer_than_stranger(self, trained_encoder, face_batch):
        images, labels, _ = face_batch
        anchor = trained_encoder.extract(images[0]).concatenated
        flipped = trained_encoder.extract(torch.flip(images[0], dims=[2])).concatenated
        stranger_idx = int((labels != labels[0]).nonzero()[0])
        stranger = trained_encoder.extract(images[stranger_idx]).concatenated
        cos = torch.nn.functional.cosine_similarity
        assert cos(anchor[None], flipped[None]) > cos(anchor[None], stranger[None])


class TestMarginLoss:
    def test_aligned_feature_closed_form(self):
        # K=2, feature exactly on the target column, m=0, s=1: the loss is
        # -log(e / (e + e^{cos theta_other})) with theta_other known.
        theta_other = 1.1
        W = torch.tensor([[1.0, math.cos(theta_other)],
                          [0.0, math.sin(theta_other)]])
        head = MarginHead(2, 2)
        with torch.no_grad():
            head.weight.copy_(W)
        feature = torch.tensor([1.0, 0.0])
        loss = margin_softmax_loss(feature, torch.tensor(0), head, margin=0.0, scale=1.0)
        expected = -math.log(math.e / (math.e + math.exp(math.cos(theta_other))))
        assert float(loss) == pytest.approx(expected, abs=1e-5)

    def test_zero_margin_is_scaled_softmax(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            dim, k = int(rng.integers(3, 10)), int(rng.integers(2, 8))
            vec = rng.standard_normal(dim)
            W = rng.standard_normal((dim, k))
            label = int(rng.integers(k))
            s = float(rng.uniform(1.0, 30.0))
            head = MarginHead(dim, k)
            with torch.no_grad():
                head.weight.copy_(torch.from_numpy(W).float())
            loss = margin_softmax_loss(
                torch.from_numpy(vec).float(), torch.tensor(label), head, 0.0, s
            )
            # independent softmax cross-entropy on the scaled cosines
            v = vec / np.linalg.norm(vec)
            Wn = W / np.linalg.norm(W, axis=0, keepdims=True)
            logits = s * (v @ Wn)
            shifted = logits - logits.max()
            expected = -(shifted[label] - math.log(np.exp(shifted).sum()))
            assert float(loss) == pytest.approx(expected, abs=1e-5)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(1)
        cfg = ENCODER_CFG
        for _ in range(25):
            dim = cfg.feature_dim
            vec = rng.standard_normal(dim)
            W = rng.standard_normal((dim, cfg.num_identities))
            label = int(rng.integers(cfg.num_identities))
            head = MarginHead(dim, cfg.num_identities)
            with torch.no_grad():
                head.weight.copy_(torch.from_numpy(W).float())
            feature = MultiScaleIdentityFeature(
                per_level=list(torch.from_numpy(vec).float().chunk(len(cfg.depth_set))),
                depths=cfg.depth_set,
            )
            loss = multiscale_arcface_loss(feature, label, head, cfg)
            expected = margin_loss_oracle(vec, label, W, cfg.margin, cfg.scale)
            assert float(loss) == pytest.approx(expected, abs=1e-5)

    def test_invariant_to_positive_rescaling(self):
        torch.manual_seed(3)
        head = MarginHead(8, 4)
        vec = torch.randn(8)
        a = margin_softmax_loss(vec, torch.tensor(1), head, 0.3, 10.0)
        b = margin_softmax_loss(vec * 37.5, torch.tensor(1), head, 0.3, 10.0)
        assert float(a) == pytest.approx(float(b), abs=1e-5)

    def test_label_out_of_range(self):
        head = MarginHead(4, 3)
        with pytest.raises(IndexError):
            margin_softmax_loss(torch.randn(4), torch.tensor(3), head, 0.3, 10.0)

    def test_non_finite_feature(self):
        from facepersona.errors import NumericError

        head = MarginHead(4, 3)
        with pytest.raises(NumericError):
            margin_softmax_loss(torch.tensor([1.0, float("nan"), 0.0, 0.0]),
                                torch.tensor(0), head, 0.3, 10.0)

    def test_single_level_equals_plain_margin_loss(self):
        # depth set of size one: the multi-scale loss is the single-scale
        # loss on that tap's vector.
        cfg = EncoderConfig(num_layers=4, depth_set=(4,), embed_dim=32,
                            image_size=32, patch_size=8, num_identities=5)
        torch.manual_seed(4)
        head = MarginHead(32, 5)
        vec = torch.randn(32)
        feature = MultiScaleIdentityFeature(per_level=[vec], depths=(4,))
        a = multiscale_arcface_loss(feature, 2, head, cfg)
        b = margin_softmax_loss(vec, torch.tensor(2), head, cfg.margin, cfg.scale)
        assert float(a) == pytest.approx(float(b), abs=1e-7)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        h = 1e-6
        for trial in range(10):
            dim, k = 12, 5
            vec64 = torch.tensor(rng.standard_normal(dim), dtype=torch.float64,
                                 requires_grad=True)
            head = MarginHead(dim, k).double()
            with torch.no_grad():
                head.weight.copy_(torch.tensor(rng.standard_normal((dim, k))))
            label = torch.tensor(int(rng.integers(k)))
            m, s = 0.4, 8.0
            loss = margin_softmax_loss(vec64, label, head, m, s)
            loss.backward()

            def f(v_np, W_np):
                head2 = MarginHead(dim, k).double()
                with torch.no_grad():
                    head2.weight.copy_(torch.tensor(W_np))
                return float(margin_softmax_loss(
                    torch.tensor(v_np, dtype=torch.float64), label, head2, m, s
                ))

            v_np = vec64.detach().numpy()
            W_np = head.weight.detach().numpy()
            for _ in range(3):
                i = int(rng.integers(dim))
                dv = np.zeros(dim); dv[i] = h
                fd = (f(v_np + dv, W_np) - f(v_np - dv, W_np)) / (2 * h)
                grad = float(vec64.grad[i])
                assert abs(fd - grad) / max(abs(grad), 1e-8) < 1e-3
            for _ in range(3):
                i, j = int(rng.integers(dim)), int(rng.integers(k))
                dW = np.zeros((dim, k)); dW[i, j] = h
                fd = (f(v_np, W_np + dW) - f(v_np, W_np - dW)) / (2 * h)
                grad = float(head.weight.grad[i, j])
                assert abs(fd - grad) / max(abs(grad), 1e-8) < 1e-3


def _feature_of(vec: torch.Tensor) -> MultiScaleIdentityFeature:
    return MultiScaleIdentityFeature(per_level=[vec], depths=(1,))


class TestSimilarityDistribution:
    def test_triplet_counts(self):
        torch.manual_seed(0)
        gallery = {
            "a": [_feature_of(torch.randn(8)) for _ in range(2)],
            "b": [_feature_of(torch.randn(8)) for _ in range(2)],
        }
        dist = similarity_distribution(gallery, layer=1, seed=0)
        assert len(dist.same_scores) == 2
        assert len(dist.diff_scores) == 2

    def test_identical_anchor_and_positive_scores_one(self):
        vec = torch.randn(8)
        gallery = {
            "a": [_feature_of(vec), _feature_of(vec.clone())],
            "b": [_feature_of(torch.randn(8)), _feature_of(torch.randn(8))],
        }
        dist = similarity_distribution(gallery, layer=1, seed=0)
        assert dist.same_scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_fixed_seed_reproduces(self):
        torch.manual_seed(1)
        gallery = {
            str(i): [_feature_of(torch.randn(8)) for _ in range(3)] for i in range(4)
        }
        d1 = similarity_distribution(gallery, layer=1, seed=42)
        d2 = similarity_distribution(gallery, layer=1, seed=42)
        assert d1.same_scores == d2.same_scores
        assert d1.diff_scores == d2.diff_scores

    def test_identity_with_one_image_is_named(self):
        gallery = {
            "solo": [_feature_of(torch.randn(8))],
            "duo": [_feature_of(torch.randn(8)) for _ in range(2)],
        }
        with pytest.raises(SamplingError, match="solo"):
            similarity_distribution(gallery, layer=1, seed=0)


def auc_counting_oracle(same, diff):
    """O(n*m) double loop, ties 0.5."""
    total = 0.0
    for s in same:
        for d in diff:
            if s > d:
                total += 1.0
            elif s == d:
                total += 0.5
    return total / (len(same) * len(diff))


class TestRocAuc:
    def test_perfect_separation(self):
        dist = SimilarityDistribution(same_scores=[0.8, 0.9], diff_scores=[0.1, 0.2], layer=1)
        assert roc_auc(dist) == 1.0

    def test_identical_multisets_give_half(self):
        scores = [0.1, 0.5, 0.9]
        dist = SimilarityDistribution(same_scores=scores, diff_scores=list(scores), layer=1)
        assert roc_auc(dist) == 0.5

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            same = list(np.round(rng.uniform(-1, 1, 50), 2))
            diff = list(np.round(rng.uniform(-1, 1, 50), 2))
            dist = SimilarityDistribution(same_scores=same, diff_scores=diff, layer=1)
            assert roc_auc(dist) == auc_counting_oracle(same, diff)

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            roc_auc(SimilarityDistribution(same_scores=[], diff_scores=[0.1], layer=1))
