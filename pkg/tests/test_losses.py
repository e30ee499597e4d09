import math

import numpy as np
import pytest
import torch

from ovdistill.errors import ConfigError, DegenerateInput
from ovdistill.losses import (
    LossWeights,
    assemble_losses,
    attention_grounding_score,
    contrastive_caption_loss,
    distill_loss,
    pairwise_caption_scores,
    similarity_grounding_score,
)

from oracles import (
    contrastive_oracle,
    distill_oracle,
    grounding_score_attn_oracle,
    grounding_score_sim_oracle,
)


class TestSimilarityGroundingScore:
    def test_single_pair_returns_raw_similarity(self):
        w = torch.tensor([[2.0, 1.0]])
        r = torch.tensor([[0.5, -1.0]])
        assert abs(float(similarity_grounding_score(w, r)) - 0.0) < 1e-7
        r2 = torch.tensor([[1.0, 1.0]])
        assert abs(float(similarity_grounding_score(w, r2)) - 3.0) < 1e-7

    def test_two_region_softmax_example(self):
        # similarities (2, 0): score = 2*e^2 / (e^2 + 1)
        w = torch.tensor([[1.0, 0.0]])
        r = torch.tensor([[2.0, 0.0], [0.0, 5.0]])
        want = 2 * math.e**2 / (math.e**2 + 1)
        assert abs(float(similarity_grounding_score(w, r)) - want) < 1e-6
        assert abs(want - 1.76159) < 1e-4

    def test_bounded_by_max_similarity(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            w = torch.as_tensor(rng.standard_normal((4, 6)))
            r = torch.as_tensor(rng.standard_normal((5, 6)))
            score = float(similarity_grounding_score(w, r))
            assert score <= float((w @ r.T).max()) + 1e-9

    def test_empty_regions(self):
        with pytest.raises(DegenerateInput):
            similarity_grounding_score(torch.ones(1, 4), torch.ones(0, 4))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(120):
            n_w = int(rng.integers(1, 9))
            n_r = int(rng.integers(1, 17))
            w = rng.standard_normal((n_w, 8))
            r = rng.standard_normal((n_r, 8))
            got = float(similarity_grounding_score(torch.as_tensor(w), torch.as_tensor(r)))
            want = grounding_score_sim_oracle(w.tolist(), r.tolist())
            assert abs(got - want) < 1e-6


class TestAttentionGroundingScore:
    def test_one_hot_attention_selects_region(self):
        c = torch.tensor([[1.0, 0.0]])
        r = torch.tensor([[0.3, 0.0], [0.9, 0.0]])
        attn = torch.tensor([[0.0, 1.0]])
        assert abs(float(attention_grounding_score(c, r, attn)) - 0.9) < 1e-7

    def test_uniform_attention_is_mean(self):
        c = torch.tensor([[1.0, 0.0]])
        r = torch.tensor([[0.4, 0.0], [0.8, 0.0]])
        attn = torch.tensor([[0.5, 0.5]])
        assert abs(float(attention_grounding_score(c, r, attn)) - 0.6) < 1e-7

    def test_two_concepts_average(self):
        c = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        r = torch.tensor([[0.5, 0.1], [0.2, 0.7]])
        attn = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        want = 0.5 * (0.5 + 0.7)
        assert abs(float(attention_grounding_score(c, r, attn)) - want) < 1e-7

    def test_all_concepts_removed(self):
        with pytest.raises(DegenerateInput):
            attention_grounding_score(torch.ones(0, 4), torch.ones(3, 4), torch.ones(0, 3))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(120):
            n_c = int(rng.integers(1, 5))
            n_r = int(rng.integers(1, 13))
            c = rng.standard_normal((n_c, 8))
            r = rng.standard_normal((n_r, 8))
            raw = rng.random((n_c, n_r))
            attn = raw / raw.sum(axis=1, keepdims=True)
            got = float(
                attention_grounding_score(
                    torch.as_tensor(c), torch.as_tensor(r), torch.as_tensor(attn)
                )
            )
            want = grounding_score_attn_oracle(c.tolist(), r.tolist(), attn.tolist())
            assert abs(got - want) < 1e-6


class TestContrastiveCaptionLoss:
    def test_batch_of_one_is_zero(self):
        scores = torch.tensor([[3.7]])
        assert abs(float(contrastive_caption_loss(scores))) < 1e-7

    def test_two_pair_analytic(self):
        scores = torch.tensor([[2.0, 0.0], [0.0, 2.0]])
        want_direction = math.log(1 + math.e**-2)
        # both directions, mean over pairs
        assert abs(float(contrastive_caption_loss(scores)) - 2 * want_direction) < 1e-6
        assert abs(want_direction - 0.126928) < 1e-5

    def test_image_side_shift_invariance(self):
        # adding a constant to every caption's score against one image leaves
        # that image's caption-normalized loss term unchanged
        torch.manual_seed(0)
        scores = torch.randn(3, 3, dtype=torch.float64)

        def image_side(s, k):
            return float(-(s[k, k] - torch.logsumexp(s[:, k], dim=0)))

        shifted = scores.clone()
        shifted[:, 1] += 5.0
        assert abs(image_side(scores, 1) - image_side(shifted, 1)) < 1e-9

    def test_nonnegative_each_direction(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            n = int(rng.integers(1, 5))
            s = torch.as_tensor(rng.standard_normal((n, n)))
            diag = torch.diagonal(s)
            image_side = -(diag - torch.logsumexp(s, dim=0))
            text_side = -(diag - torch.logsumexp(s, dim=1))
            assert (image_side >= -1e-12).all()
            assert (text_side >= -1e-12).all()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(120):
            n = int(rng.integers(1, 6))
            s = rng.standard_normal((n, n))
            got = float(contrastive_caption_loss(torch.as_tensor(s)))
            want = contrastive_oracle(s.tolist())
            assert abs(got - want) < 1e-6

    def test_pairwise_scores_shape_and_values(self):
        rng = np.random.default_rng(5)
        words = [torch.as_tensor(rng.standard_normal((3, 4))) for _ in range(2)]
        regions = [torch.as_tensor(rng.standard_normal((5, 4))) for _ in range(2)]
        m = pairwise_caption_scores(words, regions)
        assert m.shape == (2, 2)
        for t in range(2):
            for i in range(2):
                want = float(similarity_grounding_score(words[t], regions[i]))
                assert abs(float(m[t, i]) - want) < 1e-9

    def test_rectangular_rejected(self):
        with pytest.raises(ConfigError):
            contrastive_caption_loss(torch.zeros(2, 3))


class TestDistillLoss:
    def test_batch_one_equal_scores_is_zero(self):
        a = torch.tensor([1.3])
        s = torch.tensor([[1.3]])
        loss = distill_loss(a, s, [True])
        assert abs(float(loss)) < 1e-7

    def test_batch_one_log_ratio(self):
        # single pair: each direction reduces to s - a
        a = torch.tensor([0.4])
        s = torch.tensor([[0.9]])
        loss = distill_loss(a, s, [True])
        assert abs(float(loss) - 2 * (0.9 - 0.4)) < 1e-6

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(120):
            n = int(rng.integers(1, 5))
            a = rng.standard_normal(n)
            s = rng.standard_normal((n, n))
            valid = rng.random(n) > 0.2
            if not valid.any():
                valid[0] = True
            for variant in (False, True):
                got = float(
                    distill_loss(
                        torch.as_tensor(a), torch.as_tensor(s), valid.tolist(),
                        positive_uses_attention=variant,
                    )
                )
                want = distill_oracle(a.tolist(), s.tolist(), valid.tolist(), variant)
                assert abs(got - want) < 1e-6

    def test_monotone_in_positive_attention_score(self):
        rng = np.random.default_rng(7)
        s = torch.as_tensor(rng.standard_normal((3, 3)))
        a = torch.as_tensor(rng.standard_normal(3))
        base = float(distill_loss(a, s, [True] * 3))
        bumped = a.clone()
        bumped[1] += 0.25
        after = float(distill_loss(bumped, s, [True] * 3))
        assert after < base

    def test_all_invalid_contributes_zero(self):
        loss = distill_loss(torch.zeros(2), torch.zeros(2, 2), [False, False])
        assert float(loss) == 0.0

    def test_clean_flags_match_unfiltered_path(self):
        # with no noise flags set, filtering is the identity
        rng = np.random.default_rng(8)
        a = torch.as_tensor(rng.standard_normal(3))
        s = torch.as_tensor(rng.standard_normal((3, 3)))
        assert float(distill_loss(a, s, [True] * 3)) == pytest.approx(
            distill_oracle(a.tolist(), s.tolist(), [True] * 3), abs=1e-9
        )


class TestAssembleLosses:
    def test_stage1_weighted_sum(self):
        total, bundle = assemble_losses(
            "stage1", {"det": 1.0, "cap": 1.0, "img": 1.0, "divmlm": 1.0}
        )
        assert abs(float(total) - 1.3) < 1e-9
        assert bundle.total == pytest.approx(1.3)

    def test_stage2_all_zero(self):
        total, _ = assemble_losses(
            "stage2", {k: 0.0 for k in ("det", "cap", "img", "divmlm", "distill")}
        )
        assert float(total) == 0.0

    def test_stage2_weighted_sum(self):
        total, _ = assemble_losses(
            "stage2", {k: 1.0 for k in ("det", "cap", "img", "divmlm", "distill")}
        )
        assert abs(float(total) - 1.4) < 1e-9

    def test_missing_component_rejected(self):
        with pytest.raises(ConfigError):
            assemble_losses("stage2", {"det": 1.0, "cap": 1.0, "img": 1.0})

    def test_missing_component_allowed_at_zero_weight(self):
        weights = LossWeights(distill=0.0, divmlm=0.0)
        total, _ = assemble_losses("stage2", {"det": 2.0, "cap": 1.0, "img": 1.0}, weights)
        assert abs(float(total) - 2.2) < 1e-9

    def test_unknown_stage(self):
        with pytest.raises(ConfigError):
            assemble_losses("stage3", {})

    def test_works_with_tensors(self):
        parts = {k: torch.tensor(1.0, requires_grad=True)
                 for k in ("det", "cap", "img", "divmlm")}
        total, bundle = assemble_losses("stage1", parts)
        assert isinstance(total, torch.Tensor)
        total.backward()
        assert bundle.components["det"] == 1.0
