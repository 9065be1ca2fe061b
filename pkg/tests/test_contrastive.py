import math

import pytest
import torch

from contrastive_dialogue.contrastive import (
    ABLATION_SWITCHES,
    LossConfig,
    TrainConfig,
    apply_ablation,
    difference,
    evaluate_contrastive_loss,
    group_loss,
    pairwise_loss,
    positive_term,
    negative_term,
    train_contrastive,
    weighted_group_loss,
)
from contrastive_dialogue.corpus import EOS_ID
from contrastive_dialogue.models import ModelConfig, build_model, cond_log_prob, snapshot_reference
from contrastive_dialogue.sampler import SamplerConfig, build_sampler_state, sample_corpus

LN2 = math.log(2.0)


def t(vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestLossAlgebra:
    def test_pairwise_at_zero_is_two_ln_two(self):
        assert float(pairwise_loss(t([0.0]), t([0.0]))) == pytest.approx(2 * LN2, abs=1e-12)

    def test_pairwise_perfect_separation_tends_to_zero(self):
        assert float(pairwise_loss(t([60.0]), t([-60.0]))) == pytest.approx(0.0, abs=1e-6)

    def test_pairwise_derived_value(self):
        # -ln sigmoid(1) - ln(1 - sigmoid(-1)) = -2 ln sigmoid(1)
        sig1 = 1.0 / (1.0 + math.exp(-1.0))
        expected = -2.0 * math.log(sig1)
        assert expected == pytest.approx(0.62652338, abs=1e-6)
        assert float(pairwise_loss(t([1.0]), t([-1.0]))) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_group_at_zero_is_two_ln_two(self, k):
        assert float(group_loss(t([0.0] * (2 * k + 1)), t([0.0] * (2 * k)))) == pytest.approx(
            2 * LN2, abs=1e-12
        )

    def test_group_singleton_equals_pairwise(self):
        d_p, d_n = t([0.7]), t([-0.3])
        assert float(group_loss(d_p, d_n)) == pytest.approx(
            float(pairwise_loss(d_p, d_n)), abs=1e-12
        )

    def test_group_scalar_recomputation(self):
        # spreadsheet-style direct summation for a k=3 group
        d_pos = [0.5, -0.2, 1.1, 0.0, 0.3, -0.7, 2.0]
        d_neg = [-0.5, 0.2, -1.5, 0.0, -0.1, 0.9]
        sig = lambda x: 1.0 / (1.0 + math.exp(-x))
        expected = -sum(math.log(sig(d)) for d in d_pos) / 7 - sum(
            math.log(1 - sig(d)) for d in d_neg
        ) / 6
        assert float(group_loss(t(d_pos), t(d_neg))) == pytest.approx(expected, abs=1e-12)

    def test_weighted_reduces_to_group_under_unit_weights(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            d_p = torch.randn(7, generator=gen, dtype=torch.float64) * 3
            d_n = torch.randn(6, generator=gen, dtype=torch.float64) * 3
            w = weighted_group_loss(d_p, torch.ones_like(d_p), d_n, -torch.ones_like(d_n))
            g = group_loss(d_p, d_n)
            assert float(w) == pytest.approx(float(g), abs=1e-12)

    def test_weighted_scalar_recomputation(self):
        d_p, s_p = t([0.0, 0.0, 0.0]), t([1.0, 0.5, 0.5])
        d_n, s_n = t([0.0, 0.0]), t([-1.0, -0.5])
        pos = -(math.log(0.5) + math.log(0.25) + math.log(0.25)) / 3
        neg = -(math.log(0.5) + math.log(0.75)) / 2
        assert pos == pytest.approx(1.15525, abs=1e-5)
        assert neg == pytest.approx(0.49041, abs=1e-5)
        assert float(weighted_group_loss(d_p, s_p, d_n, s_n)) == pytest.approx(
            pos + neg, abs=1e-10
        )

    def test_zero_negative_weight_annihilates_term(self):
        d_n = t([3.0])
        s_n = t([0.0])
        assert float(negative_term(d_n, s_n)) == pytest.approx(0.0, abs=1e-12)
        d_n.requires_grad_(True)
        negative_term(d_n, s_n).backward()
        assert float(d_n.grad) == pytest.approx(0.0, abs=1e-12)


class TestMonotonicityAndBound:
    def test_loss_decreases_in_d_pos_increases_in_d_neg(self):
        h = 1e-6
        gen = torch.Generator().manual_seed(1)
        for _ in range(20):
            d = float(torch.randn(1, generator=gen) * 2)
            s_pos = float(torch.rand(1, generator=gen) * 0.95 + 0.05)
            s_neg = -float(torch.rand(1, generator=gen) * 0.99 + 0.01)
            up = float(positive_term(t([d + h]), t([s_pos])))
            down = float(positive_term(t([d - h]), t([s_pos])))
            assert up < down  # d(pos term)/dD < 0
            up = float(negative_term(t([d + h]), t([s_neg])))
            down = float(negative_term(t([d - h]), t([s_neg])))
            assert up > down  # d(neg term)/dD > 0 when s- < 0

    def test_lower_bound_attained_at_extreme_d(self):
        gen = torch.Generator().manual_seed(2)
        for _ in range(20):
            k = int(torch.randint(1, 4, (1,), generator=gen))
            s_p = torch.rand(2 * k + 1, generator=gen).double() * 0.95 + 0.05
            s_n = -torch.rand(2 * k, generator=gen).double()
            bound = float(-torch.log(s_p).mean())
            at_extreme = float(
                weighted_group_loss(
                    torch.full((2 * k + 1,), 40.0).double(), s_p,
                    torch.full((2 * k,), -40.0).double(), s_n,
                )
            )
            assert at_extreme >= bound - 1e-12
            assert at_extreme == pytest.approx(bound, abs=1e-5)
            # arbitrary D never undercuts the bound
            d_p = torch.randn(2 * k + 1, generator=gen).double() * 5
            d_n = torch.randn(2 * k, generator=gen).double() * 5
            assert float(weighted_group_loss(d_p, s_p, d_n, s_n)) >= bound - 1e-12


class TestDifference:
    def test_identical_models_give_zero(self, micro_model_pair):
        target, _ = micro_model_pair
        ref = snapshot_reference(target)
        for resp in ([7, EOS_ID], [5, 6, 7, EOS_ID]):
            assert difference(target, ref, [4, 5], resp) == pytest.approx(0.0, abs=1e-12)

    def test_two_pass_oracle(self, micro_model_pair):
        target, reference = micro_model_pair
        ctx, resp = [4, 5, 6], [7, 8, EOS_ID]
        expected = cond_log_prob(target, ctx, resp) - cond_log_prob(reference, ctx, resp)
        assert difference(target, reference, ctx, resp) == pytest.approx(expected, abs=1e-10)

    def test_e_times_probability_gives_length(self):
        # reference uniform; target boosts EOS to probability e/V, so the
        # one-token response [EOS] has d = ln((e/V)/(1/V)) = 1
        cfg = ModelConfig(vocab_size=12, emb_dim=6, hidden=8, dtype="float64")
        reference = build_model(cfg, seed=0)
        target = build_model(cfg, seed=0)
        for m in (reference, target):
            with torch.no_grad():
                m.proj.weight.zero_()
                m.proj.bias.zero_()
        v = 12
        boost = math.log(math.e * (v - 1) / (v - math.e))
        with torch.no_grad():
            target.proj.bias[EOS_ID] = boost
        assert difference(target, reference, [4], [EOS_ID]) == pytest.approx(1.0, abs=1e-10)

    def test_vocab_mismatch_rejected(self, micro_model_pair):
        target, _ = micro_model_pair
        other = build_model(ModelConfig(vocab_size=13, emb_dim=6, hidden=8))
        with pytest.raises(ValueError, match="vocab"):
            difference(target, other, [4], [EOS_ID])


class TestGradient:
    @pytest.mark.parametrize("arch", ["seq2seq", "transformer"])
    def test_weighted_loss_gradient_matches_finite_differences(self, arch):
        cfg = ModelConfig(vocab_size=12, arch=arch, emb_dim=6, hidden=8, heads=2,
                          dtype="float64")
        target = build_model(cfg, seed=4)
        reference = snapshot_reference(build_model(cfg, seed=5))

        pos = [([4, 5], [7, EOS_ID]), ([4, 5], [8, 9, EOS_ID]), ([6], [7, EOS_ID])]
        neg = [([4, 5], [10, EOS_ID]), ([6, 7], [11, EOS_ID])]
        s_p = t([1.0, 0.8, 0.3])
        s_n = t([-0.9, -0.4])

        def loss_value():
            from contrastive_dialogue.models import batch_log_probs

            lp_t_p = batch_log_probs(target, [c for c, _ in pos], [r for _, r in pos])
            lp_t_n = batch_log_probs(target, [c for c, _ in neg], [r for _, r in neg])
            with torch.no_grad():
                lp_r_p = batch_log_probs(reference, [c for c, _ in pos], [r for _, r in pos])
                lp_r_n = batch_log_probs(reference, [c for c, _ in neg], [r for _, r in neg])
            return weighted_group_loss(lp_t_p - lp_r_p, s_p, lp_t_n - lp_r_n, s_n)

        loss = loss_value()
        loss.backward()
        h = 1e-6
        checked = 0
        with torch.no_grad():
            for p in target.parameters():
                if p.grad is None:
                    continue
                flat, grad = p.data.view(-1), p.grad.view(-1)
                for idx in range(0, flat.numel(), max(1, flat.numel() // 4)):
                    orig = float(flat[idx])
                    flat[idx] = orig + h
                    up = float(loss_value())
                    flat[idx] = orig - h
                    down = float(loss_value())
                    flat[idx] = orig
                    fd = (up - down) / (2 * h)
                    denom = max(abs(fd), abs(float(grad[idx])), 1e-5)
                    assert abs(fd - float(grad[idx])) / denom < 1e-4
                    checked += 1
        assert checked > 20


@pytest.fixture
def toy_training_setup(toy_tokenized, toy_vocab, toy_matcher, tmp_path):
    state = build_sampler_state(
        toy_tokenized, toy_vocab, toy_matcher, SamplerConfig(k=1, pool_size=8, pad_size=5, seed=3)
    )
    groups = sample_corpus(state, str(tmp_path / "groups.jsonl"))
    cfg = ModelConfig(vocab_size=len(toy_vocab), emb_dim=8, hidden=12)
    target = build_model(cfg, seed=6)
    reference = snapshot_reference(target)
    corpus = {p.id: p for p in toy_tokenized}
    return target, reference, groups, corpus


class TestAblationFiltering:
    def test_all_switches_distinct_and_runnable(self, toy_training_setup):
        target, reference, groups, corpus = toy_training_setup
        shapes = set()
        for switch in ABLATION_SWITCHES:
            cfg = LossConfig.ablation(switch, k=1)
            pos, neg = apply_ablation(groups[0], cfg)
            loss, _, _ = evaluate_contrastive_loss(
                target, reference, groups[:3], corpus, cfg
            )
            assert math.isfinite(loss)
            shapes.add((switch, cfg.variant, len(pos), len(neg)))
        assert len(shapes) == len(ABLATION_SWITCHES)

    def test_no_group_keeps_anchor_and_single_negative(self, toy_training_setup):
        _, _, groups, _ = toy_training_setup
        pos, neg = apply_ablation(groups[0], LossConfig.ablation("no_group", k=1))
        assert len(pos) == 1 and pos[0].source == "anchor"
        assert len(neg) == 1
        assert neg[0].raw == min(e.raw for e in groups[0].negatives)

    def test_side_filters_drop_only_that_side(self, toy_training_setup):
        _, _, groups, _ = toy_training_setup
        g = groups[0]
        pos, neg = apply_ablation(g, LossConfig.ablation("no_response_side", k=1))
        for e in pos + neg:
            if e.source != "anchor":
                assert not (e.context_id == g.anchor_id and e.response_id != g.anchor_id)
        pos, neg = apply_ablation(g, LossConfig.ablation("no_context_side", k=1))
        for e in pos + neg:
            if e.source != "anchor":
                assert not (e.response_id == g.anchor_id and e.context_id != g.anchor_id)

    def test_inconsistent_switches_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(no_group=True, no_pos_group=True)
        with pytest.raises(ValueError):
            LossConfig(no_response_side=True, no_context_side=True)
        with pytest.raises(ValueError):
            LossConfig(eps=0.5)


class TestTraining:
    def test_zero_steps_validation_is_two_ln_two_under_unit_weights(self, toy_training_setup):
        target, reference, groups, corpus = toy_training_setup
        cfg = LossConfig(variant="group", k=1)
        summary = train_contrastive(
            target, reference, groups[:8], groups[8:], corpus,
            cfg, TrainConfig(max_epochs=0, batch_size=4),
        )
        assert summary["history"][0]["loss"] == pytest.approx(2 * LN2, abs=1e-6)

    def test_training_separates_positives_from_negatives(self, toy_training_setup):
        target, reference, groups, corpus = toy_training_setup
        cfg = LossConfig(variant="weighted", k=1)
        initial_val, _, _ = evaluate_contrastive_loss(
            reference, reference, groups[8:], corpus, cfg
        )
        summary = train_contrastive(
            target, reference, groups[:8], groups[8:], corpus,
            cfg, TrainConfig(max_epochs=30, batch_size=8, lr=0.01, patience=3),
        )
        # a 10-pair corpus is too entangled for strict sign separation on
        # held-out groups (the acceptance run checks that); require clear
        # directional separation and an improved validation loss
        _, dp, dn = evaluate_contrastive_loss(target, reference, groups[8:], corpus, cfg)
        assert dp > dn
        train_loss, tdp, tdn = evaluate_contrastive_loss(
            target, reference, groups[:8], corpus, cfg
        )
        assert tdp > 0.0 and tdp > tdn
        assert summary["best_val_loss"] < initial_val

    def test_reference_bit_identical_after_training(self, toy_training_setup):
        target, reference, groups, corpus = toy_training_setup
        before = {k: v.clone() for k, v in reference.state_dict().items()}
        train_contrastive(
            target, reference, groups[:8], groups[8:], corpus,
            LossConfig(k=1), TrainConfig(max_epochs=2, batch_size=4, lr=0.01),
        )
        after = reference.state_dict()
        for key in before:
            assert torch.equal(before[key], after[key])

    def test_empty_cache_rejected(self, toy_training_setup):
        target, reference, _, corpus = toy_training_setup
        with pytest.raises(ValueError, match="empty"):
            train_contrastive(target, reference, [], [], corpus)
