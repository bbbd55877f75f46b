import math

import numpy as np
import pytest
import torch

from pathfusion.objectives import (
    ce_loss,
    cumulative_hazard_risk,
    dual_expert_combine,
    hazard_curve,
    make_classifier_head,
    survival_confidence,
    survival_nll,
    task_output_width,
)
from pathfusion import pipeline


class TestClassifierHead:
    def test_zero_weights_return_bias(self):
        head = make_classifier_head(5, 3)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
        out = head(torch.randn(4, 5))
        assert torch.allclose(out, torch.tensor([0.1, -0.2, 0.3]).expand(4, 3))

    def test_hand_computed_affine(self):
        head = make_classifier_head(2, 2)
        with torch.no_grad():
            head.weight.copy_(torch.tensor([[1.0, 2.0], [-1.0, 0.5]]))
            head.bias.copy_(torch.tensor([0.5, -0.5]))
        out = head(torch.tensor([[2.0, 3.0]]))
        assert torch.allclose(out, torch.tensor([[2 + 6 + 0.5, -2 + 1.5 - 0.5]]))

    def test_batch_order_preserved(self):
        head = make_classifier_head(3, 2)
        x = torch.randn(6, 3)
        out = head(x)
        assert torch.allclose(out[2], head(x[2:3])[0])


class TestDualExpertCombine:
    def test_midpoint_gate_is_mean(self):
        l10 = torch.tensor([[2.0, 0.0]])
        l20 = torch.tensor([[0.0, 4.0]])
        out = dual_expert_combine(l10, l20, torch.tensor(0.0))
        assert torch.allclose(out, torch.tensor([[1.0, 2.0]]))

    def test_equal_experts_any_gate(self):
        logits = torch.randn(3, 4)
        for gate in (-3.0, 0.0, 2.5):
            out = dual_expert_combine(logits, logits, torch.tensor(gate))
            assert torch.allclose(out, logits, atol=1e-6)

    def test_three_quarter_blend(self):
        gate = torch.tensor(math.log(3.0))  # sigmoid -> 0.75
        out = dual_expert_combine(torch.tensor([[4.0, 0.0]]), torch.tensor([[0.0, 4.0]]), gate)
        assert torch.allclose(out, torch.tensor([[3.0, 1.0]]), atol=1e-6)

    def test_limits_recover_single_expert(self):
        l10 = torch.randn(2, 3)
        l20 = torch.randn(2, 3)
        assert torch.allclose(dual_expert_combine(l10, l20, torch.tensor(40.0)), l10, atol=1e-6)
        assert torch.allclose(dual_expert_combine(l10, l20, torch.tensor(-40.0)), l20, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dual_expert_combine(torch.zeros(1, 2), torch.zeros(1, 3), torch.tensor(0.0))


class TestCeLoss:
    def test_uniform_logits(self):
        loss = ce_loss(torch.zeros(8, 4), torch.randint(0, 4, (8,)))
        assert float(loss) == pytest.approx(math.log(4.0), rel=1e-6)

    def test_confident_correct_approaches_zero(self):
        logits = 60.0 * torch.eye(3)
        assert float(ce_loss(logits, torch.arange(3))) < 1e-6

    def test_two_class_hand_value(self):
        loss = ce_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([0]))
        assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 1)), rel=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ce_loss(torch.zeros(2, 3), torch.tensor([0, 3]))

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = torch.from_numpy(rng.normal(size=(4, 5)))
            labels = torch.from_numpy(rng.integers(0, 5, size=4))
            assert float(ce_loss(logits, labels)) >= 0

    def test_gradient_check(self):
        assert pipeline.gradcheck("ce")["ce"] < 1e-4


def _hazard_logits(hazards):
    h = torch.tensor(hazards, dtype=torch.float64)
    return torch.log(h / (1 - h))


class TestSurvivalNll:
    def test_censored_certain_survival_is_zero(self):
        logits = torch.full((1, 4), -60.0)  # hazards ~ 0
        loss = survival_nll(logits, torch.tensor([0]), torch.tensor([True]))
        assert float(loss) == pytest.approx(0.0, abs=1e-5)

    def test_uncensored_first_bin(self):
        logits = _hazard_logits([[0.5, 0.5, 0.5, 0.5]])
        loss = survival_nll(logits, torch.tensor([0]), torch.tensor([False]))
        assert float(loss) == pytest.approx(math.log(2.0), rel=1e-6)

    def test_uncensored_second_bin_two_terms(self):
        logits = _hazard_logits([[0.5, 0.5, 0.5, 0.5]])
        loss = survival_nll(logits, torch.tensor([1]), torch.tensor([False]))
        assert float(loss) == pytest.approx(2 * math.log(2.0), rel=1e-6)

    def test_bin_out_of_range(self):
        with pytest.raises(ValueError):
            survival_nll(torch.zeros(1, 4), torch.tensor([4]), torch.tensor([False]))

    def test_monotonic_in_event_hazard(self):
        base = [[0.3, 0.4, 0.2, 0.1]]
        low = survival_nll(_hazard_logits(base), torch.tensor([2]), torch.tensor([False]))
        bumped = [[0.3, 0.4, 0.5, 0.1]]
        high = survival_nll(_hazard_logits(bumped), torch.tensor([2]), torch.tensor([False]))
        assert float(high) < float(low)

    def test_monotonic_in_earlier_hazard(self):
        base = [[0.3, 0.4, 0.2, 0.1]]
        low = survival_nll(_hazard_logits(base), torch.tensor([2]), torch.tensor([False]))
        bumped = [[0.6, 0.4, 0.2, 0.1]]
        high = survival_nll(_hazard_logits(bumped), torch.tensor([2]), torch.tensor([False]))
        assert float(high) > float(low)

    def test_survival_curve_product(self):
        hazards, survival = hazard_curve(_hazard_logits([[0.2, 0.5, 0.25, 0.5]]))
        expected = np.cumprod(1 - np.array([0.2, 0.5, 0.25, 0.5]))
        np.testing.assert_allclose(survival[0].numpy(), expected, rtol=1e-6)

    def test_confidence_is_probability(self):
        rng = np.random.default_rng(1)
        logits = torch.from_numpy(rng.normal(size=(20, 4)))
        bins = torch.from_numpy(rng.integers(0, 4, size=20))
        cens = torch.from_numpy(rng.integers(0, 2, size=20).astype(bool))
        conf = survival_confidence(logits, bins, cens)
        assert torch.all(conf > 0) and torch.all(conf < 1)

    def test_cumulative_hazard_risk(self):
        h = [[0.1, 0.2, 0.3, 0.4]]
        risk = cumulative_hazard_risk(_hazard_logits(h))
        assert float(risk) == pytest.approx(1.0, rel=1e-6)

    def test_gradient_check(self):
        assert pipeline.gradcheck("survival_nll")["survival_nll"] < 1e-4


def test_task_output_widths():
    assert task_output_width("diagnosis") == 4
    assert task_output_width("grading") == 3
    assert task_output_width("survival") == 4
    with pytest.raises(ValueError):
        task_output_width("other")
