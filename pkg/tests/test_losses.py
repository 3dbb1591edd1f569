"""Loss-term unit suite: every operation against an independent scalar oracle.

The oracles below recompute each quantity with explicit python loops over
every tensor cell, so a vectorization or reduction bug in the library cannot
hide. Tolerances: 1e-6 for pixel/score losses, 1e-5 for the perceptual term.
"""

import math

import numpy as np
import pytest
import torch
from torch import nn

from jekyllbench import translator
from jekyllbench.classifiers import TrainingRecipe, build_classifier, extract_identity_features, train_classifier
from jekyllbench.core import LossWeights, ValidationError, WEIGHT_PRESETS
from jekyllbench.translator import (
    adversarial_loss,
    cycle_loss,
    disease_loss,
    discriminator_step_loss,
    generator_adversarial_loss,
    identity_loss,
    weighted_total,
)

torch.manual_seed(0)


class FixedMapDiscriminator(nn.Module):
    """Returns a preset score map for each input, keyed by tensor identity."""

    def __init__(self, mapping):
        super().__init__()
        self.mapping = mapping

    def forward(self, batch):
        return self.mapping[id(batch)]


def scores_for(real_map, fake_map):
    real_in, fake_in = torch.zeros(1), torch.ones(1)
    disc = FixedMapDiscriminator({id(real_in): real_map, id(fake_in): fake_map})
    return disc, real_in, fake_in


def loop_lsq(scores: np.ndarray, target: float) -> float:
    total = 0.0
    for value in scores.reshape(-1):
        total += (float(value) - target) ** 2
    return total / scores.size


# ---------------------------------------------------------------- adversarial


def test_as_written_minimum_is_zero():
    disc, real_in, fake_in = scores_for(torch.zeros(2, 1, 4, 4), torch.ones(2, 1, 4, 4))
    loss = adversarial_loss(disc, real_in, fake_in, "as_written")
    assert float(loss) == 0.0


def test_as_written_all_ones_is_one():
    disc, real_in, fake_in = scores_for(torch.ones(2, 1, 4, 4), torch.ones(2, 1, 4, 4))
    loss = adversarial_loss(disc, real_in, fake_in, "as_written")
    assert float(loss) == pytest.approx(1.0)


def test_standard_lsgan_perfect_discriminator_is_zero():
    disc, real_in, fake_in = scores_for(torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4))
    loss = adversarial_loss(disc, real_in, fake_in, "standard_lsgan")
    assert float(loss) == 0.0


@pytest.mark.parametrize("convention", ["standard_lsgan", "as_written"])
def test_adversarial_loss_matches_per_cell_oracle(convention):
    rng = np.random.default_rng(1)
    real_map = torch.tensor(rng.normal(size=(3, 1, 5, 7)), dtype=torch.float64)
    fake_map = torch.tensor(rng.normal(size=(3, 1, 5, 7)), dtype=torch.float64)
    disc, real_in, fake_in = scores_for(real_map, fake_map)
    got = float(adversarial_loss(disc, real_in, fake_in, convention))
    real_target, fake_target = (1.0, 0.0) if convention == "standard_lsgan" else (0.0, 1.0)
    expected = loop_lsq(real_map.numpy(), real_target) + loop_lsq(fake_map.numpy(), fake_target)
    assert got == pytest.approx(expected, abs=1e-6)


def test_discriminator_step_negates_only_as_written():
    rng = np.random.default_rng(2)
    real_map = torch.tensor(rng.normal(size=(2, 1, 3, 3)))
    fake_map = torch.tensor(rng.normal(size=(2, 1, 3, 3)))
    disc, real_in, fake_in = scores_for(real_map, fake_map)
    plain = float(adversarial_loss(disc, real_in, fake_in, "as_written"))
    step = float(discriminator_step_loss(disc, real_in, fake_in, "as_written"))
    assert step == pytest.approx(-plain)
    standard = float(adversarial_loss(disc, real_in, fake_in, "standard_lsgan"))
    assert float(discriminator_step_loss(disc, real_in, fake_in, "standard_lsgan")) == pytest.approx(standard)


@pytest.mark.parametrize("convention", ["standard_lsgan", "as_written"])
def test_generator_side_drives_fakes_toward_one_in_both_conventions(convention):
    rng = np.random.default_rng(3)
    fake_map = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
    disc, _, fake_in = scores_for(fake_map, fake_map)
    got = float(generator_adversarial_loss(disc, fake_in, convention))
    assert got == pytest.approx(loop_lsq(fake_map.numpy(), 1.0), abs=1e-6)


def test_multi_head_discriminator_sums_terms_with_equal_weight():
    rng = np.random.default_rng(4)
    patch = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
    scalar = torch.tensor(rng.normal(size=(2, 1)))

    class TwoHead(nn.Module):
        def forward(self, batch):
            return patch, scalar

    got = float(generator_adversarial_loss(TwoHead(), torch.zeros(2), "standard_lsgan"))
    expected = loop_lsq(patch.numpy(), 1.0) + loop_lsq(scalar.numpy(), 1.0)
    assert got == pytest.approx(expected, abs=1e-6)


def test_adversarial_rejects_empty_batch_and_bad_convention():
    disc, real_in, fake_in = scores_for(torch.ones(1, 1, 2, 2), torch.ones(1, 1, 2, 2))
    with pytest.raises(ValidationError):
        adversarial_loss(disc, torch.empty(0), fake_in, "standard_lsgan")
    with pytest.raises(ValidationError):
        adversarial_loss(disc, real_in, fake_in, "hinge")


# ---------------------------------------------------------------- disease


def patched_probs(monkeypatch, values):
    probs = torch.tensor(values, dtype=torch.float64)
    monkeypatch.setattr(translator, "disease_probability_batch", lambda model, batch: probs)
    return probs


def test_disease_loss_is_zero_at_full_confidence(monkeypatch):
    patched_probs(monkeypatch, [1.0, 1.0, 1.0])
    loss = float(disease_loss(object(), torch.zeros(3)))
    # the 1e-7 clamp keeps -log finite; at p=1 it contributes ~1e-7, not 0
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_disease_loss_at_half_is_ln_two(monkeypatch):
    patched_probs(monkeypatch, [0.5])
    loss = float(disease_loss(object(), torch.zeros(1)))
    assert loss == pytest.approx(0.6931471805599453, abs=1e-9)


def test_disease_loss_at_inverse_e_is_one(monkeypatch):
    patched_probs(monkeypatch, [math.exp(-1.0)])
    loss = float(disease_loss(object(), torch.zeros(1)))
    assert loss == pytest.approx(1.0, abs=1e-9)


def test_disease_loss_matches_scalar_oracle_on_random_probs(monkeypatch):
    rng = np.random.default_rng(5)
    values = rng.uniform(0.01, 0.99, size=17)
    patched_probs(monkeypatch, list(values))
    got = float(disease_loss(object(), torch.zeros(17)))
    expected = sum(-math.log(v) for v in values) / len(values)
    assert got == pytest.approx(expected, abs=1e-6)


def test_disease_loss_clamps_zero_probability(monkeypatch):
    patched_probs(monkeypatch, [0.0])
    loss = float(disease_loss(object(), torch.zeros(1)))
    assert math.isfinite(loss)
    assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_disease_loss_through_a_real_classifier_matches_softmax_oracle():
    handle = build_classifier("disease", "attack", ("nd", "d"), input_size=16)
    batch = torch.tensor(np.random.default_rng(6).uniform(-1, 1, (4, 1, 16, 16)), dtype=torch.float32)
    got = float(disease_loss(handle, batch).detach())
    handle.net.eval()
    with torch.no_grad():
        logits = handle.net(batch.expand(-1, 3, -1, -1))
    expected = 0.0
    for row in logits.numpy():
        exp = np.exp(row - row.max())
        p_disease = float(exp[1] / exp.sum())
        expected += -math.log(min(max(p_disease, 1e-7), 1.0 - 1e-7))
    assert got == pytest.approx(expected / len(logits), abs=1e-6)


# ---------------------------------------------------------------- cycle


def test_cycle_loss_zero_for_perfect_reconstruction():
    x = torch.rand(2, 1, 8, 8)
    y = torch.rand(2, 1, 8, 8)
    assert float(cycle_loss(x, x.clone(), y, y.clone())) == 0.0


def test_cycle_loss_constant_offset_closed_form():
    x = torch.rand(3, 1, 6, 6)
    y = torch.rand(3, 1, 6, 6)
    loss = cycle_loss(x, x + 0.5, y, y.clone())
    assert float(loss) == pytest.approx(0.5, abs=1e-6)


def test_cycle_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(7)
    x, fgx = rng.normal(size=(2, 1, 4, 5)), rng.normal(size=(2, 1, 4, 5))
    y, gfy = rng.normal(size=(2, 1, 4, 5)), rng.normal(size=(2, 1, 4, 5))

    def loop_l1(a, b):
        total, count = 0.0, 0
        for u, v in zip(a.reshape(-1), b.reshape(-1)):
            total += abs(float(u) - float(v))
            count += 1
        return total / count

    got = float(cycle_loss(*(torch.tensor(t) for t in (x, fgx, y, gfy))))
    assert got == pytest.approx(loop_l1(x, fgx) + loop_l1(y, gfy), abs=1e-6)


def test_cycle_loss_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        cycle_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 5), torch.zeros(1), torch.zeros(1))


# ---------------------------------------------------------------- identity


@pytest.fixture(scope="module")
def tiny_identity_handle():
    """A real (randomly initialized) identity model marked trained via a
    zero-epoch recipe, so the numpy feature extractor is usable as the oracle."""
    handle = build_classifier("identity", "attack", ("p1", "p2"), input_size=16)
    rng = np.random.default_rng(8)
    items = [(rng.uniform(-1, 1, (1, 16, 16)).astype(np.float32), k) for k in (0, 1)]
    train_classifier(handle, items, items, TrainingRecipe(epochs=0), 9)
    return handle


def test_identity_loss_zero_when_nothing_moves(tiny_identity_handle):
    x = torch.rand(2, 1, 16, 16) * 2 - 1
    loss = identity_loss(tiny_identity_handle, x, x.clone(), x.clone())
    assert float(loss) == pytest.approx(0.0, abs=1e-7)


def test_identity_loss_zero_for_constant_feature_extractor(monkeypatch):
    monkeypatch.setattr(translator, "feature_batch", lambda model, batch: torch.full((2, 8), 3.0))
    loss = identity_loss(object(), torch.rand(2), torch.rand(2), torch.rand(2))
    assert float(loss) == 0.0


@pytest.mark.parametrize("second_term", ["translation", "input"])
def test_identity_loss_matches_numpy_feature_oracle(tiny_identity_handle, second_term):
    rng = np.random.default_rng(10)
    x, gx, fgx = (rng.uniform(-1, 1, (3, 1, 16, 16)).astype(np.float32) for _ in range(3))
    got = float(
        identity_loss(
            tiny_identity_handle,
            torch.tensor(x),
            torch.tensor(gx),
            torch.tensor(fgx),
            second_term,
        )
    )
    e = {
        name: np.stack([extract_identity_features(tiny_identity_handle, img) for img in arr])
        for name, arr in (("x", x), ("gx", gx), ("fgx", fgx))
    }
    reference = e["gx"] if second_term == "translation" else e["x"]
    expected = np.abs(e["x"] - e["gx"]).mean() + np.abs(e["fgx"] - reference).mean()
    assert got == pytest.approx(float(expected), abs=1e-5)


def test_identity_loss_rejects_unknown_second_term(tiny_identity_handle):
    x = torch.rand(1, 1, 16, 16)
    with pytest.raises(ValidationError):
        identity_loss(tiny_identity_handle, x, x, x, second_term="both")


# ---------------------------------------------------------------- weighting


def test_weighted_total_all_zero_weights_is_zero():
    weights = LossWeights(0.0, 0.0, 0.0, 0.0)
    total, breakdown = weighted_total(weights, {"adv": torch.tensor(5.0), "cycle": torch.tensor(2.0)})
    assert float(total) == 0.0
    assert breakdown["total"] == 0.0


def test_weighted_total_cycle_only_perfect_cycles():
    weights = LossWeights(0.0, 0.0, 0.0, 1.0)
    total, _ = weighted_total(weights, {"cycle": torch.tensor(0.0)})
    assert float(total) == 0.0


def test_weighted_total_cardiomegaly_unit_losses_sum_to_295():
    weights = WEIGHT_PRESETS["cardiomegaly"]
    unit = {k: torch.tensor(1.0) for k in ("adv", "disease", "identity", "cycle")}
    total, breakdown = weighted_total(weights, unit)
    assert float(total) == pytest.approx(295.0)
    assert breakdown == {"adv": 1.0, "disease": 1.0, "identity": 1.0, "cycle": 1.0, "total": 295.0}


def test_weighted_total_matches_linear_combination_oracle():
    rng = np.random.default_rng(11)
    weights = LossWeights(*(float(v) for v in rng.uniform(0, 30, 4)))
    values = {k: float(v) for k, v in zip(("adv", "disease", "identity", "cycle"), rng.uniform(0, 2, 4))}
    total, _ = weighted_total(weights, {k: torch.tensor(v) for k, v in values.items()})
    expected = (
        weights.lambda_adv * values["adv"]
        + weights.lambda_disease * values["disease"]
        + weights.lambda_identity * values["identity"]
        + weights.lambda_cycle * values["cycle"]
    )
    assert float(total) == pytest.approx(expected, abs=1e-6)
