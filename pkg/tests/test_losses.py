"""Closed-form fixtures, brute-force agreement, and properties for the losses."""

import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ovarkit.losses import (
    EPS, LossInputError, PairSets, ScoreMatrix, federated_bce, kl_distill,
    label_matrix, mil_nce, similarity_scores, step2_loss, total_loss,
)

LN2 = math.log(2.0)
SIG1 = 1.0 / (1.0 + math.exp(-1.0))


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


# ---------------------------------------------------------------------------
# similarity scoring


def test_similarity_matched_unit_vectors():
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    s = similarity_scores(v, v, tau=1.0)
    assert abs(float(s.probs[0, 0]) - SIG1) < 1e-12
    assert round(float(s.probs[0, 0]), 4) == 0.7311


def test_similarity_orthogonal_is_half():
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    s = similarity_scores(v, t, tau=0.37)
    assert float(s.probs[0, 0]) == 0.5


def test_similarity_rejects_nonpositive_temperature():
    v = torch.eye(2, dtype=torch.float64)
    for tau in (0.0, -0.5):
        with pytest.raises(LossInputError):
            similarity_scores(v, v, tau)


def test_temperature_sharpens_scores():
    v = torch.tensor([[1.0, 0.0]])
    hot = similarity_scores(v, v, tau=1.0).probs[0, 0]
    cold = similarity_scores(v, v, tau=0.07).probs[0, 0]
    assert float(cold) > float(hot) > 0.5


# ---------------------------------------------------------------------------
# federated BCE


def test_bce_single_positive_half_is_ln2():
    probs = torch.tensor([[0.5]], dtype=torch.float64)
    labels = label_matrix([["pos"]])
    w = torch.ones(1, dtype=torch.float64)
    assert abs(float(federated_bce(probs, labels, w)) - LN2) < 1e-12


def test_bce_missing_as_negative_vs_masked():
    probs = torch.tensor([[0.9], [0.9]], dtype=torch.float64)
    labels = label_matrix([["pos"], ["missing"]])
    w = torch.ones(1, dtype=torch.float64)
    as_neg = float(federated_bce(probs, labels, w, missing_mode="negative"))
    masked = float(federated_bce(probs, labels, w, missing_mode="masked"))
    assert abs(as_neg - 0.5 * (-math.log(0.9) - math.log(0.1))) < 1e-12
    assert abs(masked - (-math.log(0.9))) < 1e-12


def test_bce_class_mask_drops_class_from_mean():
    probs = torch.tensor([[0.5, 0.25]], dtype=torch.float64)
    labels = label_matrix([["pos", "pos"]])
    w = torch.ones(2, dtype=torch.float64)
    full = float(federated_bce(probs, labels, w))
    only0 = float(federated_bce(probs, labels, w, class_mask=torch.tensor([True, False])))
    assert abs(full - 0.5 * (LN2 + math.log(4.0))) < 1e-12
    assert abs(only0 - LN2) < 1e-12


def test_bce_empty_active_set_is_zero_with_grad():
    probs = torch.rand(3, 2, dtype=torch.float64, requires_grad=True)
    labels = label_matrix([["missing", "missing"]] * 3)
    w = torch.ones(2, dtype=torch.float64)
    out = federated_bce(probs, labels, w, missing_mode="masked")
    assert float(out.detach()) == 0.0
    out.backward()
    assert probs.grad is not None


def test_bce_shape_mismatch_raises():
    with pytest.raises(LossInputError):
        federated_bce(torch.rand(2, 3), label_matrix([["pos", "neg"]]), torch.ones(3))


def test_bce_rejects_unknown_missing_mode():
    probs = torch.rand(1, 1)
    with pytest.raises(LossInputError):
        federated_bce(probs, label_matrix([["pos"]]), torch.ones(1), missing_mode="drop")


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40)
def test_bce_matches_bruteforce(seed):
    rng = random.Random(seed)
    n, c = rng.randint(1, 8), rng.randint(1, 16)
    probs = [[rng.random() for _ in range(c)] for _ in range(n)]
    labels = [[rng.choice([1, 0, -1]) for _ in range(c)] for _ in range(n)]
    weights = [rng.uniform(0.1, 3.0) for _ in range(c)]
    mask = [rng.random() < 0.8 for _ in range(c)]
    mode = rng.choice(["negative", "masked"])
    want = oracles.bce_oracle(probs, labels, weights, mask, mode)
    got = federated_bce(torch.tensor(probs, dtype=torch.float64),
                        torch.tensor(labels), torch.tensor(weights, dtype=torch.float64),
                        class_mask=torch.tensor(mask), missing_mode=mode)
    assert _rel(float(got), want) < 1e-9


def test_bce_region_permutation_invariant():
    g = torch.Generator().manual_seed(3)
    probs = torch.rand(6, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(-1, 2, (6, 4), generator=g)
    w = torch.rand(4, generator=g, dtype=torch.float64) + 0.1
    perm = torch.randperm(6, generator=g)
    a = federated_bce(probs, labels, w)
    b = federated_bce(probs[perm], labels[perm], w)
    assert abs(float(a) - float(b)) < 1e-12


# ---------------------------------------------------------------------------
# MIL-NCE


def _pairs(pos_dots, neg_dots):
    """PairSets whose inner products equal the requested values."""
    pos = [(torch.tensor([d, 0.0], dtype=torch.float64),
            torch.tensor([1.0, 0.0], dtype=torch.float64)) for d in pos_dots]
    neg = [(torch.tensor([d, 0.0], dtype=torch.float64),
            torch.tensor([1.0, 0.0], dtype=torch.float64)) for d in neg_dots]
    return PairSets.from_pairs(pos, neg)


def test_mil_nce_one_pos_one_neg_equal_is_ln2():
    assert abs(float(mil_nce(_pairs([0.3], [0.3]), tau=0.5)) - LN2) < 1e-12


def test_mil_nce_two_pos_one_neg_equal():
    want = -math.log(2.0 / 3.0)
    assert abs(float(mil_nce(_pairs([0.3, 0.3], [0.3]), tau=0.5)) - want) < 1e-12


def test_mil_nce_no_negatives_exactly_zero():
    out = mil_nce(_pairs([0.9, -0.2], []), tau=0.07)
    assert float(out) == 0.0


def test_mil_nce_requires_positives_and_valid_tau():
    with pytest.raises(LossInputError):
        mil_nce(_pairs([], [0.1]), tau=0.5)
    with pytest.raises(LossInputError):
        mil_nce(_pairs([0.1], [0.1]), tau=0.0)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40)
def test_mil_nce_matches_bruteforce(seed):
    rng = random.Random(seed)
    pos = [rng.uniform(-1, 1) for _ in range(rng.randint(1, 8))]
    neg = [rng.uniform(-1, 1) for _ in range(rng.randint(1, 16))]
    tau = rng.uniform(0.05, 1.0)
    want = oracles.mil_nce_oracle(pos, neg, tau)
    got = float(mil_nce(_pairs(pos, neg), tau))
    assert _rel(got, want) < 1e-9


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30)
def test_mil_nce_nonnegative_and_grows_with_negatives(seed):
    rng = random.Random(seed)
    pos = [rng.uniform(-1, 1) for _ in range(rng.randint(1, 5))]
    neg = [rng.uniform(-1, 1) for _ in range(rng.randint(1, 6))]
    tau = rng.uniform(0.05, 1.0)
    base = float(mil_nce(_pairs(pos, neg), tau))
    more = float(mil_nce(_pairs(pos, neg + [rng.uniform(-1, 1)]), tau))
    assert base >= 0.0
    assert more > base


def test_step2_loss_normalizers():
    terms = [torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0)]
    assert float(step2_loss(terms, K=2, normalize="paper")) == pytest.approx(3.0)
    assert float(step2_loss(terms, K=2, normalize="count")) == pytest.approx(2.0)
    # K = 0: the published 1/K normalizer is undefined; fall back to the sum
    assert float(step2_loss(terms[:1], K=0, normalize="paper")) == pytest.approx(1.0)
    with pytest.raises(LossInputError):
        step2_loss(terms, K=1)
    with pytest.raises(LossInputError):
        step2_loss(terms, K=2, normalize="mean")


# ---------------------------------------------------------------------------
# Bernoulli KL distillation


def test_kl_fixture_sigmoid1_vs_half():
    # 0.7311*ln(0.7311/0.5) + 0.2689*ln(0.2689/0.5); note this evaluates to
    # 0.11099, not the 0.1114 sometimes quoted from rounding the pieces.
    want = 0.7311 * math.log(0.7311 / 0.5) + 0.2689 * math.log(0.2689 / 0.5)
    assert abs(want - 0.11098549740510352) < 1e-15
    t = torch.tensor([[0.7311]], dtype=torch.float64)
    s = torch.tensor([[0.5]], dtype=torch.float64)
    assert abs(float(kl_distill(s, t)) - want) < 1e-12


def test_kl_zero_when_matching():
    p = torch.rand(4, 6, dtype=torch.float64) * 0.98 + 0.01
    assert float(kl_distill(p, p.clone())) == 0.0


def test_kl_positive_when_differing():
    t = torch.tensor([[0.9, 0.2]], dtype=torch.float64)
    s = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert float(kl_distill(s, t)) > 0


def test_kl_shape_mismatch_raises():
    with pytest.raises(LossInputError):
        kl_distill(torch.rand(2, 3), torch.rand(3, 2))


def test_kl_accepts_score_matrices():
    t = ScoreMatrix(torch.tensor([[0.7]], dtype=torch.float64), 1.0)
    s = ScoreMatrix(torch.tensor([[0.7]], dtype=torch.float64), 1.0)
    assert float(kl_distill(s, t)) == 0.0


def test_kl_clamps_saturated_probabilities():
    t = torch.tensor([[1.0]], dtype=torch.float64)
    s = torch.tensor([[0.0]], dtype=torch.float64)
    out = float(kl_distill(s, t))
    assert math.isfinite(out)
    want = oracles.kl_oracle([[0.0]], [[1.0]])
    assert _rel(out, want) < 1e-9


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40)
def test_kl_matches_bruteforce(seed):
    rng = random.Random(seed)
    n, c = rng.randint(1, 8), rng.randint(1, 16)
    t = [[rng.random() for _ in range(c)] for _ in range(n)]
    s = [[rng.random() for _ in range(c)] for _ in range(n)]
    want = oracles.kl_oracle(s, t)
    got = float(kl_distill(torch.tensor(s, dtype=torch.float64),
                           torch.tensor(t, dtype=torch.float64)))
    assert _rel(got, want) < 1e-9


# ---------------------------------------------------------------------------
# composition


def test_total_loss_composition():
    cls, rpn, dist = torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.25)
    assert float(total_loss(cls, rpn, lambda_rpn=0.5)) == pytest.approx(2.0)
    assert float(total_loss(cls, rpn, dist, lambda_rpn=1.0)) == pytest.approx(3.25)


def test_label_matrix_codes():
    m = label_matrix([["pos", "neg"], ["missing", "pos"]])
    assert m.tolist() == [[1, 0], [-1, 1]]
