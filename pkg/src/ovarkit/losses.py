"""Scalar objectives: cosine-sigmoid scoring, reweighted federated BCE,
MIL-NCE over box/concept pair sets, Bernoulli KL distillation, and the
total-loss composition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch

EPS = 1e-7  # probability clamp wherever a log appears

# integer label codes for a LabelMatrix
LPOS, LNEG, LMISSING = 1, 0, -1
_LABEL_CODE = {"pos": LPOS, "neg": LNEG, "missing": LMISSING}


class LossInputError(ValueError):
    pass


@dataclass
class ScoreMatrix:
    """R x N per-region, per-concept probabilities in (0,1)."""

    probs: torch.Tensor
    temperature: float


def label_matrix(rows: Sequence[Sequence[str]]) -> torch.Tensor:
    """Encode string labels ("pos"/"neg"/"missing") as an integer tensor."""
    return torch.tensor([[_LABEL_CODE[v] for v in row] for row in rows], dtype=torch.long)


def similarity_scores(V: torch.Tensor, T: torch.Tensor, tau) -> ScoreMatrix:
    """s_ij = sigmoid(<v_i, t_j> / tau) for unit-norm rows of V and T."""
    tau_val = float(tau.detach()) if torch.is_tensor(tau) else float(tau)
    if tau_val <= 0:
        raise LossInputError(f"temperature must be > 0, got {tau_val}")
    probs = torch.sigmoid(V @ T.transpose(-1, -2) / tau)
    return ScoreMatrix(probs=probs, temperature=tau_val)


def federated_bce(scores: ScoreMatrix | torch.Tensor, labels: torch.Tensor,
                  weights: torch.Tensor, class_mask: Optional[torch.Tensor] = None,
                  missing_mode: str = "negative") -> torch.Tensor:
    """Per-class reweighted BCE, averaged over active classes.

    `labels` holds {1: pos, 0: neg, -1: missing}; missing entries are
    treated as negatives by default (re-weighted by w_i like every other
    entry of their class) or dropped entirely with missing_mode="masked".
    `class_mask` removes classes a dataset never annotates (federated
    batches); masked classes leave both the sum and the normalizer.
    """
    probs = scores.probs if isinstance(scores, ScoreMatrix) else scores
    if probs.shape != labels.shape:
        raise LossInputError(f"scores {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    if missing_mode not in ("negative", "masked"):
        raise LossInputError(f"unknown missing_mode {missing_mode!r}")

    p = probs.clamp(EPS, 1.0 - EPS)
    y = (labels == LPOS).to(p.dtype)
    ent = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))

    if missing_mode == "masked":
        valid = (labels != LMISSING).to(p.dtype)
    else:
        valid = torch.ones_like(ent)
    per_class_n = valid.sum(dim=0)
    per_class = (ent * valid).sum(dim=0) / per_class_n.clamp_min(1.0)

    active = per_class_n > 0
    if class_mask is not None:
        active = active & class_mask.to(torch.bool)
    w = weights.to(p.dtype)
    n_active = active.to(p.dtype).sum()
    if float(n_active) == 0.0:
        return probs.sum() * 0.0
    return (w * per_class * active.to(p.dtype)).sum() / n_active


@dataclass
class PairSets:
    """Positive and negative (region feature, text embedding) pairs for one box."""

    pos_v: torch.Tensor  # P x D
    pos_t: torch.Tensor  # P x D
    neg_v: torch.Tensor  # M x D (possibly empty)
    neg_t: torch.Tensor  # M x D
    box_index: int = 0
    pos_names: Tuple[str, ...] = ()
    neg_names: Tuple[str, ...] = ()

    @classmethod
    def from_pairs(cls, positives: List[Tuple[torch.Tensor, torch.Tensor]],
                   negatives: List[Tuple[torch.Tensor, torch.Tensor]],
                   **kw) -> "PairSets":
        def stack(pairs, like):
            if pairs:
                return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])
            d = like.shape[-1] if like is not None else 0
            z = torch.zeros((0, d))
            return z, z

        pv, pt = stack(positives, None)
        nv, nt = stack(negatives, pv if len(positives) else None)
        return cls(pos_v=pv, pos_t=pt, neg_v=nv, neg_t=nt, **kw)

    @property
    def n_pos(self):
        return self.pos_v.shape[0]

    @property
    def n_neg(self):
        return self.neg_v.shape[0]


def mil_nce(pairs: PairSets, tau) -> torch.Tensor:
    """-log( sum_P exp(<v,t>/tau) / (sum_P exp(<v,t>/tau) + sum_N exp(<v',t'>/tau)) ).

    Computed in log space; exactly zero when there are no negatives.
    """
    tau_val = float(tau.detach()) if torch.is_tensor(tau) else float(tau)
    if tau_val <= 0:
        raise LossInputError(f"temperature must be > 0, got {tau_val}")
    if pairs.n_pos == 0:
        raise LossInputError("MIL-NCE needs at least one positive pair")
    pos_logits = (pairs.pos_v * pairs.pos_t).sum(dim=-1) / tau
    lse_p = torch.logsumexp(pos_logits, dim=0)
    if pairs.n_neg == 0:
        return lse_p - lse_p
    neg_logits = (pairs.neg_v * pairs.neg_t).sum(dim=-1) / tau
    lse_n = torch.logsumexp(neg_logits, dim=0)
    return torch.logaddexp(lse_p, lse_n) - lse_p


def step2_loss(per_box_losses: Sequence[torch.Tensor], K: int,
               normalize: str = "paper") -> torch.Tensor:
    """Combine the K+1 per-box MIL-NCE losses (largest box is the 0th).

    normalize="paper" divides the K+1-term sum by K, the literal published
    normalization; K=0 falls back to a divisor of 1. normalize="count"
    divides by K+1 instead.
    """
    if len(per_box_losses) != K + 1:
        raise LossInputError(f"expected K+1={K + 1} entries, got {len(per_box_losses)}")
    if normalize == "paper":
        div = max(K, 1)
    elif normalize == "count":
        div = K + 1
    else:
        raise LossInputError(f"unknown normalize {normalize!r}")
    total = per_box_losses[0]
    for term in per_box_losses[1:]:
        total = total + term
    return total / div


def kl_distill(student: ScoreMatrix | torch.Tensor,
               teacher: ScoreMatrix | torch.Tensor) -> torch.Tensor:
    """Mean per-entry Bernoulli KL(teacher || student) over classes then regions."""
    s = (student.probs if isinstance(student, ScoreMatrix) else student).clamp(EPS, 1 - EPS)
    t = (teacher.probs if isinstance(teacher, ScoreMatrix) else teacher).clamp(EPS, 1 - EPS)
    if s.shape != t.shape:
        raise LossInputError(f"student {tuple(s.shape)} vs teacher {tuple(t.shape)}")
    kl = t * (torch.log(t) - torch.log(s)) + (1 - t) * (torch.log1p(-t) - torch.log1p(-s))
    return kl.mean(dim=-1).mean()


def total_loss(cls, rpn, dist=None, lambda_rpn: float = 1.0):
    """L_total = L_cls + lambda_RPN * L_RPN (+ L_dist when distilling)."""
    out = cls + lambda_rpn * rpn
    if dist is not None:
        out = out + dist
    return out
