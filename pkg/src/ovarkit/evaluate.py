"""Evaluation: all-point average precision with bucketed tie handling,
box-given and box-free attribute protocols, detection-style category AP50,
and grouped report assembly (base/novel, frequency tertiles)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .losses import LMISSING, LPOS
from .vocab import BaseNovelSplit, FrequencyTable, Vocabulary


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# average precision


def _bucket_counts(scores: torch.Tensor, flags: torch.Tensor
                   ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Group by distinct score (descending); return per-bucket (tp, total) as
    exact integer counts, so the result is permutation invariant."""
    order = torch.argsort(scores.to(torch.float64), descending=True, stable=True)
    s = scores.to(torch.float64)[order]
    f = flags.to(torch.long)[order]
    new_bucket = torch.ones_like(s, dtype=torch.bool)
    new_bucket[1:] = s[1:] != s[:-1]
    bucket_id = torch.cumsum(new_bucket.to(torch.long), dim=0) - 1
    n_buckets = int(bucket_id[-1]) + 1 if len(s) else 0
    tp = torch.zeros(n_buckets, dtype=torch.long).index_add_(0, bucket_id, f)
    tot = torch.zeros(n_buckets, dtype=torch.long).index_add_(0, bucket_id, torch.ones_like(f))
    return tp, tot


def average_precision_ranked(scores: torch.Tensor, flags: torch.Tensor,
                             n_pos: int) -> float:
    """All-point AP of a ranking. Tied scores form one bucket: the step curve
    advances once per bucket, with precision taken at the bucket end. Returns
    nan when n_pos == 0."""
    if scores.shape != flags.shape:
        raise EvalError(f"scores {tuple(scores.shape)} vs flags {tuple(flags.shape)}")
    if n_pos <= 0:
        return float("nan")
    if scores.numel() == 0:
        return 0.0
    tp, tot = _bucket_counts(scores, flags)
    cum_tp = torch.cumsum(tp, dim=0).to(torch.float64)
    cum_n = torch.cumsum(tot, dim=0).to(torch.float64)
    prec = cum_tp / cum_n
    d_rec = tp.to(torch.float64) / float(n_pos)
    return float((prec * d_rec).sum())


def average_precision(scores: torch.Tensor, labels: torch.Tensor) -> float:
    """AP over a set of scored instances with binary labels (1 positive)."""
    flags = (labels == 1).to(torch.long)
    return average_precision_ranked(scores, flags, int(flags.sum()))


def mean_ap(values: Sequence[float]) -> float:
    """Mean over classes, skipping nan entries (classes without positives)."""
    kept = [v for v in values if v == v]
    return sum(kept) / len(kept) if kept else float("nan")


# ---------------------------------------------------------------------------
# box matching (box-free protocol)


def match_boxes(gt_boxes: torch.Tensor, pred_boxes: torch.Tensor,
                iou_floor: float = 0.5) -> torch.Tensor:
    """For each gt box, index of the largest-IoU prediction, or -1 when no
    prediction reaches the floor. A floor of 0 always takes the best
    prediction, even with zero overlap. Ties pick the lowest index."""
    from .regions import iou_xyxy

    g = gt_boxes.shape[0]
    out = torch.full((g,), -1, dtype=torch.long)
    if pred_boxes.shape[0] == 0:
        return out
    ious = iou_xyxy(gt_boxes.to(torch.float64), pred_boxes.to(torch.float64))
    best, idx = ious.max(dim=1)  # torch.max returns the first maximal index
    for i in range(g):
        if iou_floor <= 0 or float(best[i]) >= iou_floor:
            out[i] = idx[i]
    return out


# ---------------------------------------------------------------------------
# attribute evaluation


@dataclass
class AttrEval:
    per_concept: Dict[str, float]
    map_all: float
    map_base: float
    map_novel: float
    map_head: float
    map_medium: float
    map_tail: float
    n_instances: int
    protocol: str


def frequency_tertiles(names: Sequence[str], freq: FrequencyTable) -> Dict[str, str]:
    """head/medium/tail by train-frequency rank: thirds of the list sorted by
    (count desc, name), boundaries at floor(n/3) and floor(2n/3)."""
    ranked = sorted(names, key=lambda n: (-freq.get(n), n))
    n = len(ranked)
    out = {}
    for i, name in enumerate(ranked):
        out[name] = "head" if i < n // 3 else ("medium" if i < (2 * n) // 3 else "tail")
    return out


def _grouped_mean(per_concept: Dict[str, float], members: Sequence[str]) -> float:
    return mean_ap([per_concept[m] for m in members if m in per_concept])


def evaluate_box_given(probs: torch.Tensor, labels: torch.Tensor, names: Sequence[str],
                       split: BaseNovelSplit, freq: FrequencyTable,
                       protocol: str = "box_given") -> AttrEval:
    """Per-concept AP over annotated instances; missing labels are excluded
    from that concept's ranking."""
    if probs.shape != labels.shape or probs.shape[1] != len(names):
        raise EvalError(f"probs {tuple(probs.shape)}, labels {tuple(labels.shape)}, "
                        f"{len(names)} names")
    per: Dict[str, float] = {}
    for j, name in enumerate(names):
        keep = labels[:, j] != LMISSING
        per[name] = average_precision(probs[keep, j], (labels[keep, j] == LPOS).long())
    tert = frequency_tertiles(names, freq)
    base = [n for n in names if n in split.base]
    novel = [n for n in names if n in split.novel]
    return AttrEval(
        per_concept=per,
        map_all=mean_ap(list(per.values())),
        map_base=_grouped_mean(per, base),
        map_novel=_grouped_mean(per, novel),
        map_head=_grouped_mean(per, [n for n in names if tert[n] == "head"]),
        map_medium=_grouped_mean(per, [n for n in names if tert[n] == "medium"]),
        map_tail=_grouped_mean(per, [n for n in names if tert[n] == "tail"]),
        n_instances=probs.shape[0],
        protocol=protocol,
    )


def evaluate_box_free(gt_boxes_per_image: Sequence[torch.Tensor],
                      gt_labels_per_image: Sequence[torch.Tensor],
                      pred_boxes_per_image: Sequence[torch.Tensor],
                      pred_probs_per_image: Sequence[torch.Tensor],
                      names: Sequence[str], split: BaseNovelSplit,
                      freq: FrequencyTable, iou_floor: float = 0.5) -> AttrEval:
    """Each gt instance adopts the concept scores of its largest-IoU predicted
    box; unmatched instances score 0 everywhere. Then scores as box_given."""
    rows = []
    labs = []
    n = len(names)
    for g_boxes, g_labels, p_boxes, p_probs in zip(
            gt_boxes_per_image, gt_labels_per_image,
            pred_boxes_per_image, pred_probs_per_image):
        if g_boxes.shape[0] == 0:
            continue
        match = match_boxes(g_boxes, p_boxes, iou_floor)
        for i in range(g_boxes.shape[0]):
            if int(match[i]) >= 0:
                rows.append(p_probs[int(match[i])])
            else:
                rows.append(torch.zeros(n, dtype=torch.float64))
            labs.append(g_labels[i])
    if not rows:
        raise EvalError("no ground-truth instances")
    probs = torch.stack([r.to(torch.float64) for r in rows])
    labels = torch.stack(labs)
    return evaluate_box_given(probs, labels, names, split, freq, protocol="box_free")


# ---------------------------------------------------------------------------
# detection-style category AP at IoU 0.5


def category_ap50(gt_boxes_per_image: Sequence[torch.Tensor],
                  gt_cats_per_image: Sequence[Sequence[str]],
                  pred_per_image: Sequence[Sequence[Tuple[torch.Tensor, str, float]]],
                  categories: Sequence[str], iou_thr: float = 0.5
                  ) -> Tuple[Dict[str, float], float]:
    """Greedy score-ordered matching of predictions to same-category gt boxes
    (IoU >= 0.5, each gt consumed once); AP per category, then the mean."""
    from .regions import iou_xyxy

    per: Dict[str, float] = {}
    for cat in categories:
        entries = []  # (score, image_idx, pred_box)
        n_pos = 0
        for img, (g_boxes, g_cats) in enumerate(zip(gt_boxes_per_image, gt_cats_per_image)):
            n_pos += sum(1 for c in g_cats if c == cat)
            for box, c, score in pred_per_image[img]:
                if c == cat:
                    entries.append((float(score), img, box))
        entries.sort(key=lambda e: (-e[0], e[1]))
        used: Dict[int, set] = {}
        flags = []
        for score, img, box in entries:
            g_boxes = gt_boxes_per_image[img]
            g_cats = gt_cats_per_image[img]
            cand = [i for i, c in enumerate(g_cats)
                    if c == cat and i not in used.setdefault(img, set())]
            hit = -1
            if cand and g_boxes.shape[0]:
                ious = iou_xyxy(box[None].to(torch.float64),
                                g_boxes[cand].to(torch.float64))[0]
                best = int(torch.argmax(ious))
                if float(ious[best]) >= iou_thr:
                    hit = cand[best]
            if hit >= 0:
                used[img].add(hit)
                flags.append(1)
            else:
                flags.append(0)
        scores_t = torch.tensor([e[0] for e in entries], dtype=torch.float64)
        flags_t = torch.tensor(flags, dtype=torch.long)
        per[cat] = average_precision_ranked(scores_t, flags_t, n_pos)
    return per, mean_ap(list(per.values()))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    attr: AttrEval
    category_ap: Optional[Dict[str, float]] = None
    category_map: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)
    version: int = 1

    def to_dict(self) -> dict:
        def clean(x):
            return None if (isinstance(x, float) and x != x) else x

        return {
            "version": self.version,
            "protocol": self.attr.protocol,
            "map_all": clean(self.attr.map_all),
            "map_base": clean(self.attr.map_base),
            "map_novel": clean(self.attr.map_novel),
            "map_head": clean(self.attr.map_head),
            "map_medium": clean(self.attr.map_medium),
            "map_tail": clean(self.attr.map_tail),
            "n_instances": self.attr.n_instances,
            "per_concept": {k: clean(v) for k, v in sorted(self.attr.per_concept.items())},
            "category_ap": ({k: clean(v) for k, v in sorted(self.category_ap.items())}
                            if self.category_ap is not None else None),
            "category_map": clean(self.category_map),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        """Per-concept rows with full-precision repr floats; stable order."""
        lines = ["concept,ap"]
        for k in sorted(self.attr.per_concept):
            v = self.attr.per_concept[k]
            lines.append(f"{k},{'' if v != v else repr(v)}")
        return "\n".join(lines) + "\n"
