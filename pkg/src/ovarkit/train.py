"""Training regimes and evaluation drivers.

Stage order:
  0. proposal pretrain  - backbone + objectness/regression heads on the
     detection pool (class-agnostic), giving shape-aware trunk features.
  1. alignment training - the visual encoder stays frozen (region crops are
     cached once as feature rows); prompts, text encoder and temperature
     train against federated region labels with inverse-frequency weights.
  2. caption finetuning - parsed captions weakly supervise the max-area box
     (caption concepts + noun phrases) and the top-scoring boxes (teacher
     pseudo-labels) through the MIL-NCE objective.
  3. student training   - single-pass detector-recognizer distilled from the
     crop teacher, trained with classification + proposal + distillation
     losses on the annotated pools.

Only base-split columns ever receive label supervision; the held-out
concepts reach the student purely through caption text and distillation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import torch
import torch.nn as nn

from .data import (CaptionRecord, ImageStore, Instance, class_presence_mask,
                   label_codes, minibatches)
from .evaluate import AttrEval, evaluate_box_free, evaluate_box_given
from .losses import (LMISSING, LPOS, PairSets, federated_bce, kl_distill, mil_nce,
                     similarity_scores, step2_loss, total_loss)
from .models import Student, Teacher
from .regions import (Proposal, RPNConfig, crop_and_encode, crop_region,
                      make_anchors, propose_regions, rpn_loss)
from .seeding import py_rng, stream_seed, torch_gen
from .vocab import (BaseNovelSplit, FrequencyTable, Vocabulary, class_weights,
                    compute_frequencies)
from .weaksup import (BoxSelection, build_pair_sets, parse_caption, pseudo_labels,
                      select_boxes)


@dataclass
class StageOpt:
    kind: str = "sgd"          # "sgd" | "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 10
    batch: int = 32


@dataclass
class TrainConfig:
    rpn: StageOpt = field(default_factory=lambda: StageOpt(
        kind="sgd", lr=0.01, epochs=3, batch=8))
    step1: StageOpt = field(default_factory=lambda: StageOpt(
        kind="adamw", lr=3e-3, weight_decay=1e-4, epochs=30, batch=64))
    step2: StageOpt = field(default_factory=lambda: StageOpt(
        kind="adamw", lr=1e-4, weight_decay=1e-4, epochs=8, batch=16))
    ovarnet: StageOpt = field(default_factory=lambda: StageOpt(
        kind="adamw", lr=1e-3, weight_decay=1e-4, epochs=4, batch=4))
    gamma: float = 0.25                 # inverse-frequency exponent
    lambda_rpn: float = 1.0
    missing_mode: str = "negative"
    top_k: int = 3                      # auxiliary boxes per caption image
    pseudo_threshold: float = 0.7
    n_dict_neg: int = 32
    step2_normalize: str = "paper"
    distill: str = "prob_kl"            # "none" | "prob_kl" | "feat_l2" | "feat_l1"
    bstar_concepts: bool = True
    bstar_phrases: bool = True
    bk_pseudo: bool = True
    max_captions: Optional[int] = None


@dataclass
class LossTrace:
    rows: List[Tuple[str, int, str, float]] = field(default_factory=list)

    def add(self, stage: str, step: int, name: str, value):
        if isinstance(value, torch.Tensor):
            value = float(value.detach())
        self.rows.append((stage, step, name, float(value)))

    def to_csv(self) -> str:
        lines = ["stage,step,name,value"]
        lines += [f"{s},{i},{n},{repr(v)}" for s, i, n, v in self.rows]
        return "\n".join(lines) + "\n"

    def first(self, stage: str, name: str) -> Optional[float]:
        for s, _, n, v in self.rows:
            if s == stage and n == name:
                return v
        return None


def make_optimizer(params, opt: StageOpt) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if opt.kind == "sgd":
        return torch.optim.SGD(params, lr=opt.lr, momentum=opt.momentum,
                               weight_decay=opt.weight_decay)
    if opt.kind == "adamw":
        return torch.optim.AdamW(params, lr=opt.lr, weight_decay=opt.weight_decay)
    raise ValueError(f"unknown optimizer {opt.kind!r}")


def group_by_image(instances: Sequence[Instance]) -> Dict[str, List[Instance]]:
    out: Dict[str, List[Instance]] = {}
    for inst in instances:
        out.setdefault(inst.image_id, []).append(inst)
    return out


# ---------------------------------------------------------------------------
# stage 0: proposal pretrain


def train_rpn(teacher: Teacher, store: ImageStore, instances: Sequence[Instance],
              rpn_cfg: RPNConfig, cfg: TrainConfig, seed: int,
              trace: Optional[LossTrace] = None) -> Tuple[nn.Module, torch.Tensor]:
    """Train the teacher trunk + a proposal head on gt boxes (class-agnostic).
    Returns the head and the anchor grid."""
    from .regions import RPNHead

    backbone = teacher.visual.backbone
    torch.manual_seed(stream_seed(seed, "rpn.head"))
    head = RPNHead(backbone.c16, len(rpn_cfg.anchor_sizes))
    by_image = group_by_image(instances)
    image_ids = sorted(by_image)
    probe = store.get(image_ids[0])
    fh, fw = probe.shape[1] // 16, probe.shape[2] // 16
    anchors = make_anchors(fh, fw, rpn_cfg)
    opt = make_optimizer(list(backbone.parameters()) + list(head.parameters()), cfg.rpn)
    rng = py_rng(seed, "rpn.batches")
    step = 0
    for _ in range(cfg.rpn.epochs):
        for batch in minibatches(len(image_ids), cfg.rpn.batch, rng):
            images = torch.stack([store.get(image_ids[i]) for i in batch])
            pyr = backbone(images)
            obj, reg = head(pyr.f16)
            losses = []
            for bi, i in enumerate(batch):
                gt = torch.tensor([inst.box for inst in by_image[image_ids[i]]],
                                  dtype=torch.float32)
                losses.append(rpn_loss(obj[bi], reg[bi], anchors, gt, rpn_cfg))
            loss = torch.stack(losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            if trace is not None:
                trace.add("rpn", step, "loss", loss)
            step += 1
    return head, anchors


def calibrate_visual(teacher: Teacher, store: ImageStore,
                     instances: Sequence[Instance], seed: int,
                     max_crops: int = 512) -> None:
    """Fold per-feature standardization, measured on a crop sample, into the
    frozen readout head. Uses region boxes only, never labels, so it plays
    the role of unsupervised visual pretraining for the random projection."""
    rng = py_rng(seed, "visual.calibrate")
    sample = list(instances)
    if len(sample) > max_crops:
        sample = rng.sample(sample, max_crops)
    rows = []
    with torch.no_grad():
        for image_id, insts in sorted(group_by_image(sample).items()):
            crops = torch.stack([crop_region(store.get(image_id),
                                             torch.tensor(i.box, dtype=torch.float32),
                                             teacher.cfg.crop_size)
                                 for i in insts])
            rows.append(teacher.visual.features(crops))
    teacher.visual.calibrate(torch.cat(rows))


def proposals_for_images(backbone, head, anchors, store: ImageStore,
                         image_ids: Sequence[str], rpn_cfg: RPNConfig
                         ) -> Dict[str, List[Proposal]]:
    out = {}
    with torch.no_grad():
        for image_id in image_ids:
            img = store.get(image_id)
            pyr = backbone(img[None])
            obj, reg = head(pyr.f16)
            out[image_id] = propose_regions(obj[0], reg[0], anchors,
                                            (img.shape[1], img.shape[2]), rpn_cfg)
    return out


# ---------------------------------------------------------------------------
# crop feature cache (frozen visual side)


def cache_crop_features(teacher: Teacher, store: ImageStore,
                        instances: Sequence[Instance]) -> torch.Tensor:
    rows = []
    with torch.no_grad():
        by_image = group_by_image(instances)
        feats: Dict[str, torch.Tensor] = {}
        for image_id in sorted(by_image):
            boxes = torch.tensor([inst.box for inst in by_image[image_id]],
                                 dtype=torch.float32)
            embs = crop_and_encode(store.get(image_id), boxes, teacher.visual,
                                   teacher.cfg.crop_size)
            for inst, e in zip(by_image[image_id], embs):
                feats[inst.region_id] = e
    for inst in instances:
        rows.append(feats[inst.region_id])
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# stage I: alignment training on cached features


def base_concept_info(vocab: Vocabulary, split: BaseNovelSplit):
    cols = [i for i, k in enumerate(vocab.keys) if k in split.base]
    concepts = [vocab.concepts[i] for i in cols]
    keys = [vocab.keys[i] for i in cols]
    return cols, concepts, keys


def train_step1(teacher: Teacher, store: ImageStore, instances: Sequence[Instance],
                vocab: Vocabulary, split: BaseNovelSplit, cfg: TrainConfig,
                seed: int, trace: Optional[LossTrace] = None,
                feats: Optional[torch.Tensor] = None) -> FrequencyTable:
    """Alternate detection-view and attribute-view batches; only base-split
    columns are supervised. The visual encoder never updates."""
    if feats is None:
        feats = cache_crop_features(teacher, store, instances)
    freq = compute_frequencies(instances, vocab)
    cols, base_concepts, base_keys = base_concept_info(vocab, split)
    weights_all = torch.tensor(
        class_weights(freq, cfg.gamma, vocab, names=base_keys).weights)

    labels_full = label_codes(instances, vocab)          # missing where unlisted
    labels_base = labels_full[:, cols]

    det_rows = [i for i, x in enumerate(instances) if x.view == "detection"]
    attr_rows = [i for i, x in enumerate(instances) if x.view != "detection"]
    mask_cache: Dict[str, torch.Tensor] = {}
    for view, rows in (("detection", det_rows), ("attribute", attr_rows)):
        m = class_presence_mask([instances[i] for i in rows], vocab)
        mask_cache[view] = m[cols]

    params = (list(teacher.text.parameters()) + list(teacher.prompts.parameters())
              + [teacher.log_tau])
    for p in teacher.visual.parameters():
        p.requires_grad_(False)
    opt = make_optimizer(params, cfg.step1)
    rng = py_rng(seed, "step1.batches")
    step = 0
    for _ in range(cfg.step1.epochs):
        streams = []
        for view, rows in (("detection", det_rows), ("attribute", attr_rows)):
            order = list(rows)
            rng.shuffle(order)
            streams.append((view, [order[i:i + cfg.step1.batch]
                                   for i in range(0, len(order), cfg.step1.batch)]))
        n_batches = max(len(b) for _, b in streams)
        for bi in range(n_batches):
            for view, batches in streams:
                if bi >= len(batches):
                    continue
                rows = batches[bi]
                cmat = teacher.concept_matrix(base_concepts)
                scores = teacher.score_features(feats[rows], cmat)
                loss = federated_bce(scores, labels_base[rows], weights_all,
                                     class_mask=mask_cache[view],
                                     missing_mode=cfg.missing_mode)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if trace is not None:
                    trace.add("step1", step, f"cls_{view}", loss)
                step += 1
    return freq


# ---------------------------------------------------------------------------
# stage II: caption finetuning


def concept_lookup(vocab: Vocabulary, names_by_kind: Dict[str, List[str]]):
    """Map parsed surface names to concepts, honoring the parse's own
    attribute/category call for collided names."""
    out = []
    for kind, names in names_by_kind.items():
        for n in names:
            c = vocab.find(n, kind)
            if c is not None:
                out.append(c)
    return out


def train_step2(teacher: Teacher, store: ImageStore, captions: Sequence[CaptionRecord],
                proposals: Dict[str, List[Proposal]], vocab: Vocabulary,
                split: BaseNovelSplit, cfg: TrainConfig, seed: int,
                trace: Optional[LossTrace] = None) -> None:
    """MIL-NCE over caption concepts (max-area box) and teacher pseudo-labels
    (top-scoring boxes). Caption text may name held-out concepts; that is the
    only channel through which they are ever trained."""
    attr_names = sorted({c.name for c in vocab.attributes()})
    cat_names = sorted({c.name for c in vocab.categories()})
    cols, base_concepts, base_keys = base_concept_info(vocab, split)
    base_attr = [c for c in base_concepts if c.kind == "attribute"]

    # ---- fixed pre-pass: parse, select boxes, cache features + pseudo-labels
    with torch.no_grad():
        base_attr_mat = teacher.concept_matrix(base_attr)
    jobs = []
    feat_cache: Dict[str, torch.Tensor] = {}
    for rec in captions[: cfg.max_captions]:
        props = proposals.get(rec.image_id, [])
        if not props:
            continue
        parsed = parse_caption(rec.caption, attributes=attr_names, nouns=cat_names)
        if parsed.is_empty():
            continue
        sel = select_boxes(props, cfg.top_k)
        if rec.image_id not in feat_cache:
            boxes = torch.stack([p.box for p in props])
            with torch.no_grad():
                feat_cache[rec.image_id] = crop_and_encode(
                    store.get(rec.image_id), boxes, teacher.visual,
                    teacher.cfg.crop_size)
        embs = feat_cache[rec.image_id]
        box_pos: List[List[str]] = []
        if cfg.bk_pseudo:
            with torch.no_grad():
                probs = similarity_scores(embs[sel.top], base_attr_mat,
                                          float(teacher.tau)).probs
            attr_keys = [vocab.key_of(c) for c in base_attr]
            box_pos = [pseudo_labels(probs[i], attr_keys, cfg.pseudo_threshold)
                       for i in range(len(sel.top))]
        else:
            sel = BoxSelection(star=sel.star, top=[])
        pos_concepts = concept_lookup(vocab, {
            "category": parsed.categories, "attribute": parsed.attributes})
        if not cfg.bstar_concepts:
            pos_concepts = []
        phrases = list(parsed.noun_phrases) if cfg.bstar_phrases else []
        jobs.append(dict(image_id=rec.image_id, sel=sel, embs=embs,
                         pos_keys=[vocab.key_of(c) for c in pos_concepts],
                         phrases=phrases, box_pos=box_pos))

    dict_pool = list(vocab.keys)
    params = (list(teacher.text.parameters()) + list(teacher.prompts.parameters())
              + [teacher.log_tau])
    opt = make_optimizer(params, cfg.step2)
    rng = py_rng(seed, "step2.batches")
    neg_rng = py_rng(seed, "step2.negatives")
    step = 0
    for _ in range(cfg.step2.epochs):
        for batch in minibatches(len(jobs), cfg.step2.batch, rng):
            batch_jobs = [jobs[i] for i in batch]
            need_phrases: List[str] = []
            for j in batch_jobs:
                need_phrases += j["phrases"]
            uniq_phrases = list(dict.fromkeys(need_phrases))
            # every key can appear as a positive or sampled negative
            key_concepts = [vocab.concepts[vocab.key_index(k)] for k in dict_pool]
            cmat = teacher.concept_matrix(key_concepts)
            concept_embs = {k: cmat[i] for i, k in enumerate(dict_pool)}
            phrase_embs = {}
            if uniq_phrases:
                pmat = teacher.phrase_matrix(uniq_phrases)
                phrase_embs = {p: pmat[i] for i, p in enumerate(uniq_phrases)}

            losses = []
            for j in batch_jobs:
                own = set(j["pos_keys"])
                batch_neg = [k for other in batch_jobs if other is not j
                             for k in other["pos_keys"] if k not in own]
                pair_sets = build_pair_sets(
                    j["embs"], j["sel"],
                    caption_pos=j["pos_keys"],
                    phrase_pos=j["phrases"], box_pos=j["box_pos"],
                    concept_embs=concept_embs, phrase_embs=phrase_embs,
                    batch_neg=list(dict.fromkeys(batch_neg)), dict_pool=dict_pool,
                    n_dict_neg=cfg.n_dict_neg, rng=neg_rng)
                if not pair_sets:
                    continue
                per_box = [mil_nce(ps, teacher.tau) for ps in pair_sets]
                k = len(per_box) - 1
                losses.append(step2_loss(per_box, k, cfg.step2_normalize))
            if not losses:
                continue
            loss = torch.stack(losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            if trace is not None:
                trace.add("step2", step, "mil", loss)
            step += 1


# ---------------------------------------------------------------------------
# stage III: student training with distillation


def cache_teacher_probs(teacher: Teacher, store: ImageStore,
                        instances: Sequence[Instance], cmat: torch.Tensor
                        ) -> torch.Tensor:
    # scored one image-group at a time: gemm blocking depends on batch shape,
    # and an exact teacher copy must reproduce these rows bitwise in training
    by_image = group_by_image(instances)
    probs: Dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for image_id in sorted(by_image):
            group = by_image[image_id]
            boxes = torch.tensor([inst.box for inst in group], dtype=torch.float32)
            feats = crop_and_encode(store.get(image_id), boxes, teacher.visual,
                                    teacher.cfg.crop_size)
            p = similarity_scores(feats, cmat, teacher.tau).probs
            for inst, row in zip(group, p):
                probs[inst.region_id] = row
    return torch.stack([probs[inst.region_id] for inst in instances])


def train_ovarnet(student: Student, teacher: Teacher, store: ImageStore,
                  instances: Sequence[Instance], vocab: Vocabulary,
                  split: BaseNovelSplit, cfg: TrainConfig, seed: int,
                  trace: Optional[LossTrace] = None) -> None:
    """Joint classification + proposal + distillation training on annotated
    images, with regions taken at the gt boxes."""
    with torch.no_grad():
        cmat = teacher.concept_matrix(list(vocab.concepts)).detach()
    student.set_concepts(list(vocab.keys), cmat)

    freq = compute_frequencies(instances, vocab)
    cols, _, base_keys = base_concept_info(vocab, split)
    weights = torch.tensor(class_weights(freq, cfg.gamma, vocab, names=base_keys).weights)
    labels_full = label_codes(instances, vocab)

    by_image = group_by_image(instances)
    image_ids = sorted(by_image)
    row_of = {inst.region_id: i for i, inst in enumerate(instances)}

    probe = store.get(image_ids[0])
    anchors = make_anchors(probe.shape[1] // 16, probe.shape[2] // 16, student.cfg.rpn)

    teacher_probs: Optional[torch.Tensor] = None
    teacher_feats: Optional[torch.Tensor] = None
    if cfg.distill == "prob_kl":
        teacher_probs = cache_teacher_probs(teacher, store, instances, cmat)
    elif cfg.distill in ("feat_l2", "feat_l1"):
        teacher_feats = cache_crop_features(teacher, store, instances)
    elif cfg.distill != "none":
        raise ValueError(f"unknown distill mode {cfg.distill!r}")

    opt = make_optimizer(student.parameters(), cfg.ovarnet)
    rng = py_rng(seed, "ovarnet.batches")
    step = 0
    for _ in range(cfg.ovarnet.epochs):
        for batch in minibatches(len(image_ids), cfg.ovarnet.batch, rng):
            cls_terms, rpn_terms, dist_terms = [], [], []
            for i in batch:
                image_id = image_ids[i]
                insts = by_image[image_id]
                img = store.get(image_id)
                boxes = torch.tensor([x.box for x in insts], dtype=torch.float32)
                rows = [row_of[x.region_id] for x in insts]
                pyr = student.backbone(img[None])
                embs = student.region_embeddings(img, boxes, pyr)
                probs = student.scores(embs).probs
                mask = class_presence_mask(insts, vocab)[cols]
                cls_terms.append(federated_bce(
                    probs[:, cols], labels_full[rows][:, cols], weights,
                    class_mask=mask, missing_mode=cfg.missing_mode))
                obj, reg = student.rpn(pyr.f16)
                rpn_terms.append(rpn_loss(obj[0], reg[0], anchors, boxes,
                                          student.cfg.rpn))
                if teacher_probs is not None:
                    dist_terms.append(kl_distill(probs, teacher_probs[rows]))
                elif teacher_feats is not None:
                    d = embs - teacher_feats[rows]
                    dist_terms.append((d * d).mean() if cfg.distill == "feat_l2"
                                      else d.abs().mean())
            cls = torch.stack(cls_terms).mean()
            rpn = torch.stack(rpn_terms).mean()
            dist = torch.stack(dist_terms).mean() if dist_terms else None
            loss = total_loss(cls, rpn, dist, cfg.lambda_rpn)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if trace is not None:
                trace.add("ovarnet", step, "cls", cls)
                trace.add("ovarnet", step, "rpn", rpn)
                if dist is not None:
                    trace.add("ovarnet", step, "dist", dist)
                trace.add("ovarnet", step, "total", loss)
            step += 1


# ---------------------------------------------------------------------------
# evaluation drivers


def eval_teacher_box_given(teacher: Teacher, store: ImageStore,
                           test_instances: Sequence[Instance], vocab: Vocabulary,
                           split: BaseNovelSplit, freq: FrequencyTable) -> AttrEval:
    feats = cache_crop_features(teacher, store, test_instances)
    with torch.no_grad():
        cmat = teacher.concept_matrix(list(vocab.concepts))
        probs = similarity_scores(feats, cmat, teacher.tau).probs.to(torch.float64)
    labels = label_codes(test_instances, vocab)
    return evaluate_box_given(probs, labels, vocab.keys, split, freq)


def student_probs_on_boxes(student: Student, store: ImageStore,
                           instances: Sequence[Instance]) -> torch.Tensor:
    by_image = group_by_image(instances)
    out: Dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for image_id in sorted(by_image):
            insts = by_image[image_id]
            boxes = torch.tensor([x.box for x in insts], dtype=torch.float32)
            embs = student.region_embeddings(store.get(image_id), boxes)
            probs = student.scores(embs).probs
            for inst, p in zip(insts, probs):
                out[inst.region_id] = p
    return torch.stack([out[x.region_id] for x in instances]).to(torch.float64)


def eval_student_box_given(student: Student, store: ImageStore,
                           test_instances: Sequence[Instance], vocab: Vocabulary,
                           split: BaseNovelSplit, freq: FrequencyTable) -> AttrEval:
    probs = student_probs_on_boxes(student, store, test_instances)
    labels = label_codes(test_instances, vocab)
    return evaluate_box_given(probs, labels, vocab.keys, split, freq)


def eval_student_box_free(student: Student, store: ImageStore,
                          test_instances: Sequence[Instance], vocab: Vocabulary,
                          split: BaseNovelSplit, freq: FrequencyTable,
                          iou_floor: float = 0.5,
                          pred_boxes: Optional[Dict[str, torch.Tensor]] = None
                          ) -> AttrEval:
    """Score the student's own proposals (or supplied boxes) and match them
    to gt instances by IoU."""
    by_image = group_by_image(test_instances)
    image_ids = sorted(by_image)
    anchors = None
    g_boxes, g_labels, p_boxes, p_probs = [], [], [], []
    with torch.no_grad():
        for image_id in image_ids:
            insts = by_image[image_id]
            img = store.get(image_id)
            if pred_boxes is not None:
                boxes = pred_boxes[image_id]
            else:
                pyr = student.backbone(img[None])
                if anchors is None:
                    anchors = make_anchors(img.shape[1] // 16, img.shape[2] // 16,
                                           student.cfg.rpn)
                obj, reg = student.rpn(pyr.f16)
                props = propose_regions(obj[0], reg[0], anchors,
                                        (img.shape[1], img.shape[2]), student.cfg.rpn)
                boxes = (torch.stack([p.box for p in props])
                         if props else torch.zeros((0, 4)))
            if boxes.shape[0]:
                embs = student.region_embeddings(img, boxes)
                probs = student.scores(embs).probs.to(torch.float64)
            else:
                probs = torch.zeros((0, len(student.concept_names)), dtype=torch.float64)
            g_boxes.append(torch.tensor([x.box for x in insts], dtype=torch.float64))
            g_labels.append(label_codes(insts, vocab))
            p_boxes.append(boxes.to(torch.float64))
            p_probs.append(probs)
    return evaluate_box_free(g_boxes, g_labels, p_boxes, p_probs, vocab.keys,
                             split, freq, iou_floor=iou_floor)
