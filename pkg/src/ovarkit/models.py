"""Model assemblies: the frozen-visual crop-scoring teacher (prompted text
encoder + crop encoder + trainable temperature) and the detector-style
student (shared backbone, proposal head, pooled region head scored against a
cached concept-embedding bank), plus npz checkpoint IO."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import ScoreMatrix, similarity_scores
from .regions import (AttnPool, AttnPoolConfig, FeaturePyramid, RPNConfig, RPNHead,
                      TinyBackbone, VisualEncoder, crop_and_encode, roi_align)
from .seeding import stream_seed, torch_gen
from .textenc import (PromptBank, TextEncoder, TextEncoderConfig, Tokenizer,
                      assemble_phrase_prompt, assemble_prompt, bare_prompt,
                      manual_prompt)
from .vocab import AttributeConcept, Vocabulary


def seeded_construction(seed: int, name: str):
    """Pin the global torch RNG before building a module so default layer
    inits are reproducible; named streams handle the rest."""
    torch.manual_seed(stream_seed(seed, name))


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherConfig:
    d_embed: int = 64
    crop_size: int = 64
    backbone_width: int = 16
    tau_init: float = 0.07
    prompt_layout: Tuple[int, int, int] = (10, 10, 10)
    phrase_layout: Tuple[int, int] = (8, 8)
    prompt_mode: str = "learned"       # "learned" | "manual" | "bare"
    include_parent: bool = True
    d_tok: int = 64
    text_layers: int = 2
    text_heads: int = 4
    text_ffn: int = 128


class Teacher(nn.Module):
    """Crop-and-encode scorer: frozen visual embedding, prompted text
    embeddings, cosine-sigmoid scores with a trainable temperature."""

    def __init__(self, cfg: TeacherConfig, tokenizer: Tokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.visual = VisualEncoder(TinyBackbone(cfg.backbone_width), d_out=cfg.d_embed)
        tcfg = TextEncoderConfig(vocab_size=len(tokenizer), d_tok=cfg.d_tok,
                                 d_out=cfg.d_embed, n_layers=cfg.text_layers,
                                 n_heads=cfg.text_heads, ffn_dim=cfg.text_ffn)
        self.text = TextEncoder(tcfg)
        self.prompts = PromptBank(d_tok=cfg.d_tok, layout=cfg.prompt_layout,
                                  phrase_layout=cfg.phrase_layout)
        self.log_tau = nn.Parameter(torch.tensor(float(math.log(cfg.tau_init))))

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def init_params(self, seed: int) -> None:
        with torch.no_grad():
            g = torch_gen(seed, "teacher.prompts")
            self.prompts.vectors.normal_(0.0, 0.02, generator=g)
            self.prompts.phrase_vectors.normal_(0.0, 0.02, generator=g)
            g = torch_gen(seed, "teacher.text")
            self.text.token_table.normal_(0.0, 0.02, generator=g)
            self.text.pos.normal_(0.0, 0.02, generator=g)

    def prompt_seq(self, concept: AttributeConcept, include_parent: Optional[bool] = None):
        inc = self.cfg.include_parent if include_parent is None else include_parent
        mode = self.cfg.prompt_mode
        if mode == "learned":
            return assemble_prompt(concept, self.prompts, self.tokenizer, include_parent=inc)
        if mode == "manual":
            return manual_prompt(concept, self.tokenizer)
        if mode == "bare":
            return bare_prompt(concept, self.tokenizer, include_parent=inc)
        raise ValueError(f"unknown prompt_mode {mode!r}")

    def concept_matrix(self, concepts: Sequence[AttributeConcept],
                       include_parent: Optional[bool] = None) -> torch.Tensor:
        seqs = [self.prompt_seq(c, include_parent) for c in concepts]
        return self.text(seqs, self.prompts)

    def phrase_matrix(self, phrases: Sequence[str]) -> torch.Tensor:
        seqs = [assemble_phrase_prompt(p, self.prompts, self.tokenizer) for p in phrases]
        return self.text(seqs, self.prompts)

    def encode_crops(self, crops: torch.Tensor) -> torch.Tensor:
        return self.visual(crops)

    def score_features(self, feats: torch.Tensor, cmat: torch.Tensor) -> ScoreMatrix:
        return similarity_scores(feats, cmat, self.tau)


# ---------------------------------------------------------------------------
# student


class CnnPoolHead(nn.Module):
    """Plain conv-downsample + average-pool region head (attention ablation)."""

    def __init__(self, in_ch: int, d_model: int = 64, d_out: int = 64):
        super().__init__()
        self.reduce = nn.Conv2d(in_ch, d_model, kernel_size=2, stride=2)
        self.proj = nn.Linear(d_model, d_out)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.reduce(rois)).mean(dim=(2, 3))
        out = self.proj(h)
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)


@dataclass
class StudentConfig:
    region_head: str = "attnpool"      # "attnpool" | "cnn_avgpool" | "teacher_crop"
    d_embed: int = 64
    roi_size: int = 14
    backbone_width: int = 16
    pos_mode: str = "learned"
    tau_init: float = 0.07
    rpn: RPNConfig = field(default_factory=RPNConfig)


class Student(nn.Module):
    """Single-pass detector-recognizer: backbone + proposal head + pooled
    region embeddings scored against a fixed concept bank."""

    def __init__(self, cfg: StudentConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = TinyBackbone(cfg.backbone_width)
        self.rpn = RPNHead(self.backbone.c16, len(cfg.rpn.anchor_sizes))
        if cfg.region_head == "attnpool":
            self.head = AttnPool(AttnPoolConfig(
                in_ch=self.backbone.c8, d_model=cfg.d_embed, roi_size=cfg.roi_size,
                d_out=cfg.d_embed, pos_mode=cfg.pos_mode))
        elif cfg.region_head == "cnn_avgpool":
            self.head = CnnPoolHead(self.backbone.c8, cfg.d_embed, cfg.d_embed)
        elif cfg.region_head == "teacher_crop":
            self.head = VisualEncoder(TinyBackbone(cfg.backbone_width), d_out=cfg.d_embed)
        else:
            raise ValueError(f"unknown region_head {cfg.region_head!r}")
        self.log_tau = nn.Parameter(torch.tensor(float(math.log(cfg.tau_init))))
        self.register_buffer("concept_bank", torch.zeros(0, cfg.d_embed))
        self.concept_names: List[str] = []

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def init_params(self, seed: int) -> None:
        if isinstance(self.head, AttnPool):
            self.head.init_params(torch_gen(seed, "student.head.extra"))

    def adopt_teacher(self, teacher: Teacher) -> None:
        """Copy the teacher trunk into the backbone (and, in teacher_crop
        mode, the whole visual encoder and temperature)."""
        self.backbone.load_state_dict(copy.deepcopy(teacher.visual.backbone.state_dict()))
        with torch.no_grad():
            self.log_tau.copy_(teacher.log_tau.detach())
        if self.cfg.region_head == "teacher_crop":
            self.head.load_state_dict(copy.deepcopy(teacher.visual.state_dict()))

    def set_concepts(self, names: Sequence[str], matrix: torch.Tensor) -> None:
        if matrix.shape[0] != len(names):
            raise ValueError(f"{matrix.shape[0]} rows for {len(names)} names")
        self.concept_bank = matrix.detach().clone()
        self.concept_names = list(names)

    def region_embeddings(self, image: torch.Tensor, boxes: torch.Tensor,
                          pyramid: Optional[FeaturePyramid] = None) -> torch.Tensor:
        if self.cfg.region_head == "teacher_crop":
            return crop_and_encode(image, boxes, self.head)
        if pyramid is None:
            pyramid = self.backbone(image[None])
        rois = roi_align(pyramid.f8[0], boxes, self.cfg.roi_size, 1.0 / 8)
        return self.head(rois)

    def scores(self, embs: torch.Tensor) -> ScoreMatrix:
        return similarity_scores(embs, self.concept_bank, self.tau)


# ---------------------------------------------------------------------------
# checkpoints (npz of float32 arrays + a json sidecar for structure)


def save_checkpoint(path, module: nn.Module, meta: Optional[dict] = None) -> None:
    path = Path(path)
    state = module.state_dict()
    arrays = {k: state[k].detach().cpu().numpy().astype(np.float32)
              for k in sorted(state)}
    np.savez(path, **arrays)
    side = dict(meta or {})
    if isinstance(module, Student):
        side["concept_names"] = list(module.concept_names)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(side, fh, sort_keys=True, indent=2)


def load_checkpoint(path, module: nn.Module) -> dict:
    path = Path(path)
    with np.load(path if path.suffix == ".npz" else path.with_suffix(".npz")) as z:
        raw = {k: torch.from_numpy(z[k].copy()) for k in z.files}
    if isinstance(module, Student) and "concept_bank" in raw:
        module.concept_bank = raw["concept_bank"].clone()
    ref = module.state_dict()
    module.load_state_dict({k: v.to(ref[k].dtype) for k, v in raw.items()})
    side = path.with_suffix(".json")
    meta = {}
    if side.exists():
        with open(side, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    if isinstance(module, Student) and "concept_names" in meta:
        module.concept_names = list(meta["concept_names"])
    return meta


def build_teacher(cfg: TeacherConfig, tokenizer: Tokenizer, seed: int) -> Teacher:
    seeded_construction(seed, "teacher.construct")
    t = Teacher(cfg, tokenizer)
    t.init_params(seed)
    return t


def build_student(cfg: StudentConfig, seed: int) -> Student:
    seeded_construction(seed, "student.construct")
    s = Student(cfg)
    s.init_params(seed)
    return s
