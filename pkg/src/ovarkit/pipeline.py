"""End-to-end orchestration: load a generated benchmark from disk, run the
staged training pipeline, save checkpoints/traces, and evaluate."""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .data import CaptionRecord, ImageStore, Instance, load_captions, load_instances
from .evaluate import AttrEval, MetricsReport
from .models import (Student, StudentConfig, Teacher, TeacherConfig, build_student,
                     build_teacher, load_checkpoint, save_checkpoint)
from .regions import RPNConfig
from .textenc import Tokenizer
from .train import (LossTrace, TrainConfig, StageOpt, cache_crop_features,
                    calibrate_visual, eval_student_box_free, eval_student_box_given,
                    eval_teacher_box_given, proposals_for_images, train_ovarnet,
                    train_rpn, train_step1, train_step2)
from .vocab import (BaseNovelSplit, FrequencyTable, Vocabulary,
                    compute_frequencies, load_split, load_vocabulary)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class Benchmark:
    root: Path
    vocab: Vocabulary
    split: BaseNovelSplit
    train_instances: List[Instance]
    test_instances: List[Instance]
    captions: List[CaptionRecord]
    tokenizer: Tokenizer
    store: ImageStore
    freq: FrequencyTable


def load_benchmark(root) -> Benchmark:
    root = Path(root)
    vocab = load_vocabulary(root / "vocab.jsonl")
    split = load_split(root / "split.json")
    split.validate(vocab)
    train_instances = load_instances(root / "train_annotations.jsonl")
    test_instances = load_instances(root / "test_annotations.jsonl")
    captions = load_captions(root / "captions.jsonl")
    with open(root / "tokenizer_words.json", "r", encoding="utf-8") as fh:
        tokenizer = Tokenizer(json.load(fh))
    freq = compute_frequencies(train_instances, vocab)
    return Benchmark(root=root, vocab=vocab, split=split,
                     train_instances=train_instances, test_instances=test_instances,
                     captions=captions, tokenizer=tokenizer,
                     store=ImageStore(root / "images"), freq=freq)


# ---------------------------------------------------------------------------
# config files


@dataclass
class PipelineConfig:
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rpn: RPNConfig = field(default_factory=RPNConfig)
    synth: "SynthConfig" = field(default_factory=lambda: _synth_default())


def _synth_default():
    from .synth import SynthConfig

    return SynthConfig()


def config_from_dict(raw: dict) -> "PipelineConfig":
    cfg = PipelineConfig()
    for key, section in raw.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config section {key!r}")
        cfg = replace(cfg, **{key: _apply(getattr(cfg, key), section, key)})
    return cfg


def _apply(dc, section: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(dc)}
    updates = {}
    for key, val in section.items():
        if key not in names:
            raise ValueError(f"unknown config key {where}.{key}")
        cur = getattr(dc, key)
        if dataclasses.is_dataclass(cur) and isinstance(val, dict):
            updates[key] = _apply(cur, val, f"{where}.{key}")
        elif isinstance(cur, tuple) and isinstance(val, list):
            updates[key] = tuple(val)
        else:
            updates[key] = val
    return replace(dc, **updates)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if path.suffix == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    else:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    return config_from_dict(raw)


def config_fingerprint(cfg: PipelineConfig, seed: int) -> str:
    import hashlib

    blob = json.dumps({"cfg": dataclasses.asdict(cfg), "seed": seed},
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# staged runs


@dataclass
class PipelineArtifacts:
    teacher: Teacher
    trace: LossTrace
    rpn_head: object
    anchors: torch.Tensor
    student: Optional[Student] = None
    # wall-clock per stage; kept out of the loss trace so traces stay
    # byte-identical across reruns of the same seed+config
    timings: Dict[str, float] = field(default_factory=dict)


def run_teacher(bench: Benchmark, cfg: PipelineConfig, seed: int,
                with_step2: bool = True,
                trace: Optional[LossTrace] = None) -> PipelineArtifacts:
    """Stages 0-2 on a loaded benchmark; the trace records every loss step."""
    trace = trace if trace is not None else LossTrace()
    timings: Dict[str, float] = {}
    teacher = build_teacher(cfg.teacher, bench.tokenizer, seed)
    t0 = time.time()
    rpn_head, anchors = train_rpn(teacher, bench.store, bench.train_instances,
                                  cfg.rpn, cfg.train, seed, trace)
    calibrate_visual(teacher, bench.store, bench.train_instances, seed)
    timings["rpn"] = time.time() - t0
    t0 = time.time()
    train_step1(teacher, bench.store, bench.train_instances, bench.vocab,
                bench.split, cfg.train, seed, trace)
    timings["step1"] = time.time() - t0
    if with_step2:
        t0 = time.time()
        cap_ids = sorted({c.image_id for c in bench.captions})
        props = proposals_for_images(teacher.visual.backbone, rpn_head, anchors,
                                     bench.store, cap_ids, cfg.rpn)
        train_step2(teacher, bench.store, bench.captions, props, bench.vocab,
                    bench.split, cfg.train, seed, trace)
        timings["step2"] = time.time() - t0
    return PipelineArtifacts(teacher=teacher, trace=trace, rpn_head=rpn_head,
                             anchors=anchors, timings=timings)


def run_student(bench: Benchmark, cfg: PipelineConfig, seed: int,
                arts: PipelineArtifacts) -> Student:
    student = build_student(cfg.student, seed)
    student.adopt_teacher(arts.teacher)
    t0 = time.time()
    train_ovarnet(student, arts.teacher, bench.store, bench.train_instances,
                  bench.vocab, bench.split, cfg.train, seed, arts.trace)
    arts.timings["ovarnet"] = time.time() - t0
    arts.student = student
    return student


def evaluate_teacher(bench: Benchmark, teacher: Teacher) -> AttrEval:
    return eval_teacher_box_given(teacher, bench.store, bench.test_instances,
                                  bench.vocab, bench.split, bench.freq)


def evaluate_student(bench: Benchmark, student: Student, protocol: str = "box_given",
                     iou_floor: float = 0.5) -> AttrEval:
    if protocol == "box_given":
        return eval_student_box_given(student, bench.store, bench.test_instances,
                                      bench.vocab, bench.split, bench.freq)
    if protocol == "box_free":
        return eval_student_box_free(student, bench.store, bench.test_instances,
                                     bench.vocab, bench.split, bench.freq,
                                     iou_floor=iou_floor)
    raise ValueError(f"unknown protocol {protocol!r}")


def save_run(out_dir, cfg: PipelineConfig, seed: int, arts: PipelineArtifacts,
             reports: Dict[str, MetricsReport]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": seed, "fingerprint": config_fingerprint(cfg, seed),
            "config": dataclasses.asdict(cfg), "timings": dict(arts.timings),
            "version": 1}
    save_checkpoint(out / "teacher.npz", arts.teacher, meta)
    if arts.student is not None:
        save_checkpoint(out / "student.npz", arts.student, meta)
    with open(out / "losses.csv", "w", encoding="utf-8") as fh:
        fh.write(arts.trace.to_csv())
    for name, report in reports.items():
        with open(out / f"report_{name}.json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        with open(out / f"report_{name}.csv", "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2, default=list)
