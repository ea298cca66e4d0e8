"""Command line entry points: benchmark generation, caption parsing, staged
training, evaluation, prediction dumps, and report inspection."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional

import torch

from .data import load_captions, write_jsonl
from .evaluate import MetricsReport
from .models import Student, Teacher, build_student, build_teacher, load_checkpoint
from .pipeline import (Benchmark, PipelineConfig, config_from_dict, evaluate_student,
                       evaluate_teacher, load_benchmark, load_config, run_student,
                       run_teacher, save_run)
from .seeding import stream_seed
from .train import eval_student_box_free, student_probs_on_boxes
from .vocab import load_vocabulary
from .weaksup import parse_caption


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _ensure_out(path: Path, force: bool, probe: str) -> Optional[int]:
    if (path / probe).exists() and not force:
        return _fail(f"{path / probe} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return None


def _emit(args, payload: dict, human_lines: List[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=list))
    else:
        for line in human_lines:
            print(line)


# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    from .synth import generate

    out = Path(args.out)
    rc = _ensure_out(out, args.force, "meta.json")
    if rc is not None:
        return rc
    cfg = load_config(args.config)
    summary = generate(cfg.synth, args.seed, out)
    _emit(args, summary, [
        f"wrote benchmark to {out}",
        f"  train instances: {summary['n_train_instances']}",
        f"  test instances:  {summary['n_test_instances']}",
        f"  captions:        {summary['n_captions']}",
        f"  novel concepts:  {', '.join(summary['novel'])}",
    ])
    return 0


def cmd_parse_captions(args) -> int:
    vocab = load_vocabulary(args.vocab)
    captions = load_captions(args.captions)
    attr_names = sorted({c.name for c in vocab.attributes()})
    cat_names = sorted({c.name for c in vocab.categories()})
    extra = list(args.extra_nouns or [])
    rows = []
    n_match = n_expected = 0
    for rec in captions:
        parsed = parse_caption(rec.caption, attributes=attr_names, nouns=cat_names,
                               extra_nouns=extra)
        row = {"image_id": rec.image_id, "caption": rec.caption,
               "categories": parsed.categories, "attributes": parsed.attributes,
               "noun_phrases": parsed.noun_phrases}
        if rec.expected is not None:
            n_expected += 1
            ok = (set(parsed.categories) == set(rec.expected["categories"])
                  and set(parsed.attributes) == set(rec.expected["attributes"])
                  and set(parsed.noun_phrases) == set(rec.expected["noun_phrases"]))
            row["matches_expected"] = ok
            n_match += int(ok)
        rows.append(row)
    if args.out:
        write_jsonl(args.out, rows)
    payload = {"n_captions": len(rows), "n_expected": n_expected, "n_match": n_match}
    lines = [f"parsed {len(rows)} captions"]
    if n_expected:
        lines.append(f"round trip: {n_match}/{n_expected} match the generator parse")
    _emit(args, payload, lines)
    return 0 if n_match == n_expected else 1


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.distill:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, distill=args.distill))
    if args.region_head:
        cfg = dataclasses.replace(cfg, student=dataclasses.replace(cfg.student,
                                                                   region_head=args.region_head))
    if args.prompt_mode:
        cfg = dataclasses.replace(cfg, teacher=dataclasses.replace(cfg.teacher,
                                                                   prompt_mode=args.prompt_mode))
    if args.no_parent:
        cfg = dataclasses.replace(cfg, teacher=dataclasses.replace(cfg.teacher,
                                                                   include_parent=False))
    return cfg


def cmd_train(args) -> int:
    out = Path(args.out)
    rc = _ensure_out(out, args.force, "run.json")
    if rc is not None:
        return rc
    cfg = _apply_overrides(load_config(args.config), args)
    torch.manual_seed(stream_seed(args.seed, "cli.train"))
    bench = load_benchmark(args.data)
    arts = run_teacher(bench, cfg, args.seed, with_step2=not args.no_step2)
    reports = {"teacher_box_given": MetricsReport(attr=evaluate_teacher(bench, arts.teacher))}
    if args.stages == "teacher+student":
        student = run_student(bench, cfg, args.seed, arts)
        reports["student_box_given"] = MetricsReport(attr=evaluate_student(bench, student))
    save_run(out, cfg, args.seed, arts, reports)
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    lines = [f"run saved to {out}"]
    for name, rep in reports.items():
        lines.append(f"  {name}: map_all={rep.attr.map_all:.4f} "
                     f"base={rep.attr.map_base:.4f} novel={rep.attr.map_novel:.4f}")
    _emit(args, payload, lines)
    return 0


def _load_run_model(run_dir: Path, which: str, bench: Benchmark):
    with open(run_dir / "run.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = config_from_dict(meta["config"])
    seed = int(meta["seed"])
    if which == "teacher":
        model = build_teacher(cfg.teacher, bench.tokenizer, seed)
        load_checkpoint(run_dir / "teacher.npz", model)
    else:
        model = build_student(cfg.student, seed)
        load_checkpoint(run_dir / "student.npz", model)
    return model, cfg


def cmd_evaluate(args) -> int:
    bench = load_benchmark(args.data)
    run_dir = Path(args.run)
    model, _ = _load_run_model(run_dir, args.model, bench)
    if args.model == "teacher":
        if args.protocol != "box_given":
            return _fail("the crop teacher only supports the box_given protocol")
        attr = evaluate_teacher(bench, model)
    else:
        attr = evaluate_student(bench, model, protocol=args.protocol,
                                iou_floor=args.iou_floor)
    report = MetricsReport(attr=attr, meta={"run": str(run_dir), "model": args.model})
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    _emit(args, report.to_dict(), [
        f"{args.model} {attr.protocol}: map_all={attr.map_all:.4f} "
        f"base={attr.map_base:.4f} novel={attr.map_novel:.4f} "
        f"(head={attr.map_head:.4f} medium={attr.map_medium:.4f} tail={attr.map_tail:.4f})",
    ])
    return 0


def cmd_predict(args) -> int:
    bench = load_benchmark(args.data)
    run_dir = Path(args.run)
    student, _ = _load_run_model(run_dir, "student", bench)
    from .regions import make_anchors, propose_regions

    rows = [{"concepts": list(student.concept_names), "version": 1}]
    image_ids = sorted({x.image_id for x in bench.test_instances})
    anchors = None
    with torch.no_grad():
        for image_id in image_ids:
            img = bench.store.get(image_id)
            pyr = student.backbone(img[None])
            if anchors is None:
                anchors = make_anchors(img.shape[1] // 16, img.shape[2] // 16,
                                       student.cfg.rpn)
            obj, reg = student.rpn(pyr.f16)
            props = propose_regions(obj[0], reg[0], anchors,
                                    (img.shape[1], img.shape[2]), student.cfg.rpn)
            if not props:
                continue
            boxes = torch.stack([p.box for p in props])
            embs = student.region_embeddings(img, boxes)
            probs = student.scores(embs).probs
            for p, prob in zip(props, probs):
                rows.append({"image_id": image_id,
                             "box": [float(v) for v in p.box],
                             "objectness": p.score,
                             "scores": [float(v) for v in prob]})
    write_jsonl(args.out, rows)
    _emit(args, {"n_predictions": len(rows) - 1, "out": str(args.out)},
          [f"wrote {len(rows) - 1} box predictions to {args.out}"])
    return 0


def cmd_report(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        rep = json.load(fh)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
        return 0
    print(f"protocol: {rep.get('protocol')}")
    for key in ("map_all", "map_base", "map_novel", "map_head", "map_medium", "map_tail"):
        val = rep.get(key)
        print(f"  {key:10s} {val if val is None else f'{val:.4f}'}")
    per = rep.get("per_concept") or {}
    for name in sorted(per):
        val = per[name]
        print(f"    {name:20s} {val if val is None else f'{val:.4f}'}")
    return 0


# ---------------------------------------------------------------------------


def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="ovarkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--force", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("parse-captions", help="dictionary-parse a caption file")
    p.add_argument("--captions", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.add_argument("--extra-nouns", nargs="*")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_parse_captions)

    p = sub.add_parser("train", help="run the staged training pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--stages", choices=["teacher", "teacher+student"],
                   default="teacher+student")
    p.add_argument("--no-step2", action="store_true")
    p.add_argument("--distill", choices=["none", "prob_kl", "feat_l2", "feat_l1"])
    p.add_argument("--region-head", choices=["attnpool", "cnn_avgpool", "teacher_crop"])
    p.add_argument("--prompt-mode", choices=["learned", "manual", "bare"])
    p.add_argument("--no-parent", action="store_true")
    p.add_argument("--force", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved run on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--model", choices=["teacher", "student"], default="student")
    p.add_argument("--protocol", choices=["box_given", "box_free"], default="box_given")
    p.add_argument("--iou-floor", type=float, default=0.5)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="dump box + concept-score predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="pretty-print a saved metrics report")
    p.add_argument("--report", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
