#!/usr/bin/env python3
"""Full benchmark protocol, one JSON summary per seed.

For each seed this script generates (or reuses) a benchmark directory, then
measures:
  * alignment-stage teacher mAP, base and novel, box-given
  * the same numbers after caption finetuning (the novel delta is the
    headline effect)
  * distilled vs undistilled students, box-given and box-free
  * the prompt ablation ladder on novel mAP: learned prompts with the parent
    token, learned prompts without it, bare tokens

Usage:
  python3 scripts/run_benchmark.py --root /tmp/exp --seeds 0 1 2
  python3 scripts/run_benchmark.py --root /tmp/exp --seeds 0 --skip-students
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ovarkit.pipeline import (PipelineConfig, evaluate_student, evaluate_teacher,
                              load_benchmark, load_config, run_student, run_teacher)
from ovarkit.synth import generate
from ovarkit.train import proposals_for_images, train_step2


def log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def ensure_bench(root: Path, cfg: PipelineConfig, seed: int) -> Path:
    bench_dir = root / f"bench_seed{seed}"
    if not (bench_dir / "meta.json").exists():
        log(f"generating benchmark seed={seed}")
        generate(cfg.synth, seed, bench_dir)
    return bench_dir


def continue_step2(bench, cfg: PipelineConfig, seed: int, arts) -> float:
    t0 = time.time()
    cap_ids = sorted({c.image_id for c in bench.captions})
    props = proposals_for_images(arts.teacher.visual.backbone, arts.rpn_head,
                                 arts.anchors, bench.store, cap_ids, cfg.rpn)
    train_step2(arts.teacher, bench.store, bench.captions, props, bench.vocab,
                bench.split, cfg.train, seed, arts.trace)
    return time.time() - t0


def attr_nums(ev) -> dict:
    return {"map_all": ev.map_all, "map_base": ev.map_base, "map_novel": ev.map_novel}


def run_seed(root: Path, cfg: PipelineConfig, seed: int, skip_students: bool,
             skip_ablation: bool) -> dict:
    bench = load_benchmark(ensure_bench(root, cfg, seed))
    out: dict = {"seed": seed, "timings": {}}

    t0 = time.time()
    arts = run_teacher(bench, cfg, seed, with_step2=False)
    out["timings"].update(arts.timings)
    ev1 = evaluate_teacher(bench, arts.teacher)
    out["step1"] = attr_nums(ev1)
    log(f"seed {seed} step1  base={ev1.map_base:.4f} novel={ev1.map_novel:.4f}")

    out["timings"]["step2"] = continue_step2(bench, cfg, seed, arts)
    ev2 = evaluate_teacher(bench, arts.teacher)
    out["step2"] = attr_nums(ev2)
    out["step2"]["novel_gain"] = ev2.map_novel - ev1.map_novel
    log(f"seed {seed} step2  base={ev2.map_base:.4f} novel={ev2.map_novel:.4f} "
        f"(novel gain {out['step2']['novel_gain']:+.4f})")

    if not skip_students:
        for mode in ("prob_kl", "none"):
            mcfg = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, distill=mode))
            t0 = time.time()
            student = run_student(bench, mcfg, seed, arts)
            out["timings"][f"student_{mode}"] = time.time() - t0
            ev_g = evaluate_student(bench, student, protocol="box_given")
            ev_f = evaluate_student(bench, student, protocol="box_free")
            out[f"student_{mode}"] = {"box_given": attr_nums(ev_g),
                                      "box_free": attr_nums(ev_f)}
            log(f"seed {seed} student[{mode}] given novel={ev_g.map_novel:.4f} "
                f"free novel={ev_f.map_novel:.4f}")

    if not skip_ablation:
        ladder = {}
        for name, mode, parent in (("learned_parent", "learned", True),
                                   ("learned_noparent", "learned", False),
                                   ("bare", "bare", False)):
            if name == "learned_parent":
                ladder[name] = out["step1"]     # already trained above
                continue
            acfg = dataclasses.replace(
                cfg, teacher=dataclasses.replace(cfg.teacher, prompt_mode=mode,
                                                 include_parent=parent))
            t0 = time.time()
            a_arts = run_teacher(bench, acfg, seed, with_step2=False)
            out["timings"][f"ablate_{name}"] = time.time() - t0
            ladder[name] = attr_nums(evaluate_teacher(bench, a_arts.teacher))
            log(f"seed {seed} ablate[{name}] novel={ladder[name]['map_novel']:.4f}")
        out["prompt_ablation"] = ladder

    return out


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config")
    ap.add_argument("--skip-students", action="store_true")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config)

    for seed in args.seeds:
        t0 = time.time()
        result = run_seed(root, cfg, seed, args.skip_students, args.skip_ablation)
        result["timings"]["total"] = time.time() - t0
        out_file = root / f"results_seed{seed}.json"
        with open(out_file, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        log(f"seed {seed} done in {result['timings']['total']:.0f}s -> {out_file}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
