"""Synthetic open-vocabulary benchmark: colored, textured shapes on noisy
backgrounds.

The held-out concepts are chosen so generalization has an actual mechanism:
novel colors are compositions of modifier and hue words that each occur in
the annotated data through other combinations ("dark blue" held out while
"dark red", "dark yellow" and plain "blue" are annotated). The word
"diamond" stays deliberately ambiguous between the shape category and the
texture, so prompts have to lean on the parent token to keep them apart.
Novel concepts never appear in the annotated pools (neither as labels nor
as pixels); they do appear, with descriptive captions, in the
caption-supervision pool and in the test set."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import CaptionRecord, Instance, save_captions, save_instances, save_image
from .seeding import np_rng, py_rng
from .textenc import Tokenizer
from .vocab import (AttributeConcept, BaseNovelSplit, Vocabulary, save_split,
                    save_vocabulary)

BASE_RGB = {
    "red": (0.82, 0.12, 0.12),
    "green": (0.10, 0.70, 0.16),
    "blue": (0.12, 0.22, 0.85),
    "yellow": (0.80, 0.74, 0.10),
}
# novel concepts are compositional: every word in a novel name is trained in
# some base concept, so a captionless model can still reach them by prompt
# composition. Each modifier appears across three base hues — with a single
# exemplar the modifier just fuses with its hue instead of factorizing.
# "diamond" stays deliberately ambiguous between the category and the
# pattern; the parent token is what a prompt has to disambiguate on.
BASE_COLORS = [
    "red", "green", "blue", "yellow",
    "light red", "light blue", "light yellow",
    "dark red", "dark green", "dark yellow",
]
NOVEL_COLORS = ["dark blue", "light green"]
BASE_PATTERNS = ["solid", "striped", "dotted", "diamond"]
NOVEL_PATTERNS: List[str] = []
CATEGORIES = ["square", "circle", "triangle", "diamond"]


def color_rgb(name: str) -> Tuple[float, float, float]:
    words = name.split()
    base = np.array(BASE_RGB[words[-1]], dtype=np.float64)
    if words[0] == "light":
        base = 0.5 * base + 0.5
    elif words[0] == "dark":
        base = 0.42 * base
    return tuple(float(v) for v in base)


def build_vocab() -> Tuple[Vocabulary, BaseNovelSplit]:
    concepts = [AttributeConcept(c, "object", "category") for c in CATEGORIES]
    concepts += [AttributeConcept(c, "color") for c in BASE_COLORS + NOVEL_COLORS]
    concepts += [AttributeConcept(p, "pattern") for p in BASE_PATTERNS + NOVEL_PATTERNS]
    vocab = Vocabulary(concepts)
    novel = set()
    for name in NOVEL_COLORS:
        novel.add(vocab.key_of(vocab.find(name, "attribute")))
    for name in NOVEL_PATTERNS:
        novel.add(vocab.keys[vocab.index(name, "pattern")])
    split = BaseNovelSplit(base=set(vocab.keys) - novel, novel=novel)
    split.validate(vocab)
    return vocab, split


@dataclass
class SynthConfig:
    image_size: int = 64
    n_det: int = 650            # detection-view annotated images
    n_attr: int = 650           # attribute-view annotated images
    n_cap: int = 350            # caption-supervision images (no annotations)
    n_test: int = 250           # fully labeled test images (two shapes each)
    captions_per_image: int = 3
    p_second_shape: float = 0.5
    cap_novel_frac: float = 0.5       # caption-pool shapes drawing novel looks
    test_novel_color_p: float = 0.35
    test_novel_pattern_p: float = 0.2
    min_size: float = 18.0
    max_size: float = 40.0
    noise: float = 0.02
    # kept small so one region's box rarely cuts deep into a neighbor; large
    # values leak neighbor surface into region crops, and unevenly so across
    # pools (test images always hold two shapes), which skews evaluation
    max_overlap: float = 0.04


# ---------------------------------------------------------------------------
# rendering


@dataclass
class ShapeEntry:
    shape: str
    color: str
    pattern: str
    box: Tuple[float, float, float, float]


def _shape_mask(shape: str, size: int, box: Sequence[float]) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    ys += 0.5
    xs += 0.5
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    hw, hh = (x2 - x1) / 2, (y2 - y1) / 2
    if shape == "square":
        return (np.abs(xs - cx) <= hw) & (np.abs(ys - cy) <= hh)
    if shape == "circle":
        return ((xs - cx) / hw) ** 2 + ((ys - cy) / hh) ** 2 <= 1.0
    if shape == "triangle":
        t = (ys - (cy - hh)) / (2 * hh)       # 0 at apex, 1 at base
        inside_y = (t >= 0) & (t <= 1)
        return inside_y & (np.abs(xs - cx) <= hw * np.clip(t, 0, 1))
    if shape == "diamond":
        return np.abs(xs - cx) / hw + np.abs(ys - cy) / hh <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def _pattern_weights(pattern: str, size: int) -> np.ndarray:
    """Per-pixel brightness factor implementing the texture."""
    ys, xs = np.mgrid[0:size, 0:size]
    if pattern == "solid":
        return np.ones((size, size))
    if pattern == "striped":
        return np.where((ys // 3) % 2 == 0, 1.0, 0.3)
    if pattern == "dotted":
        return np.where((ys % 6 < 2) & (xs % 6 < 2), 0.25, 1.0)
    if pattern == "diamond":
        return np.where(((xs + ys) % 7 < 2) | ((xs - ys) % 7 < 2), 0.25, 1.0)
    raise ValueError(f"unknown pattern {pattern!r}")


def render_image(size: int, entries: Sequence[ShapeEntry],
                 rng: np.random.Generator, noise: float = 0.02) -> torch.Tensor:
    bg = 0.08 + 0.06 * float(rng.random())
    img = np.full((size, size, 3), bg, dtype=np.float64)
    for e in entries:
        mask = _shape_mask(e.shape, size, e.box)
        weights = _pattern_weights(e.pattern, size)
        rgb = np.array(color_rgb(e.color), dtype=np.float64)
        img[mask] = (weights[mask, None] * rgb[None, :])
    img += rng.uniform(-noise, noise, size=img.shape)
    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32)).permute(2, 0, 1)


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = ((a[2] - a[0]) * (a[3] - a[1])) + ((b[2] - b[0]) * (b[3] - b[1])) - inter
    return inter / area if area > 0 else 0.0


def _sample_box(cfg: SynthConfig, rng) -> Tuple[float, float, float, float]:
    s = rng.uniform(cfg.min_size, cfg.max_size)
    aspect = rng.uniform(0.8, 1.25)
    w = min(s * aspect, cfg.image_size - 4.0)
    h = min(s / aspect, cfg.image_size - 4.0)
    x1 = rng.uniform(2.0, cfg.image_size - 2.0 - w)
    y1 = rng.uniform(2.0, cfg.image_size - 2.0 - h)
    return (x1, y1, x1 + w, y1 + h)


def _sample_entry(cfg: SynthConfig, rng, colors: Sequence[str],
                  patterns: Sequence[str]) -> ShapeEntry:
    return ShapeEntry(
        shape=rng.choice(CATEGORIES),
        color=rng.choice(list(colors)),
        pattern=rng.choice(list(patterns)),
        box=_sample_box(cfg, rng),
    )


def _sample_entries(cfg: SynthConfig, rng, n_shapes: int, colors, patterns
                    ) -> List[ShapeEntry]:
    entries = [_sample_entry(cfg, rng, colors, patterns)]
    while len(entries) < n_shapes:
        for _ in range(20):
            cand = _sample_entry(cfg, rng, colors, patterns)
            if all(_iou(cand.box, e.box) <= cfg.max_overlap for e in entries):
                entries.append(cand)
                break
        else:
            break
    return entries


# ---------------------------------------------------------------------------
# captions (each template records the parse its structure implies)


def _caption_from_entry(e: ShapeEntry, rng) -> Tuple[str, dict]:
    color, pattern, shape = e.color, e.pattern, e.shape
    forms = [
        (f"a photo of a {color} {pattern} {shape}",
         dict(categories=[shape], attributes=[color, pattern],
              noun_phrases=[f"{color} {pattern} {shape}"])),
        (f"there is a {color} {shape} in the image",
         dict(categories=[shape], attributes=[color],
              noun_phrases=[f"{color} {shape}"])),
        (f"the {shape} is {color}",
         dict(categories=[shape], attributes=[color],
              noun_phrases=[f"{color} {shape}"])),
        (f"the {shape} is {pattern} and {color}",
         dict(categories=[shape], attributes=[pattern, color],
              noun_phrases=[f"{pattern} {shape}"])),
        (f"two {color} {shape}s are shown",
         dict(categories=[shape], attributes=[color],
              noun_phrases=[f"{color} {shape}"])),
        (f"the {shape} is {pattern}",
         dict(categories=[shape], attributes=[pattern],
              noun_phrases=[f"{pattern} {shape}"])),
        (f"a {color} {shape} near the edge of the picture",
         dict(categories=[shape], attributes=[color],
              noun_phrases=[f"{color} {shape}"])),
    ]
    # texture and category share the word "diamond"; skip caption forms that
    # would put both senses in one sentence ambiguously
    if pattern == "diamond" and shape == "diamond":
        forms = [forms[1], forms[2], forms[4], forms[6]]
    text, expected = forms[rng.randrange(len(forms))]
    return text, expected


# ---------------------------------------------------------------------------
# annotation assembly


def _neg_keys(vocab: Vocabulary, names: Sequence[str], parent: str,
              skip: str) -> Dict[str, str]:
    return {vocab.keys[vocab.index(n, parent)]: "neg" for n in names if n != skip}


def _det_instance(image_id: str, k: int, e: ShapeEntry, vocab: Vocabulary) -> Instance:
    labels = _neg_keys(vocab, CATEGORIES, "object", e.shape)
    return Instance(image_id=image_id, region_id=f"{image_id}.{k}", box=e.box,
                    category=e.shape, labels=labels, view="detection")


def _attr_labels(e: ShapeEntry, vocab: Vocabulary, colors, patterns) -> Dict[str, str]:
    labels: Dict[str, str] = {}
    for n in colors:
        labels[vocab.keys[vocab.index(n, "color")]] = "pos" if n == e.color else "neg"
    for n in patterns:
        labels[vocab.keys[vocab.index(n, "pattern")]] = "pos" if n == e.pattern else "neg"
    return labels


def _attr_instance(image_id: str, k: int, e: ShapeEntry, vocab: Vocabulary) -> Instance:
    labels = _attr_labels(e, vocab, BASE_COLORS, BASE_PATTERNS)
    return Instance(image_id=image_id, region_id=f"{image_id}.{k}", box=e.box,
                    category=e.shape, labels=labels, view="attribute")


def _test_instance(image_id: str, k: int, e: ShapeEntry, vocab: Vocabulary) -> Instance:
    labels = _attr_labels(e, vocab, BASE_COLORS + NOVEL_COLORS,
                          BASE_PATTERNS + NOVEL_PATTERNS)
    labels.update(_neg_keys(vocab, CATEGORIES, "object", e.shape))
    return Instance(image_id=image_id, region_id=f"{image_id}.{k}", box=e.box,
                    category=e.shape, labels=labels, view="test")


# ---------------------------------------------------------------------------
# generator


def generate(cfg: SynthConfig, seed: int, out_dir) -> dict:
    """Write the full benchmark to out_dir; returns a summary dict."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    vocab, split = build_vocab()
    save_vocabulary(vocab, out / "vocab.jsonl")
    save_split(split, out / "split.json")

    train_rows: List[Instance] = []
    test_rows: List[Instance] = []
    captions: List[CaptionRecord] = []

    def n_shapes(rng) -> int:
        return 2 if rng.random() < cfg.p_second_shape else 1

    # annotated pools: base looks only
    for pool, count, make in (("det", cfg.n_det, _det_instance),
                              ("attr", cfg.n_attr, _attr_instance)):
        rng = py_rng(seed, f"synth.{pool}")
        nrng = np_rng(seed, f"synth.{pool}.pixels")
        for i in range(count):
            image_id = f"{pool}_{i:04d}"
            entries = _sample_entries(cfg, rng, n_shapes(rng), BASE_COLORS, BASE_PATTERNS)
            save_image(render_image(cfg.image_size, entries, nrng, cfg.noise), out / "images" / f"{image_id}.png")
            train_rows.extend(make(image_id, k, e, vocab) for k, e in enumerate(entries))

    # caption pool: novel looks allowed, captions instead of annotations
    rng = py_rng(seed, "synth.cap")
    nrng = np_rng(seed, "synth.cap.pixels")
    for i in range(cfg.n_cap):
        image_id = f"cap_{i:04d}"
        if rng.random() < cfg.cap_novel_frac:
            colors = NOVEL_COLORS + BASE_COLORS[:2]
            patterns = NOVEL_PATTERNS + BASE_PATTERNS
        else:
            colors, patterns = BASE_COLORS, BASE_PATTERNS
        entries = _sample_entries(cfg, rng, n_shapes(rng), colors, patterns)
        save_image(render_image(cfg.image_size, entries, nrng, cfg.noise), out / "images" / f"{image_id}.png")
        for _ in range(cfg.captions_per_image):
            e = entries[rng.randrange(len(entries))]
            text, expected = _caption_from_entry(e, rng)
            captions.append(CaptionRecord(image_id=image_id, caption=text, expected=expected))

    # test pool: both shapes fully labeled, novel looks mixed in
    rng = py_rng(seed, "synth.test")
    nrng = np_rng(seed, "synth.test.pixels")
    for i in range(cfg.n_test):
        image_id = f"test_{i:04d}"
        entries = []
        for k in range(2):
            colors = NOVEL_COLORS if rng.random() < cfg.test_novel_color_p else BASE_COLORS
            patterns = (NOVEL_PATTERNS if NOVEL_PATTERNS
                        and rng.random() < cfg.test_novel_pattern_p else BASE_PATTERNS)
            for _ in range(20):
                cand = _sample_entry(cfg, rng, colors, patterns)
                if all(_iou(cand.box, e.box) <= cfg.max_overlap for e in entries):
                    entries.append(cand)
                    break
        save_image(render_image(cfg.image_size, entries, nrng, cfg.noise), out / "images" / f"{image_id}.png")
        test_rows.extend(_test_instance(image_id, k, e, vocab) for k, e in enumerate(entries))

    save_instances(out / "train_annotations.jsonl", train_rows)
    save_instances(out / "test_annotations.jsonl", test_rows)
    save_captions(out / "captions.jsonl", captions)

    texts = [c.caption for c in captions]
    texts += [c.name for c in vocab.concepts] + [c.parent for c in vocab.concepts]
    tokenizer = Tokenizer.build(texts)
    with open(out / "tokenizer_words.json", "w", encoding="utf-8") as fh:
        json.dump(tokenizer.save_words(), fh)

    summary = {
        "seed": seed,
        "config": asdict(cfg),
        "n_train_instances": len(train_rows),
        "n_test_instances": len(test_rows),
        "n_captions": len(captions),
        "n_concepts": len(vocab),
        "novel": sorted(split.novel),
        "version": 1,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
