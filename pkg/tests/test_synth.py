"""Synthetic benchmark generator: determinism, leakage guard, round trips."""

import hashlib
import json
from pathlib import Path

import pytest
import torch

from ovarkit.data import load_captions, load_instances
from ovarkit.synth import (
    BASE_COLORS, BASE_PATTERNS, CATEGORIES, NOVEL_COLORS, NOVEL_PATTERNS,
    SynthConfig, build_vocab, color_rgb, generate,
)
from ovarkit.vocab import load_split, load_vocabulary
from ovarkit.weaksup import parse_caption

TINY = SynthConfig(n_det=6, n_attr=6, n_cap=6, n_test=4, captions_per_image=2)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_color_rgb_modifiers():
    assert color_rgb("red") == (0.82, 0.12, 0.12)
    r, g, b = color_rgb("light blue")
    assert (r, g, b) == (0.5 * 0.12 + 0.5, 0.5 * 0.22 + 0.5, 0.5 * 0.85 + 0.5)
    assert color_rgb("dark green")[1] == pytest.approx(0.42 * 0.70)


def test_build_vocab_split_and_collision():
    vocab, split = build_vocab()
    assert len(vocab) == len(CATEGORIES) + len(BASE_COLORS) + len(NOVEL_COLORS) \
        + len(BASE_PATTERNS) + len(NOVEL_PATTERNS)
    assert split.novel == {"dark blue", "light green"}
    # the shared name resolves to two different concepts
    assert "diamond@pattern" in vocab.keys
    assert "diamond@object" in vocab.keys
    split.validate(vocab)


def test_generate_writes_expected_layout(tmp_path):
    meta = generate(TINY, seed=3, out_dir=tmp_path / "b")
    root = tmp_path / "b"
    for f in ("vocab.jsonl", "split.json", "train_annotations.jsonl",
              "test_annotations.jsonl", "captions.jsonl",
              "tokenizer_words.json", "meta.json"):
        assert (root / f).exists()
    n_images = len(list((root / "images").glob("*.png")))
    assert n_images == TINY.n_det + TINY.n_attr + TINY.n_cap + TINY.n_test
    assert meta["n_captions"] == TINY.n_cap * TINY.captions_per_image
    assert meta["n_train_instances"] >= TINY.n_det + TINY.n_attr
    assert json.loads((root / "meta.json").read_text())["seed"] == 3


def test_generate_bitwise_deterministic(tmp_path):
    generate(TINY, seed=11, out_dir=tmp_path / "a")
    generate(TINY, seed=11, out_dir=tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_generate_seeds_differ(tmp_path):
    generate(TINY, seed=1, out_dir=tmp_path / "a")
    generate(TINY, seed=2, out_dir=tmp_path / "b")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "b")


def test_train_pool_never_touches_novel_concepts(tmp_path):
    generate(TINY, seed=5, out_dir=tmp_path / "b")
    vocab = load_vocabulary(tmp_path / "b" / "vocab.jsonl")
    split = load_split(tmp_path / "b" / "split.json")
    train = load_instances(tmp_path / "b" / "train_annotations.jsonl")
    for inst in train:
        assert not set(inst.labels) & split.novel
        assert inst.category in CATEGORIES
    # test annotations do exercise the novel columns, in both polarities
    test = load_instances(tmp_path / "b" / "test_annotations.jsonl")
    novel_pos = sum(1 for i in test for k, v in i.labels.items()
                    if k in split.novel and v == "pos")
    novel_neg = sum(1 for i in test for k, v in i.labels.items()
                    if k in split.novel and v == "neg")
    assert novel_pos > 0 and novel_neg > 0


def test_attribute_rows_label_all_base_looks(tmp_path):
    generate(TINY, seed=5, out_dir=tmp_path / "b")
    train = load_instances(tmp_path / "b" / "train_annotations.jsonl")
    attr_rows = [i for i in train if i.view == "attribute"]
    assert attr_rows
    for inst in attr_rows:
        # label keys are vocab display keys, so homonyms carry an @parent tag
        pos = [k.split("@")[0] for k, v in inst.labels.items() if v == "pos"]
        assert len([k for k in pos if k in BASE_COLORS]) == 1
        assert len([k for k in pos if k in BASE_PATTERNS]) == 1
        assert len(inst.labels) == len(BASE_COLORS) + len(BASE_PATTERNS)


def test_detection_rows_carry_category_negatives(tmp_path):
    generate(TINY, seed=5, out_dir=tmp_path / "b")
    train = load_instances(tmp_path / "b" / "train_annotations.jsonl")
    det_rows = [i for i in train if i.view == "detection"]
    assert det_rows
    for inst in det_rows:
        assert inst.category is not None
        assert all(v == "neg" for v in inst.labels.values())
        assert len(inst.labels) == len(CATEGORIES) - 1


def test_generated_captions_parse_back_exactly(tmp_path):
    generate(TINY, seed=9, out_dir=tmp_path / "b")
    caps = load_captions(tmp_path / "b" / "captions.jsonl")
    attrs = BASE_COLORS + NOVEL_COLORS + BASE_PATTERNS + NOVEL_PATTERNS
    assert caps
    for rec in caps:
        parsed = parse_caption(rec.caption, attributes=attrs, nouns=CATEGORIES)
        assert parsed.categories == rec.expected["categories"], rec.caption
        assert parsed.attributes == rec.expected["attributes"], rec.caption
        assert parsed.noun_phrases == rec.expected["noun_phrases"], rec.caption


def test_caption_pool_is_only_source_of_novel_looks(tmp_path):
    cfg = SynthConfig(n_det=4, n_attr=4, n_cap=40, n_test=4,
                      captions_per_image=1, cap_novel_frac=1.0)
    generate(cfg, seed=2, out_dir=tmp_path / "b")
    caps = load_captions(tmp_path / "b" / "captions.jsonl")
    novel_words = set(NOVEL_COLORS) | set(NOVEL_PATTERNS)
    mentioned = [c for c in caps
                 if set(c.expected["attributes"]) & novel_words]
    assert mentioned  # novel looks reach training only through captions


def test_images_are_valid_unit_range(tmp_path, micro_dir):
    from ovarkit.data import load_image
    img_dir = Path(micro_dir) / "images"
    some = sorted(img_dir.glob("*.png"))[:3]
    for p in some:
        img = load_image(p)
        assert img.shape == (3, 64, 64)
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0


def test_boxes_respect_overlap_and_size_limits(tmp_path):
    generate(TINY, seed=13, out_dir=tmp_path / "b")
    test = load_instances(tmp_path / "b" / "test_annotations.jsonl")
    by_img = {}
    for inst in test:
        by_img.setdefault(inst.image_id, []).append(inst.box)
        x1, y1, x2, y2 = inst.box
        assert TINY.min_size - 1e-6 <= x2 - x1 <= TINY.max_size * 1.25 + 1e-6
        assert 0 <= x1 < x2 <= TINY.image_size
        assert 0 <= y1 < y2 <= TINY.image_size
    from ovarkit.regions import iou_xyxy
    for boxes in by_img.values():
        if len(boxes) == 2:
            t = torch.tensor(boxes, dtype=torch.float64)
            assert float(iou_xyxy(t[:1], t[1:])) <= TINY.max_overlap + 1e-9
