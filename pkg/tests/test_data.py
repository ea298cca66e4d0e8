"""Dataset IO, label-code assembly, image round trips, batching."""

import random

import pytest
import torch

from ovarkit.data import (
    CaptionRecord, DataError, ImageStore, Instance, class_presence_mask,
    hflip_image_boxes, label_codes, load_captions, load_image, load_instances,
    load_proposals, minibatches, read_jsonl, save_captions, save_image,
    save_instances, save_proposals, write_jsonl,
)
from ovarkit.vocab import AttributeConcept, Vocabulary


def _vocab():
    return Vocabulary([
        AttributeConcept("red", "color", "attribute"),
        AttributeConcept("striped", "pattern", "attribute"),
        AttributeConcept("square", "category", "category"),
        AttributeConcept("diamond", "pattern", "attribute"),
        AttributeConcept("diamond", "category", "category"),
    ])


def test_jsonl_roundtrip_sorted_keys(tmp_path):
    p = tmp_path / "x.jsonl"
    rows = [{"b": 2, "a": 1}, {"z": [1, 2]}]
    write_jsonl(p, rows)
    text = p.read_text()
    assert text.splitlines()[0] == '{"a": 1, "b": 2}'
    assert read_jsonl(p) == rows


def test_read_jsonl_reports_bad_line(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"a": 1}\n{oops\n')
    with pytest.raises(DataError, match=":2:"):
        read_jsonl(p)


def test_instances_roundtrip(tmp_path):
    insts = [Instance(image_id="im0", region_id="r0", box=(1.0, 2.0, 3.0, 4.0),
                      category="square", labels={"red": "pos"}, view="detection")]
    save_instances(tmp_path / "i.jsonl", insts)
    back = load_instances(tmp_path / "i.jsonl")
    assert back == insts


def test_instance_rejects_malformed_row():
    with pytest.raises(DataError):
        Instance.from_row({"image_id": "x"})


def test_captions_roundtrip(tmp_path):
    caps = [CaptionRecord(image_id="im0", caption="a red square",
                          expected={"categories": ["square"]})]
    save_captions(tmp_path / "c.jsonl", caps)
    assert load_captions(tmp_path / "c.jsonl") == caps


def test_proposals_roundtrip(tmp_path):
    rows = [{"image_id": "im0", "box": [0.0, 0.0, 5.0, 5.0], "score": 0.5},
            {"image_id": "im1", "box": [1.0, 1.0, 2.0, 2.0], "score": 0.25}]
    save_proposals(tmp_path / "p.jsonl", rows)
    by_img = load_proposals(tmp_path / "p.jsonl")
    assert set(by_img) == {"im0", "im1"}
    assert by_img["im0"][0]["score"] == 0.5


# ---------------------------------------------------------------------------
# label codes


def test_label_codes_sparse_default_missing():
    v = _vocab()
    insts = [Instance("im0", "r0", (0, 0, 1, 1), labels={"red": "pos", "striped": "neg"})]
    codes = label_codes(insts, v)
    assert codes[0].tolist() == [1, 0, -1, -1, -1]


def test_label_codes_unlisted_negative_mode():
    v = _vocab()
    insts = [Instance("im0", "r0", (0, 0, 1, 1), labels={"red": "pos"})]
    codes = label_codes(insts, v, unlisted_negative=True)
    assert codes[0].tolist() == [1, 0, 0, 0, 0]


def test_label_codes_category_column():
    v = _vocab()
    insts = [Instance("im0", "r0", (0, 0, 1, 1), category="square", view="detection"),
             Instance("im0", "r1", (0, 0, 1, 1), category="diamond", view="detection")]
    codes = label_codes(insts, v)
    assert codes[0].tolist() == [-1, -1, 1, -1, -1]
    # the category name maps to the *category* concept, not the attribute
    assert codes[1].tolist() == [-1, -1, -1, -1, 1]


def test_label_codes_display_key_targets_shared_name():
    v = _vocab()
    insts = [Instance("im0", "r0", (0, 0, 1, 1), labels={"diamond@pattern": "pos"})]
    assert label_codes(insts, v)[0].tolist() == [-1, -1, -1, 1, -1]


def test_class_presence_mask():
    v = _vocab()
    insts = [Instance("im0", "r0", (0, 0, 1, 1), labels={"red": "pos"}),
             Instance("im0", "r1", (0, 0, 1, 1), category="square", view="detection")]
    mask = class_presence_mask(insts, v)
    assert mask.tolist() == [True, False, True, False, False]


# ---------------------------------------------------------------------------
# images


def test_image_save_load_roundtrip(tmp_path):
    g = torch.Generator().manual_seed(0)
    img = torch.rand(3, 16, 20, generator=g)
    save_image(img, tmp_path / "im.png")
    back = load_image(tmp_path / "im.png")
    assert back.shape == (3, 16, 20)
    # uint8 quantization error only
    assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-6


def test_image_store_caches(tmp_path):
    save_image(torch.zeros(3, 8, 8), tmp_path / "a.png")
    store = ImageStore(tmp_path)
    first = store.get("a")
    assert store.get("a") is first


# ---------------------------------------------------------------------------
# batching / augmentation


def test_minibatches_cover_everything_once():
    rng = random.Random(0)
    seen = [i for batch in minibatches(10, 3, rng) for i in batch]
    assert sorted(seen) == list(range(10))
    sizes = [len(b) for b in minibatches(10, 3)]
    assert sizes == [3, 3, 3, 1]


def test_minibatches_deterministic_given_rng():
    a = list(minibatches(8, 3, random.Random(5)))
    b = list(minibatches(8, 3, random.Random(5)))
    assert a == b


def test_hflip_is_involution():
    g = torch.Generator().manual_seed(1)
    img = torch.rand(3, 8, 12, generator=g)
    boxes = torch.tensor([[1.0, 2.0, 5.0, 6.0], [0.0, 0.0, 12.0, 8.0]])
    img2, boxes2 = hflip_image_boxes(img, boxes)
    img3, boxes3 = hflip_image_boxes(img2, boxes2)
    assert torch.equal(img, img3)
    assert torch.equal(boxes, boxes3)
    # x-extent flips, y stays
    assert boxes2[0].tolist() == [12.0 - 5.0, 2.0, 12.0 - 1.0, 6.0]


def test_hflip_preserves_box_validity():
    img = torch.zeros(3, 8, 10)
    boxes = torch.tensor([[2.0, 1.0, 7.0, 5.0]])
    _, out = hflip_image_boxes(img, boxes)
    assert float(out[0, 0]) < float(out[0, 2])
