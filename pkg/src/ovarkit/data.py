"""Dataset plumbing: annotated region instances, JSONL record IO, PNG image
IO, label-matrix assembly with sparse (federated) annotations, minibatch
iteration, and horizontal-flip augmentation."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .losses import LMISSING, LNEG, LPOS
from .vocab import Vocabulary


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generic JSONL


def read_jsonl(path) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad JSON ({exc})") from exc
    return rows


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# records


@dataclass
class Instance:
    """One annotated region. `labels` is sparse: unlisted concepts are
    missing (federated annotation); `view` marks which annotation source the
    region came from ("detection" carries only the category, "attribute"
    carries attribute labels)."""

    image_id: str
    region_id: str
    box: Tuple[float, float, float, float]
    category: Optional[str] = None
    labels: Dict[str, str] = field(default_factory=dict)
    view: str = "attribute"

    def to_row(self) -> dict:
        return {
            "image_id": self.image_id, "region_id": self.region_id,
            "box": list(self.box), "category": self.category,
            "labels": self.labels, "view": self.view,
        }

    @classmethod
    def from_row(cls, row: dict) -> "Instance":
        try:
            return cls(image_id=row["image_id"], region_id=row["region_id"],
                       box=tuple(float(v) for v in row["box"]),
                       category=row.get("category"),
                       labels=dict(row.get("labels", {})),
                       view=row.get("view", "attribute"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad instance row: {exc}") from exc


def load_instances(path) -> List[Instance]:
    return [Instance.from_row(r) for r in read_jsonl(path)]


def save_instances(path, instances: Sequence[Instance]) -> None:
    write_jsonl(path, (i.to_row() for i in instances))


@dataclass
class CaptionRecord:
    image_id: str
    caption: str
    expected: Optional[dict] = None  # generator-known parse, when available

    @classmethod
    def from_row(cls, row: dict) -> "CaptionRecord":
        try:
            return cls(image_id=row["image_id"], caption=row["caption"],
                       expected=row.get("expected"))
        except KeyError as exc:
            raise DataError(f"bad caption row: missing {exc}") from exc

    def to_row(self) -> dict:
        out = {"image_id": self.image_id, "caption": self.caption}
        if self.expected is not None:
            out["expected"] = self.expected
        return out


def load_captions(path) -> List[CaptionRecord]:
    return [CaptionRecord.from_row(r) for r in read_jsonl(path)]


def save_captions(path, captions: Sequence[CaptionRecord]) -> None:
    write_jsonl(path, (c.to_row() for c in captions))


def save_proposals(path, rows: Iterable[dict]) -> None:
    write_jsonl(path, rows)


def load_proposals(path) -> Dict[str, List[dict]]:
    out: Dict[str, List[dict]] = {}
    for row in read_jsonl(path):
        out.setdefault(row["image_id"], []).append(row)
    return out


# ---------------------------------------------------------------------------
# label matrices


def _category_column(vocab: Vocabulary, name: str) -> Optional[int]:
    c = vocab.find(name, "category")
    return None if c is None else vocab.index(c.name, c.parent)


def label_codes(instances: Sequence[Instance], vocab: Vocabulary,
                unlisted_negative: bool = False) -> torch.Tensor:
    """(R, N) integer codes in vocabulary order; unlisted concepts are
    missing (federated annotation) unless unlisted_negative folds them to
    negatives up front. An instance's own category (a detection-view row)
    becomes a positive at the matching category column."""
    fill = LNEG if unlisted_negative else LMISSING
    out = torch.full((len(instances), len(vocab)), fill, dtype=torch.long)
    code = {"pos": LPOS, "neg": LNEG, "missing": LMISSING}
    for i, inst in enumerate(instances):
        for name, val in inst.labels.items():
            out[i, vocab.key_index(name)] = code[val]
        if inst.category is not None:
            j = _category_column(vocab, inst.category)
            if j is not None:
                out[i, j] = LPOS
    return out


def class_presence_mask(instances: Sequence[Instance], vocab: Vocabulary
                        ) -> torch.Tensor:
    """True for columns any instance in the batch actually annotates."""
    mask = torch.zeros(len(vocab), dtype=torch.bool)
    for inst in instances:
        for name in inst.labels:
            mask[vocab.key_index(name)] = True
        if inst.category is not None:
            j = _category_column(vocab, inst.category)
            if j is not None:
                mask[j] = True
    return mask


# ---------------------------------------------------------------------------
# images


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path) -> None:
    arr = (tensor.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


class ImageStore:
    """Lazy image loader keyed by image_id, with a small everything cache
    (the synthetic sets fit in memory)."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: Dict[str, torch.Tensor] = {}

    def get(self, image_id: str) -> torch.Tensor:
        if image_id not in self._cache:
            self._cache[image_id] = load_image(self.root / f"{image_id}.png")
        return self._cache[image_id]


# ---------------------------------------------------------------------------
# batching / augmentation


def minibatches(n: int, batch_size: int, rng: Optional[random.Random] = None
                ) -> Iterator[List[int]]:
    order = list(range(n))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def hflip_image_boxes(image: torch.Tensor, boxes: torch.Tensor
                      ) -> Tuple[torch.Tensor, torch.Tensor]:
    w = image.shape[2]
    flipped = torch.flip(image, dims=(2,))
    out = boxes.clone()
    out[:, 0] = w - boxes[:, 2]
    out[:, 2] = w - boxes[:, 0]
    return flipped, out
