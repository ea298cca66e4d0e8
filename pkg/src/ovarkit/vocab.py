"""Concept taxonomy: categories-as-super-attributes, base/novel splits, class weights.

Vocabulary files are JSON-lines with one record per concept:
    {"name": str, "parent": str, "kind": "attribute"|"category"}
Split files are JSON: {"base": [names], "novel": [names]}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np

# label literals used by annotation records everywhere in the pipeline
POS = "pos"
NEG = "neg"
MISSING = "missing"

KINDS = ("attribute", "category")
CATEGORY_PARENT = "category"


class VocabError(ValueError):
    """Malformed or inconsistent vocabulary / split / frequency input."""


@dataclass(frozen=True)
class AttributeConcept:
    """One concept: an attribute with its parent-class word, or a category.

    Categories are treated as super-attributes and carry parent "category".
    """

    name: str
    parent: str
    kind: str = "attribute"

    def __post_init__(self):
        if not self.name:
            raise VocabError("concept name must be nonempty")
        if not self.parent:
            raise VocabError(f"concept {self.name!r}: parent must be nonempty")
        if self.kind not in KINDS:
            raise VocabError(f"concept {self.name!r}: unknown kind {self.kind!r}")

    @property
    def key(self):
        return (self.name, self.parent)


class Vocabulary:
    """Ordered concept list with stable name->index lookup.

    Order is the construction (file) order, never alphabetical, so concept
    indices are stable across runs. Names may repeat across parents (e.g. a
    "diamond" category and a "diamond" pattern attribute); (name, parent)
    must be unique. index() resolves a bare name to its first occurrence.
    """

    def __init__(self, concepts: Sequence[AttributeConcept]):
        self.concepts: List[AttributeConcept] = list(concepts)
        self._by_key: Dict[tuple, int] = {}
        self._by_name: Dict[str, int] = {}
        for i, c in enumerate(self.concepts):
            if c.key in self._by_key:
                raise VocabError(f"duplicate concept {c.name!r}/{c.parent!r}")
            self._by_key[c.key] = i
            self._by_name.setdefault(c.name, i)
        # display keys: bare name when unique, "name@parent" when shared
        name_count: Dict[str, int] = {}
        for c in self.concepts:
            name_count[c.name] = name_count.get(c.name, 0) + 1
        self.keys: List[str] = [
            c.name if name_count[c.name] == 1 else f"{c.name}@{c.parent}"
            for c in self.concepts
        ]
        self._by_display: Dict[str, int] = {k: i for i, k in enumerate(self.keys)}

    def __len__(self):
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    def __contains__(self, name: str):
        return name in self._by_name or name in self._by_display

    def index(self, name: str, parent: str | None = None) -> int:
        if parent is not None:
            try:
                return self._by_key[(name, parent)]
            except KeyError:
                raise VocabError(f"unknown concept {name!r}/{parent!r}") from None
        try:
            return self._by_name[name]
        except KeyError:
            raise VocabError(f"unknown concept {name!r}") from None

    def key_index(self, key: str) -> int:
        """Resolve a display key ("name" or "name@parent") to its index."""
        if key in self._by_display:
            return self._by_display[key]
        if "@" in key:
            name, _, parent = key.partition("@")
            return self.index(name, parent)
        return self.index(key)

    def find(self, name: str, kind: str) -> "AttributeConcept | None":
        """First concept with this surface name and kind, if any."""
        for c in self.concepts:
            if c.name == name and c.kind == kind:
                return c
        return None

    def key_of(self, concept: AttributeConcept) -> str:
        return self.keys[self._by_key[concept.key]]

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.concepts]

    def categories(self) -> List[AttributeConcept]:
        return [c for c in self.concepts if c.kind == "category"]

    def attributes(self) -> List[AttributeConcept]:
        return [c for c in self.concepts if c.kind == "attribute"]

    def subset_indices(self, names: Iterable[str]) -> List[int]:
        """Indices of all concepts whose name or display key is in `names`."""
        names = set(names)
        return [i for i, c in enumerate(self.concepts)
                if c.name in names or self.keys[i] in names]


@dataclass
class BaseNovelSplit:
    """Disjoint partition of the vocabulary's concept names."""

    base: set
    novel: set

    def validate(self, vocab: Vocabulary):
        overlap = self.base & self.novel
        if overlap:
            raise VocabError(f"base/novel overlap: {sorted(overlap)}")
        missing = set(vocab.keys) - self.base - self.novel
        if missing:
            raise VocabError(f"split does not cover concepts: {sorted(missing)}")
        extra = (self.base | self.novel) - set(vocab.keys)
        if extra:
            raise VocabError(f"split names not in vocabulary: {sorted(extra)}")


@dataclass
class FrequencyTable:
    """Positive-occurrence counts per concept name in the training stream."""

    counts: Dict[str, int] = field(default_factory=dict)

    def get(self, name: str) -> int:
        return self.counts.get(name, 0)


@dataclass
class ClassWeights:
    """Per-class weights w_i with sum(w) = N, from w_i ~ 1/f_i^gamma."""

    weights: np.ndarray
    gamma: float


def load_vocabulary(path) -> Vocabulary:
    """Load a JSON-lines vocabulary file, preserving file order."""
    concepts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise VocabError(f"{path}:{lineno}: malformed JSON record: {exc}") from None
            if not isinstance(rec, dict) or "name" not in rec or "parent" not in rec:
                raise VocabError(f"{path}:{lineno}: record needs 'name' and 'parent'")
            try:
                concepts.append(
                    AttributeConcept(
                        name=rec["name"],
                        parent=rec["parent"],
                        kind=rec.get("kind", "attribute"),
                    )
                )
            except VocabError as exc:
                raise VocabError(f"{path}:{lineno}: {exc}") from None
    try:
        return Vocabulary(concepts)
    except VocabError as exc:
        raise VocabError(f"{path}: {exc}") from None


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w") as fh:
        for c in vocab.concepts:
            fh.write(json.dumps({"name": c.name, "parent": c.parent, "kind": c.kind}) + "\n")


def load_split(path) -> BaseNovelSplit:
    with open(path) as fh:
        rec = json.load(fh)
    return BaseNovelSplit(base=set(rec["base"]), novel=set(rec["novel"]))


def save_split(split: BaseNovelSplit, path):
    with open(path, "w") as fh:
        json.dump({"base": sorted(split.base), "novel": sorted(split.novel)}, fh, indent=1)


def compute_frequencies(annotations, vocab: Vocabulary) -> FrequencyTable:
    """Count positive labels per concept over a stream of annotated instances.

    Negative and missing labels contribute nothing. Labels naming concepts
    outside the vocabulary are a validation error.
    """
    counts = {k: 0 for k in vocab.keys}
    for ann in annotations:
        for name, lab in ann.labels.items():
            if name not in vocab:
                raise VocabError(f"annotation references unknown concept {name!r}")
            if lab == POS:
                counts[vocab.keys[vocab.key_index(name)]] += 1
        cat = getattr(ann, "category", None)
        if cat is not None and cat in vocab:
            counts[vocab.keys[vocab.key_index(cat)]] += 1
    return FrequencyTable(counts=counts)


def class_weights(freq: FrequencyTable, gamma: float, vocab: Vocabulary,
                  names: Sequence[str] | None = None) -> ClassWeights:
    """Smoothed inverse-frequency weights: w_i ~ 1/f_i^gamma, sum(w) = N.

    Zero counts are floored at 1 before exponentiation so rare concepts get
    the maximal weight without a division by zero. Covers the whole
    vocabulary unless `names` narrows it (e.g. to the base split).
    """
    if gamma < 0:
        raise VocabError("gamma must be >= 0")
    if names is None:
        names = vocab.keys
    f = np.array([max(freq.get(n), 1) for n in names], dtype=np.float64)
    raw = f ** (-gamma)
    w = raw * (len(raw) / raw.sum())
    return ClassWeights(weights=w, gamma=gamma)
