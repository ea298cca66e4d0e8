"""Weak supervision from image captions: dictionary-driven caption parsing
into categories / attributes / noun phrases, box selection for caption-level
and pseudo-label pairing, and construction of the positive/negative pair sets
consumed by the MIL-NCE objective."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import torch

from .losses import PairSets
from .regions import Proposal
from .textenc import normalize_words

_COPULAS = {"is", "are", "was", "were"}
_STOP_AFTER_COPULA = {"a", "an", "the", "very", "quite", "also"}


@dataclass
class ParsedCaption:
    """Dictionary parse of one caption; lists keep first-occurrence order."""

    categories: List[str] = field(default_factory=list)
    attributes: List[str] = field(default_factory=list)
    noun_phrases: List[str] = field(default_factory=list)
    words: List[str] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.categories or self.attributes or self.noun_phrases)


def _singular(word: str) -> List[str]:
    """Candidate dictionary forms for a word, most specific first."""
    forms = [word]
    if word.endswith("es") and len(word) > 3:
        forms.append(word[:-2])
    if word.endswith("s") and len(word) > 2:
        forms.append(word[:-1])
    return forms


def _ngram_lookup(words: Sequence[str], start: int, table: Dict[Tuple[str, ...], str],
                  max_n: int) -> Tuple[Optional[str], int]:
    """Longest dictionary entry starting at `start`; plural forms are tried on
    the final word of the n-gram. Returns (canonical name, span length)."""
    for n in range(min(max_n, len(words) - start), 0, -1):
        head = tuple(words[start:start + n - 1])
        for last in _singular(words[start + n - 1]):
            hit = table.get(head + (last,))
            if hit is not None:
                return hit, n
    return None, 0


def _build_table(names: Iterable[str]) -> Tuple[Dict[Tuple[str, ...], str], int]:
    table: Dict[Tuple[str, ...], str] = {}
    max_n = 1
    for name in names:
        key = tuple(normalize_words(name))
        if not key:
            continue
        table[key] = name
        max_n = max(max_n, len(key))
    return table, max_n


def parse_caption(text: str, attributes: Iterable[str], nouns: Iterable[str],
                  extra_nouns: Iterable[str] = ()) -> ParsedCaption:
    """Scan a caption against attribute and noun dictionaries.

    Matching is longest-first at each position; a word carried by both
    dictionaries counts as an attribute when a noun match starts right after
    it or when it sits in predicate position ("<noun> is <word>"), and as a
    noun otherwise. Noun phrases come from (a) attribute runs immediately
    followed by a noun and (b) predicate attributes folded back onto the
    most recent noun ("the zebra is striped" -> "striped zebra").

    `extra_nouns` take part in span detection and phrase formation but are
    never reported as categories.
    """
    nouns = list(nouns)
    attr_table, attr_max = _build_table(attributes)
    noun_table, noun_max = _build_table(nouns + list(extra_nouns))
    category_names = set(nouns)
    words = normalize_words(text)

    # spans: (kind, canonical, start, length)
    spans: List[Tuple[str, str, int, int]] = []
    i = 0
    while i < len(words):
        a_name, a_len = _ngram_lookup(words, i, attr_table, attr_max)
        n_name, n_len = _ngram_lookup(words, i, noun_table, noun_max)
        if a_name is not None and n_name is not None:
            if a_len != n_len:
                # longest match wins regardless of kind
                kind = ("attr", a_name, a_len) if a_len > n_len else ("noun", n_name, n_len)
            else:
                follows = _ngram_lookup(words, i + a_len, noun_table, noun_max)[0]
                prev = words[i - 1] if i > 0 else ""
                is_attr = follows is not None or prev in _COPULAS
                kind = ("attr", a_name, a_len) if is_attr else ("noun", n_name, n_len)
            spans.append((kind[0], kind[1], i, kind[2]))
            i += kind[2]
        elif a_name is not None:
            spans.append(("attr", a_name, i, a_len))
            i += a_len
        elif n_name is not None:
            spans.append(("noun", n_name, i, n_len))
            i += n_len
        else:
            i += 1

    cats: List[str] = []
    attrs: List[str] = []
    phrases: List[str] = []

    def add(seq: List[str], item: str):
        if item not in seq:
            seq.append(item)

    for kind, name, _, _ in spans:
        if kind == "noun":
            if name in category_names:
                add(cats, name)
        else:
            add(attrs, name)

    # (a) adjacency: maximal attribute run directly before a noun
    k = 0
    while k < len(spans):
        if spans[k][0] == "attr":
            j = k
            while j < len(spans) and spans[j][0] == "attr" and \
                    (j == k or spans[j][2] == spans[j - 1][2] + spans[j - 1][3]):
                j += 1
            if j < len(spans) and spans[j][0] == "noun" and \
                    spans[j][2] == spans[j - 1][2] + spans[j - 1][3]:
                run = " ".join(s[1] for s in spans[k:j])
                add(phrases, f"{run} {spans[j][1]}")
                k = j + 1
                continue
            k = j
        else:
            k += 1

    # (b) predicate attributes reattach to the nearest preceding noun
    for idx, (kind, name, start, length) in enumerate(spans):
        if kind != "attr":
            continue
        before = words[start - 1] if start > 0 else ""
        gap_ok = before in _COPULAS or (start >= 2 and words[start - 1] in _STOP_AFTER_COPULA
                                        and words[start - 2] in _COPULAS)
        if not gap_ok:
            continue
        subject = None
        for k2 in range(idx - 1, -1, -1):
            if spans[k2][0] == "noun":
                subject = spans[k2][1]
                break
        if subject is not None:
            add(phrases, f"{name} {subject}")

    return ParsedCaption(categories=cats, attributes=attrs, noun_phrases=phrases, words=words)


# ---------------------------------------------------------------------------
# box selection


@dataclass
class BoxSelection:
    star: int              # index of the max-area box (caption-level pairing)
    top: List[int]         # up to K highest-scoring remaining boxes


def select_boxes(proposals: Sequence[Proposal], k: int) -> BoxSelection:
    if not proposals:
        raise ValueError("need at least one proposal")
    areas = [float((p.box[2] - p.box[0]) * (p.box[3] - p.box[1])) for p in proposals]
    star = max(range(len(proposals)), key=lambda i: (areas[i], -i))
    rest = [i for i in range(len(proposals)) if i != star]
    rest.sort(key=lambda i: (-proposals[i].score, i))
    return BoxSelection(star=star, top=rest[:k])


def pseudo_labels(probs: torch.Tensor, names: Sequence[str], threshold: float = 0.7
                  ) -> List[str]:
    """Concept names whose confidence exceeds the threshold."""
    if probs.shape[-1] != len(names):
        raise ValueError(f"{probs.shape[-1]} probs vs {len(names)} names")
    return [names[j] for j in range(len(names)) if float(probs[j]) > threshold]


def sample_negatives(pool: Sequence[str], exclude: Set[str], n: int,
                     rng: random.Random) -> List[str]:
    cand = [p for p in pool if p not in exclude]
    if len(cand) <= n:
        return cand
    return rng.sample(cand, n)


def build_pair_sets(region_embs: torch.Tensor, selection: BoxSelection,
                    caption_pos: Sequence[str], phrase_pos: Sequence[str],
                    box_pos: Sequence[Sequence[str]],
                    concept_embs: Dict[str, torch.Tensor],
                    phrase_embs: Dict[str, torch.Tensor],
                    batch_neg: Sequence[str], dict_pool: Sequence[str],
                    n_dict_neg: int, rng: random.Random) -> List[PairSets]:
    """Assemble one PairSets per selected box; entry 0 is the max-area box.

    The max-area box pairs with every parsed caption concept plus every
    noun-phrase embedding; box k pairs with its pseudo-labeled concepts.
    Negatives for a box are the other captions' concepts plus a dictionary
    sample, both filtered against that box's positives.
    """
    if len(box_pos) != len(selection.top):
        raise ValueError(f"{len(box_pos)} pseudo-label sets for {len(selection.top)} boxes")
    out: List[PairSets] = []
    jobs = [(selection.star, list(caption_pos), list(phrase_pos))]
    jobs += [(b, list(names), []) for b, names in zip(selection.top, box_pos)]
    for box_idx, pos_names, pos_phrases in jobs:
        pos_names = [n for n in pos_names if n in concept_embs]
        pos_phrases = [p for p in pos_phrases if p in phrase_embs]
        if not pos_names and not pos_phrases:
            continue
        v = region_embs[box_idx]
        positives = [(v, concept_embs[n]) for n in pos_names]
        positives += [(v, phrase_embs[p]) for p in pos_phrases]
        taken = set(pos_names)
        neg_names = [n for n in batch_neg if n not in taken and n in concept_embs]
        for n in neg_names:
            taken.add(n)
        taken_pool = taken | set(neg_names)
        neg_names += sample_negatives([p for p in dict_pool if p in concept_embs],
                                      taken_pool, n_dict_neg, rng)
        negatives = [(v, concept_embs[n]) for n in neg_names]
        out.append(PairSets.from_pairs(
            positives, negatives, box_index=box_idx,
            pos_names=tuple(pos_names + pos_phrases), neg_names=tuple(neg_names)))
    return out
