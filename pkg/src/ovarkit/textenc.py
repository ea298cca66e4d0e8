"""Prompted concept embedding: tokenizer, shared prompt bank, tiny text encoder.

A concept is encoded as
    [p_0..p_i, g(attribute), p_{i+1}..p_j, g(parent), p_{j+1}..p_k]
with the learnable vectors p shared across all concepts; free-text phrases use
a separate, smaller vector group placed before/after the phrase tokens.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import torch
import torch.nn as nn

from .vocab import AttributeConcept

log = logging.getLogger(__name__)

UNK = "<unk>"
_WORD_RE = re.compile(r"[a-z0-9']+")

# token-only baseline templates (manual prompts)
MANUAL_CATEGORY_TEMPLATE = "it is a photo of {name}"
MANUAL_ATTRIBUTE_TEMPLATE = "the attribute of the object is {name} , and it is a {parent}"
_TEMPLATE_WORDS = "it is a photo of the attribute object and".split()


class TokenizerError(ValueError):
    pass


def normalize_words(text: str) -> List[str]:
    """Lowercase and split into word tokens; punctuation acts as whitespace."""
    return _WORD_RE.findall(text.lower())


@dataclass
class TokenSeq:
    ids: List[int]
    source_text: str


class Tokenizer:
    """Fixed word-level dictionary tokenizer with an UNK fallback.

    Built once at dataset-build time from the vocabulary plus the caption
    corpus; id 0 is reserved for UNK. Deterministic: table order is first
    appearance in the build stream.
    """

    def __init__(self, words: Sequence[str]):
        self.id_of: Dict[str, int] = {UNK: 0}
        for w in words:
            if w not in self.id_of:
                self.id_of[w] = len(self.id_of)
        self.word_of = {i: w for w, i in self.id_of.items()}

    @classmethod
    def build(cls, texts: Iterable[str], extra_words: Iterable[str] = ()) -> "Tokenizer":
        words: List[str] = list(_TEMPLATE_WORDS)
        for t in texts:
            words.extend(normalize_words(t))
        words.extend(extra_words)
        return cls(words)

    def __len__(self):
        return len(self.id_of)

    def tokenize(self, text: str) -> TokenSeq:
        words = normalize_words(text)
        if not words:
            raise TokenizerError(f"cannot tokenize empty text: {text!r}")
        return TokenSeq(ids=[self.id_of.get(w, 0) for w in words], source_text=text)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.word_of.get(i, UNK) for i in ids]

    def save_words(self) -> List[str]:
        # id order, skipping UNK, so Tokenizer(words) round-trips
        return [self.word_of[i] for i in range(1, len(self.id_of))]


class PromptBank(nn.Module):
    """Learnable prompt vectors shared across all concepts.

    `layout` = (n_before, n_between, n_after) splits the concept vectors
    around the attribute and parent tokens; `phrase_layout` = (n_before,
    n_after) does the same for the separate phrase vector group.
    """

    def __init__(self, d_tok: int = 64, layout: Tuple[int, int, int] = (10, 10, 10),
                 phrase_layout: Tuple[int, int] = (8, 8), init_std: float = 0.02,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.layout = tuple(layout)
        self.phrase_layout = tuple(phrase_layout)
        n = sum(self.layout)
        m = sum(self.phrase_layout)
        self.vectors = nn.Parameter(_randn((n, d_tok), init_std, generator))
        self.phrase_vectors = nn.Parameter(_randn((m, d_tok), init_std, generator))

    @property
    def d_tok(self):
        return self.vectors.shape[1]


def _randn(shape, std, generator):
    return torch.randn(shape, generator=generator) * std


# A prompted sequence is a list of slots, each either a fixed token id or a
# reference into one of the prompt-vector groups.
TOK = "tok"
CVEC = "cvec"    # concept prompt vector, index into bank.vectors
PVEC = "pvec"    # phrase prompt vector, index into bank.phrase_vectors


@dataclass
class PromptedSeq:
    parts: List[Tuple[str, int]]
    source: str = ""

    def __len__(self):
        return len(self.parts)


def assemble_prompt(concept: AttributeConcept, bank: PromptBank, tokenizer: Tokenizer,
                    include_parent: bool = True) -> PromptedSeq:
    """Interleave the shared concept vectors with the concept's tokens.

    With the default (10, 10, 10) layout:
        [10 vectors, g(name), 10 vectors, g(parent), 10 vectors]
    `include_parent=False` drops the parent token but keeps every vector
    (the between and after groups become adjacent).
    """
    b, m, a = bank.layout
    parts: List[Tuple[str, int]] = [(CVEC, i) for i in range(b)]
    parts += [(TOK, t) for t in tokenizer.tokenize(concept.name).ids]
    parts += [(CVEC, b + i) for i in range(m)]
    if include_parent:
        parts += [(TOK, t) for t in tokenizer.tokenize(concept.parent).ids]
    parts += [(CVEC, b + m + i) for i in range(a)]
    return PromptedSeq(parts=parts, source=f"{concept.name}/{concept.parent}")


def assemble_phrase_prompt(phrase: str, bank: PromptBank, tokenizer: Tokenizer) -> PromptedSeq:
    """[8 vectors, g(phrase), 8 vectors] under the default phrase layout."""
    if not phrase or not normalize_words(phrase):
        raise TokenizerError(f"empty phrase: {phrase!r}")
    b, a = bank.phrase_layout
    parts: List[Tuple[str, int]] = [(PVEC, i) for i in range(b)]
    parts += [(TOK, t) for t in tokenizer.tokenize(phrase).ids]
    parts += [(PVEC, b + i) for i in range(a)]
    return PromptedSeq(parts=parts, source=phrase)


def manual_prompt(concept: AttributeConcept, tokenizer: Tokenizer) -> PromptedSeq:
    """Token-only baseline template, by concept kind."""
    if concept.kind == "category":
        text = MANUAL_CATEGORY_TEMPLATE.format(name=concept.name)
    else:
        text = MANUAL_ATTRIBUTE_TEMPLATE.format(name=concept.name, parent=concept.parent)
    parts = [(TOK, t) for t in tokenizer.tokenize(text).ids]
    return PromptedSeq(parts=parts, source=text)


def bare_prompt(concept: AttributeConcept, tokenizer: Tokenizer,
                include_parent: bool = False) -> PromptedSeq:
    """Plain concept tokens, optionally followed by the parent tokens."""
    parts = [(TOK, t) for t in tokenizer.tokenize(concept.name).ids]
    if include_parent:
        parts += [(TOK, t) for t in tokenizer.tokenize(concept.parent).ids]
    return PromptedSeq(parts=parts, source=concept.name)


@dataclass
class ConceptEmbeddingMatrix:
    """L2-normalized text-side embeddings, one row per concept, vocab order."""

    rows: torch.Tensor
    concept_order: List[str] = field(default_factory=list)


@dataclass
class TextEncoderConfig:
    vocab_size: int
    d_tok: int = 64
    d_out: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 80


class TextEncoder(nn.Module):
    """Tiny transformer encoder over prompted sequences.

    Token table -> learned positional embeddings -> transformer encoder ->
    mean pool over real positions -> linear projection -> L2 normalize.
    Rows are independent across the batch (padding is masked out), so
    permuting input sequences permutes output rows identically.
    """

    def __init__(self, cfg: TextEncoderConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.token_table = nn.Parameter(_randn((cfg.vocab_size, cfg.d_tok), 0.02, generator))
        self.pos = nn.Parameter(_randn((cfg.max_len, cfg.d_tok), 0.02, generator))
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_tok, nhead=cfg.n_heads, dim_feedforward=cfg.ffn_dim,
            dropout=0.0, activation="gelu", batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.n_layers)
        self.out = nn.Linear(cfg.d_tok, cfg.d_out)

    def embed_sequence(self, seq: PromptedSeq, bank: PromptBank) -> torch.Tensor:
        """Stack the slot embeddings of one prompted sequence, truncating at max_len."""
        if len(seq) > self.cfg.max_len:
            log.warning("prompted sequence %r length %d truncated to %d",
                        seq.source, len(seq), self.cfg.max_len)
        rows = []
        for kind, idx in seq.parts[: self.cfg.max_len]:
            if kind == TOK:
                rows.append(self.token_table[idx])
            elif kind == CVEC:
                rows.append(bank.vectors[idx])
            elif kind == PVEC:
                rows.append(bank.phrase_vectors[idx])
            else:
                raise ValueError(f"unknown slot kind {kind!r}")
        return torch.stack(rows)

    def forward(self, seqs: Sequence[PromptedSeq], bank: PromptBank) -> torch.Tensor:
        embs = [self.embed_sequence(s, bank) for s in seqs]
        lengths = [e.shape[0] for e in embs]
        L = max(lengths)
        dtype = self.token_table.dtype
        x = torch.zeros(len(embs), L, self.cfg.d_tok, dtype=dtype)
        pad = torch.ones(len(embs), L, dtype=torch.bool)
        for i, e in enumerate(embs):
            x[i, : e.shape[0]] = e + self.pos[: e.shape[0]]
            pad[i, : e.shape[0]] = False
        h = self.encoder(x, src_key_padding_mask=pad)
        keep = (~pad).unsqueeze(-1).to(dtype)
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1)
        z = self.out(pooled)
        return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def encode_concepts(seqs: Sequence[PromptedSeq], encoder: TextEncoder,
                    bank: PromptBank) -> ConceptEmbeddingMatrix:
    rows = encoder(seqs, bank)
    return ConceptEmbeddingMatrix(rows=rows, concept_order=[s.source for s in seqs])
