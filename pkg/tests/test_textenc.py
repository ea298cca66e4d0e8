"""Tokenizer, prompt assembly, and encoder invariants."""

import pytest
import torch

from ovarkit.textenc import (
    CVEC, PVEC, TOK, PromptBank, TextEncoder, TextEncoderConfig, Tokenizer,
    TokenizerError, assemble_phrase_prompt, assemble_prompt, bare_prompt,
    encode_concepts, manual_prompt, normalize_words,
)
from ovarkit.vocab import AttributeConcept


@pytest.fixture
def tok():
    return Tokenizer.build(["a striped zebra is eating green grass"],
                           extra_words=["color", "pattern", "wet", "state"])


def test_normalize_strips_punctuation_and_case():
    assert normalize_words("The Zebra, is striped!") == ["the", "zebra", "is", "striped"]


def test_tokenizer_unk_and_roundtrip(tok):
    seq = tok.tokenize("striped zebra")
    assert len(seq.ids) == 2
    assert all(i > 0 for i in seq.ids)
    assert tok.tokenize("xylophone").ids == [0]
    rebuilt = Tokenizer(tok.save_words())
    assert rebuilt.id_of == tok.id_of


def test_tokenizer_rejects_empty(tok):
    with pytest.raises(TokenizerError):
        tok.tokenize("  ,,, ")


def test_prompt_layout_counts(tok):
    bank = PromptBank(d_tok=16, layout=(10, 10, 10), phrase_layout=(8, 8))
    wet = AttributeConcept(name="wet", parent="state", kind="attribute")
    seq = assemble_prompt(wet, bank, tok, include_parent=True)
    kinds = [k for k, _ in seq.parts]
    assert kinds.count(CVEC) == 30
    assert kinds.count(TOK) == 2  # name + parent, one word each
    assert len(seq) == 32
    # dropping the parent keeps every learnable vector
    seq_np = assemble_prompt(wet, bank, tok, include_parent=False)
    assert [k for k, _ in seq_np.parts].count(CVEC) == 30
    assert len(seq_np) == 31


def test_phrase_prompt_layout(tok):
    bank = PromptBank(d_tok=16, phrase_layout=(8, 8))
    seq = assemble_phrase_prompt("striped zebra", bank, tok)
    kinds = [k for k, _ in seq.parts]
    assert kinds.count(PVEC) == 16
    assert kinds.count(TOK) == 2
    assert len(seq) == 18
    with pytest.raises(TokenizerError):
        assemble_phrase_prompt("  ", bank, tok)


def test_manual_prompt_templates(tok):
    cat = AttributeConcept(name="zebra", parent="animal", kind="category")
    attr = AttributeConcept(name="wet", parent="state", kind="attribute")
    assert manual_prompt(cat, tok).source == "it is a photo of zebra"
    assert manual_prompt(attr, tok).source == \
        "the attribute of the object is wet , and it is a state"
    # template words tokenize without UNK by construction
    assert all(i > 0 for _, i in manual_prompt(attr, tok).parts)


def test_bare_prompt(tok):
    attr = AttributeConcept(name="wet", parent="state", kind="attribute")
    assert len(bare_prompt(attr, tok)) == 1
    assert len(bare_prompt(attr, tok, include_parent=True)) == 2


def _encoder(tok, d=16):
    g = torch.Generator().manual_seed(11)
    cfg = TextEncoderConfig(vocab_size=len(tok), d_tok=d, d_out=d,
                            n_layers=1, n_heads=2, ffn_dim=32, max_len=40)
    enc = TextEncoder(cfg, generator=g)
    bank = PromptBank(d_tok=d, layout=(2, 2, 2), phrase_layout=(2, 2), generator=g)
    return enc, bank


def test_encoder_outputs_unit_rows(tok):
    enc, bank = _encoder(tok)
    attr = AttributeConcept(name="wet", parent="state", kind="attribute")
    cat = AttributeConcept(name="zebra", parent="animal", kind="category")
    seqs = [assemble_prompt(attr, bank, tok), manual_prompt(cat, tok)]
    mat = encode_concepts(seqs, enc, bank)
    assert mat.rows.shape == (2, 16)
    assert torch.allclose(mat.rows.norm(dim=-1), torch.ones(2), atol=1e-5)
    assert mat.concept_order == ["wet/state", "it is a photo of zebra"]


def test_encoder_batch_rows_independent(tok):
    """Padding must not leak: a row encodes the same alone or in a batch."""
    enc, bank = _encoder(tok)
    attr = AttributeConcept(name="wet", parent="state", kind="attribute")
    short = bare_prompt(attr, tok)
    long = manual_prompt(attr, tok)
    with torch.no_grad():
        alone = enc([short], bank)
        batched = enc([short, long], bank)
    assert torch.allclose(alone[0], batched[0], atol=1e-5)


def test_encoder_permutation_equivariant(tok):
    enc, bank = _encoder(tok)
    cs = [AttributeConcept(name=n, parent="color", kind="attribute")
          for n in ("green", "striped", "wet")]
    seqs = [assemble_prompt(c, bank, tok) for c in cs]
    with torch.no_grad():
        fwd = enc(seqs, bank)
        rev = enc(seqs[::-1], bank)
    assert torch.allclose(fwd.flip(dims=(0,)), rev, atol=1e-5)


def test_parent_token_changes_embedding(tok):
    """Same surface name, different parent -> distinct prompt embeddings."""
    enc, bank = _encoder(tok)
    a = AttributeConcept(name="wet", parent="state", kind="attribute")
    b = AttributeConcept(name="wet", parent="color", kind="attribute")
    with torch.no_grad():
        rows = enc([assemble_prompt(a, bank, tok), assemble_prompt(b, bank, tok)], bank)
        same = enc([assemble_prompt(a, bank, tok, include_parent=False),
                    assemble_prompt(b, bank, tok, include_parent=False)], bank)
    assert not torch.allclose(rows[0], rows[1], atol=1e-5)
    assert torch.allclose(same[0], same[1], atol=1e-6)


def test_gradients_flow_to_prompts_and_tokens(tok):
    enc, bank = _encoder(tok)
    attr = AttributeConcept(name="wet", parent="state", kind="attribute")
    out = enc([assemble_prompt(attr, bank, tok)], bank).sum()
    out.backward()
    assert float(bank.vectors.grad.abs().sum()) > 0
    assert float(enc.token_table.grad.abs().sum()) > 0


def test_encoder_deterministic_given_weights(tok):
    enc, bank = _encoder(tok)
    attr = AttributeConcept(name="green", parent="color", kind="attribute")
    seqs = [assemble_prompt(attr, bank, tok)]
    with torch.no_grad():
        a = enc(seqs, bank)
        b = enc(seqs, bank)
    assert torch.equal(a, b)


def test_long_sequence_truncates(tok):
    g = torch.Generator().manual_seed(5)
    cfg = TextEncoderConfig(vocab_size=len(tok), d_tok=8, d_out=8,
                            n_layers=1, n_heads=2, ffn_dim=16, max_len=4)
    enc = TextEncoder(cfg, generator=g)
    bank = PromptBank(d_tok=8, layout=(4, 4, 4), generator=g)
    attr = AttributeConcept(name="wet", parent="state", kind="attribute")
    seq = assemble_prompt(attr, bank, tok)
    with torch.no_grad():
        out = enc([seq], bank)
    assert out.shape == (1, 8)
