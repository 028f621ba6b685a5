"""Pluggable masked-LM scoring contract and its reference implementation.

A scorer turns a token sequence into per-position vectors (embed), mixes in
context (contextualize), and transforms the state at a mask position with a
head before dotting it against output embeddings. The reference scorer is
deliberately tiny and fully analytic: contextualization is the leave-one-out
mean of the embedded sequence, and the head is a single affine map. That is
enough to exercise every downstream contract without a trained network.

Consumers duck-type against two members: ``wp_vocab`` (the wordpiece
vocabulary used for tokenization) and ``score_answers(seq, symbols)``
(probabilities over the given answer symbols).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingSpace, Vocabulary
from .errors import DataError
from .text_input import CONTROL_PIECES, Token, TokenKind, TokenSequence

UNK = "[UNK]"
MASK_PIECE = "[MASK]"


def embed_sequence(
    seq: TokenSequence,
    wp: EmbeddingSpace,
    ent: EmbeddingSpace | None = None,
) -> list[np.ndarray]:
    """Embed every token: wordpiece rows, entity rows, mask row, or the
    componentwise mean of candidate entity rows for an entity mask.

    Wordpieces missing from the vocabulary fall back to the ``[UNK]`` row.
    Missing entities are an error; the input builders are responsible for
    falling back to surface wordpieces before this point.
    """
    out: list[np.ndarray] = []
    for tok in seq.tokens:
        if tok.kind is TokenKind.WORDPIECE:
            out.append(_wp_row(wp, tok.text))
        elif tok.kind is TokenKind.CONTROL:
            out.append(_wp_row(wp, CONTROL_PIECES[tok.text]))
        elif tok.kind is TokenKind.MASK:
            row = wp.row(MASK_PIECE)
            if row is None:
                raise DataError("wordpiece space has no [MASK] row")
            out.append(row.astype(np.float64))
        elif tok.kind is TokenKind.ENTITY:
            out.append(_ent_row(ent, tok.text))
        elif tok.kind is TokenKind.EMASK:
            rows = [_ent_row(ent, c) for c in tok.candidates]
            out.append(np.mean(rows, axis=0))
        else:  # pragma: no cover - exhaustive over TokenKind
            raise ValueError(f"unknown token kind {tok.kind}")
    if len({v.shape for v in out}) > 1:
        raise ValueError("wordpiece and entity spaces have different dimensions")
    return out


def _wp_row(wp: EmbeddingSpace, piece: str) -> np.ndarray:
    row = wp.row(piece)
    if row is None:
        row = wp.row(UNK)
        if row is None:
            raise DataError(f"wordpiece {piece!r} missing and no [UNK] row to fall back on")
    return row.astype(np.float64)


def _ent_row(ent: EmbeddingSpace | None, entity_id: str) -> np.ndarray:
    if ent is None:
        raise ValueError("sequence contains entity tokens but no entity space was given")
    row = ent.row(entity_id)
    if row is None:
        raise DataError(f"entity {entity_id!r} missing from entity space")
    return row.astype(np.float64)


def reference_contextualize(vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Leave-one-out mean: output i is the mean of all inputs except i.

    A length-1 sequence contextualizes to a single zero vector.
    """
    n = len(vectors)
    if n == 0:
        raise ValueError("cannot contextualize an empty sequence")
    if n == 1:
        return [np.zeros_like(np.asarray(vectors[0], dtype=np.float64))]
    stack = np.asarray(vectors, dtype=np.float64)
    total = stack.sum(axis=0)
    return [(total - stack[i]) / (n - 1) for i in range(n)]


@dataclass
class AffineHead:
    """Affine transform h -> A h + c standing in for the MLM head."""

    a: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError(f"head matrix must be square, got {self.a.shape}")
        if self.c.shape != (self.a.shape[0],):
            raise ValueError(
                f"head offset shape {self.c.shape} does not match matrix {self.a.shape}"
            )
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.c))):
            raise ValueError("head parameters must be finite")

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def apply(self, h: np.ndarray) -> np.ndarray:
        return self.a @ np.asarray(h, dtype=np.float64) + self.c

    @classmethod
    def identity(cls, dim: int) -> "AffineHead":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def zeros(cls, dim: int) -> "AffineHead":
        return cls(np.zeros((dim, dim)), np.zeros(dim))


Candidates = Sequence[tuple[np.ndarray, float]]


def score_candidates(h: np.ndarray, head: AffineHead, cands: Candidates) -> np.ndarray:
    """Softmax over ``e . (A h + c) + b`` for each candidate ``(e, b)``.

    Computed with max subtraction; the result sums to 1 and is invariant to
    adding any constant to all logits.
    """
    if len(cands) == 0:
        raise ValueError("no candidates to score")
    u = head.apply(h)
    logits = np.array([np.dot(e, u) + b for e, b in cands], dtype=np.float64)
    return _softmax(logits)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


@dataclass
class HeadGradients:
    """Gradients of the loss -log p(gold) for one scoring instance."""

    a: np.ndarray
    c: np.ndarray
    cands: list[tuple[np.ndarray, float]]
    probs: np.ndarray
    loss: float


def head_gradients(
    h: np.ndarray, head: AffineHead, cands: Candidates, gold: int
) -> HeadGradients:
    """Analytic gradients of ``-log softmax_gold`` for the affine head and
    every candidate's embedding and bias.

    With p the softmax and g_j = p_j - 1[j = gold]:
    d/db_j = g_j, d/de_j = g_j u, d/dc = sum_j g_j e_j, d/dA = (d/dc) h^T.
    """
    if not 0 <= gold < len(cands):
        raise ValueError(f"gold index {gold} out of range for {len(cands)} candidates")
    h = np.asarray(h, dtype=np.float64)
    u = head.apply(h)
    probs = score_candidates(h, head, cands)
    g = probs.copy()
    g[gold] -= 1.0
    du = np.zeros_like(u)
    cand_grads: list[tuple[np.ndarray, float]] = []
    for gj, (e, _b) in zip(g, cands):
        du += gj * np.asarray(e, dtype=np.float64)
        cand_grads.append((gj * u, float(gj)))
    grad_a = np.outer(du, h)
    loss = float(-np.log(probs[gold]))
    return HeadGradients(grad_a, du, cand_grads, probs, loss)


@dataclass
class ReferenceScorer:
    """Embed, leave-one-out contextualize, affine head, softmax scoring."""

    wp: EmbeddingSpace
    ent: EmbeddingSpace | None = None
    head: AffineHead = None

    def __post_init__(self):
        if self.head is None:
            self.head = AffineHead.identity(self.wp.dim)
        if self.head.dim != self.wp.dim:
            raise ValueError(
                f"head dimension {self.head.dim} does not match space {self.wp.dim}"
            )

    @property
    def wp_vocab(self) -> Vocabulary:
        return self.wp.vocab

    def embed(self, seq: TokenSequence) -> list[np.ndarray]:
        return embed_sequence(seq, self.wp, self.ent)

    def contextualize(self, vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
        return reference_contextualize(vectors)

    def mask_state(self, seq: TokenSequence) -> np.ndarray:
        """Contextual vector at the single Mask or EMask position."""
        positions = [
            i
            for i, t in enumerate(seq.tokens)
            if t.kind in (TokenKind.MASK, TokenKind.EMASK)
        ]
        if len(positions) != 1:
            raise ValueError(
                f"expected exactly one mask position, found {len(positions)}"
            )
        return self.contextualize(self.embed(seq))[positions[0]]

    def score_answers(self, seq: TokenSequence, symbols: Sequence[str]) -> np.ndarray:
        """Probabilities over the given answer symbols at the mask position.

        Every answer symbol must exist in the wordpiece space; answer biases
        are zero in the reference implementation.
        """
        h = self.mask_state(seq)
        cands = []
        for sym in symbols:
            row = self.wp.row(sym)
            if row is None:
                raise DataError(f"answer symbol {sym!r} missing from wordpiece space")
            cands.append((row.astype(np.float64), 0.0))
        return score_candidates(h, self.head, cands)
