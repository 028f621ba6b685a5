"""Token sequences and entity-aware input construction.

Inputs are built from whitespace-tokenized sentences. A mention with a known
entity vector can be injected next to (concat mode) or instead of (replace
mode) its surface wordpieces; a mention without one falls back to plain
wordpieces for that mention only. The literal word ``[MASK]`` outside any
mention becomes a Mask token.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .embeddings import ENTITY_PREFIX, EmbeddingSpace, Vocabulary, is_entity_symbol
from .errors import DataError

UNK = "[UNK]"
MASK_WORD = "[MASK]"

# Control tokens and the wordpiece each one is embedded as.
CONTROL_PIECES: dict[str, str] = {
    "CLS": "[CLS]",
    "SEP": "[SEP]",
    "UNK": "[UNK]",
    "slash": "/",
    "hash": "#",
    "dollar": "$",
    "star": "*",
}

_SPECIAL_WORDS = {"[MASK]", "[CLS]", "[SEP]", "[UNK]", "[PAD]"}
_PUNCT = set(string.punctuation)


class TokenKind(Enum):
    WORDPIECE = "wordpiece"
    ENTITY = "entity"
    MASK = "mask"
    EMASK = "emask"
    CONTROL = "control"


@dataclass(frozen=True)
class Token:
    """One input position: a wordpiece, an entity, a mask, or a control."""

    kind: TokenKind
    text: str = ""
    candidates: tuple[str, ...] = ()

    @staticmethod
    def wordpiece(piece: str) -> "Token":
        return Token(TokenKind.WORDPIECE, piece)

    @staticmethod
    def entity(entity_id: str) -> "Token":
        if not is_entity_symbol(entity_id):
            raise ValueError(f"entity id must carry the {ENTITY_PREFIX!r} prefix: {entity_id!r}")
        return Token(TokenKind.ENTITY, entity_id)

    @staticmethod
    def mask() -> "Token":
        return Token(TokenKind.MASK)

    @staticmethod
    def emask(candidates: Iterable[str]) -> "Token":
        cands = tuple(candidates)
        if not cands:
            raise ValueError("an entity mask needs a non-empty candidate list")
        return Token(TokenKind.EMASK, candidates=cands)

    @staticmethod
    def control(name: str) -> "Token":
        if name not in CONTROL_PIECES:
            raise ValueError(f"unknown control token {name!r}")
        return Token(TokenKind.CONTROL, name)

    def render(self) -> str:
        """Human-readable text form, used in reports and tests."""
        if self.kind is TokenKind.WORDPIECE:
            return self.text
        if self.kind is TokenKind.ENTITY:
            return self.text
        if self.kind is TokenKind.MASK:
            return "[MASK]"
        if self.kind is TokenKind.EMASK:
            return "[E-MASK]"
        return CONTROL_PIECES[self.text]


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[Token, ...]
    # Optional map from token index to the (start, end) whitespace-word span
    # it came from; purely informational.
    provenance: Mapping[int, tuple[int, int]] | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def render(self) -> list[str]:
        return [t.render() for t in self.tokens]


@dataclass(frozen=True)
class MentionSpan:
    """Half-open token offsets [start, end) into a whitespace-split sentence."""

    start: int
    end: int
    surface: str
    entity_id: str | None = None

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad mention span [{self.start}, {self.end})")


class InputMode(Enum):
    BERT = "bert"
    CONCAT = "concat"
    REPLACE = "replace"


def wordpiece_tokenize(text: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first wordpiece tokenization.

    Words are whitespace tokens; within a word not present in the vocabulary,
    each punctuation character is split off as its own unit first. Pieces
    after the first carry the ``##`` continuation prefix. A word (or unit)
    with no decomposition becomes a single ``[UNK]``.
    """
    pieces: list[str] = []
    for word in text.split():
        for unit in _punct_units(word, vocab):
            pieces.extend(_wordpiece_word(unit, vocab))
    return pieces


def _punct_units(word: str, vocab: Vocabulary) -> list[str]:
    if word in vocab.index or word in _SPECIAL_WORDS:
        return [word]
    units: list[str] = []
    buf: list[str] = []
    for ch in word:
        if ch in _PUNCT:
            if buf:
                units.append("".join(buf))
                buf = []
            units.append(ch)
        else:
            buf.append(ch)
    if buf:
        units.append("".join(buf))
    return units


def _wordpiece_word(word: str, vocab: Vocabulary) -> list[str]:
    if word in vocab.index:
        return [word]
    pieces: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab.index:
                match = sub
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces if pieces else [UNK]


def _check_mentions(mentions: Sequence[MentionSpan], n_words: int, words: list[str]):
    ordered = sorted(mentions, key=lambda m: m.start)
    prev_end = 0
    for m in ordered:
        if m.end > n_words:
            raise ValueError(
                f"mention [{m.start}, {m.end}) exceeds sentence length {n_words}"
            )
        if m.start < prev_end:
            raise ValueError("mentions overlap")
        if MASK_WORD in words[m.start : m.end]:
            raise ValueError("a mention span may not cover the [MASK] word")
        prev_end = m.end
    return ordered


def _resolvable(mention: MentionSpan, entity_space: EmbeddingSpace | None) -> bool:
    return (
        mention.entity_id is not None
        and entity_space is not None
        and mention.entity_id in entity_space.vocab
    )


def build_input(
    sentence: str,
    mentions: Sequence[MentionSpan],
    mode: InputMode,
    entity_space: EmbeddingSpace | None,
    vocab: Vocabulary,
) -> TokenSequence:
    """Build a CLS/SEP-framed token sequence with optional entity injection.

    In bert mode the output is exactly the wordpiece tokenization of the
    sentence regardless of mentions. In concat mode a resolvable mention
    contributes ``Entity / surface-pieces``; in replace mode the entity token
    stands in for the surface. Unresolvable mentions fall back to plain
    wordpieces individually.
    """
    words = sentence.split()
    ordered = _check_mentions(mentions, len(words), words)
    by_start = {m.start: m for m in ordered}

    tokens: list[Token] = [Token.control("CLS")]
    i = 0
    while i < len(words):
        m = by_start.get(i)
        if m is not None:
            surface_words = words[m.start : m.end]
            if mode is not InputMode.BERT and _resolvable(m, entity_space):
                tokens.append(Token.entity(m.entity_id))
                if mode is InputMode.CONCAT:
                    tokens.append(Token.control("slash"))
                    _extend_wordpieces(tokens, surface_words, vocab)
            else:
                _extend_wordpieces(tokens, surface_words, vocab)
            i = m.end
        else:
            word = words[i]
            if word == MASK_WORD:
                tokens.append(Token.mask())
            else:
                _extend_wordpieces(tokens, [word], vocab)
            i += 1
    tokens.append(Token.control("SEP"))
    return TokenSequence(tuple(tokens))


def wordpiece_tokens(words: Iterable[str], vocab: Vocabulary) -> list[Token]:
    """Tokenize whitespace words into wordpiece Tokens."""
    out: list[Token] = []
    for word in words:
        for unit in _punct_units(word, vocab):
            out.extend(Token.wordpiece(p) for p in _wordpiece_word(unit, vocab))
    return out


def _extend_wordpieces(tokens: list[Token], words: Iterable[str], vocab: Vocabulary):
    tokens.extend(wordpiece_tokens(words, vocab))


def build_rc_input(
    sentence: str,
    subject: MentionSpan,
    object_: MentionSpan,
    mode: InputMode,
    entity_space: EmbeddingSpace | None,
    vocab: Vocabulary,
) -> TokenSequence:
    """Build a relation-classification input with marked argument spans.

    The subject span is wrapped in a ``#`` pair and the object span in a
    ``$`` pair; entity injection inside the markers follows ``mode`` exactly
    as in ``build_input``. Spans must be disjoint.
    """
    if (subject.start, subject.end) == (object_.start, object_.end):
        raise ValueError("subject and object spans are identical")
    words = sentence.split()
    marked = sorted(
        [(subject, "hash"), (object_, "dollar")], key=lambda t: t[0].start
    )
    _check_mentions([m for m, _ in marked], len(words), words)
    by_start = {m.start: (m, marker) for m, marker in marked}

    tokens: list[Token] = [Token.control("CLS")]
    i = 0
    while i < len(words):
        entry = by_start.get(i)
        if entry is not None:
            m, marker = entry
            tokens.append(Token.control(marker))
            surface_words = words[m.start : m.end]
            if mode is not InputMode.BERT and _resolvable(m, entity_space):
                tokens.append(Token.entity(m.entity_id))
                if mode is InputMode.CONCAT:
                    tokens.append(Token.control("slash"))
                    _extend_wordpieces(tokens, surface_words, vocab)
            else:
                _extend_wordpieces(tokens, surface_words, vocab)
            tokens.append(Token.control(marker))
            i = m.end
        else:
            word = words[i]
            if word == MASK_WORD:
                tokens.append(Token.mask())
            else:
                _extend_wordpieces(tokens, [word], vocab)
            i += 1
    tokens.append(Token.control("SEP"))
    return TokenSequence(tuple(tokens))


def chunk_document(sizes: Sequence[int], limit: int = 512) -> list[list[int]]:
    """Split a document, given per-sentence wordpiece counts, to fit ``limit``.

    A document over the limit is split at the sentence boundary closest to
    its midpoint (ties toward the left boundary), recursively on both halves.
    A single sentence longer than the limit cannot be split and is an error.
    """
    if limit <= 0:
        raise ValueError("limit must be positive")
    sizes = list(sizes)
    for idx, s in enumerate(sizes):
        if s > limit:
            raise ValueError(
                f"sentence {idx} has {s} wordpieces, over the limit of {limit}"
            )
    if not sizes:
        return []
    return _chunk(sizes, limit)


def _chunk(seg: list[int], limit: int) -> list[list[int]]:
    total = sum(seg)
    if total <= limit:
        return [seg]
    target = total / 2.0
    best_b, best_dist = 1, abs(seg[0] - target)
    prefix = seg[0]
    for b in range(2, len(seg)):
        prefix += seg[b - 1]
        dist = abs(prefix - target)
        if dist < best_dist:
            best_b, best_dist = b, dist
    return _chunk(seg[:best_b], limit) + _chunk(seg[best_b:], limit)


def load_mention_sentences(path) -> list[tuple[str, list[MentionSpan]]]:
    """Load sentence/mention JSON-lines: {"text", "mentions": [{start, end, entity?}]}."""
    out: list[tuple[str, list[MentionSpan]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                raise DataError(f"{path}: line {lineno}: invalid JSON") from None
            if "text" not in obj:
                raise DataError(f"{path}: line {lineno}: missing 'text'")
            words = obj["text"].split()
            mentions = []
            for m in obj.get("mentions", []):
                try:
                    span = MentionSpan(
                        int(m["start"]),
                        int(m["end"]),
                        " ".join(words[int(m["start"]) : int(m["end"])]),
                        m.get("entity"),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(
                        f"{path}: line {lineno}: bad mention ({exc})"
                    ) from None
                mentions.append(span)
            out.append((obj["text"], mentions))
    return out
