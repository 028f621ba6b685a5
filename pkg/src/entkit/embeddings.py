"""Vocabularies and dense embedding spaces in word2vec text format.

Two kinds of space exist: wordpiece spaces (every symbol is a wordpiece) and
word-and-entity spaces, where entity symbols carry the ``ENTITY/`` prefix and
everything else is a plain word. The prefixed string itself is the entity id
used throughout the codebase.

File layout is the classic text format: a header line ``<count> <dim>``
followed by one row per symbol, ``<symbol> <v1> ... <v_dim>``, UTF-8 encoded
and space separated. Symbols must not contain whitespace. Numbers are parsed
as 64-bit floats and stored as 32-bit, so a save/load round trip is exact at
32-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DataError

ENTITY_PREFIX = "ENTITY/"


class SpaceKind(Enum):
    WORDPIECE = "wordpiece"
    WORD_AND_ENTITY = "word_and_entity"


class SymbolClass(Enum):
    WORD = "word"
    ENTITY = "entity"
    WORDPIECE = "wordpiece"


def is_entity_symbol(symbol: str) -> bool:
    return symbol.startswith(ENTITY_PREFIX)


def symbol_class(symbol: str, kind: SpaceKind) -> SymbolClass:
    """Classify a symbol within a space of the given kind."""
    if kind is SpaceKind.WORDPIECE:
        return SymbolClass.WORDPIECE
    return SymbolClass.ENTITY if is_entity_symbol(symbol) else SymbolClass.WORD


class Vocabulary:
    """Ordered set of unique symbols with contiguous integer ids."""

    def __init__(self, symbols: Iterable[str]):
        self.symbols: tuple[str, ...] = tuple(symbols)
        self.index: dict[str, int] = {}
        for i, sym in enumerate(self.symbols):
            if sym in self.index:
                raise DataError(f"duplicate symbol in vocabulary: {sym!r}")
            self.index[sym] = i

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def __iter__(self):
        return iter(self.symbols)

    def __repr__(self) -> str:
        return f"Vocabulary({len(self.symbols)} symbols)"


@dataclass
class EmbeddingSpace:
    """A vocabulary plus a row-per-symbol embedding matrix.

    The matrix is marked read-only after construction; spaces are meant to be
    shared freely across threads.
    """

    vocab: Vocabulary
    dim: int
    matrix: np.ndarray
    kind: SpaceKind

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.dim <= 0:
            raise ValueError(f"dimension must be positive, got {self.dim}")
        if self.matrix.shape != (len(self.vocab), self.dim):
            raise ValueError(
                f"matrix shape {self.matrix.shape} does not match "
                f"{len(self.vocab)} symbols of dimension {self.dim}"
            )
        if self.matrix.size and not np.all(np.isfinite(self.matrix)):
            bad = int(np.argwhere(~np.isfinite(self.matrix).all(axis=1))[0][0])
            raise DataError(
                f"non-finite embedding row for symbol {self.vocab.symbols[bad]!r}"
            )
        self.matrix.setflags(write=False)

    def row(self, symbol: str) -> np.ndarray | None:
        i = self.vocab.index.get(symbol)
        return None if i is None else self.matrix[i]

    def entity_symbols(self) -> list[str]:
        return [s for s in self.vocab.symbols if is_entity_symbol(s)]

    def word_symbols(self) -> list[str]:
        return [s for s in self.vocab.symbols if not is_entity_symbol(s)]


def lookup(space: EmbeddingSpace, symbol: str) -> np.ndarray | None:
    """Return the embedding row for ``symbol``, or None when absent."""
    return space.row(symbol)


def load_space(path, kind: SpaceKind) -> EmbeddingSpace:
    """Load an embedding space from word2vec text format.

    Raises DataError with a line number on malformed headers, dimension
    mismatches, unparseable numbers, duplicate symbols, or a row count that
    disagrees with the header.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file, expected a '<count> <dim>' header")

    header = lines[0].split()
    if len(header) != 2:
        raise DataError(f"{path}: line 1: malformed header {lines[0]!r}")
    try:
        count, dim = int(header[0]), int(header[1])
    except ValueError:
        raise DataError(f"{path}: line 1: malformed header {lines[0]!r}") from None
    if count < 0 or dim <= 0:
        raise DataError(f"{path}: line 1: invalid header values {lines[0]!r}")

    data_lines = lines[1:]
    if len(data_lines) != count:
        raise DataError(
            f"{path}: header declares {count} rows but file has {len(data_lines)}"
        )

    symbols: list[str] = []
    seen: set[str] = set()
    rows = np.empty((count, dim), dtype=np.float64)
    for n, line in enumerate(data_lines):
        lineno = n + 2
        fields = line.split()
        if len(fields) != dim + 1:
            raise DataError(
                f"{path}: line {lineno}: expected {dim} values, got {len(fields) - 1}"
            )
        sym = fields[0]
        if sym in seen:
            raise DataError(f"{path}: line {lineno}: duplicate symbol {sym!r}")
        seen.add(sym)
        symbols.append(sym)
        try:
            rows[n] = [float(x) for x in fields[1:]]
        except ValueError:
            raise DataError(f"{path}: line {lineno}: unparseable number") from None

    matrix = rows.astype(np.float32)
    if matrix.size and not np.all(np.isfinite(matrix)):
        bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
        raise DataError(f"{path}: non-finite value in row for {symbols[bad]!r}")
    return EmbeddingSpace(Vocabulary(symbols), dim, matrix, kind)


def save_space(space: EmbeddingSpace, path) -> None:
    """Write a space in word2vec text format (values serialized as float32)."""
    values = space.matrix.astype(np.float32)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(space.vocab)} {space.dim}\n")
        for sym, row in zip(space.vocab.symbols, values):
            fh.write(sym + " " + " ".join(str(v) for v in row) + "\n")


class SharedSymbol(NamedTuple):
    """One symbol present in both spaces: (symbol, wordpiece id, word id)."""

    symbol: str
    wp_id: int
    wiki_id: int


def shared_vocabulary(
    wp: EmbeddingSpace, wiki: EmbeddingSpace
) -> list[SharedSymbol]:
    """Exact case-sensitive intersection of a wordpiece and a word space.

    Entity symbols never participate (the prefix keeps them out of any
    wordpiece vocabulary by construction, and they are skipped here anyway).
    Returned in ascending wordpiece id order. An empty intersection is a
    DataError because no alignment can be fit from it.
    """
    if wp.kind is not SpaceKind.WORDPIECE:
        raise ValueError("first argument must be a wordpiece space")
    if wiki.kind is not SpaceKind.WORD_AND_ENTITY:
        raise ValueError("second argument must be a word-and-entity space")
    shared = [
        SharedSymbol(sym, wp_id, wiki.vocab.index[sym])
        for wp_id, sym in enumerate(wp.vocab.symbols)
        if sym in wiki.vocab.index and not is_entity_symbol(sym)
    ]
    if not shared:
        raise DataError("empty intersection between wordpiece and word vocabularies")
    return shared
