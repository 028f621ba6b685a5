"""Least-squares alignment of a word space onto a wordpiece space.

The map W minimizes the summed squared error ||W x - y||^2 over all shared
vocabulary pairs, where x is a source (word) vector and y the target
(wordpiece) vector of the same symbol. Entity vectors are then carried into
the target space by the same W, which is the whole point: entities inherit
the geometry the shared words induce.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingSpace, SharedSymbol, SpaceKind, Vocabulary
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class AlignmentMap:
    """A fitted linear map.

    Attributes
    ----------
    w : ndarray of shape (d_tgt, d_src), float64
        The least-squares solution.
    shared_count : int
        Number of vocabulary pairs the fit used.
    residual : float
        Summed squared error of the fit, recomputable as
        ``sum(||W x - y||^2)`` over the training pairs.
    rank_deficient : bool
        True when the source vectors did not span the source space and the
        minimum-norm solution was taken. Not serialized; loading a map from
        disk resets it to False.
    """

    w: np.ndarray
    shared_count: int
    residual: float
    rank_deficient: bool = False

    @property
    def d_tgt(self) -> int:
        return self.w.shape[0]

    @property
    def d_src(self) -> int:
        return self.w.shape[1]


def fit_alignment(
    src: EmbeddingSpace,
    tgt: EmbeddingSpace,
    pairs: Sequence[SharedSymbol],
    l2_normalize: bool = False,
) -> AlignmentMap:
    """Fit W = argmin sum ||W x - y||^2 over the given symbol pairs.

    Solved in float64 through an orthogonal factorization (SVD-based lstsq),
    never by forming normal equations. A rank-deficient system yields the
    minimum-norm solution and sets the ``rank_deficient`` flag.

    Parameters
    ----------
    src : word-and-entity space providing the x vectors (via ``wiki_id``).
    tgt : wordpiece space providing the y vectors (via ``wp_id``).
    pairs : shared vocabulary as produced by ``shared_vocabulary``.
    l2_normalize : optionally L2-normalize every x and y before fitting.
        Off by default; vectors are used exactly as stored.
    """
    if not pairs:
        raise ValueError("cannot fit an alignment from zero shared symbols")
    x = src.matrix[[p.wiki_id for p in pairs]].astype(np.float64)
    y = tgt.matrix[[p.wp_id for p in pairs]].astype(np.float64)
    if l2_normalize:
        x = _unit_rows(x)
        y = _unit_rows(y)

    wt, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    w = wt.T
    rank_deficient = rank < src.dim
    if rank_deficient:
        logger.warning(
            "shared vectors span only %d of %d source dimensions; "
            "minimum-norm solution taken",
            rank,
            src.dim,
        )
    residual = float(np.sum((x @ wt - y) ** 2))
    return AlignmentMap(w, len(pairs), residual, rank_deficient)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return m / norms


def alignment_objective(
    w: np.ndarray,
    src: EmbeddingSpace,
    tgt: EmbeddingSpace,
    pairs: Sequence[SharedSymbol],
    l2_normalize: bool = False,
) -> float:
    """Summed squared error of an arbitrary map on the given pairs."""
    x = src.matrix[[p.wiki_id for p in pairs]].astype(np.float64)
    y = tgt.matrix[[p.wp_id for p in pairs]].astype(np.float64)
    if l2_normalize:
        x = _unit_rows(x)
        y = _unit_rows(y)
    return float(np.sum((x @ np.asarray(w, dtype=np.float64).T - y) ** 2))


def apply_alignment(amap: AlignmentMap, vector: np.ndarray) -> np.ndarray:
    """Map a single source vector into the target space."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (amap.d_src,):
        raise ValueError(
            f"vector has shape {v.shape}, alignment expects ({amap.d_src},)"
        )
    return amap.w @ v


def derive_entity_space(amap: AlignmentMap, wiki: EmbeddingSpace) -> EmbeddingSpace:
    """Map every entity row of ``wiki`` into the target space.

    The result contains exactly the entity symbols of ``wiki``, in their
    original relative order, and no words.
    """
    if wiki.kind is not SpaceKind.WORD_AND_ENTITY:
        raise ValueError("entity derivation needs a word-and-entity space")
    if wiki.dim != amap.d_src:
        raise ValueError(
            f"space dimension {wiki.dim} does not match alignment source "
            f"dimension {amap.d_src}"
        )
    symbols = wiki.entity_symbols()
    ids = [wiki.vocab.index[s] for s in symbols]
    rows = wiki.matrix[ids].astype(np.float64) @ amap.w.T
    return EmbeddingSpace(
        Vocabulary(symbols), amap.d_tgt, rows, SpaceKind.WORD_AND_ENTITY
    )


def save_alignment(amap: AlignmentMap, path) -> None:
    """Serialize: header ``d_tgt d_src residual shared_count``, then the rows.

    Values use shortest round-tripping float64 repr, so load(save(m)) is
    bit-exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{amap.d_tgt} {amap.d_src} {amap.residual!r} {amap.shared_count}\n"
        )
        for row in amap.w:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_alignment(path) -> AlignmentMap:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty alignment file")
    header = lines[0].split()
    if len(header) != 4:
        raise DataError(f"{path}: line 1: malformed alignment header {lines[0]!r}")
    try:
        d_tgt, d_src = int(header[0]), int(header[1])
        residual = float(header[2])
        shared_count = int(header[3])
    except ValueError:
        raise DataError(f"{path}: line 1: malformed alignment header") from None
    if len(lines) - 1 != d_tgt:
        raise DataError(
            f"{path}: header declares {d_tgt} rows but file has {len(lines) - 1}"
        )
    w = np.empty((d_tgt, d_src), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        fields = line.split()
        if len(fields) != d_src:
            raise DataError(
                f"{path}: line {i + 2}: expected {d_src} values, got {len(fields)}"
            )
        try:
            w[i] = [float(v) for v in fields]
        except ValueError:
            raise DataError(f"{path}: line {i + 2}: unparseable number") from None
    return AlignmentMap(w, shared_count, residual)
