"""Attention masks and the relative distance matrix for one token sequence.

Three masks are combined: a global mask routing everything through ``[CLS]``,
a local mask confining attention to tokens of the same instruction, and a
dependence mask enabling bidirectional attention between the ``<INST>``
delimiters of connected instructions.  "Disabled" entries hold a large
negative constant added to the attention logits before softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .connectivity import ConnectivityGraph
from .frontend import TokenSequence

#: additive stand-in for -inf; post-softmax weight at such entries is < 1e-12
MASK_NEG = -1.0e9


def _inst_array(seq: TokenSequence) -> np.ndarray:
    return np.asarray(seq.inst_of, dtype=np.int64)


def global_enabled(seq: TokenSequence) -> np.ndarray:
    n = len(seq)
    en = np.zeros((n, n), dtype=bool)
    en[0, :] = True
    en[:, 0] = True
    return en


def local_enabled(seq: TokenSequence) -> np.ndarray:
    inst = _inst_array(seq)
    return (inst[:, None] == inst[None, :]) & (inst[:, None] != -1)


def dependence_enabled(seq: TokenSequence, con: ConnectivityGraph) -> np.ndarray:
    n = len(seq)
    en = np.zeros((n, n), dtype=bool)
    for t, pt in seq.inst_positions.items():
        for s, ps in seq.inst_positions.items():
            if t != s and con.connected(t, s):
                en[pt, ps] = True
    return en


def _additive(enabled: np.ndarray, neg: float) -> np.ndarray:
    return np.where(enabled, 0.0, neg)


def global_mask(seq: TokenSequence, neg: float = MASK_NEG) -> np.ndarray:
    return _additive(global_enabled(seq), neg)


def local_mask(seq: TokenSequence, neg: float = MASK_NEG) -> np.ndarray:
    return _additive(local_enabled(seq), neg)


def dependence_mask(seq: TokenSequence, con: ConnectivityGraph,
                    neg: float = MASK_NEG) -> np.ndarray:
    return _additive(dependence_enabled(seq, con), neg)


@dataclass
class MaskBundle:
    #: additive attention mask, entries in {0, neg}
    M: np.ndarray
    #: relative distance matrix; > 0 only between <INST> tokens of distinct
    #: connected instructions
    R: np.ndarray

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def copy(self) -> "MaskBundle":
        return MaskBundle(M=self.M.copy(), R=self.R.copy())


def build_bundle(seq: TokenSequence, con: ConnectivityGraph,
                 neg: float = MASK_NEG) -> MaskBundle:
    """Union of the three masks plus the distance matrix."""
    M = np.maximum(global_mask(seq, neg),
                   np.maximum(local_mask(seq, neg), dependence_mask(seq, con, neg)))
    R = np.zeros((len(seq), len(seq)), dtype=np.int32)
    for t, pt in seq.inst_positions.items():
        for s, ps in seq.inst_positions.items():
            if t != s and con.connected(t, s):
                R[pt, ps] = con.distance(t, s)
    return MaskBundle(M=M, R=R)


def pad_bundle(bundle: MaskBundle, total_len: int, neg: float = MASK_NEG) -> MaskBundle:
    """Extend a bundle with [PAD] rows/columns: fully masked except self."""
    n = bundle.n
    if total_len < n:
        raise ValueError("total_len smaller than the sequence")
    M = np.full((total_len, total_len), neg)
    M[:n, :n] = bundle.M
    for i in range(n, total_len):
        M[i, i] = 0.0
    R = np.zeros((total_len, total_len), dtype=np.int32)
    R[:n, :n] = bundle.R
    return MaskBundle(M=M, R=R)


def sparse_masks(seq: TokenSequence, con: ConnectivityGraph) -> dict:
    """Serializable view: enabled (i, j) pairs (i <= j) per mask kind plus
    distance triples for the <INST> pairs."""

    def pairs(en: np.ndarray) -> list[list[int]]:
        ii, jj = np.nonzero(en)
        return sorted([int(i), int(j)] for i, j in zip(ii, jj) if i <= j)

    bundle = build_bundle(seq, con)
    ru, rv = np.nonzero(bundle.R)
    r_triples = sorted([int(u), int(v), int(bundle.R[u, v])]
                       for u, v in zip(ru, rv) if u < v)
    return {
        "n": len(seq),
        "global": pairs(global_enabled(seq)),
        "local": pairs(local_enabled(seq)),
        "dependence": pairs(dependence_enabled(seq, con)),
        "r": r_triples,
    }
