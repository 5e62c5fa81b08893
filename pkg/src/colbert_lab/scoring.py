"""MaxSim similarity, batched score matrices, and exact brute-force retrieval.

Two execution contexts share the same math:

* frozen scoring (retrieval, evaluation) works on plain arrays and runs the
  hot kernels in :mod:`colbert_lab.kernels`;
* training-time scoring works on tape nodes and records a differentiable
  score-matrix operation whose backward routes each max to its argmax.

Retrieval is exact: every document is scored, ties break toward the lower
document id, and the result is independent of the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Node, Tape
from .encoder import MultiVectorRep
from .errors import ContractError, InputError, ShapeError


@dataclass
class ScoreMatrix:
    values: Node | np.ndarray  # Q x D
    row_ids: list[str]
    col_ids: list[str]
    diagonal_is_positive: bool = False
    interaction: str = "late"

    @property
    def array(self) -> np.ndarray:
        return self.values.value if isinstance(self.values, Node) else self.values


@dataclass
class CorpusIndex:
    """Frozen per-document representations packed for the scoring kernels."""

    doc_ids: list[str]
    interaction: str  # "late" | "dense"
    rows: np.ndarray  # masked-in rows of all docs, concatenated (late)
    offsets: np.ndarray  # int64, len(doc_ids) + 1 (late)
    dense: np.ndarray | None = None  # n_docs x d (dense)

    def __len__(self):
        return len(self.doc_ids)


def build_index(doc_ids: list[str], reps: list, interaction: str) -> CorpusIndex:
    if len(doc_ids) != len(set(doc_ids)):
        raise ContractError("document ids must be unique")
    if len(doc_ids) != len(reps):
        raise ContractError("ids and representations are misaligned")
    if interaction == "dense":
        mat = np.vstack([r.values if isinstance(r, MultiVectorRep) else r for r in reps]) if reps else np.zeros((0, 0))
        return CorpusIndex(
            doc_ids=list(doc_ids),
            interaction="dense",
            rows=np.zeros((0, 0)),
            offsets=np.zeros(1, dtype=np.int64),
            dense=mat,
        )
    packed = []
    offsets = np.zeros(len(reps) + 1, dtype=np.int64)
    for j, rep in enumerate(reps):
        rows = rep.values[rep.scoring_mask]
        if rows.shape[0] == 0:
            raise InputError(f"document {doc_ids[j]} has no masked-in rows")
        packed.append(rows)
        offsets[j + 1] = offsets[j] + rows.shape[0]
    rows = np.vstack(packed) if packed else np.zeros((0, 0))
    return CorpusIndex(
        doc_ids=list(doc_ids), interaction="late", rows=rows, offsets=offsets
    )


def maxsim(q: MultiVectorRep, d: MultiVectorRep) -> float | Node:
    """Sum over masked-in query rows of the max dot product over doc rows.

    Returns a plain float for frozen reps and a 1x1 tape node when either
    side is tracked.
    """
    if q.values.shape[1] != d.values.shape[1]:
        raise ShapeError(
            f"vector widths differ: {q.values.shape[1]} vs {d.values.shape[1]}"
        )
    if not d.scoring_mask.any():
        raise InputError("document has no masked-in rows")
    if q.tracked or d.tracked:
        tape = q.vectors.tape if q.tracked else d.vectors.tape
        return tape.score_matrix_op([q.vectors], [d.vectors], [q.scoring_mask], [d.scoring_mask])
    qv = q.values[q.scoring_mask]
    if qv.shape[0] == 0:
        return 0.0
    sims = qv @ d.values[d.scoring_mask].T
    return float(sims.max(axis=1).sum())


def score_matrix(
    queries: list[MultiVectorRep],
    docs: list[MultiVectorRep],
    interaction: str = "late",
    query_ids: list[str] | None = None,
    doc_ids: list[str] | None = None,
    diagonal_is_positive: bool = False,
    tape: Tape | None = None,
) -> ScoreMatrix:
    """All-pairs scores: MaxSim in late mode, dot products in dense mode.

    Dense reps are single-row, so both modes share one kernel; the
    ``interaction`` tag is validated against the rep shapes.
    """
    if not queries or not docs:
        raise ContractError("score_matrix requires non-empty inputs")
    if interaction == "dense":
        for r in queries + docs:
            if r.values.shape[0] != 1:
                raise ContractError("dense interaction requires single-row reps")
    tracked = any(r.tracked for r in queries + docs)
    if tracked or tape is not None:
        if tape is None:
            for r in queries + docs:
                if r.tracked:
                    tape = r.vectors.tape
                    break
        node = tape.score_matrix_op(
            [r.vectors for r in queries],
            [r.vectors for r in docs],
            [r.scoring_mask for r in queries],
            [r.scoring_mask for r in docs],
        )
        values: Node | np.ndarray = node
    else:
        for d in docs:
            if not d.scoring_mask.any():
                raise InputError("document has no masked-in rows")
        values, _ = kernels.blocked_score_matrix(
            [r.values for r in queries],
            [r.values for r in docs],
            [r.scoring_mask for r in queries],
            [r.scoring_mask for r in docs],
        )
    return ScoreMatrix(
        values=values,
        row_ids=query_ids or [str(i) for i in range(len(queries))],
        col_ids=doc_ids or [str(j) for j in range(len(docs))],
        diagonal_is_positive=diagonal_is_positive,
        interaction=interaction,
    )


def corpus_scores(q: MultiVectorRep, index: CorpusIndex) -> np.ndarray:
    """Scores of one query against every document in the index."""
    if index.interaction == "dense":
        return kernels.dense_many(q.values, index.dense)
    qv = q.values[q.scoring_mask]
    return kernels.maxsim_many(qv, index.rows, index.offsets)


def retrieve(q: MultiVectorRep, index: CorpusIndex, k: int) -> list[tuple[str, float]]:
    """Exact top-k by score, ties broken by ascending document id."""
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(index) == 0:
        return []
    scores = corpus_scores(q, index)
    ids = np.asarray(index.doc_ids)
    order = np.lexsort((ids, -scores))
    top = order[: min(k, len(index))]
    return [(str(ids[i]), float(scores[i])) for i in top]
