"""Hot scoring kernels: MaxSim over token vectors, with numba and numpy paths.

The numba ``@njit`` kernels are the default. Setting the environment variable
``COLBERT_LAB_DISABLE_NUMBA=1`` before import selects the pure-numpy fallback
(used on platforms without a working JIT, and by the benchmark for
comparison). Both paths reduce in the same fixed order per document, so a
parallel run over documents produces bit-identical scores to a sequential
one: each output cell is written by exactly one task. ``fastmath`` lets the
JIT vectorize the dot products; the reassociation it picks is fixed at
compile time, so results stay deterministic run to run.

``blocked_score_matrix`` is the batched forward used both for frozen scoring
and inside the autodiff score-matrix operation (where it also returns the
per-cell argmax used to route gradients).
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("COLBERT_LAB_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _env in ("1", "true", "yes", "on")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by COLBERT_LAB_DISABLE_NUMBA")
    from numba import njit, prange, set_num_threads

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    HAS_NUMBA = False

# 0 => sequential deterministic mode; N>0 => parallel kernel over documents.
_THREADS = 0

# Default block sizes for the batched score-matrix kernel.
QUERY_BLOCK = 64
DOC_BLOCK = 256


def set_threads(n: int) -> None:
    """Select sequential (0) or parallel (N>0) document scoring.

    Thread counts above the host limit are clamped; results are identical
    for any positive count because output cells never share a writer.
    """
    global _THREADS
    _THREADS = max(0, int(n))
    if HAS_NUMBA and _THREADS > 0:
        from numba import config as numba_config

        set_num_threads(min(_THREADS, numba_config.NUMBA_NUM_THREADS))


def get_threads() -> int:
    return _THREADS


# ---------------------------------------------------------------------------
# One query against a packed corpus: rows of all docs concatenated, with
# offsets[j]..offsets[j+1] delimiting document j.
# ---------------------------------------------------------------------------


def _maxsim_many_numpy(q: np.ndarray, doc_rows: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    n_docs = offsets.shape[0] - 1
    out = np.empty(n_docs, dtype=np.float64)
    if q.shape[0] == 0:
        out[:] = 0.0
        return out
    # One GEMM against the packed rows, then a per-document segment max.
    sims = q @ doc_rows.T  # (m, total_rows)
    for j in range(n_docs):
        seg = sims[:, offsets[j] : offsets[j + 1]]
        out[j] = seg.max(axis=1).sum()
    return out


def _dense_many_numpy(q: np.ndarray, doc_mat: np.ndarray) -> np.ndarray:
    return doc_mat @ q[0]


if HAS_NUMBA:

    @njit(cache=True, fastmath=True)
    def _maxsim_many_seq(q, doc_rows, offsets, out):  # pragma: no cover - jit
        m, dim = q.shape
        for j in range(offsets.shape[0] - 1):
            total = 0.0
            for t in range(m):
                best = -np.inf
                for r in range(offsets[j], offsets[j + 1]):
                    s = 0.0
                    for c in range(dim):
                        s += q[t, c] * doc_rows[r, c]
                    if s > best:
                        best = s
                total += best
            out[j] = total

    @njit(cache=True, fastmath=True, parallel=True)
    def _maxsim_many_par(q, doc_rows, offsets, out):  # pragma: no cover - jit
        m, dim = q.shape
        for j in prange(offsets.shape[0] - 1):
            total = 0.0
            for t in range(m):
                best = -np.inf
                for r in range(offsets[j], offsets[j + 1]):
                    s = 0.0
                    for c in range(dim):
                        s += q[t, c] * doc_rows[r, c]
                    if s > best:
                        best = s
                total += best
            out[j] = total

    @njit(cache=True, fastmath=True)
    def _dense_many_seq(q, doc_mat, out):  # pragma: no cover - jit
        n, dim = doc_mat.shape
        for j in range(n):
            s = 0.0
            for c in range(dim):
                s += doc_mat[j, c] * q[0, c]
            out[j] = s

    @njit(cache=True, fastmath=True, parallel=True)
    def _dense_many_par(q, doc_mat, out):  # pragma: no cover - jit
        n, dim = doc_mat.shape
        for j in prange(n):
            s = 0.0
            for c in range(dim):
                s += doc_mat[j, c] * q[0, c]
            out[j] = s


def maxsim_many(q: np.ndarray, doc_rows: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Score one query (masked-in rows only) against every packed document."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    doc_rows = np.ascontiguousarray(doc_rows, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if not HAS_NUMBA:
        return _maxsim_many_numpy(q, doc_rows, offsets)
    out = np.empty(offsets.shape[0] - 1, dtype=np.float64)
    if q.shape[0] == 0:
        out[:] = 0.0
        return out
    if _THREADS > 0:
        _maxsim_many_par(q, doc_rows, offsets, out)
    else:
        _maxsim_many_seq(q, doc_rows, offsets, out)
    return out


def dense_many(q: np.ndarray, doc_mat: np.ndarray) -> np.ndarray:
    """Dot-product scores of one dense query vector against a doc matrix."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    doc_mat = np.ascontiguousarray(doc_mat, dtype=np.float64)
    if not HAS_NUMBA:
        return _dense_many_numpy(q, doc_mat)
    out = np.empty(doc_mat.shape[0], dtype=np.float64)
    if _THREADS > 0:
        _dense_many_par(q, doc_mat, out)
    else:
        _dense_many_seq(q, doc_mat, out)
    return out


# ---------------------------------------------------------------------------
# Batched score matrix over lists of per-text representations.
# ---------------------------------------------------------------------------


def _pack(values, masks):
    lens = np.array([v.shape[0] for v in values], dtype=np.int64)
    offsets = np.zeros(len(values) + 1, dtype=np.int64)
    np.cumsum(lens, out=offsets[1:])
    rows = np.vstack(values)
    mask = np.concatenate([np.asarray(m, dtype=bool) for m in masks])
    return rows, offsets, mask


def blocked_score_matrix(
    q_values: list[np.ndarray],
    d_values: list[np.ndarray],
    q_masks: list[np.ndarray],
    d_masks: list[np.ndarray],
    want_argmax: bool = False,
    q_block: int = QUERY_BLOCK,
    d_block: int = DOC_BLOCK,
):
    """All-pairs MaxSim scores for two lists of representations.

    ``scores[i, j]`` sums, over masked-in rows of query ``i``, the maximum
    dot product against masked-in rows of document ``j``. ``argmax`` (when
    requested) holds, per query row, the winning row index into the packed
    document matrix; masked-out query rows carry a valid index but are
    ignored downstream. Ties resolve to the lowest row index.

    Uniform-length inputs take a blocked reshape path; ragged inputs fall
    back to a per-pair loop with identical semantics.
    """
    n_q, n_d = len(q_values), len(d_values)
    q_rows, q_off, _ = _pack(q_values, q_masks)
    d_rows, d_off, d_maskcat = _pack(d_values, d_masks)
    q_lens = np.diff(q_off)
    d_lens = np.diff(d_off)
    scores = np.zeros((n_q, n_d), dtype=np.float64)
    uniform = len(set(q_lens.tolist())) == 1 and len(set(d_lens.tolist())) == 1
    argmax = None

    if uniform:
        lq, ld = int(q_lens[0]), int(d_lens[0])
        if want_argmax:
            argmax = np.zeros((n_q, n_d, lq), dtype=np.int64)
        d_mask_mat = d_maskcat.reshape(n_d, ld)
        q_mask_mat = np.stack([np.asarray(m, dtype=bool) for m in q_masks])
        for qs in range(0, n_q, q_block):
            qe = min(qs + q_block, n_q)
            qb = q_rows[q_off[qs] : q_off[qe]]
            for ds in range(0, n_d, d_block):
                de = min(ds + d_block, n_d)
                db = d_rows[d_off[ds] : d_off[de]]
                sims = (qb @ db.T).reshape(qe - qs, lq, de - ds, ld)
                # -inf scratch keeps masked-out doc rows out of the max;
                # every document is required to have a masked-in row.
                sims = np.where(d_mask_mat[None, None, ds:de, :], sims, -np.inf)
                best = sims.max(axis=3)  # (qb, lq, db)
                if want_argmax:
                    arg = sims.argmax(axis=3) + d_off[ds:de][None, None, :]
                    argmax[qs:qe, ds:de, :] = np.transpose(arg, (0, 2, 1))
                weights = q_mask_mat[qs:qe].astype(np.float64)
                scores[qs:qe, ds:de] = np.einsum("qtd,qt->qd", best, weights)
        return scores, argmax

    # Ragged fallback: per-pair evaluation.
    if want_argmax:
        lq_max = int(q_lens.max()) if n_q else 0
        argmax = np.zeros((n_q, n_d, lq_max), dtype=np.int64)
    for i in range(n_q):
        qm = np.asarray(q_masks[i], dtype=bool)
        qv = q_values[i]
        for j in range(n_d):
            dm = np.asarray(d_masks[j], dtype=bool)
            sims = qv @ d_values[j].T
            sims = np.where(dm[None, :], sims, -np.inf)
            scores[i, j] = float(sims.max(axis=1)[qm].sum())
            if want_argmax:
                argmax[i, j, : qv.shape[0]] = sims.argmax(axis=1) + d_off[j]
    return scores, argmax
