"""Reverse-mode automatic differentiation over dense float64 matrices.

Every differentiable computation in the package is recorded on a ``Tape``:
an append-only list of primitive applications whose inputs always reference
earlier nodes, so one reverse sweep yields exact gradients. The primitive
set is small (matmul, additions, elementwise ops, row reductions, embedding
gather, row normalization, logsumexp, column/row concatenation) plus one
batched MaxSim score-matrix operation whose backward routes each max through
its recorded argmax (ties to the lowest index).

``backward`` differentiates a scalar loss; ``backward_from`` injects an
arbitrary cotangent at an interior node, which is what lets the trainer
split a large contrastive batch into chunks and replay per-chunk forwards
against cached representation gradients.

Tapes are single-threaded objects and are never shared across workers.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, InputError, ShapeError
from .kernels import blocked_score_matrix

DEFAULT_NORM_EPS = 1e-12

# Additive penalty used by callers to exclude entries from a softmax.
NEG_MASK = -1e9


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array (scalars/vectors get rows)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {arr.ndim}-D")
    return np.ascontiguousarray(arr)


class Node:
    """Handle to one tape entry."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.nid]

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape.values[self.nid].shape

    def __repr__(self):
        return f"Node(id={self.nid}, shape={self.shape})"


class GradStore:
    """Per-parameter gradient matrices keyed by parameter name."""

    def __init__(self, grads: dict[str, np.ndarray] | None = None):
        self.grads: dict[str, np.ndarray] = grads or {}
        self.count = 1 if grads else 0

    def __contains__(self, name):
        return name in self.grads

    def __getitem__(self, name) -> np.ndarray:
        return self.grads[name]

    def get(self, name, default=None):
        return self.grads.get(name, default)

    def names(self):
        return self.grads.keys()

    def accumulate(self, other: "GradStore") -> "GradStore":
        """Add another store in place. Addition is elementwise, shape-checked."""
        for name, g in other.grads.items():
            if name in self.grads:
                if self.grads[name].shape != g.shape:
                    raise ShapeError(
                        f"gradient shape mismatch for {name}: "
                        f"{self.grads[name].shape} vs {g.shape}"
                    )
                self.grads[name] = self.grads[name] + g
            else:
                self.grads[name] = g.copy()
        self.count += other.count
        return self

    def scaled(self, c: float) -> "GradStore":
        out = GradStore({k: v * c for k, v in self.grads.items()})
        out.count = self.count
        return out

    def global_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def max_rel_diff(self, other: "GradStore", floor: float = 1e-12) -> float:
        """Largest elementwise relative difference against another store."""
        worst = 0.0
        names = set(self.grads) | set(other.grads)
        for name in names:
            a = self.grads.get(name)
            b = other.grads.get(name)
            if a is None or b is None:
                a = a if a is not None else np.zeros_like(b)
                b = b if b is not None else np.zeros_like(a)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
            worst = max(worst, float(np.max(np.abs(a - b) / denom)))
        return worst


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored as ``(kind, input ids, aux)`` with values kept alongside;
    input ids always reference earlier nodes, so the list is topologically
    ordered by construction and ``replay`` can rebuild every value.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[tuple[str, tuple[int, ...], tuple]] = []
        self.needs_grad: list[bool] = []
        self.param_nodes: dict[str, int] = {}

    # -- node creation ------------------------------------------------------

    def _push(self, kind, inputs, value, aux=(), tracked=False) -> Node:
        if not np.all(np.isfinite(value)):
            raise InputError(f"non-finite values produced by {kind}")
        nid = len(self.values)
        self.values.append(value)
        self.ops.append((kind, inputs, aux))
        self.needs_grad.append(tracked)
        return Node(self, nid)

    def constant(self, x) -> Node:
        return self._push("const", (), as_matrix(x, "constant"))

    def parameter(self, name: str, x) -> Node:
        """Tracked leaf. Re-entering the same name returns the existing node."""
        if name in self.param_nodes:
            return Node(self, self.param_nodes[name])
        node = self._push("param", (), as_matrix(x, name), aux=(name,), tracked=True)
        self.param_nodes[name] = node.nid
        return node

    def lift(self, x) -> Node:
        """Return ``x`` as a node on this tape (constants are wrapped)."""
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractError("node belongs to a different tape")
            return x
        return self.constant(x)

    _wrap = lift

    def _record(self, kind, inputs: tuple[Node, ...], value, aux=()) -> Node:
        tracked = any(self.needs_grad[n.nid] for n in inputs)
        return self._push(kind, tuple(n.nid for n in inputs), value, aux, tracked)

    # -- primitives ---------------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
        return self._record("matmul", (a, b), av @ bv)

    def add(self, a, b) -> Node:
        a, b = self._wrap(a), self._wrap(b)
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return self._record("add", (a, b), a.value + b.value)

    def broadcast_add(self, m, v) -> Node:
        """Add a 1xC row, an Rx1 column, or a 1x1 scalar to every row/col/cell."""
        m, v = self._wrap(m), self._wrap(v)
        mv, vv = m.value, v.value
        if vv.shape == (1, 1):
            mode = "scalar"
        elif vv.shape == (1, mv.shape[1]):
            mode = "row"
        elif vv.shape == (mv.shape[0], 1):
            mode = "col"
        else:
            raise ShapeError(f"cannot broadcast {vv.shape} onto {mv.shape}")
        return self._record("badd", (m, v), mv + vv, aux=(mode,))

    def mul(self, a, b) -> Node:
        """Elementwise product; either operand may be a 1x1 scalar node."""
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            mode = "same"
        elif bv.shape == (1, 1):
            mode = "bscalar"
        elif av.shape == (1, 1):
            mode = "ascalar"
        else:
            raise ShapeError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
        return self._record("mul", (a, b), av * bv, aux=(mode,))

    def scale(self, a, c: float) -> Node:
        a = self._wrap(a)
        return self._record("scale", (a,), a.value * float(c), aux=(float(c),))

    def tanh(self, a) -> Node:
        a = self._wrap(a)
        return self._record("tanh", (a,), np.tanh(a.value))

    def exp(self, a) -> Node:
        a = self._wrap(a)
        with np.errstate(over="ignore"):  # overflow -> inf -> rejected by _push
            val = np.exp(a.value)
        return self._record("exp", (a,), val)

    def log(self, a) -> Node:
        a = self._wrap(a)
        if np.any(a.value <= 0):
            raise InputError("log requires strictly positive inputs")
        return self._record("log", (a,), np.log(a.value))

    def row_sum(self, a) -> Node:
        a = self._wrap(a)
        return self._record("rowsum", (a,), a.value.sum(axis=1, keepdims=True))

    def row_max(self, a) -> Node:
        """Per-row maximum; gradient routes to the recorded argmax (lowest index on ties)."""
        a = self._wrap(a)
        arg = a.value.argmax(axis=1)
        val = a.value[np.arange(a.shape[0]), arg].reshape(-1, 1)
        return self._record("rowmax", (a,), val, aux=(arg,))

    def gather_rows(self, table, ids) -> Node:
        table = self._wrap(table)
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise InputError(
                f"row index out of range for table with {table.shape[0]} rows"
            )
        return self._record(
            "gather", (table,), table.value[ids], aux=(ids, table.shape[0])
        )

    def l2norm_rows(self, a, eps: float = DEFAULT_NORM_EPS) -> Node:
        if eps <= 0:
            raise ContractError("epsilon must be positive")
        a = self._wrap(a)
        norms = np.linalg.norm(a.value, axis=1, keepdims=True)
        denom = np.maximum(norms, eps)
        return self._record("l2norm", (a,), a.value / denom, aux=(norms, float(eps)))

    def logsumexp_rows(self, a) -> Node:
        a = self._wrap(a)
        if a.shape[1] < 1:
            raise ContractError("logsumexp needs at least one column")
        m = a.value.max(axis=1, keepdims=True)
        val = m + np.log(np.exp(a.value - m).sum(axis=1, keepdims=True))
        return self._record("lse", (a,), val)

    def concat_rows(self, parts) -> Node:
        parts = [self._wrap(p) for p in parts]
        cols = {p.shape[1] for p in parts}
        if len(cols) != 1:
            raise ShapeError(f"concat_rows needs equal column counts, got {cols}")
        sizes = tuple(p.shape[0] for p in parts)
        return self._record(
            "vcat", tuple(parts), np.vstack([p.value for p in parts]), aux=(sizes,)
        )

    def concat_cols(self, parts) -> Node:
        parts = [self._wrap(p) for p in parts]
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols needs equal row counts, got {rows}")
        sizes = tuple(p.shape[1] for p in parts)
        return self._record(
            "hcat", tuple(parts), np.hstack([p.value for p in parts]), aux=(sizes,)
        )

    def score_matrix_op(self, q_nodes, d_nodes, q_masks, d_masks) -> Node:
        """Batched MaxSim: out[i, j] pairs query i with document j.

        Masked-out rows contribute nothing; gradients flow to the argmax
        rows only. Single-row representations reduce to plain dot products,
        which is how dense-mode scoring shares this operation.
        """
        if not q_nodes or not d_nodes:
            raise ContractError("score matrix requires non-empty inputs")
        q_nodes = [self._wrap(q) for q in q_nodes]
        d_nodes = [self._wrap(d) for d in d_nodes]
        dims = {n.shape[1] for n in q_nodes} | {n.shape[1] for n in d_nodes}
        if len(dims) != 1:
            raise ShapeError(f"representations disagree on vector width: {dims}")
        q_masks = [np.asarray(m, dtype=bool).ravel() for m in q_masks]
        d_masks = [np.asarray(m, dtype=bool).ravel() for m in d_masks]
        for n, m in zip(q_nodes, q_masks):
            if n.shape[0] != m.shape[0]:
                raise ShapeError("query mask length does not match row count")
        for n, m in zip(d_nodes, d_masks):
            if n.shape[0] != m.shape[0]:
                raise ShapeError("document mask length does not match row count")
            if not m.any():
                raise InputError("document has no masked-in rows")
        tracked = any(self.needs_grad[n.nid] for n in q_nodes + d_nodes)
        scores, argmax = blocked_score_matrix(
            [n.value for n in q_nodes],
            [n.value for n in d_nodes],
            q_masks,
            d_masks,
            want_argmax=tracked,
        )
        return self._record(
            "scorematrix",
            tuple(q_nodes) + tuple(d_nodes),
            scores,
            aux=(len(q_nodes), q_masks, d_masks, argmax),
        )

    # -- reverse sweep ------------------------------------------------------

    def backward(self, loss: Node) -> GradStore:
        """Gradients of a scalar loss for every tracked parameter on the tape."""
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be a 1x1 scalar, got {loss.shape}")
        return self._sweep({loss.nid: np.ones((1, 1))})

    def backward_from(self, node: Node, cotangent) -> GradStore:
        """Gradients of <cotangent, node> for every tracked parameter."""
        cot = as_matrix(cotangent, "cotangent")
        if cot.shape != node.shape:
            raise ShapeError(
                f"cotangent shape {cot.shape} does not match node shape {node.shape}"
            )
        return self._sweep({node.nid: cot.copy()})

    def backward_from_many(self, seeds) -> GradStore:
        """One reverse sweep with several (node, cotangent) seeds at once.

        Equivalent to summing ``backward_from`` over the seeds; used by the
        chunked trainer so each replayed chunk is traversed once.
        """
        adjoint: dict[int, np.ndarray] = {}
        for node, cot in seeds:
            cot = as_matrix(cot, "cotangent")
            if cot.shape != node.shape:
                raise ShapeError(
                    f"cotangent shape {cot.shape} does not match node shape {node.shape}"
                )
            if node.nid in adjoint:
                adjoint[node.nid] = adjoint[node.nid] + cot
            else:
                adjoint[node.nid] = cot.copy()
        return self._sweep(adjoint)

    def _sweep(self, adjoint: dict[int, np.ndarray]) -> GradStore:
        grads: dict[str, np.ndarray] = {
            name: np.zeros_like(self.values[nid])
            for name, nid in self.param_nodes.items()
        }

        def push(nid: int, g: np.ndarray):
            if not self.needs_grad[nid]:
                return
            if nid in adjoint:
                adjoint[nid] = adjoint[nid] + g
            else:
                adjoint[nid] = np.array(g, dtype=np.float64, copy=True)

        for nid in range(len(self.ops) - 1, -1, -1):
            g = adjoint.pop(nid, None)
            if g is None:
                continue
            kind, inputs, aux = self.ops[nid]
            if kind == "param":
                grads[aux[0]] += g
                continue
            if kind == "const":
                continue
            vals = [self.values[i] for i in inputs]
            if kind == "matmul":
                push(inputs[0], g @ vals[1].T)
                push(inputs[1], vals[0].T @ g)
            elif kind == "add":
                push(inputs[0], g)
                push(inputs[1], g)
            elif kind == "badd":
                push(inputs[0], g)
                mode = aux[0]
                if mode == "scalar":
                    push(inputs[1], g.sum().reshape(1, 1))
                elif mode == "row":
                    push(inputs[1], g.sum(axis=0, keepdims=True))
                else:
                    push(inputs[1], g.sum(axis=1, keepdims=True))
            elif kind == "mul":
                mode = aux[0]
                if mode == "same":
                    push(inputs[0], g * vals[1])
                    push(inputs[1], g * vals[0])
                elif mode == "bscalar":
                    push(inputs[0], g * vals[1])
                    push(inputs[1], (g * vals[0]).sum().reshape(1, 1))
                else:
                    push(inputs[0], (g * vals[1]).sum().reshape(1, 1))
                    push(inputs[1], g * vals[0])
            elif kind == "scale":
                push(inputs[0], g * aux[0])
            elif kind == "tanh":
                y = self.values[nid]
                push(inputs[0], g * (1.0 - y * y))
            elif kind == "exp":
                push(inputs[0], g * self.values[nid])
            elif kind == "log":
                push(inputs[0], g / vals[0])
            elif kind == "rowsum":
                push(inputs[0], np.broadcast_to(g, vals[0].shape))
            elif kind == "rowmax":
                ga = np.zeros_like(vals[0])
                ga[np.arange(vals[0].shape[0]), aux[0]] = g[:, 0]
                push(inputs[0], ga)
            elif kind == "gather":
                ids, nrows = aux
                gt = np.zeros((nrows, g.shape[1]))
                np.add.at(gt, ids, g)
                push(inputs[0], gt)
            elif kind == "l2norm":
                norms, eps = aux
                y = self.values[nid]
                dots = (g * y).sum(axis=1, keepdims=True)
                big = norms >= eps
                denom = np.maximum(norms, eps)
                ga = np.where(big, (g - y * dots) / denom, g / eps)
                push(inputs[0], ga)
            elif kind == "lse":
                soft = np.exp(vals[0] - self.values[nid])
                push(inputs[0], soft * g)
            elif kind == "vcat":
                start = 0
                for i, size in zip(inputs, aux[0]):
                    push(i, g[start : start + size, :])
                    start += size
            elif kind == "hcat":
                start = 0
                for i, size in zip(inputs, aux[0]):
                    push(i, g[:, start : start + size])
                    start += size
            elif kind == "scorematrix":
                self._score_backward(nid, inputs, aux, g, push)
            else:  # pragma: no cover - defensive
                raise ContractError(f"no gradient rule for op kind {kind}")

        store = GradStore(grads)
        store.count = 1
        return store

    def _score_backward(self, nid, inputs, aux, g, push):
        n_q, q_masks, d_masks, argmax = aux
        if argmax is None:  # inputs were all constants at record time
            return
        q_ids = inputs[:n_q]
        d_ids = inputs[n_q:]
        d_vals = [self.values[i] for i in d_ids]
        d_lens = np.array([v.shape[0] for v in d_vals], dtype=np.int64)
        d_off = np.zeros(len(d_vals) + 1, dtype=np.int64)
        np.cumsum(d_lens, out=d_off[1:])
        d_rows = np.vstack(d_vals)
        d_grad_rows = np.zeros_like(d_rows)
        for qi, q_id in enumerate(q_ids):
            qv = self.values[q_id]
            lq = qv.shape[0]
            qm = q_masks[qi]
            weights = g[qi]  # (n_d,)
            idx = argmax[qi, :, :lq]  # (n_d, lq) packed doc-row indices
            # dQ: each masked-in query row t receives sum_j w_j * docrow(argmax)
            picked = d_rows[idx]  # (n_d, lq, dim)
            gq = np.einsum("j,jtd->td", weights, picked)
            gq[~qm] = 0.0
            push(q_id, gq)
            # dD: scatter w_j * q_t into the winning doc rows
            contrib = weights[:, None, None] * qv[None, :, :]  # (n_d, lq, dim)
            contrib[:, ~qm, :] = 0.0
            np.add.at(
                d_grad_rows,
                idx.reshape(-1),
                contrib.reshape(-1, qv.shape[1]),
            )
        for dj, d_id in enumerate(d_ids):
            push(d_id, d_grad_rows[d_off[dj] : d_off[dj + 1]])

    # -- diagnostics --------------------------------------------------------

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded op from the leaves; used to verify the tape."""
        out: list[np.ndarray] = []
        for nid, (kind, inputs, aux) in enumerate(self.ops):
            assert all(i < nid for i in inputs), "tape is not topologically ordered"
            vals = [out[i] for i in inputs]
            if kind in ("const", "param"):
                out.append(self.values[nid])
            elif kind == "matmul":
                out.append(vals[0] @ vals[1])
            elif kind == "add":
                out.append(vals[0] + vals[1])
            elif kind == "badd":
                out.append(vals[0] + vals[1])
            elif kind == "mul":
                out.append(vals[0] * vals[1])
            elif kind == "scale":
                out.append(vals[0] * aux[0])
            elif kind == "tanh":
                out.append(np.tanh(vals[0]))
            elif kind == "exp":
                out.append(np.exp(vals[0]))
            elif kind == "log":
                out.append(np.log(vals[0]))
            elif kind == "rowsum":
                out.append(vals[0].sum(axis=1, keepdims=True))
            elif kind == "rowmax":
                arg = vals[0].argmax(axis=1)
                out.append(vals[0][np.arange(vals[0].shape[0]), arg].reshape(-1, 1))
            elif kind == "gather":
                out.append(vals[0][aux[0]])
            elif kind == "l2norm":
                norms = np.linalg.norm(vals[0], axis=1, keepdims=True)
                out.append(vals[0] / np.maximum(norms, aux[1]))
            elif kind == "lse":
                m = vals[0].max(axis=1, keepdims=True)
                out.append(m + np.log(np.exp(vals[0] - m).sum(axis=1, keepdims=True)))
            elif kind == "vcat":
                out.append(np.vstack(vals))
            elif kind == "hcat":
                out.append(np.hstack(vals))
            elif kind == "scorematrix":
                n_q, q_masks, d_masks, _ = aux
                scores, _ = blocked_score_matrix(
                    vals[:n_q], vals[n_q:], q_masks, d_masks, want_argmax=False
                )
                out.append(scores)
            else:  # pragma: no cover
                raise ContractError(f"cannot replay op kind {kind}")
        return out

    def num_nodes(self) -> int:
        return len(self.values)
