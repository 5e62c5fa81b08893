"""The three training losses, each differentiable through the tape.

* ``infonce``: softmax cross-entropy over an in-batch score matrix whose
  diagonal holds the positives, with a temperature that can itself be a
  trainable parameter (as ``log tau``, so positivity is built in).
* ``supervised_contrastive``: cross-entropy of each query's positive against
  its mined hard negatives, optionally extended with the other in-batch
  positives.
* ``kd_kl``: KL divergence from the teacher's softmax distribution to the
  student's, per query, averaged over the batch; gradients reach the student
  scores only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NEG_MASK, Node, Tape, as_matrix
from .errors import ContractError, ShapeError
from .scoring import ScoreMatrix


@dataclass
class TemperatureParam:
    """Softmax temperature stored as log(tau); may be trainable or fixed."""

    log_tau: np.ndarray  # 1x1, mutated in place by the optimizer when trainable
    trainable: bool = True

    @classmethod
    def learnable(cls, initial: float = 0.2) -> "TemperatureParam":
        if initial <= 0:
            raise ContractError("temperature must be positive")
        return cls(log_tau=as_matrix(np.log(initial)), trainable=True)

    @classmethod
    def fixed(cls, value: float = 0.2) -> "TemperatureParam":
        if value <= 0:
            raise ContractError("temperature must be positive")
        return cls(log_tau=as_matrix(np.log(value)), trainable=False)

    @property
    def tau(self) -> float:
        with np.errstate(over="ignore"):  # inf is reported, callers validate
            return float(np.exp(self.log_tau[0, 0]))

    def copy(self) -> "TemperatureParam":
        return TemperatureParam(log_tau=self.log_tau.copy(), trainable=self.trainable)


def fix_temperature(temp: TemperatureParam, value: float) -> TemperatureParam:
    """Freeze the temperature at ``value``; later losses treat it as constant."""
    if value <= 0:
        raise ContractError("temperature must be positive")
    return TemperatureParam(log_tau=as_matrix(np.log(value)), trainable=False)


def _tape_of(values) -> tuple[Tape, Node]:
    if isinstance(values, Node):
        return values.tape, values
    tape = Tape()
    return tape, tape.constant(values)


def _scaled_scores(tape: Tape, scores: Node, temp: TemperatureParam) -> Node:
    """scores / tau, differentiable in log_tau when the temperature trains."""
    if temp.trainable:
        log_tau = tape.parameter("log_tau", temp.log_tau)
        inv_tau = tape.exp(tape.scale(log_tau, -1.0))
        return tape.mul(scores, inv_tau)
    return tape.scale(scores, 1.0 / temp.tau)


def _mean_rows(tape: Tape, col: Node) -> Node:
    n = col.shape[0]
    ones = tape.constant(np.ones((1, n)))
    return tape.scale(tape.matmul(ones, col), 1.0 / n)


def infonce(scores: ScoreMatrix, temp: TemperatureParam) -> Node:
    """Mean over rows of logsumexp(s_i/tau) - s_ii/tau."""
    tape, s = _tape_of(scores.values)
    b, b2 = s.shape
    if b != b2:
        raise ContractError(f"in-batch scores must be square, got {s.shape}")
    if not scores.diagonal_is_positive:
        raise ContractError("infonce expects the diagonal-positive layout")
    scaled = _scaled_scores(tape, s, temp)
    lse = tape.logsumexp_rows(scaled)
    diag = tape.row_sum(tape.mul(scaled, tape.constant(np.eye(b))))
    per_query = tape.add(lse, tape.scale(diag, -1.0))
    return _mean_rows(tape, per_query)


def supervised_contrastive(
    pos_scores,
    neg_scores,
    temp: TemperatureParam,
    include_in_batch: bool = True,
    in_batch_scores=None,
) -> Node:
    """Cross-entropy of the positive against hard negatives (and, optionally,
    the other in-batch positives). ``pos_scores`` is Bx1, ``neg_scores`` BxK,
    ``in_batch_scores`` the BxB query-positive matrix whose diagonal repeats
    the positives and is therefore excluded."""
    tape, pos = _tape_of(pos_scores)
    if pos.shape[1] != 1:
        raise ShapeError(f"pos_scores must be a column, got {pos.shape}")
    b = pos.shape[0]
    parts = [pos]
    if neg_scores is not None:
        neg = tape.lift(neg_scores)
        if neg.shape[0] != b:
            raise ShapeError(f"neg_scores rows {neg.shape[0]} != batch {b}")
        if neg.shape[1] < 1:
            raise ContractError("neg_scores must have at least one column")
        parts.append(neg)
    elif not include_in_batch:
        raise ContractError("need hard negatives when in-batch negatives are off")
    if include_in_batch:
        if in_batch_scores is None:
            raise ContractError("include_in_batch requires in_batch_scores")
        ib = tape.lift(in_batch_scores)
        if ib.shape != (b, b):
            raise ShapeError(f"in_batch_scores must be {b}x{b}, got {ib.shape}")
        # Knock the duplicated own-positive off the diagonal; the penalty
        # underflows to zero weight under the softmax.
        masked = tape.add(ib, tape.constant(np.eye(b) * NEG_MASK))
        parts.append(masked)
    candidates = parts[0] if len(parts) == 1 else tape.concat_cols(parts)
    scaled = _scaled_scores(tape, candidates, temp)
    lse = tape.logsumexp_rows(scaled)
    pick_pos = np.zeros((b, candidates.shape[1]))
    pick_pos[:, 0] = 1.0
    pos_scaled = tape.row_sum(tape.mul(scaled, tape.constant(pick_pos)))
    per_query = tape.add(lse, tape.scale(pos_scaled, -1.0))
    return _mean_rows(tape, per_query)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def kd_kl_batch(teacher_scores: np.ndarray, student_scores) -> Node:
    """KL(softmax(teacher) || softmax(student)) per row, averaged over rows."""
    teacher = as_matrix(teacher_scores, "teacher_scores")
    tape, student = _tape_of(student_scores)
    if teacher.shape != student.shape:
        raise ContractError(
            f"teacher/student shape mismatch: {teacher.shape} vs {student.shape}"
        )
    if teacher.shape[1] < 2:
        raise ContractError("distillation needs at least two candidates per query")
    p = _softmax_rows(teacher)
    entropy = (p * np.log(p)).sum(axis=1, keepdims=True)  # p > 0 by construction
    log_q = tape.broadcast_add(student, tape.scale(tape.logsumexp_rows(student), -1.0))
    cross = tape.row_sum(tape.mul(tape.constant(p), log_q))
    per_query = tape.add(tape.constant(entropy), tape.scale(cross, -1.0))
    return _mean_rows(tape, per_query)


def kd_kl(teacher_row, student_row) -> Node:
    """Single-query KL divergence; the batched form averages this over rows."""
    teacher = as_matrix(teacher_row, "teacher_row")
    if teacher.shape[0] != 1:
        teacher = teacher.reshape(1, -1)
    return kd_kl_batch(teacher, student_row)
