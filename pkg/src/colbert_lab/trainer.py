"""Large-effective-batch contrastive training.

Contrastive losses couple every sample in the batch through the softmax
denominator, so plain gradient accumulation over micro-batches does not
reproduce the full-batch gradient. Two equivalent strategies do, and both
are implemented here against the same loss builders:

* ``train_step_gradcache``: three passes. (1) encode every chunk without
  recording, keeping only the representation values; (2) build the
  full-batch loss on those representations alone and differentiate it,
  yielding one cotangent per representation; (3) re-encode each chunk with
  recording and inject its cached cotangents via ``backward_from``,
  accumulating parameter gradients chunk by chunk.
* ``train_step_gathered``: simulated data-parallel workers. Each worker
  encodes only its shard with recording, receives every other shard's
  representations as constants, computes the full-batch loss, and
  backpropagates through its local representations; the per-worker gradient
  stores are summed in worker order. The temperature parameter is owned by
  worker 0 so the sum matches the full-batch gradient exactly once.

Distillation decomposes per query, so the KD phase may additionally use
plain accumulation (``train_step_accumulated``); the others may not.

The optimizer is Adam with bias correction and decoupled weight decay
(never applied to the temperature). Batches are always drawn from a single
data source at a time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradStore, Node, Tape
from .encoder import (
    EncoderConfig,
    EncoderParams,
    MultiVectorRep,
    TokenSequence,
    dense_as_rep,
    encode_dense,
    encode_late,
)
from .errors import ConfigError, ContractError, DivergenceError, InputError
from .losses import (
    TemperatureParam,
    infonce,
    kd_kl_batch,
    supervised_contrastive,
)
from .scoring import ScoreMatrix


@dataclass
class TrainSample:
    """One tokenized training example: a query plus its candidate documents.

    ``docs`` holds [positive] for pairs, [positive, negatives...] for
    triples, and the scored candidate list (positive first) for KD, with
    ``teacher`` carrying the aligned teacher scores.
    """

    query: TokenSequence
    docs: list[TokenSequence]
    teacher: np.ndarray | None = None


@dataclass
class LossSpec:
    kind: str  # "infonce" | "supervised" | "kd"
    temp: TemperatureParam
    enc_cfg: EncoderConfig
    interaction: str = "late"
    include_in_batch: bool = True
    query_expansion: bool = False

    def __post_init__(self):
        if self.kind not in ("infonce", "supervised", "kd"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.interaction not in ("late", "dense"):
            raise ConfigError(f"unknown interaction {self.interaction!r}")


@dataclass
class ChunkPlan:
    effective_batch: int
    chunk_size: int
    bounds: list[tuple[int, int]]

    @classmethod
    def make(cls, effective_batch: int, chunk_size: int) -> "ChunkPlan":
        if effective_batch < 1 or chunk_size < 1:
            raise ConfigError("batch and chunk sizes must be >= 1")
        bounds = [
            (s, min(s + chunk_size, effective_batch))
            for s in range(0, effective_batch, chunk_size)
        ]
        return cls(effective_batch=effective_batch, chunk_size=chunk_size, bounds=bounds)

    def validate(self, batch_len: int) -> None:
        if self.effective_batch != batch_len:
            raise ContractError(
                f"plan covers {self.effective_batch} samples, batch has {batch_len}"
            )
        pos = 0
        for s, e in self.bounds:
            if s != pos or e <= s:
                raise ContractError("chunks must partition the batch in order")
            pos = e
        if pos != batch_len:
            raise ContractError("chunks do not cover the batch")


@dataclass
class WorkerSet:
    worker_count: int
    shards: list[range]

    @classmethod
    def make(cls, worker_count: int, batch_size: int) -> "WorkerSet":
        if worker_count < 1:
            raise ContractError("worker_count must be >= 1")
        shards = []
        for w in range(worker_count):
            start = (w * batch_size) // worker_count
            end = ((w + 1) * batch_size) // worker_count
            if end <= start:
                raise ContractError(
                    f"worker {w} would get an empty shard for batch {batch_size}"
                )
            shards.append(range(start, end))
        return cls(worker_count=worker_count, shards=shards)


@dataclass
class TrainStepReport:
    loss: float
    grad_norm: float
    tau: float
    chunk_count: int
    wall_time: float
    instrumentation: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("loss", "grad_norm", "tau"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise DivergenceError(f"non-finite {name} ({v}) after training step")


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0


class OptimizerState:
    """Adam moments per parameter name plus the step counter."""

    NO_DECAY = frozenset({"log_tau"})

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def trainable_params(params: EncoderParams, temp: TemperatureParam) -> dict[str, np.ndarray]:
    out = dict(params.named())
    if temp.trainable:
        out["log_tau"] = temp.log_tau
    return out


def adam_update(opt: OptimizerState, grads: GradStore, params: dict[str, np.ndarray]) -> None:
    """One Adam step with bias correction; decoupled weight decay on weights only."""
    cfg = opt.cfg
    opt.step += 1
    t = opt.step
    lr = cfg.lr
    if cfg.warmup_steps > 0:
        lr = lr * min(1.0, t / cfg.warmup_steps)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient/parameter shape mismatch for {name}")
        m = opt.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            opt.m[name] = m
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay and name not in OptimizerState.NO_DECAY:
            update = update + cfg.weight_decay * p
        p -= lr * update


# ---------------------------------------------------------------------------
# Representation and loss builders shared by every step variant.
# ---------------------------------------------------------------------------


def _encode_sample(
    params: EncoderParams,
    sample: TrainSample,
    spec: LossSpec,
    tape: Tape | None,
) -> list[MultiVectorRep]:
    reps = []
    for tokens in [sample.query] + sample.docs:
        if spec.interaction == "dense":
            vec = encode_dense(params, tokens, spec.enc_cfg, tape=tape)
            reps.append(dense_as_rep(vec))
        else:
            reps.append(
                encode_late(
                    params,
                    tokens,
                    spec.enc_cfg,
                    query_expansion=spec.query_expansion,
                    tape=tape,
                )
            )
    return reps


def reps_per_sample(batch: list[TrainSample]) -> int:
    return 1 + len(batch[0].docs)


def _as_const_rep(tape: Tape, rep: MultiVectorRep) -> MultiVectorRep:
    return MultiVectorRep(
        vectors=tape.constant(rep.values), scoring_mask=rep.scoring_mask
    )


def _as_leaf_rep(tape: Tape, name: str, rep: MultiVectorRep) -> MultiVectorRep:
    return MultiVectorRep(
        vectors=tape.parameter(name, rep.values), scoring_mask=rep.scoring_mask
    )


def build_loss(
    tape: Tape,
    reps: list[list[MultiVectorRep]],
    batch: list[TrainSample],
    spec: LossSpec,
) -> Node:
    """Assemble the batch loss from per-sample representations on ``tape``."""
    if not batch:
        raise ContractError("empty batch")
    b = len(batch)
    q_vecs = [r[0].vectors for r in reps]
    q_masks = [r[0].scoring_mask for r in reps]
    if spec.kind == "infonce":
        if any(len(r) != 2 for r in reps):
            raise ContractError("in-batch contrastive training needs (query, positive) pairs")
        node = tape.score_matrix_op(
            q_vecs, [r[1].vectors for r in reps], q_masks, [r[1].scoring_mask for r in reps]
        )
        sm = ScoreMatrix(
            values=node,
            row_ids=[str(i) for i in range(b)],
            col_ids=[str(i) for i in range(b)],
            diagonal_is_positive=True,
            interaction=spec.interaction,
        )
        return infonce(sm, spec.temp)
    if spec.kind == "supervised":
        if any(len(r) < 2 for r in reps):
            raise ContractError("supervised training needs (query, positive, negatives...)")
        pos_cells = [
            tape.score_matrix_op([q_vecs[i]], [reps[i][1].vectors], [q_masks[i]], [reps[i][1].scoring_mask])
            for i in range(b)
        ]
        pos_col = tape.concat_rows(pos_cells)
        neg_rows = None
        if len(reps[0]) > 2:
            neg_rows = tape.concat_rows(
                [
                    tape.score_matrix_op(
                        [q_vecs[i]],
                        [r.vectors for r in reps[i][2:]],
                        [q_masks[i]],
                        [r.scoring_mask for r in reps[i][2:]],
                    )
                    for i in range(b)
                ]
            )
        in_batch = None
        if spec.include_in_batch:
            in_batch = tape.score_matrix_op(
                q_vecs, [r[1].vectors for r in reps], q_masks, [r[1].scoring_mask for r in reps]
            )
        return supervised_contrastive(
            pos_col,
            neg_rows,
            spec.temp,
            include_in_batch=spec.include_in_batch,
            in_batch_scores=in_batch,
        )
    # KD
    if any(s.teacher is None for s in batch):
        raise ContractError("distillation batches need teacher scores")
    student = tape.concat_rows(
        [
            tape.score_matrix_op(
                [q_vecs[i]],
                [r.vectors for r in reps[i][1:]],
                [q_masks[i]],
                [r.scoring_mask for r in reps[i][1:]],
            )
            for i in range(b)
        ]
    )
    teacher = np.vstack([np.asarray(s.teacher, dtype=np.float64).reshape(1, -1) for s in batch])
    return kd_kl_batch(teacher, student)


def _loss_value(loss: Node) -> float:
    val = float(loss.value[0, 0])
    if not np.isfinite(val):
        raise DivergenceError(f"non-finite loss {val}")
    return val


def _forward_loss(tape, params, batch, spec):
    try:
        reps = [_encode_sample(params, s, spec, tape) for s in batch]
        loss = build_loss(tape, reps, batch, spec)
    except InputError as exc:
        raise DivergenceError(f"non-finite values during forward pass: {exc}") from exc
    return reps, loss


# ---------------------------------------------------------------------------
# Step variants.
# ---------------------------------------------------------------------------


def train_step_full(
    params: EncoderParams,
    batch: list[TrainSample],
    spec: LossSpec,
    opt: OptimizerState,
    apply_update: bool = True,
) -> TrainStepReport:
    """Reference path: encode everything on one tape, one backward, one update."""
    if not batch:
        raise ContractError("empty batch")
    t0 = time.perf_counter()
    tape = Tape()
    _, loss = _forward_loss(tape, params, batch, spec)
    loss_val = _loss_value(loss)
    grads = tape.backward(loss)
    if apply_update:
        adam_update(opt, grads, trainable_params(params, spec.temp))
    return TrainStepReport(
        loss=loss_val,
        grad_norm=grads.global_norm(),
        tau=spec.temp.tau,
        chunk_count=1,
        wall_time=time.perf_counter() - t0,
        instrumentation={"grads": grads},
    )


def _rep_level_backward(batch, spec, rep_vals):
    """Pass 2 of GradCache: loss on representations alone, one cotangent each."""
    tape = Tape()
    reps = [
        [_as_leaf_rep(tape, f"rep:{i}:{k}", rep) for k, rep in enumerate(sample_reps)]
        for i, sample_reps in enumerate(rep_vals)
    ]
    loss = build_loss(tape, reps, batch, spec)
    loss_val = _loss_value(loss)
    grads = tape.backward(loss)
    return loss_val, grads


def train_step_gradcache(
    params: EncoderParams,
    batch: list[TrainSample],
    spec: LossSpec,
    chunk_plan: ChunkPlan,
    opt: OptimizerState,
    apply_update: bool = True,
) -> TrainStepReport:
    """Chunked training whose gradients match ``train_step_full``.

    Memory instrumentation records the peak number of representations alive
    with recording during pass 3 (one chunk's worth) and the number of
    cached cotangents (one per representation in the batch).
    """
    chunk_plan.validate(len(batch))
    t0 = time.perf_counter()
    # Pass 1: frozen chunk forwards; only representation values survive.
    rep_vals: list[list[MultiVectorRep]] = []
    for s, e in chunk_plan.bounds:
        for sample in batch[s:e]:
            rep_vals.append(_encode_sample(params, sample, spec, tape=None))
    # Pass 2: full-batch loss on representations, cotangent per representation.
    try:
        loss_val, rep_grads = _rep_level_backward(batch, spec, rep_vals)
    except InputError as exc:
        raise DivergenceError(f"non-finite values during forward pass: {exc}") from exc
    total = GradStore()
    if spec.temp.trainable:
        total.accumulate(GradStore({"log_tau": rep_grads["log_tau"].copy()}))
    n_cotangents = sum(len(r) for r in rep_vals)
    # Pass 3: recorded chunk replays with injected cotangents.
    peak_live = 0
    for s, e in chunk_plan.bounds:
        tape = Tape()
        seeds = []
        live = 0
        for i in range(s, e):
            reps = _encode_sample(params, batch[i], spec, tape)
            live += len(reps)
            for k, rep in enumerate(reps):
                seeds.append((rep.vectors, rep_grads[f"rep:{i}:{k}"]))
        peak_live = max(peak_live, live)
        total.accumulate(tape.backward_from_many(seeds))
    if apply_update:
        adam_update(opt, total, trainable_params(params, spec.temp))
    return TrainStepReport(
        loss=loss_val,
        grad_norm=total.global_norm(),
        tau=spec.temp.tau,
        chunk_count=len(chunk_plan.bounds),
        wall_time=time.perf_counter() - t0,
        instrumentation={
            "grads": total,
            "peak_live_reps": peak_live,
            "cached_cotangents": n_cotangents,
        },
    )


def _worker_temp(spec: LossSpec, worker: int) -> LossSpec:
    """Only worker 0 owns the temperature so the gradient sum counts it once."""
    if worker == 0 or not spec.temp.trainable:
        return spec
    frozen = TemperatureParam(log_tau=spec.temp.log_tau, trainable=False)
    return LossSpec(
        kind=spec.kind,
        temp=frozen,
        enc_cfg=spec.enc_cfg,
        interaction=spec.interaction,
        include_in_batch=spec.include_in_batch,
        query_expansion=spec.query_expansion,
    )


def train_step_gathered(
    params: EncoderParams,
    batch: list[TrainSample],
    spec: LossSpec,
    workers: WorkerSet,
    opt: OptimizerState,
    chunk_size: int | None = None,
    apply_update: bool = True,
) -> TrainStepReport:
    """Simulated multi-worker step with representation gathering.

    Every worker sees the full-batch loss but records only its own shard;
    per-worker gradient stores are summed in worker index order, so the
    result is independent of the order workers actually execute in. Passing
    ``chunk_size`` makes each worker run GradCache within its shard.
    """
    if not batch:
        raise ContractError("empty batch")
    covered = sorted(i for shard in workers.shards for i in shard)
    if covered != list(range(len(batch))):
        raise ContractError("worker shards do not partition the batch")
    t0 = time.perf_counter()
    frozen_reps = [_encode_sample(params, s, spec, tape=None) for s in batch]
    stores: list[GradStore] = []
    loss_val = None
    for w, shard in enumerate(workers.shards):
        wspec = _worker_temp(spec, w)
        local = set(shard)
        if chunk_size is None:
            tape = Tape()
            reps = []
            for i, sample in enumerate(batch):
                if i in local:
                    reps.append(_encode_sample(params, sample, wspec, tape))
                else:
                    reps.append([_as_const_rep(tape, r) for r in frozen_reps[i]])
            try:
                loss = build_loss(tape, reps, batch, wspec)
                lval = _loss_value(loss)
            except InputError as exc:
                raise DivergenceError(f"non-finite values during forward pass: {exc}") from exc
            stores.append(tape.backward(loss))
        else:
            lval, store = _worker_gradcache(params, batch, wspec, shard, frozen_reps, chunk_size)
            stores.append(store)
        if w == 0:
            loss_val = lval
    total = GradStore()
    for store in stores:  # fixed reduction order: worker 0, 1, ...
        total.accumulate(store)
    if apply_update:
        adam_update(opt, total, trainable_params(params, spec.temp))
    return TrainStepReport(
        loss=loss_val,
        grad_norm=total.global_norm(),
        tau=spec.temp.tau,
        chunk_count=workers.worker_count,
        wall_time=time.perf_counter() - t0,
        instrumentation={"grads": total},
    )


def _worker_gradcache(params, batch, wspec, shard, frozen_reps, chunk_size):
    """GradCache restricted to one worker's shard, other reps held constant."""
    local = list(shard)
    local_set = set(local)
    tape2 = Tape()
    reps = []
    for i, _ in enumerate(batch):
        if i in local_set:
            reps.append(
                [
                    _as_leaf_rep(tape2, f"rep:{i}:{k}", r)
                    for k, r in enumerate(frozen_reps[i])
                ]
            )
        else:
            reps.append([_as_const_rep(tape2, r) for r in frozen_reps[i]])
    try:
        loss = build_loss(tape2, reps, batch, wspec)
        lval = _loss_value(loss)
    except InputError as exc:
        raise DivergenceError(f"non-finite values during forward pass: {exc}") from exc
    rep_grads = tape2.backward(loss)
    store = GradStore()
    if wspec.temp.trainable:
        store.accumulate(GradStore({"log_tau": rep_grads["log_tau"].copy()}))
    for cs in range(0, len(local), chunk_size):
        chunk = local[cs : cs + chunk_size]
        tape = Tape()
        seeds = []
        for i in chunk:
            sample_reps = _encode_sample(params, batch[i], wspec, tape)
            for k, rep in enumerate(sample_reps):
                seeds.append((rep.vectors, rep_grads[f"rep:{i}:{k}"]))
        store.accumulate(tape.backward_from_many(seeds))
    return lval, store


def train_step_accumulated(
    params: EncoderParams,
    batch: list[TrainSample],
    spec: LossSpec,
    accum_factor: int,
    opt: OptimizerState,
    apply_update: bool = True,
) -> TrainStepReport:
    """Plain gradient accumulation; valid only for per-query-independent
    losses (distillation), where micro-batch gradients weighted by size sum
    to the full-batch gradient exactly."""
    if spec.kind != "kd":
        raise ContractError("plain accumulation is only valid for the distillation loss")
    if accum_factor < 1 or accum_factor > len(batch):
        raise ContractError(f"accumulation factor {accum_factor} does not fit batch")
    t0 = time.perf_counter()
    n = len(batch)
    total = GradStore()
    loss_val = 0.0
    bounds = [
        ((w * n) // accum_factor, ((w + 1) * n) // accum_factor)
        for w in range(accum_factor)
    ]
    for s, e in bounds:
        micro = batch[s:e]
        tape = Tape()
        _, loss = _forward_loss(tape, params, micro, spec)
        weight = (e - s) / n
        loss_val += weight * _loss_value(loss)
        total.accumulate(tape.backward(loss).scaled(weight))
    if apply_update:
        adam_update(opt, total, trainable_params(params, spec.temp))
    return TrainStepReport(
        loss=loss_val,
        grad_norm=total.global_norm(),
        tau=spec.temp.tau,
        chunk_count=accum_factor,
        wall_time=time.perf_counter() - t0,
        instrumentation={"grads": total},
    )


# ---------------------------------------------------------------------------
# Batch sampling.
# ---------------------------------------------------------------------------


def single_source_batches(sources, batch_size: int, seed: int):
    """Yield ``(source_id, samples)`` batches, each from exactly one source.

    The source of every batch is drawn with probability proportional to its
    remaining sample count; each sample appears at most once per epoch and
    leftovers smaller than a batch are dropped.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    sizes = [len(s.samples) for s in sources]
    if not sources or all(n < batch_size for n in sizes):
        raise ConfigError(
            f"no source holds at least one batch of {batch_size} samples"
        )
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(n) for n in sizes]
    cursors = [0] * len(sources)
    while True:
        remaining = np.array(
            [n - c for n, c in zip(sizes, cursors)], dtype=np.float64
        )
        eligible = np.flatnonzero(remaining >= batch_size)
        if eligible.size == 0:
            return
        weights = remaining[eligible]
        pick = int(rng.choice(eligible, p=weights / weights.sum()))
        take = perms[pick][cursors[pick] : cursors[pick] + batch_size]
        cursors[pick] += batch_size
        yield sources[pick].source_id, [sources[pick].samples[i] for i in take]
