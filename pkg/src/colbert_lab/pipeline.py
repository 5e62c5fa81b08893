"""Phase orchestration: single phases, the three pipelines, the ablation grid.

A pipeline is unsupervised -> supervised -> distillation, with each phase
initialized from the previous checkpoint. The three variants differ only in
which phases run in dense (pooled single-vector) mode versus late
interaction: (a) both contrastive phases dense, (b) unsupervised dense
only, (c) everything late. Moving from dense to late phases reuses the same
parameters; pooling is a scoring-mode change, not a parameter change.

When a phase config carries a learning-rate range, the phase first sweeps
it (training one run per log-spaced point, selecting by subset nDCG@10) and
then trains the real run at the chosen rate; a temperature marked trainable
learns during the sweep and is fixed to the winning run's value for the
main run.

The ablation grid re-runs the fine-tuning phases (supervised + KD) from a
given starting checkpoint over the 2x2 combinations of prompt usage and
prompt-length compensation, so aligned and misaligned
pre-training/fine-tuning cells are all constructible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, config_hash, save_checkpoint
from .config import DataSettings, ModelSettings, PhaseConfig, PipelineConfig
from .data import (
    DataSource,
    PairSample,
    ScoredListSample,
    TripleSample,
    generate_synthetic,
    load_beir_dir,
    oracle_teacher,
)
from .errors import ConfigError, DivergenceError
from .evaluation import (
    SubsetSpec,
    SweepPoint,
    SweepSpec,
    evaluate,
    evaluate_subset,
    sweep,
)
from .losses import TemperatureParam
from .model import Model, fresh_model
from .trainer import (
    AdamConfig,
    ChunkPlan,
    LossSpec,
    OptimizerState,
    TrainSample,
    TrainStepReport,
    WorkerSet,
    single_source_batches,
    train_step_accumulated,
    train_step_full,
    train_step_gathered,
    train_step_gradcache,
)

_KIND_FOR_PHASE = {"unsupervised": "pairs", "supervised": "triples", "kd": "scored_lists"}


@dataclass
class DataContext:
    corpus: dict[str, str]
    queries: dict[str, str]
    qrels: dict[str, dict[str, int]]
    sources: dict[str, DataSource]

    @classmethod
    def from_settings(cls, ds: DataSettings) -> "DataContext":
        if ds.data == "synthetic":
            from .data import SyntheticSpec

            spec = SyntheticSpec(
                topic_count=ds.topics,
                vocab_per_topic=ds.vocab_per_topic,
                queries_per_topic=ds.queries_per_topic,
                docs_per_topic=ds.docs_per_topic,
                query_len_tokens=ds.query_tokens,
                doc_len_tokens=ds.doc_tokens,
                distractor_rate=ds.distractor_rate,
                seed=ds.data_seed,
            )
            corpus, queries, qrels, sources = generate_synthetic(
                spec,
                negatives_per_query=ds.negatives_per_query,
                kd_candidates=ds.kd_candidates,
                teacher_gamma=ds.teacher_gamma,
            )
            return cls(corpus, queries, qrels, {s.source_id: s for s in sources})
        corpus, queries, qrels = load_beir_dir(ds.data)
        sources = build_sources_from_qrels(
            corpus,
            queries,
            qrels,
            negatives_per_query=ds.negatives_per_query,
            kd_candidates=ds.kd_candidates,
            teacher_gamma=ds.teacher_gamma,
            seed=ds.data_seed,
        )
        return cls(corpus, queries, qrels, {s.source_id: s for s in sources})


def build_sources_from_qrels(
    corpus,
    queries,
    qrels,
    negatives_per_query: int = 4,
    kd_candidates: int = 8,
    teacher_gamma: float = 4.0,
    seed: int = 0,
) -> list[DataSource]:
    """Derive the three source kinds from relevance judgments.

    Negatives and extra KD candidates are seeded draws from the non-relevant
    pool; hard-negative mining with a trained model can replace the random
    triples via :func:`colbert_lab.data.mine_hard_negatives`.
    """
    rng = np.random.default_rng(seed)
    doc_ids = sorted(corpus)
    pairs, triples, scored = [], [], []
    candidate_map: dict[str, list[str]] = {}
    for qid in sorted(queries):
        rels = qrels.get(qid, {})
        positives = [d for d, g in sorted(rels.items()) if g > 0]
        if not positives:
            continue
        pos = positives[0]
        pool = [d for d in doc_ids if rels.get(d, 0) == 0]
        if not pool:
            continue
        pairs.append(PairSample(query_id=qid, doc_id=pos))
        k_neg = min(negatives_per_query, len(pool))
        negs = [pool[int(i)] for i in rng.choice(len(pool), size=k_neg, replace=False)]
        triples.append(TripleSample(query_id=qid, pos_id=pos, neg_ids=negs))
        k_cand = min(kd_candidates - 1, len(pool))
        cands = [pos] + [
            pool[int(i)] for i in rng.choice(len(pool), size=k_cand, replace=False)
        ]
        candidate_map[qid] = cands
    teacher = oracle_teacher(qrels, corpus, queries, teacher_gamma, candidate_map)
    for qid, cands in candidate_map.items():
        scored.append(
            ScoredListSample(query_id=qid, candidate_ids=cands, teacher_scores=teacher[qid])
        )
    return [
        DataSource(source_id="pairs", kind="pairs", samples=pairs),
        DataSource(source_id="triples", kind="triples", samples=triples),
        DataSource(source_id="scored", kind="scored_lists", samples=scored),
    ]


@dataclass
class TrainingLog:
    phase: str
    interaction: str
    chosen_lr: float
    final_tau: float
    steps: list[TrainStepReport] = field(default_factory=list)
    sweep_points: list[SweepPoint] | None = None


def _resolve_sources(cfg: PhaseConfig, data: DataContext) -> list[DataSource]:
    if not cfg.sources:
        raise ConfigError(f"phase {cfg.phase!r} names no data sources")
    expected = _KIND_FOR_PHASE[cfg.phase]
    out = []
    for sid in cfg.sources:
        if sid not in data.sources:
            raise ConfigError(f"unknown data source {sid!r}")
        src = data.sources[sid]
        if src.kind != expected:
            raise ConfigError(
                f"phase {cfg.phase!r} consumes {expected} sources, "
                f"but {sid!r} holds {src.kind}"
            )
        out.append(src)
    return out


def _to_train_samples(raw, kind: str, model: Model, data: DataContext) -> list[TrainSample]:
    samples = []
    for s in raw:
        q = model.tokenize_query(data.queries[s.query_id])
        if kind == "pairs":
            docs = [model.tokenize_doc(data.corpus[s.doc_id])]
            samples.append(TrainSample(query=q, docs=docs))
        elif kind == "triples":
            docs = [model.tokenize_doc(data.corpus[s.pos_id])]
            docs += [model.tokenize_doc(data.corpus[n]) for n in s.neg_ids]
            samples.append(TrainSample(query=q, docs=docs))
        else:
            docs = [model.tokenize_doc(data.corpus[d]) for d in s.candidate_ids]
            samples.append(
                TrainSample(query=q, docs=docs, teacher=np.asarray(s.teacher_scores))
            )
    return samples


def _make_temp(cfg: PhaseConfig) -> TemperatureParam:
    if cfg.phase == "kd":
        return TemperatureParam.fixed(cfg.temperature_value)
    if cfg.temperature == "trainable":
        return TemperatureParam.learnable(cfg.temperature_value)
    return TemperatureParam.fixed(cfg.temperature_value)


def _train_one_run(
    model: Model,
    temp: TemperatureParam,
    cfg: PhaseConfig,
    lr: float,
    sources: list[DataSource],
    data: DataContext,
) -> list[TrainStepReport]:
    """Train ``cfg.epochs`` epochs in place on ``model.params`` and ``temp``."""
    opt = OptimizerState(AdamConfig(lr=lr))
    spec = LossSpec(
        kind=cfg.loss_kind,
        temp=temp,
        enc_cfg=model.enc_cfg,
        interaction=cfg.interaction,
        include_in_batch=cfg.include_in_batch,
        query_expansion=cfg.query_expansion,
    )
    kind = _KIND_FOR_PHASE[cfg.phase]
    reports = []
    for epoch in range(cfg.epochs):
        for _, raw in single_source_batches(sources, cfg.batch_size, [cfg.seed, epoch]):
            batch = _to_train_samples(raw, kind, model, data)
            if cfg.workers > 1:
                report = train_step_gathered(
                    model.params,
                    batch,
                    spec,
                    WorkerSet.make(cfg.workers, len(batch)),
                    opt,
                    chunk_size=cfg.chunk_size or None,
                )
            elif cfg.phase == "kd" and cfg.accum_factor > 1:
                report = train_step_accumulated(model.params, batch, spec, cfg.accum_factor, opt)
            elif cfg.chunk_size and cfg.chunk_size < len(batch):
                report = train_step_gradcache(
                    model.params, batch, spec, ChunkPlan.make(len(batch), cfg.chunk_size), opt
                )
            else:
                report = train_step_full(model.params, batch, spec, opt)
            report.instrumentation.pop("grads", None)
            reports.append(report)
    return reports


def _phase_model(
    cfg: PhaseConfig, init: Checkpoint | None, model_settings: ModelSettings
) -> tuple[Model, TemperatureParam]:
    if init is None:
        model = fresh_model(
            model_settings.tok_cfg(),
            model_settings.enc_cfg(),
            cfg.budget(),
            seed=cfg.seed,
            prompts_enabled=cfg.prompts_enabled,
            query_expansion=cfg.query_expansion,
            interaction=cfg.interaction,
        )
        return model, _make_temp(cfg)
    base, _ = init.to_model()
    model = base.with_flags(
        budget=cfg.budget(),
        prompts_enabled=cfg.prompts_enabled,
        query_expansion=cfg.query_expansion,
        interaction=cfg.interaction,
    )
    return model, _make_temp(cfg)


def sweep_phase(
    cfg: PhaseConfig,
    init: Checkpoint | None,
    data: DataContext,
    model_settings: ModelSettings | None = None,
    subset: SubsetSpec | None = None,
) -> tuple[float, list[SweepPoint]]:
    """Train one run per log-spaced LR and select by subset nDCG@10.

    Each point's payload records the run's final temperature, so a trainable
    temperature can be fixed to the winning value afterwards.
    """
    model_settings = model_settings or ModelSettings()
    sources = _resolve_sources(cfg, data)
    subset = subset or SubsetSpec(seed=cfg.seed)

    def runner(lr: float):
        m, t = _phase_model(cfg, init, model_settings)
        _train_one_run(m, t, cfg, lr, sources, data)
        rep = evaluate_subset(
            m, data.corpus, data.queries, data.qrels, subset, k=10,
            interaction=cfg.interaction,
        )
        return rep.mean, t.tau

    return sweep(SweepSpec(lr_min=cfg.lr_min, lr_max=cfg.lr_max, points=cfg.lr_points), runner)


def run_phase(
    cfg: PhaseConfig,
    init: Checkpoint | None,
    data: DataContext,
    model_settings: ModelSettings | None = None,
    subset: SubsetSpec | None = None,
    pipeline_label: str = "",
    out_dir=None,
) -> tuple[Checkpoint, TrainingLog]:
    """Execute one training phase, optionally selecting its LR by sweep."""
    model_settings = model_settings or ModelSettings()
    sources = _resolve_sources(cfg, data)

    chosen_lr = cfg.lr
    sweep_points = None
    sweep_tau = None
    if cfg.has_sweep:
        chosen_lr, sweep_points = sweep_phase(cfg, init, data, model_settings, subset)
        for p in sweep_points:
            if p.status == "ok" and p.lr == chosen_lr:
                sweep_tau = p.payload
                break

    model, temp = _phase_model(cfg, init, model_settings)
    if sweep_tau is not None and temp.trainable:
        # Learnable during the sweep, fixed to the winning value for the run.
        temp = TemperatureParam.fixed(sweep_tau)
    try:
        steps = _train_one_run(model, temp, cfg, chosen_lr, sources, data)
    except DivergenceError:
        if out_dir is not None:
            ckpt = Checkpoint.from_model(
                model, temp, provenance={"phase": cfg.phase, "status": "diverged"}
            )
            save_checkpoint(ckpt, f"{out_dir}/{cfg.phase}.diverged.ckpt")
        raise
    provenance = {
        "pipeline": pipeline_label,
        "phase": cfg.phase,
        "seed": cfg.seed,
        "config_hash": config_hash(vars(cfg) | {"sources": list(cfg.sources)}),
        "lr": chosen_lr,
    }
    ckpt = Checkpoint.from_model(model, temp, provenance=provenance)
    log = TrainingLog(
        phase=cfg.phase,
        interaction=cfg.interaction,
        chosen_lr=chosen_lr,
        final_tau=temp.tau,
        steps=steps,
        sweep_points=sweep_points,
    )
    return ckpt, log


@dataclass
class PhaseOutcome:
    phase: str
    interaction: str
    ndcg: float
    checkpoint: Checkpoint
    log: TrainingLog


@dataclass
class PipelineResult:
    variant: str
    baseline_ndcg: float
    outcomes: list[PhaseOutcome]
    seconds: float

    @property
    def final_ndcg(self) -> float:
        return self.outcomes[-1].ndcg

    def table(self) -> list[tuple[str, str, float]]:
        rows = [("untrained", self.outcomes[-1].interaction, self.baseline_ndcg)]
        rows += [(o.phase, o.interaction, o.ndcg) for o in self.outcomes]
        return rows


def untrained_baseline(
    pcfg: PipelineConfig,
    data: DataContext,
    model_settings: ModelSettings,
    k: int = 10,
) -> float:
    """Full-set nDCG of the freshly initialized model, before any training."""
    final = pcfg.phases[-1]
    first = pcfg.phases[0]
    model = fresh_model(
        model_settings.tok_cfg(),
        model_settings.enc_cfg(),
        final.budget(),
        seed=first.seed,
        prompts_enabled=final.prompts_enabled,
        query_expansion=final.query_expansion,
        interaction=final.interaction,
    )
    rep = evaluate(model, data.corpus, data.queries, data.qrels, k=k, interaction=final.interaction)
    return rep.mean


def run_pipeline(
    pcfg: PipelineConfig,
    data: DataContext,
    model_settings: ModelSettings | None = None,
    init: Checkpoint | None = None,
    k: int = 10,
    out_dir=None,
) -> PipelineResult:
    """Run the variant's phases in order, evaluating after each one."""
    model_settings = model_settings or ModelSettings()
    t0 = time.perf_counter()
    baseline = untrained_baseline(pcfg, data, model_settings, k=k)
    outcomes = []
    current = init
    for cfg in pcfg.phases:
        try:
            ckpt, log = run_phase(
                cfg,
                current,
                data,
                model_settings,
                pipeline_label=pcfg.variant,
                out_dir=out_dir,
            )
        except (ConfigError, DivergenceError) as exc:
            raise type(exc)(f"[pipeline {pcfg.variant}, phase {cfg.phase}] {exc}") from exc
        model, _ = ckpt.to_model()
        rep = evaluate(
            model, data.corpus, data.queries, data.qrels, k=k, interaction=cfg.interaction
        )
        outcomes.append(
            PhaseOutcome(
                phase=cfg.phase,
                interaction=cfg.interaction,
                ndcg=rep.mean,
                checkpoint=ckpt,
                log=log,
            )
        )
        if out_dir is not None:
            save_checkpoint(ckpt, f"{out_dir}/{pcfg.variant}.{cfg.phase}.ckpt")
        current = ckpt
    return PipelineResult(
        variant=pcfg.variant,
        baseline_ndcg=baseline,
        outcomes=outcomes,
        seconds=time.perf_counter() - t0,
    )


@dataclass
class AblationRow:
    prompts: bool
    length_compensation: bool
    effective_query_len: int
    effective_doc_len: int
    ndcg: float
    delta: float = 0.0


def run_ablation_grid(
    base: PipelineConfig,
    data: DataContext,
    model_settings: ModelSettings | None = None,
    init: Checkpoint | None = None,
    k: int = 10,
) -> list[AblationRow]:
    """2x2 prompt/length-compensation grid over the fine-tuning phases.

    ``init`` is the pre-trained starting checkpoint; its own prompt setting
    may differ from a cell's, which is exactly how the aligned and
    misaligned fine-tuning conditions are produced. Without an ``init`` the
    base config's unsupervised phase is trained once and shared by all four
    cells. Rows are deltas against the (off, off) cell.
    """
    model_settings = model_settings or ModelSettings()
    if init is None:
        init, _ = run_phase(
            base.phases[0], None, data, model_settings, pipeline_label=base.variant
        )
    fine_tune = base.phases[1:]
    rows = []
    for prompts in (False, True):
        for comp in (False, True):
            current = init
            cfg = None
            for cfg_base in fine_tune:
                cfg = replace(
                    cfg_base, prompts_enabled=prompts, length_compensation=comp
                )
                current, _ = run_phase(
                    cfg, current, data, model_settings, pipeline_label=base.variant
                )
            model, _ = current.to_model()
            rep = evaluate(
                model, data.corpus, data.queries, data.qrels, k=k,
                interaction=fine_tune[-1].interaction,
            )
            tok = model.tok_cfg
            rows.append(
                AblationRow(
                    prompts=prompts,
                    length_compensation=comp,
                    effective_query_len=cfg.budget().effective("query", tok, prompts),
                    effective_doc_len=cfg.budget().effective("document", tok, prompts),
                    ndcg=rep.mean,
                )
            )
    base_ndcg = rows[0].ndcg  # (off, off) comes first
    for row in rows:
        row.delta = row.ndcg - base_ndcg
    return rows
