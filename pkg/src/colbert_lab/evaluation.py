"""nDCG@k computation, full and subset evaluation, and the LR sweep.

nDCG uses the trec_eval convention: DCG sums gain(rel_i)/log2(i+1) over the
top k, normalized by the ideal DCG of the relevance-sorted ranking. Linear
gain is the default; exponential (2^rel - 1) is available. Queries without
any positive judgment have no defined ideal and are excluded from means
(their count is reported).

The subset evaluator samples queries and corpus deterministically from a
seed while always retaining every positive document of each sampled query,
which is what makes it a cheap but rank-correlated stand-in for the full
evaluation during model selection.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, Qrels, QuerySet
from .errors import ConfigError, ContractError, DivergenceError
from .model import Model
from .scoring import retrieve


def _gain(rel: int, kind: str) -> float:
    if kind == "linear":
        return float(rel)
    if kind == "exponential":
        return float(2**rel - 1)
    raise ConfigError(f"unknown gain {kind!r}")


def ndcg_at_k(
    ranking: list[str],
    qrels_row: dict[str, int],
    k: int,
    gain: str = "linear",
) -> float | None:
    """nDCG@k of one ranking; None when the query has no positive judgment."""
    if k < 1:
        raise ContractError("k must be >= 1")
    rels = sorted((g for g in qrels_row.values() if g > 0), reverse=True)
    if not rels:
        return None
    dcg = 0.0
    for i, did in enumerate(ranking[:k]):
        g = qrels_row.get(did, 0)
        if g > 0:
            dcg += _gain(g, gain) / math.log2(i + 2)
    idcg = sum(_gain(g, gain) / math.log2(i + 2) for i, g in enumerate(rels[:k]))
    return dcg / idcg


@dataclass
class EvalReport:
    per_query: dict[str, float]
    mean: float
    k: int
    query_count: int
    skipped: int
    seconds: float
    dataset: str = "default"
    per_dataset: dict[str, float] = field(default_factory=dict)

    def recomputed_mean(self) -> float:
        if not self.per_query:
            return 0.0
        return float(np.mean(list(self.per_query.values())))


def merge_reports(reports: dict[str, EvalReport], k: int) -> EvalReport:
    """Combine per-dataset reports; the overall mean averages dataset means."""
    per_query = {}
    per_dataset = {}
    for name, rep in reports.items():
        per_dataset[name] = rep.mean
        for qid, v in rep.per_query.items():
            per_query[f"{name}/{qid}"] = v
    means = list(per_dataset.values())
    return EvalReport(
        per_query=per_query,
        mean=float(np.mean(means)) if means else 0.0,
        k=k,
        query_count=sum(r.query_count for r in reports.values()),
        skipped=sum(r.skipped for r in reports.values()),
        seconds=sum(r.seconds for r in reports.values()),
        dataset="+".join(sorted(reports)),
        per_dataset=per_dataset,
    )


def evaluate(
    model: Model,
    corpus: Corpus,
    queries: QuerySet,
    qrels: Qrels,
    k: int = 10,
    interaction: str | None = None,
    gain: str = "linear",
    dataset: str = "default",
) -> EvalReport:
    """Encode the corpus once, retrieve per query, average per-query nDCG@k.

    Queries are processed and reported in sorted-id order, so the report is
    independent of any scheduling inside the scoring kernels.
    """
    if not queries:
        raise ConfigError("no queries to evaluate")
    t0 = time.perf_counter()
    index = model.build_corpus_index(corpus, interaction=interaction)
    per_query = {}
    skipped = 0
    for qid in sorted(queries):
        rep = model.encode_query(queries[qid], interaction=interaction)
        ranked = retrieve(rep, index, k)
        val = ndcg_at_k([did for did, _ in ranked], qrels.get(qid, {}), k, gain)
        if val is None:
            skipped += 1
        else:
            per_query[qid] = val
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return EvalReport(
        per_query=per_query,
        mean=mean,
        k=k,
        query_count=len(per_query),
        skipped=skipped,
        seconds=time.perf_counter() - t0,
        dataset=dataset,
        per_dataset={dataset: mean},
    )


@dataclass(frozen=True)
class SubsetSpec:
    max_queries: int = 50
    max_corpus: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.max_queries < 1 or self.max_corpus < 1:
            raise ConfigError("subset sizes must be >= 1")


def subset_data(
    corpus: Corpus, queries: QuerySet, qrels: Qrels, spec: SubsetSpec
) -> tuple[Corpus, QuerySet, Qrels]:
    """Seeded subsample keeping every positive doc of each sampled query."""
    rng = np.random.default_rng(spec.seed)
    all_qids = sorted(queries)
    if len(all_qids) > spec.max_queries:
        picked = rng.choice(len(all_qids), size=spec.max_queries, replace=False)
        qids = [all_qids[int(i)] for i in sorted(picked)]
    else:
        qids = all_qids
    keep_docs = set()
    for qid in qids:
        for did, g in qrels.get(qid, {}).items():
            if g > 0:
                keep_docs.add(did)
    rest = [d for d in sorted(corpus) if d not in keep_docs]
    room = max(spec.max_corpus - len(keep_docs), 0)
    if len(rest) > room:
        picked = rng.choice(len(rest), size=room, replace=False)
        fill = [rest[int(i)] for i in sorted(picked)]
    else:
        fill = rest
    doc_ids = sorted(keep_docs | set(fill))
    sub_corpus = {d: corpus[d] for d in doc_ids}
    sub_queries = {q: queries[q] for q in qids}
    sub_qrels = {q: {d: g for d, g in qrels.get(q, {}).items() if d in sub_corpus} for q in qids}
    return sub_corpus, sub_queries, sub_qrels


def evaluate_subset(
    model: Model,
    corpus: Corpus,
    queries: QuerySet,
    qrels: Qrels,
    spec: SubsetSpec,
    k: int = 10,
    interaction: str | None = None,
    gain: str = "linear",
    dataset: str = "subset",
) -> EvalReport:
    sub_corpus, sub_queries, sub_qrels = subset_data(corpus, queries, qrels, spec)
    return evaluate(
        model, sub_corpus, sub_queries, sub_qrels, k=k, interaction=interaction,
        gain=gain, dataset=dataset,
    )


# ---------------------------------------------------------------------------
# Learning-rate sweep.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    lr_min: float
    lr_max: float
    points: int = 10
    metric: str = "subset_ndcg@10"

    def __post_init__(self):
        if not (0 < self.lr_min < self.lr_max):
            raise ConfigError("need 0 < lr_min < lr_max")
        if self.points < 2:
            raise ConfigError("a sweep needs at least 2 points")


def lr_grid(spec: SweepSpec) -> np.ndarray:
    """Log-spaced learning rates, endpoints exact."""
    grid = np.exp(np.linspace(np.log(spec.lr_min), np.log(spec.lr_max), spec.points))
    grid[0] = spec.lr_min
    grid[-1] = spec.lr_max
    return grid


@dataclass
class SweepPoint:
    lr: float
    score: float  # nan when failed
    status: str  # "ok" | "failed"
    payload: object = None  # whatever the runner returned alongside the score


def sweep(spec: SweepSpec, runner) -> tuple[float, list[SweepPoint]]:
    """Run ``runner(lr)`` per grid point; pick the argmax of the metric.

    The runner returns either a score or a ``(score, payload)`` pair; a
    ``DivergenceError`` marks the point failed and excludes it. Ties go to
    the lower learning rate.
    """
    points: list[SweepPoint] = []
    for lr in lr_grid(spec):
        try:
            result = runner(float(lr))
        except DivergenceError:
            points.append(SweepPoint(lr=float(lr), score=float("nan"), status="failed"))
            continue
        if isinstance(result, tuple):
            score, payload = result
        else:
            score, payload = result, None
        points.append(SweepPoint(lr=float(lr), score=float(score), status="ok", payload=payload))
    best_lr = None
    best_score = -np.inf
    for p in points:  # ascending lr; strict > keeps the lower rate on ties
        if p.status == "ok" and p.score > best_score:
            best_lr, best_score = p.lr, p.score
    if best_lr is None:
        raise DivergenceError("every sweep point diverged")
    return best_lr, points


# ---------------------------------------------------------------------------
# Report serialization.
# ---------------------------------------------------------------------------


def write_report_jsonl(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(report.per_query):
            fh.write(json.dumps({"query_id": qid, "ndcg": report.per_query[qid]}) + "\n")
        fh.write(
            json.dumps(
                {
                    "summary": True,
                    "dataset": report.dataset,
                    "mean_ndcg": report.mean,
                    "k": report.k,
                    "query_count": report.query_count,
                    "skipped": report.skipped,
                    "seconds": report.seconds,
                    "per_dataset": report.per_dataset,
                }
            )
            + "\n"
        )


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "ndcg"])
        for qid in sorted(report.per_query):
            writer.writerow([qid, f"{report.per_query[qid]:.6f}"])


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lr", "subset_ndcg", "status"])
        for p in points:
            writer.writerow([f"{p.lr:.10e}", "" if np.isnan(p.score) else f"{p.score:.6f}", p.status])
