"""Synthetic corpus generation, BEIR-layout ingestion, hard-negative mining,
and the oracle teacher used for distillation.

The synthetic generator builds topic-separable data: each topic owns a
disjoint vocabulary, queries draw only from their topic, and documents draw
mostly from their topic with a controlled distractor rate, so a lexical
ranker solves the task and a trained retriever can approach it. The same
generator emits the three source kinds the training phases consume: (query,
positive) pairs, (query, positive, negatives) triples, and teacher-scored
candidate lists.

On-disk format matches the BEIR distribution layout: ``corpus.jsonl`` and
``queries.jsonl`` (one JSON object per line) plus tab-separated
``qrels/*.tsv`` with a ``query-id``/``corpus-id``/``score`` header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError
from .scoring import CorpusIndex, retrieve


@dataclass
class PairSample:
    query_id: str
    doc_id: str


@dataclass
class TripleSample:
    query_id: str
    pos_id: str
    neg_ids: list[str]


@dataclass
class ScoredListSample:
    query_id: str
    candidate_ids: list[str]  # positive first
    teacher_scores: np.ndarray


_KIND_FOR_PHASE = {"pairs": "unsupervised", "triples": "supervised", "scored_lists": "kd"}


@dataclass
class DataSource:
    source_id: str
    kind: str  # "pairs" | "triples" | "scored_lists"
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in _KIND_FOR_PHASE:
            raise ConfigError(f"unknown data source kind {self.kind!r}")


Corpus = dict[str, str]
QuerySet = dict[str, str]
Qrels = dict[str, dict[str, int]]


@dataclass(frozen=True)
class SyntheticSpec:
    topic_count: int = 8
    vocab_per_topic: int = 512
    queries_per_topic: int = 32
    docs_per_topic: int = 64
    query_len_tokens: int = 8
    doc_len_tokens: int = 48
    distractor_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in (
            "topic_count",
            "vocab_per_topic",
            "queries_per_topic",
            "docs_per_topic",
            "query_len_tokens",
            "doc_len_tokens",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigError("distractor_rate must lie in [0, 1]")
        if self.distractor_rate > 0 and self.topic_count < 2:
            raise ConfigError("distractors require at least two topics")


def token_overlap(query_text: str, doc_text: str) -> float:
    """Multiset token overlap, normalized by the query's token count."""
    q_tokens = query_text.lower().split()
    if not q_tokens:
        return 0.0
    d_counts: dict[str, int] = {}
    for w in doc_text.lower().split():
        d_counts[w] = d_counts.get(w, 0) + 1
    hits = 0
    for w in q_tokens:
        if d_counts.get(w, 0) > 0:
            d_counts[w] -= 1
            hits += 1
    return hits / len(q_tokens)


def oracle_teacher(
    qrels: Qrels,
    corpus: Corpus,
    queries: QuerySet,
    gamma: float,
    candidates: dict[str, list[str]],
) -> dict[str, np.ndarray]:
    """Teacher scores: gamma * relevance + lexical overlap, per candidate."""
    out = {}
    for qid, cand_ids in candidates.items():
        if qid not in queries:
            raise ContractError(f"unknown query id {qid!r}")
        rels = qrels.get(qid, {})
        scores = np.empty(len(cand_ids), dtype=np.float64)
        for j, did in enumerate(cand_ids):
            if did not in corpus:
                raise ContractError(f"unknown candidate doc id {did!r}")
            scores[j] = gamma * rels.get(did, 0) + token_overlap(queries[qid], corpus[did])
        out[qid] = scores
    return out


def generate_synthetic(
    spec: SyntheticSpec,
    negatives_per_query: int = 4,
    kd_candidates: int = 8,
    teacher_gamma: float = 4.0,
):
    """Build (corpus, queries, qrels, sources) deterministically from the seed.

    Every document of a query's topic is marked relevant (grade 1), so the
    retrieval target is topic separation rather than exact-document recall.

    Each topic's vocabulary is split three ways: a small "head" shared by
    queries and documents, a document-only "body", and a query-only slice.
    Documents draw from head plus body, distractors come from foreign
    bodies only, and queries mix a few head words with query-only words.
    Head words make many same-topic documents (and no foreign ones) overlap
    the query, so a lexical ranker separates the corpus; the query-only
    words never occur in any document, so their topic association exists
    only as a learnable statistical signal.
    """
    rng = np.random.default_rng(spec.seed)
    vocab = [
        [f"t{t:02d}w{j:03d}" for j in range(spec.vocab_per_topic)]
        for t in range(spec.topic_count)
    ]
    head = max(1, spec.vocab_per_topic // 8)
    query_slice = max(1, spec.vocab_per_topic // 4)
    doc_vocab = max(head, spec.vocab_per_topic - query_slice)
    q_head_words = min(3, spec.query_len_tokens)
    corpus: Corpus = {}
    queries: QuerySet = {}
    qrels: Qrels = {}
    topic_docs: list[list[str]] = []

    def distractor_word(own_topic: int) -> str:
        others = [x for x in range(spec.topic_count) if x != own_topic]
        ot = int(rng.choice(others))
        pool = vocab[ot][head:doc_vocab] if doc_vocab > head else vocab[ot][:doc_vocab]
        return pool[int(rng.choice(len(pool)))]

    n_distract = min(
        int(round(spec.distractor_rate * spec.doc_len_tokens)),
        spec.doc_len_tokens // 2,
    )
    for t in range(spec.topic_count):
        doc_ids = []
        for d in range(spec.docs_per_topic):
            own = rng.choice(doc_vocab, size=spec.doc_len_tokens - n_distract)
            words = [vocab[t][int(j)] for j in own]
            words += [distractor_word(t) for _ in range(n_distract)]
            perm = rng.permutation(len(words))
            did = f"d{t:02d}-{d:03d}"
            corpus[did] = " ".join(words[int(i)] for i in perm)
            doc_ids.append(did)
        topic_docs.append(doc_ids)

    pairs: list[PairSample] = []
    triples: list[TripleSample] = []
    candidate_map: dict[str, list[str]] = {}
    for t in range(spec.topic_count):
        others = [x for x in range(spec.topic_count) if x != t]
        for q in range(spec.queries_per_topic):
            qid = f"q{t:02d}-{q:03d}"
            picks = [int(j) for j in rng.choice(head, size=q_head_words)]
            if spec.query_len_tokens > q_head_words and spec.vocab_per_topic > doc_vocab:
                extra = rng.choice(
                    spec.vocab_per_topic - doc_vocab,
                    size=spec.query_len_tokens - q_head_words,
                )
                picks += [doc_vocab + int(j) for j in extra]
            else:
                picks += [
                    int(j)
                    for j in rng.choice(head, size=spec.query_len_tokens - q_head_words)
                ]
            queries[qid] = " ".join(vocab[t][int(j)] for j in picks)
            qrels[qid] = {did: 1 for did in topic_docs[t]}
            pos = topic_docs[t][int(rng.choice(spec.docs_per_topic))]
            pairs.append(PairSample(query_id=qid, doc_id=pos))
            negs = []
            for _ in range(negatives_per_query):
                ot = int(rng.choice(others)) if others else t
                negs.append(topic_docs[ot][int(rng.choice(spec.docs_per_topic))])
            triples.append(TripleSample(query_id=qid, pos_id=pos, neg_ids=negs))
            cands = [pos]
            for _ in range(max(kd_candidates - 1, 1)):
                ot = int(rng.choice(others)) if others else t
                cands.append(topic_docs[ot][int(rng.choice(spec.docs_per_topic))])
            candidate_map[qid] = cands

    teacher = oracle_teacher(qrels, corpus, queries, teacher_gamma, candidate_map)
    scored = [
        ScoredListSample(
            query_id=qid,
            candidate_ids=candidate_map[qid],
            teacher_scores=teacher[qid],
        )
        for qid in candidate_map
    ]
    sources = [
        DataSource(source_id="synthetic_pairs", kind="pairs", samples=pairs),
        DataSource(source_id="synthetic_triples", kind="triples", samples=triples),
        DataSource(source_id="synthetic_scored", kind="scored_lists", samples=scored),
    ]
    return corpus, queries, qrels, sources


# ---------------------------------------------------------------------------
# BEIR-layout files.
# ---------------------------------------------------------------------------


def _read_jsonl(path: Path, required: tuple[str, ...]):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            for key in required:
                if key not in obj:
                    raise DataFormatError(f"{path}:{lineno}: missing field {key!r}")
            rows.append(obj)
    return rows


def load_beir_dir(path) -> tuple[Corpus, QuerySet, Qrels]:
    """Load corpus.jsonl, queries.jsonl, and qrels/*.tsv from a directory."""
    root = Path(path)
    corpus_path = root / "corpus.jsonl"
    queries_path = root / "queries.jsonl"
    qrels_dir = root / "qrels"
    for p in (corpus_path, queries_path):
        if not p.exists():
            raise DataFormatError(f"missing {p}")
    qrel_files = sorted(qrels_dir.glob("*.tsv")) if qrels_dir.is_dir() else []
    if not qrel_files:
        raise DataFormatError(f"no qrels/*.tsv files under {root}")

    corpus: Corpus = {}
    for obj in _read_jsonl(corpus_path, ("_id", "text")):
        title = str(obj.get("title", "") or "")
        text = str(obj["text"])
        corpus[str(obj["_id"])] = f"{title} {text}" if title else text
    queries: QuerySet = {}
    for obj in _read_jsonl(queries_path, ("_id", "text")):
        queries[str(obj["_id"])] = str(obj["text"])

    qrels: Qrels = {}
    for qf in qrel_files:
        with open(qf, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header.split("\t") != ["query-id", "corpus-id", "score"]:
                raise DataFormatError(f"{qf}:1: unexpected qrels header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataFormatError(f"{qf}:{lineno}: expected 3 tab-separated fields")
                qid, did, score = parts
                if qid not in queries:
                    raise DataFormatError(f"{qf}:{lineno}: unknown query id {qid!r}")
                if did not in corpus:
                    raise DataFormatError(f"{qf}:{lineno}: unknown corpus id {did!r}")
                try:
                    grade = int(score)
                except ValueError as exc:
                    raise DataFormatError(f"{qf}:{lineno}: score must be an integer") from exc
                if grade < 0:
                    raise DataFormatError(f"{qf}:{lineno}: negative relevance grade")
                qrels.setdefault(qid, {})[did] = grade
    return corpus, queries, qrels


def export_beir_dir(corpus: Corpus, queries: QuerySet, qrels: Qrels, path) -> None:
    """Write the BEIR layout produced by ``load_beir_dir``'s inverse."""
    root = Path(path)
    (root / "qrels").mkdir(parents=True, exist_ok=True)
    with open(root / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for did, text in corpus.items():
            fh.write(json.dumps({"_id": did, "title": "", "text": text}) + "\n")
    with open(root / "queries.jsonl", "w", encoding="utf-8") as fh:
        for qid, text in queries.items():
            fh.write(json.dumps({"_id": qid, "text": text}) + "\n")
    with open(root / "qrels" / "test.tsv", "w", encoding="utf-8") as fh:
        fh.write("query-id\tcorpus-id\tscore\n")
        for qid, row in qrels.items():
            for did, grade in row.items():
                fh.write(f"{qid}\t{did}\t{grade}\n")


# ---------------------------------------------------------------------------
# Hard-negative mining.
# ---------------------------------------------------------------------------


def mine_hard_negatives(
    model,
    source: DataSource,
    index: CorpusIndex,
    qrels: Qrels,
    queries: QuerySet,
    k: int,
) -> DataSource:
    """Top-k retrieved non-relevant documents become each query's negatives.

    The model is used frozen; any document with positive relevance for the
    query is excluded, so mined negatives never intersect the positives.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if source.kind != "pairs":
        raise ConfigError(f"mining expects a pairs source, got {source.kind!r}")
    if len(index) < k + 1:
        raise ConfigError(f"corpus of {len(index)} docs cannot yield {k} negatives")
    triples = []
    for sample in source.samples:
        rels = qrels.get(sample.query_id, {})
        positives = {d for d, g in rels.items() if g > 0}
        rep = model.encode_query(queries[sample.query_id])
        ranked = retrieve(rep, index, k + len(positives))
        negs = [did for did, _ in ranked if did not in positives][:k]
        triples.append(
            TripleSample(query_id=sample.query_id, pos_id=sample.doc_id, neg_ids=negs)
        )
    return DataSource(source_id=f"{source.source_id}_mined", kind="triples", samples=triples)
