"""Deterministic tokenizer and the small trainable text encoder.

Tokenization is whitespace splitting plus 64-bit FNV-1a hashing into a fixed
id space. The first position of every sequence is a role marker ([Q] or [D]
analogue); when prompts are enabled, a run of reserved prompt ids follows
(seven per role by default), mirroring the "search_query:" /
"search_document:" prefixes as trainable, collision-free token runs. The
remaining positions hold hashed content tokens, truncated and PAD-padded to
the effective length budget.

The encoder is an embedding table, an optional context-mixing matrix, and a
projection, followed by rowwise L2 normalization, so token vectors are unit
norm and MaxSim behaves as a cosine interaction. Encoding with ``tape=None``
runs frozen (plain arrays); passing a tape records the computation for
gradients. Both paths execute the same primitive sequence, so frozen and
recorded values agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DEFAULT_NORM_EPS, Node, Tape, as_matrix
from .errors import ConfigError, ContractError, InputError

PAD = 0
MARK_Q = 1
MARK_D = 2
UNK = 3

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 8192
    prompt_len: int = 7
    lowercase: bool = True

    def __post_init__(self):
        if self.prompt_len < 0:
            raise ConfigError("prompt_len must be >= 0")
        if self.vocab_size <= self.reserved_count:
            raise ConfigError(
                f"vocab_size {self.vocab_size} must exceed the "
                f"{self.reserved_count} reserved ids"
            )

    @property
    def reserved_count(self) -> int:
        return 4 + 2 * self.prompt_len

    @property
    def query_prompt_ids(self) -> list[int]:
        return list(range(4, 4 + self.prompt_len))

    @property
    def doc_prompt_ids(self) -> list[int]:
        return list(range(4 + self.prompt_len, 4 + 2 * self.prompt_len))


@dataclass(frozen=True)
class LengthBudget:
    """Base token budgets; prompts may extend them when compensation is on."""

    query_len: int
    doc_len: int
    length_compensation: bool = True

    def effective(self, role: str, cfg: TokenizerConfig, prompts_enabled: bool) -> int:
        base = self.query_len if role == "query" else self.doc_len
        if prompts_enabled and self.length_compensation:
            return base + cfg.prompt_len
        return base


@dataclass
class TokenSequence:
    ids: np.ndarray  # int64, shape (L,)
    valid_mask: np.ndarray  # bool, shape (L,)
    role: str  # "query" | "document"
    n_prompt: int = 0  # prompt positions occupy 1..n_prompt


def hash_token(word: str, cfg: TokenizerConfig) -> int:
    """FNV-1a (64-bit) over UTF-8 bytes, reduced into the non-reserved id range."""
    if not word:
        raise InputError("cannot hash an empty token")
    h = _FNV_OFFSET
    for b in word.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return cfg.reserved_count + (h % (cfg.vocab_size - cfg.reserved_count))


def tokenize(
    text: str,
    role: str,
    cfg: TokenizerConfig,
    budget: LengthBudget,
    prompts_enabled: bool,
) -> TokenSequence:
    """Marker, optional prompt run, hashed words; truncated then PAD-padded."""
    if role not in ("query", "document"):
        raise ContractError(f"role must be 'query' or 'document', got {role!r}")
    eff = budget.effective(role, cfg, prompts_enabled)
    n_prompt = cfg.prompt_len if prompts_enabled else 0
    if eff < 1 + n_prompt:
        raise ConfigError(
            f"effective length {eff} cannot hold the marker plus {n_prompt} prompt tokens"
        )
    ids = [MARK_Q if role == "query" else MARK_D]
    if prompts_enabled:
        ids.extend(cfg.query_prompt_ids if role == "query" else cfg.doc_prompt_ids)
    words = text.lower().split() if cfg.lowercase else text.split()
    ids.extend(hash_token(w, cfg) for w in words)
    ids = ids[:eff]
    n_valid = len(ids)
    ids.extend([PAD] * (eff - n_valid))
    mask = np.zeros(eff, dtype=bool)
    mask[:n_valid] = True
    return TokenSequence(
        ids=np.asarray(ids, dtype=np.int64),
        valid_mask=mask,
        role=role,
        n_prompt=n_prompt,
    )


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    d_out: int = 32
    use_context_mix: bool = False
    score_prompt_tokens: bool = True
    norm_eps: float = DEFAULT_NORM_EPS


@dataclass
class EncoderParams:
    """Trainable matrices: embedding, projection, optional context mix."""

    embedding: np.ndarray  # vocab_size x d_model
    projection: np.ndarray  # d_model x d_out
    context_mix: np.ndarray | None = None  # d_model x d_model

    @classmethod
    def init(cls, tok_cfg: TokenizerConfig, enc_cfg: EncoderConfig, seed: int):
        rng = np.random.default_rng(seed)
        emb = rng.standard_normal((tok_cfg.vocab_size, enc_cfg.d_model))
        emb /= np.sqrt(enc_cfg.d_model)
        proj = rng.standard_normal((enc_cfg.d_model, enc_cfg.d_out))
        proj /= np.sqrt(enc_cfg.d_model)
        ctx = None
        if enc_cfg.use_context_mix:
            ctx = rng.standard_normal((enc_cfg.d_model, enc_cfg.d_model))
            ctx /= enc_cfg.d_model
        return cls(embedding=emb, projection=proj, context_mix=ctx)

    def named(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "projection": self.projection}
        if self.context_mix is not None:
            out["context_mix"] = self.context_mix
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            embedding=self.embedding.copy(),
            projection=self.projection.copy(),
            context_mix=None if self.context_mix is None else self.context_mix.copy(),
        )


@dataclass
class MultiVectorRep:
    """Per-token vectors plus the mask of rows that participate in scoring."""

    vectors: Node | np.ndarray  # L x d_out, masked-in rows unit norm
    scoring_mask: np.ndarray  # bool, length L

    @property
    def values(self) -> np.ndarray:
        return self.vectors.value if isinstance(self.vectors, Node) else self.vectors

    @property
    def tracked(self) -> bool:
        return isinstance(self.vectors, Node)


def _enter_params(params: EncoderParams, tape: Tape, track: bool):
    if track:
        nodes = {name: tape.parameter(name, arr) for name, arr in params.named().items()}
    else:
        nodes = {name: tape.constant(arr) for name, arr in params.named().items()}
    return nodes


def _project_tokens(
    params: EncoderParams,
    tokens: TokenSequence,
    cfg: EncoderConfig,
    tape: Tape,
    track: bool,
) -> Node:
    if tokens.ids.size and tokens.ids.max() >= params.embedding.shape[0]:
        raise InputError(
            f"token id {int(tokens.ids.max())} out of range for vocab "
            f"{params.embedding.shape[0]}"
        )
    nodes = _enter_params(params, tape, track)
    emb = tape.gather_rows(nodes["embedding"], tokens.ids)
    if cfg.use_context_mix and params.context_mix is not None:
        n_valid = int(tokens.valid_mask.sum())
        mean_row = as_matrix(tokens.valid_mask.astype(np.float64) / max(n_valid, 1))
        mean_valid = tape.matmul(tape.constant(mean_row), emb)  # 1 x d_model
        ctx = tape.matmul(mean_valid, nodes["context_mix"])
        emb = tape.broadcast_add(emb, ctx)
    return tape.matmul(emb, nodes["projection"])


def encode_late(
    params: EncoderParams,
    tokens: TokenSequence,
    cfg: EncoderConfig,
    query_expansion: bool = False,
    tape: Tape | None = None,
) -> MultiVectorRep:
    """Per-token unit vectors and the scoring mask.

    With ``query_expansion`` on (queries only), PAD positions stay in the
    scoring mask and act as learned global slots; otherwise the scoring mask
    equals the validity mask, optionally minus prompt positions.
    """
    frozen = tape is None
    if frozen:
        tape = Tape()
    proj = _project_tokens(params, tokens, cfg, tape, track=not frozen)
    vecs = tape.l2norm_rows(proj, cfg.norm_eps)
    mask = tokens.valid_mask.copy()
    if not cfg.score_prompt_tokens and tokens.n_prompt:
        mask[1 : 1 + tokens.n_prompt] = False
    if query_expansion and tokens.role == "query":
        mask = np.ones_like(mask)
    return MultiVectorRep(
        vectors=vecs.value if frozen else vecs,
        scoring_mask=mask,
    )


def encode_dense(
    params: EncoderParams,
    tokens: TokenSequence,
    cfg: EncoderConfig,
    tape: Tape | None = None,
) -> Node | np.ndarray:
    """Mean of valid-position projected vectors, L2-normalized (1 x d_out)."""
    n_valid = int(tokens.valid_mask.sum())
    if n_valid == 0:
        raise InputError("cannot pool a sequence with zero valid positions")
    frozen = tape is None
    if frozen:
        tape = Tape()
    proj = _project_tokens(params, tokens, cfg, tape, track=not frozen)
    mean_row = as_matrix(tokens.valid_mask.astype(np.float64) / n_valid)
    pooled = tape.matmul(tape.constant(mean_row), proj)
    vec = tape.l2norm_rows(pooled, cfg.norm_eps)
    return vec.value if frozen else vec


def dense_as_rep(vec: Node | np.ndarray) -> MultiVectorRep:
    """Wrap a pooled 1 x d vector so scoring treats it as a single-row rep."""
    return MultiVectorRep(vectors=vec, scoring_mask=np.ones(1, dtype=bool))
