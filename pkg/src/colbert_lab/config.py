"""Configuration: flat ``key = value`` files, phase and pipeline presets.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` comments;
unknown or duplicate keys are errors so typos in ablation grids fail loudly
instead of silently running the wrong cell.

The desk-scale defaults keep the usual large-scale batch proportions at
roughly 1/64 size: unsupervised batch 256 trained in
chunks of 32, supervised batch 64, distillation batch 128 reached by 2x
accumulation; query budget 32 plus 7 prompt tokens, document budgets 48
(unsupervised) and 64 (supervised/KD). The ``table1`` preset adds the
logarithmic learning-rate sweep ranges (10 points each, unsupervised
endpoints 3e-3 and 1e-5, supervised 8e-8 to 2e-5, distillation 1e-7 to
1e-3) and makes the temperature learnable during sweeps;
the fixed temperature defaults to 0.2 everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .encoder import EncoderConfig, LengthBudget, TokenizerConfig
from .errors import ConfigError

PHASES = ("unsupervised", "supervised", "kd")
LOSS_FOR_PHASE = {"unsupervised": "infonce", "supervised": "supervised", "kd": "kd"}
VARIANT_INTERACTIONS = {
    "a": ("dense", "dense", "late"),
    "b": ("dense", "late", "late"),
    "c": ("late", "late", "late"),
}

TABLE1_SWEEP = {
    "unsupervised": (1e-5, 3e-3),
    "supervised": (8e-8, 2e-5),
    "kd": (1e-7, 1e-3),
}
SWEEP_POINTS_DEFAULT = 10
FIXED_TEMPERATURE_DEFAULT = 0.2


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------


def parse_kv_file(path) -> dict[str, str]:
    kv: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in kv:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            kv[key] = value
    return kv


def _bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc


def _float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc


def reject_unknown(kv: dict[str, str], context: str) -> None:
    if kv:
        names = ", ".join(sorted(kv))
        raise ConfigError(f"unknown {context} keys: {names}")


# ---------------------------------------------------------------------------
# Model settings (tokenizer + encoder dimensions)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSettings:
    vocab_size: int = 8192
    d_model: int = 64
    d_out: int = 32
    prompt_len: int = 7
    lowercase: bool = True
    use_context_mix: bool = False
    score_prompt_tokens: bool = True

    def tok_cfg(self) -> TokenizerConfig:
        return TokenizerConfig(
            vocab_size=self.vocab_size, prompt_len=self.prompt_len, lowercase=self.lowercase
        )

    def enc_cfg(self) -> EncoderConfig:
        return EncoderConfig(
            d_model=self.d_model,
            d_out=self.d_out,
            use_context_mix=self.use_context_mix,
            score_prompt_tokens=self.score_prompt_tokens,
        )

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelSettings":
        base = cls()
        return cls(
            vocab_size=_int(kv.pop("vocab_size", str(base.vocab_size)), "vocab_size"),
            d_model=_int(kv.pop("d_model", str(base.d_model)), "d_model"),
            d_out=_int(kv.pop("d_out", str(base.d_out)), "d_out"),
            prompt_len=_int(kv.pop("prompt_len", str(base.prompt_len)), "prompt_len"),
            lowercase=_bool(kv.pop("lowercase", "true"), "lowercase"),
            use_context_mix=_bool(kv.pop("context_mix", "false"), "context_mix"),
            score_prompt_tokens=_bool(kv.pop("score_prompt_tokens", "true"), "score_prompt_tokens"),
        )


# ---------------------------------------------------------------------------
# Phase configuration
# ---------------------------------------------------------------------------


@dataclass
class PhaseConfig:
    phase: str
    interaction: str = "late"
    batch_size: int = 64
    chunk_size: int = 0  # 0 => whole batch at once
    workers: int = 1
    epochs: int = 1
    seed: int = 0
    lr: float = 1e-2
    lr_min: float | None = None
    lr_max: float | None = None
    lr_points: int = SWEEP_POINTS_DEFAULT
    temperature: str = "fixed"  # "fixed" | "trainable"
    temperature_value: float = FIXED_TEMPERATURE_DEFAULT
    query_len: int = 32
    doc_len: int = 48
    prompts_enabled: bool = True
    length_compensation: bool = True
    query_expansion: bool = False
    include_in_batch: bool = True
    accum_factor: int = 1
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.interaction not in ("late", "dense"):
            raise ConfigError(f"unknown interaction {self.interaction!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.chunk_size < 0 or self.chunk_size > self.batch_size:
            raise ConfigError("chunk_size must lie in [0, batch_size]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.temperature not in ("fixed", "trainable"):
            raise ConfigError("temperature must be 'fixed' or 'trainable'")
        if self.temperature_value <= 0:
            raise ConfigError("temperature_value must be positive")
        if self.accum_factor < 1:
            raise ConfigError("accum_factor must be >= 1")
        if self.accum_factor > 1 and self.phase != "kd":
            raise ConfigError(
                "plain gradient accumulation is only valid for the kd phase"
            )
        if (self.lr_min is None) != (self.lr_max is None):
            raise ConfigError("lr_min and lr_max must be given together")

    @property
    def loss_kind(self) -> str:
        return LOSS_FOR_PHASE[self.phase]

    @property
    def has_sweep(self) -> bool:
        return self.lr_min is not None

    def budget(self) -> LengthBudget:
        return LengthBudget(
            query_len=self.query_len,
            doc_len=self.doc_len,
            length_compensation=self.length_compensation,
        )

    @classmethod
    def from_kv(cls, kv: dict[str, str], base: "PhaseConfig", prefix: str = "") -> "PhaseConfig":
        def pop(key, default):
            return kv.pop(prefix + key, default)

        lr_min = pop("lr_min", None)
        lr_max = pop("lr_max", None)
        sources = pop("sources", None)
        batch_size = _int(pop("batch_size", str(base.batch_size)), "batch_size")
        # an inherited chunk size that no longer fits falls back to one chunk
        chunk_default = base.chunk_size if base.chunk_size <= batch_size else 0
        return cls(
            phase=pop("phase", base.phase),
            interaction=pop("interaction", base.interaction),
            batch_size=batch_size,
            chunk_size=_int(pop("chunk_size", str(chunk_default)), "chunk_size"),
            workers=_int(pop("workers", str(base.workers)), "workers"),
            epochs=_int(pop("epochs", str(base.epochs)), "epochs"),
            seed=_int(pop("seed", str(base.seed)), "seed"),
            lr=_float(pop("lr", str(base.lr)), "lr"),
            lr_min=_float(lr_min, "lr_min") if lr_min is not None else base.lr_min,
            lr_max=_float(lr_max, "lr_max") if lr_max is not None else base.lr_max,
            lr_points=_int(pop("lr_points", str(base.lr_points)), "lr_points"),
            temperature=pop("temperature", base.temperature),
            temperature_value=_float(
                pop("temperature_value", str(base.temperature_value)), "temperature_value"
            ),
            query_len=_int(pop("query_len", str(base.query_len)), "query_len"),
            doc_len=_int(pop("doc_len", str(base.doc_len)), "doc_len"),
            prompts_enabled=_bool(pop("prompts", "true" if base.prompts_enabled else "false"), "prompts"),
            length_compensation=_bool(
                pop("length_compensation", "true" if base.length_compensation else "false"),
                "length_compensation",
            ),
            query_expansion=_bool(
                pop("query_expansion", "true" if base.query_expansion else "false"),
                "query_expansion",
            ),
            include_in_batch=_bool(
                pop("include_in_batch", "true" if base.include_in_batch else "false"),
                "include_in_batch",
            ),
            accum_factor=_int(pop("accum_factor", str(base.accum_factor)), "accum_factor"),
            sources=tuple(s.strip() for s in sources.split(",") if s.strip())
            if sources is not None
            else base.sources,
        )


_DEFAULT_SOURCES = {
    "unsupervised": ("synthetic_pairs",),
    "supervised": ("synthetic_triples",),
    "kd": ("synthetic_scored",),
}


def default_phase_config(phase: str, interaction: str = "late", seed: int = 0) -> PhaseConfig:
    """Desk-scale defaults; batch proportions follow the usual recipe."""
    if phase == "unsupervised":
        return PhaseConfig(
            phase=phase,
            interaction=interaction,
            batch_size=256,
            chunk_size=32,
            epochs=16,
            seed=seed,
            lr=3e-2,
            doc_len=48,
            sources=_DEFAULT_SOURCES[phase],
        )
    if phase == "supervised":
        return PhaseConfig(
            phase=phase,
            interaction=interaction,
            batch_size=64,
            epochs=4,
            seed=seed,
            lr=1e-2,
            doc_len=64,
            sources=_DEFAULT_SOURCES[phase],
        )
    if phase == "kd":
        return PhaseConfig(
            phase=phase,
            interaction=interaction,
            batch_size=128,
            accum_factor=2,
            epochs=4,
            seed=seed,
            lr=1e-2,
            doc_len=64,
            sources=_DEFAULT_SOURCES[phase],
        )
    raise ConfigError(f"unknown phase {phase!r}")


def apply_table1_preset(cfg: PhaseConfig) -> PhaseConfig:
    """Attach the swept LR range (10 log-spaced points) for the phase, and
    make the temperature learnable where the phase has one."""
    lo, hi = TABLE1_SWEEP[cfg.phase]
    temp = "trainable" if cfg.phase in ("unsupervised", "supervised") else cfg.temperature
    return replace(
        cfg,
        lr_min=lo,
        lr_max=hi,
        lr_points=SWEEP_POINTS_DEFAULT,
        temperature=temp,
        temperature_value=FIXED_TEMPERATURE_DEFAULT,
    )


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    variant: str
    seed: int = 0
    phases: list[PhaseConfig] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANT_INTERACTIONS:
            raise ConfigError(f"unknown pipeline variant {self.variant!r}")
        if not self.phases:
            interactions = VARIANT_INTERACTIONS[self.variant]
            self.phases = [
                default_phase_config(phase, interaction, self.seed)
                for phase, interaction in zip(PHASES, interactions)
            ]
        self.validate()

    def validate(self):
        expected = VARIANT_INTERACTIONS[self.variant]
        if tuple(p.phase for p in self.phases) != PHASES:
            raise ConfigError(
                f"variant {self.variant!r} runs phases {PHASES} in order"
            )
        got = tuple(p.interaction for p in self.phases)
        if got != expected:
            raise ConfigError(
                f"variant {self.variant!r} requires interactions {expected}, got {got}"
            )


def pipeline_config_from_kv(kv: dict[str, str]) -> PipelineConfig:
    variant = kv.pop("variant", "c")
    seed = _int(kv.pop("seed", "0"), "seed")
    preset = kv.pop("preset", "")
    if preset not in ("", "table1"):
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PipelineConfig(variant=variant, seed=seed)
    phases = []
    for p in cfg.phases:
        p2 = PhaseConfig.from_kv(kv, p, prefix=f"{p.phase}_")
        if preset == "table1":
            p2 = apply_table1_preset(p2)
        phases.append(p2)
    cfg.phases = phases
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Synthetic-data settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSettings:
    data: str = "synthetic"  # "synthetic" or a BEIR-layout directory
    topics: int = 8
    vocab_per_topic: int = 512
    queries_per_topic: int = 32
    docs_per_topic: int = 64
    query_tokens: int = 8
    doc_tokens: int = 48
    distractor_rate: float = 0.2
    data_seed: int = 0
    negatives_per_query: int = 4
    kd_candidates: int = 8
    teacher_gamma: float = 4.0

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "DataSettings":
        base = cls()
        return cls(
            data=kv.pop("data", base.data),
            topics=_int(kv.pop("topics", str(base.topics)), "topics"),
            vocab_per_topic=_int(kv.pop("vocab_per_topic", str(base.vocab_per_topic)), "vocab_per_topic"),
            queries_per_topic=_int(
                kv.pop("queries_per_topic", str(base.queries_per_topic)), "queries_per_topic"
            ),
            docs_per_topic=_int(kv.pop("docs_per_topic", str(base.docs_per_topic)), "docs_per_topic"),
            query_tokens=_int(kv.pop("query_tokens", str(base.query_tokens)), "query_tokens"),
            doc_tokens=_int(kv.pop("doc_tokens", str(base.doc_tokens)), "doc_tokens"),
            distractor_rate=_float(
                kv.pop("distractor_rate", str(base.distractor_rate)), "distractor_rate"
            ),
            data_seed=_int(kv.pop("data_seed", str(base.data_seed)), "data_seed"),
            negatives_per_query=_int(
                kv.pop("negatives_per_query", str(base.negatives_per_query)), "negatives_per_query"
            ),
            kd_candidates=_int(kv.pop("kd_candidates", str(base.kd_candidates)), "kd_candidates"),
            teacher_gamma=_float(kv.pop("teacher_gamma", str(base.teacher_gamma)), "teacher_gamma"),
        )


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv_file(p)
