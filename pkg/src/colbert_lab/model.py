"""Bundled model: tokenizer config, encoder config, parameters, and the
per-phase text-handling flags (budgets, prompts, query expansion).

A bundle is all evaluation, mining, retrieval, and checkpointing need; the
flags travel with the parameters so a model trained with prompts is also
scored with prompts unless a caller deliberately misaligns them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .encoder import (
    EncoderConfig,
    EncoderParams,
    LengthBudget,
    MultiVectorRep,
    TokenizerConfig,
    dense_as_rep,
    encode_dense,
    encode_late,
    tokenize,
)
from .errors import ConfigError
from .scoring import CorpusIndex, build_index


@dataclass
class Model:
    tok_cfg: TokenizerConfig
    enc_cfg: EncoderConfig
    budget: LengthBudget
    params: EncoderParams
    prompts_enabled: bool = True
    query_expansion: bool = False
    interaction: str = "late"

    def __post_init__(self):
        if self.interaction not in ("late", "dense"):
            raise ConfigError(f"unknown interaction {self.interaction!r}")

    def tokenize_query(self, text: str):
        return tokenize(text, "query", self.tok_cfg, self.budget, self.prompts_enabled)

    def tokenize_doc(self, text: str):
        return tokenize(text, "document", self.tok_cfg, self.budget, self.prompts_enabled)

    def encode_query(self, text: str, interaction: str | None = None, tape=None) -> MultiVectorRep:
        mode = interaction or self.interaction
        tokens = self.tokenize_query(text)
        if mode == "dense":
            return dense_as_rep(encode_dense(self.params, tokens, self.enc_cfg, tape=tape))
        return encode_late(
            self.params,
            tokens,
            self.enc_cfg,
            query_expansion=self.query_expansion,
            tape=tape,
        )

    def encode_doc(self, text: str, interaction: str | None = None, tape=None) -> MultiVectorRep:
        mode = interaction or self.interaction
        tokens = self.tokenize_doc(text)
        if mode == "dense":
            return dense_as_rep(encode_dense(self.params, tokens, self.enc_cfg, tape=tape))
        return encode_late(self.params, tokens, self.enc_cfg, tape=tape)

    def build_corpus_index(self, corpus: dict[str, str], interaction: str | None = None) -> CorpusIndex:
        mode = interaction or self.interaction
        doc_ids = sorted(corpus)
        reps = [self.encode_doc(corpus[did], interaction=mode) for did in doc_ids]
        return build_index(doc_ids, reps, mode)

    def with_flags(
        self,
        budget: LengthBudget | None = None,
        prompts_enabled: bool | None = None,
        query_expansion: bool | None = None,
        interaction: str | None = None,
    ) -> "Model":
        """Same parameters under different text-handling flags (shared arrays)."""
        return replace(
            self,
            budget=budget if budget is not None else self.budget,
            prompts_enabled=self.prompts_enabled if prompts_enabled is None else prompts_enabled,
            query_expansion=self.query_expansion if query_expansion is None else query_expansion,
            interaction=interaction or self.interaction,
        )


def fresh_model(
    tok_cfg: TokenizerConfig,
    enc_cfg: EncoderConfig,
    budget: LengthBudget,
    seed: int,
    prompts_enabled: bool = True,
    query_expansion: bool = False,
    interaction: str = "late",
) -> Model:
    return Model(
        tok_cfg=tok_cfg,
        enc_cfg=enc_cfg,
        budget=budget,
        params=EncoderParams.init(tok_cfg, enc_cfg, seed),
        prompts_enabled=prompts_enabled,
        query_expansion=query_expansion,
        interaction=interaction,
    )
