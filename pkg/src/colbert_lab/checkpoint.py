"""Binary checkpoint persistence.

Layout (little-endian throughout):

* magic bytes ``CBZ1``
* format version, u32
* matrix count, u32
* per matrix: name length u32, UTF-8 name, rows u32, cols u32, then
  rows*cols IEEE-754 binary64 values in row-major order
* trailing config: JSON length u32, UTF-8 JSON

The JSON carries the tokenizer/encoder configuration, length budgets and
flags, the temperature policy, and provenance (pipeline, phase, seed,
config hash). Loading validates the magic, version, and every shape, and
reports the byte offset of any truncation; a bad file never yields a
partial checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, EncoderParams, LengthBudget, TokenizerConfig
from .errors import CheckpointError
from .losses import TemperatureParam
from .model import Model

MAGIC = b"CBZ1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    matrices: dict[str, np.ndarray]
    config: dict
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(
        cls,
        model: Model,
        temp: TemperatureParam,
        provenance: dict | None = None,
    ) -> "Checkpoint":
        matrices = {name: arr.copy() for name, arr in model.params.named().items()}
        matrices["log_tau"] = temp.log_tau.copy()
        config = {
            "tokenizer": {
                "vocab_size": model.tok_cfg.vocab_size,
                "prompt_len": model.tok_cfg.prompt_len,
                "lowercase": model.tok_cfg.lowercase,
            },
            "encoder": {
                "d_model": model.enc_cfg.d_model,
                "d_out": model.enc_cfg.d_out,
                "use_context_mix": model.enc_cfg.use_context_mix,
                "score_prompt_tokens": model.enc_cfg.score_prompt_tokens,
                "norm_eps": model.enc_cfg.norm_eps,
            },
            "budget": {
                "query_len": model.budget.query_len,
                "doc_len": model.budget.doc_len,
                "length_compensation": model.budget.length_compensation,
            },
            "flags": {
                "prompts_enabled": model.prompts_enabled,
                "query_expansion": model.query_expansion,
                "interaction": model.interaction,
            },
            "temperature": {"trainable": temp.trainable, "tau": temp.tau},
            "provenance": provenance or {},
        }
        return cls(matrices=matrices, config=config)

    def to_model(self) -> tuple[Model, TemperatureParam]:
        cfg = self.config
        tok_cfg = TokenizerConfig(**cfg["tokenizer"])
        enc_cfg = EncoderConfig(**cfg["encoder"])
        budget = LengthBudget(**cfg["budget"])
        emb = self.matrices["embedding"]
        proj = self.matrices["projection"]
        expect_emb = (tok_cfg.vocab_size, enc_cfg.d_model)
        expect_proj = (enc_cfg.d_model, enc_cfg.d_out)
        if emb.shape != expect_emb or proj.shape != expect_proj:
            raise CheckpointError(
                f"matrix shapes {emb.shape}/{proj.shape} do not match the "
                f"stored configuration {expect_emb}/{expect_proj}"
            )
        params = EncoderParams(
            embedding=emb.copy(),
            projection=proj.copy(),
            context_mix=self.matrices["context_mix"].copy()
            if "context_mix" in self.matrices
            else None,
        )
        model = Model(
            tok_cfg=tok_cfg,
            enc_cfg=enc_cfg,
            budget=budget,
            params=params,
            prompts_enabled=cfg["flags"]["prompts_enabled"],
            query_expansion=cfg["flags"]["query_expansion"],
            interaction=cfg["flags"]["interaction"],
        )
        tcfg = cfg["temperature"]
        log_tau = self.matrices.get("log_tau")
        if log_tau is not None:
            temp = TemperatureParam(log_tau=log_tau.copy(), trainable=tcfg["trainable"])
        else:
            temp = TemperatureParam.fixed(tcfg["tau"])
        return model, temp

    def digest(self) -> str:
        return hashlib.sha256(serialize_checkpoint(self)).hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()[:16]


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", ckpt.version)
    out += struct.pack("<I", len(ckpt.matrices))
    for name in sorted(ckpt.matrices):
        arr = np.ascontiguousarray(ckpt.matrices[name], dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"matrix {name!r} must be 2-D")
        name_b = name.encode("utf-8")
        out += struct.pack("<I", len(name_b))
        out += name_b
        out += struct.pack("<II", arr.shape[0], arr.shape[1])
        out += arr.tobytes(order="C")
    blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob))
    out += blob
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = serialize_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def deserialize_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    count = r.u32("matrix count")
    matrices: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "matrix name").decode("utf-8")
        rows = r.u32(f"{name} rows")
        cols = r.u32(f"{name} cols")
        raw = r.take(rows * cols * 8, f"{name} values")
        matrices[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    blob_len = r.u32("config length")
    blob = r.take(blob_len, "config")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after offset {r.pos}")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    return Checkpoint(matrices=matrices, config=config, version=version)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_checkpoint(data)
