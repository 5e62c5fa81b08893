"""Command-line interface.

Subcommands: ``gen-data``, ``train-phase``, ``run-pipeline``, ``ablate``,
``sweep``, ``eval``, ``export-beir``, ``inspect-checkpoint``. All take
``--config PATH`` (flat ``key = value`` file), ``--seed N``, ``--out DIR``,
``--threads N`` (0 = sequential deterministic mode), and ``--format
csv|jsonl`` where a report is produced.

Exit codes: 0 success, 1 configuration error, 2 training divergence,
3 I/O or file-format error. Every run writes a resolved config snapshot
(``config-snapshot.txt``) sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import kernels
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    DataSettings,
    ModelSettings,
    PhaseConfig,
    apply_table1_preset,
    default_phase_config,
    load_config_file,
    pipeline_config_from_kv,
    reject_unknown,
)
from .data import export_beir_dir
from .errors import (
    CheckpointError,
    ColbertLabError,
    ConfigError,
    ContractError,
    DataFormatError,
    DivergenceError,
    InputError,
    ShapeError,
)
from .evaluation import (
    SubsetSpec,
    evaluate,
    evaluate_subset,
    write_report_csv,
    write_report_jsonl,
    write_sweep_csv,
)
from .pipeline import (
    DataContext,
    run_ablation_grid,
    run_phase,
    run_pipeline,
    sweep_phase,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


def _add_common(parser: argparse.ArgumentParser, with_format: bool = True):
    parser.add_argument("--config", type=str, default=None, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", type=str, default=".", help="output directory")
    parser.add_argument(
        "--threads", type=int, default=0,
        help="scoring threads; 0 is the sequential bit-reproducible mode",
    )
    if with_format:
        parser.add_argument("--format", choices=["csv", "jsonl"], default="csv")


def _load_kv(args) -> dict[str, str]:
    kv = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        kv["seed"] = str(args.seed)
        kv.setdefault("data_seed", str(args.seed))
    return kv


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, sections: dict[str, dict]) -> None:
    lines = []
    for title, kv in sections.items():
        lines.append(f"# {title}")
        for key in sorted(kv):
            lines.append(f"{key} = {kv[key]}")
    (out / "config-snapshot.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _phase_kv(cfg: PhaseConfig) -> dict:
    kv = {
        "phase": cfg.phase,
        "interaction": cfg.interaction,
        "batch_size": cfg.batch_size,
        "chunk_size": cfg.chunk_size,
        "workers": cfg.workers,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "lr": cfg.lr,
        "lr_points": cfg.lr_points,
        "temperature": cfg.temperature,
        "temperature_value": cfg.temperature_value,
        "query_len": cfg.query_len,
        "doc_len": cfg.doc_len,
        "prompts": str(cfg.prompts_enabled).lower(),
        "length_compensation": str(cfg.length_compensation).lower(),
        "query_expansion": str(cfg.query_expansion).lower(),
        "include_in_batch": str(cfg.include_in_batch).lower(),
        "accum_factor": cfg.accum_factor,
        "sources": ",".join(cfg.sources),
    }
    if cfg.lr_min is not None:
        kv["lr_min"] = cfg.lr_min
        kv["lr_max"] = cfg.lr_max
    return kv


def _model_kv(ms: ModelSettings) -> dict:
    return {
        "vocab_size": ms.vocab_size,
        "d_model": ms.d_model,
        "d_out": ms.d_out,
        "prompt_len": ms.prompt_len,
        "lowercase": str(ms.lowercase).lower(),
        "context_mix": str(ms.use_context_mix).lower(),
        "score_prompt_tokens": str(ms.score_prompt_tokens).lower(),
    }


def _data_kv(ds: DataSettings) -> dict:
    return {
        "data": ds.data,
        "topics": ds.topics,
        "vocab_per_topic": ds.vocab_per_topic,
        "queries_per_topic": ds.queries_per_topic,
        "docs_per_topic": ds.docs_per_topic,
        "query_tokens": ds.query_tokens,
        "doc_tokens": ds.doc_tokens,
        "distractor_rate": ds.distractor_rate,
        "data_seed": ds.data_seed,
        "negatives_per_query": ds.negatives_per_query,
        "kd_candidates": ds.kd_candidates,
        "teacher_gamma": ds.teacher_gamma,
    }


def _parse_phase_setup(kv: dict[str, str]):
    model_settings = ModelSettings.from_kv(kv)
    data_settings = DataSettings.from_kv(kv)
    preset = kv.pop("preset", "")
    if preset not in ("", "table1"):
        raise ConfigError(f"unknown preset {preset!r}")
    init_path = kv.pop("init_checkpoint", None)
    phase_name = kv.get("phase", "unsupervised")
    base = default_phase_config(phase_name)
    cfg = PhaseConfig.from_kv(kv, base)
    if preset == "table1":
        cfg = apply_table1_preset(cfg)
    reject_unknown(kv, "config")
    init = load_checkpoint(init_path) if init_path else None
    return model_settings, data_settings, cfg, init, init_path


def _write_rows(path: Path, fmt: str, header: list[str], rows: list[list]):
    if fmt == "csv":
        with open(path.with_suffix(".csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    else:
        with open(path.with_suffix(".jsonl"), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(dict(zip(header, row))) + "\n")


# ---------------------------------------------------------------------------
# Subcommand handlers.
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    kv = _load_kv(args)
    ModelSettings.from_kv(kv)  # consume model keys so one config serves every command
    ds = DataSettings.from_kv(kv)
    reject_unknown(kv, "config")
    out = _out_dir(args)
    data = DataContext.from_settings(ds)
    export_beir_dir(data.corpus, data.queries, data.qrels, out)
    _snapshot(out, {"data": _data_kv(ds)})
    print(
        f"wrote {len(data.corpus)} docs, {len(data.queries)} queries, "
        f"{sum(len(v) for v in data.qrels.values())} qrels rows to {out}"
    )
    for sid, src in data.sources.items():
        print(f"source {sid}: kind={src.kind} samples={len(src.samples)}")
    return EXIT_OK


def _cmd_export_beir(args) -> int:
    return _cmd_gen_data(args)


def _cmd_train_phase(args) -> int:
    kv = _load_kv(args)
    model_settings, data_settings, cfg, init, init_path = _parse_phase_setup(kv)
    out = _out_dir(args)
    data = DataContext.from_settings(data_settings)
    ckpt, log = run_phase(cfg, init, data, model_settings, out_dir=str(out))
    path = out / f"{cfg.phase}.ckpt"
    save_checkpoint(ckpt, path)
    sections = {"model": _model_kv(model_settings), "data": _data_kv(data_settings), "phase": _phase_kv(cfg)}
    if init_path:
        sections["init"] = {"init_checkpoint": init_path}
    _snapshot(out, sections)
    header = ["step", "loss", "grad_norm", "tau", "chunks", "wall_time"]
    rows = [
        [i, f"{r.loss:.6f}", f"{r.grad_norm:.6f}", f"{r.tau:.4f}", r.chunk_count, f"{r.wall_time:.3f}"]
        for i, r in enumerate(log.steps)
    ]
    _write_rows(out / "train-log", args.format, header, rows)
    if log.sweep_points is not None:
        write_sweep_csv(log.sweep_points, out / "sweep.csv")
    print(
        f"phase {cfg.phase} ({cfg.interaction}): {len(log.steps)} steps, "
        f"lr={log.chosen_lr:.3e}, tau={log.final_tau:.3f}, "
        f"final loss={log.steps[-1].loss:.4f} -> {path}"
    )
    return EXIT_OK


def _cmd_run_pipeline(args) -> int:
    kv = _load_kv(args)
    model_settings = ModelSettings.from_kv(kv)
    data_settings = DataSettings.from_kv(kv)
    init_path = kv.pop("init_checkpoint", None)
    pcfg = pipeline_config_from_kv(kv)
    reject_unknown(kv, "config")
    out = _out_dir(args)
    data = DataContext.from_settings(data_settings)
    init = load_checkpoint(init_path) if init_path else None
    result = run_pipeline(pcfg, data, model_settings, init=init, out_dir=str(out))
    sections = {"pipeline": {"variant": pcfg.variant, "seed": pcfg.seed},
                "model": _model_kv(model_settings), "data": _data_kv(data_settings)}
    for p in pcfg.phases:
        sections[f"phase {p.phase}"] = {f"{p.phase}_{k}": v for k, v in _phase_kv(p).items() if k != "phase"}
    _snapshot(out, sections)
    header = ["stage", "interaction", "ndcg@10"]
    rows = [[stage, inter, f"{val:.4f}"] for stage, inter, val in result.table()]
    _write_rows(out / f"pipeline-{pcfg.variant}", args.format, header, rows)
    print(f"pipeline {pcfg.variant} finished in {result.seconds:.1f}s")
    for stage, inter, val in result.table():
        print(f"  {stage:12s} {inter:5s} nDCG@10={val:.4f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    kv = _load_kv(args)
    model_settings = ModelSettings.from_kv(kv)
    data_settings = DataSettings.from_kv(kv)
    init_path = kv.pop("init_checkpoint", None)
    pcfg = pipeline_config_from_kv(kv)
    reject_unknown(kv, "config")
    out = _out_dir(args)
    data = DataContext.from_settings(data_settings)
    init = load_checkpoint(init_path) if init_path else None
    rows = run_ablation_grid(pcfg, data, model_settings, init=init)
    header = [
        "prompts", "length_compensation", "effective_query_len",
        "effective_doc_len", "ndcg@10", "delta",
    ]
    table = [
        [str(r.prompts).lower(), str(r.length_compensation).lower(),
         r.effective_query_len, r.effective_doc_len, f"{r.ndcg:.4f}", f"{r.delta:+.4f}"]
        for r in rows
    ]
    _write_rows(out / "ablation", args.format, header, table)
    _snapshot(out, {"pipeline": {"variant": pcfg.variant, "seed": pcfg.seed},
                    "model": _model_kv(model_settings), "data": _data_kv(data_settings)})
    print("prompt/length ablation grid:")
    for r in rows:
        print(
            f"  prompts={str(r.prompts).lower():5s} length_comp={str(r.length_compensation).lower():5s} "
            f"q_len={r.effective_query_len:3d} nDCG@10={r.ndcg:.4f} ({r.delta:+.4f})"
        )
    return EXIT_OK


def _cmd_sweep(args) -> int:
    kv = _load_kv(args)
    model_settings, data_settings, cfg, init, _ = _parse_phase_setup(kv)
    if not cfg.has_sweep:
        raise ConfigError("sweep needs lr_min/lr_max (or preset = table1)")
    out = _out_dir(args)
    data = DataContext.from_settings(data_settings)
    best_lr, points = sweep_phase(cfg, init, data, model_settings)
    write_sweep_csv(points, out / "sweep.csv")
    _snapshot(out, {"model": _model_kv(model_settings), "data": _data_kv(data_settings), "phase": _phase_kv(cfg)})
    print(f"swept {len(points)} points in [{cfg.lr_min:.1e}, {cfg.lr_max:.1e}]")
    for p in points:
        score = "failed" if p.status != "ok" else f"{p.score:.4f}"
        marker = " *" if p.status == "ok" and p.lr == best_lr else ""
        print(f"  lr={p.lr:.3e} subset nDCG@10={score}{marker}")
    print(f"best lr: {best_lr:.6e}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    kv = _load_kv(args)
    ckpt_path = kv.pop("checkpoint", None) or args.checkpoint
    if not ckpt_path:
        raise ConfigError("eval needs a checkpoint (config key 'checkpoint' or --checkpoint)")
    ModelSettings.from_kv(kv)  # the checkpoint carries the model; keys stay legal
    data_settings = DataSettings.from_kv(kv)
    k = int(kv.pop("k", "10"))
    gain = kv.pop("gain", "linear")
    interaction = kv.pop("interaction", "") or None
    use_subset = kv.pop("subset", "false").lower() in ("1", "true", "yes", "on")
    subset = SubsetSpec(
        max_queries=int(kv.pop("subset_queries", "50")),
        max_corpus=int(kv.pop("subset_corpus", "2000")),
        seed=int(kv.pop("subset_seed", kv.get("seed", "0"))),
    )
    kv.pop("seed", None)
    kv.pop("data_seed", None)
    reject_unknown(kv, "config")
    out = _out_dir(args)
    data = DataContext.from_settings(data_settings)
    model, _ = load_checkpoint(ckpt_path).to_model()
    if use_subset:
        report = evaluate_subset(
            model, data.corpus, data.queries, data.qrels, subset, k=k,
            interaction=interaction, gain=gain,
        )
    else:
        report = evaluate(
            model, data.corpus, data.queries, data.qrels, k=k,
            interaction=interaction, gain=gain,
        )
    if args.format == "csv":
        write_report_csv(report, out / "eval.csv")
    else:
        write_report_jsonl(report, out / "eval.jsonl")
    print(
        f"mean nDCG@{k} = {report.mean:.4f} over {report.query_count} queries "
        f"({report.skipped} skipped, {report.seconds:.1f}s)"
    )
    return EXIT_OK


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"format version: {ckpt.version}")
    for name in sorted(ckpt.matrices):
        arr = ckpt.matrices[name]
        print(f"matrix {name}: {arr.shape[0]}x{arr.shape[1]}")
    print(f"sha256: {ckpt.digest()}")
    print(json.dumps(ckpt.config, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colbert-lab",
        description="Train and evaluate desk-scale late-interaction retrievers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, help_text in [
        ("gen-data", _cmd_gen_data, "generate the synthetic corpus and write it in BEIR layout"),
        ("export-beir", _cmd_export_beir, "export the configured dataset in BEIR layout"),
        ("train-phase", _cmd_train_phase, "train a single phase"),
        ("run-pipeline", _cmd_run_pipeline, "run a full pipeline variant (a, b, or c)"),
        ("ablate", _cmd_ablate, "run the 2x2 prompt/length ablation grid"),
        ("sweep", _cmd_sweep, "sweep the learning rate for one phase"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint contents")
    p.add_argument("checkpoint", type=str)
    p.set_defaults(handler=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "threads"):
        kernels.set_threads(args.threads)
    try:
        return args.handler(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, ShapeError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ColbertLabError as exc:  # pragma: no cover - catch-all for new kinds
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
