"""Command-line surface: subcommands, exit codes, artifacts on disk."""

import json

from colbert_lab.checkpoint import load_checkpoint
from colbert_lab.cli import main

TINY = """
# miniature world shared by the CLI tests
vocab_size = 512
d_model = 16
d_out = 8
prompt_len = 3
topics = 3
vocab_per_topic = 48
queries_per_topic = 8
docs_per_topic = 10
query_tokens = 5
doc_tokens = 16
data_seed = 2
"""

PHASE = TINY + """
phase = unsupervised
batch_size = 8
epochs = 1
lr = 0.01
query_len = 8
doc_len = 18
sources = synthetic_pairs
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


class TestGenData:
    def test_writes_beir_layout(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY)
        out = tmp_path / "data"
        rc = main(["gen-data", "--config", cfg, "--out", str(out)])
        assert rc == 0
        assert (out / "corpus.jsonl").exists()
        assert (out / "queries.jsonl").exists()
        assert (out / "qrels" / "test.tsv").exists()
        assert (out / "config-snapshot.txt").exists()
        assert "source synthetic_pairs" in capsys.readouterr().out

    def test_export_beir_round_trips_a_directory(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY)
        first = tmp_path / "first"
        assert main(["gen-data", "--config", cfg, "--out", str(first)]) == 0
        reexport_cfg = write_cfg(tmp_path, f"data = {first}\n", name="re.cfg")
        second = tmp_path / "second"
        assert main(["export-beir", "--config", reexport_cfg, "--out", str(second)]) == 0
        assert (second / "corpus.jsonl").read_text() == (first / "corpus.jsonl").read_text()


class TestTrainPhase:
    def test_trains_and_saves_checkpoint(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, PHASE)
        out = tmp_path / "run"
        rc = main(["train-phase", "--config", cfg, "--out", str(out), "--format", "jsonl"])
        assert rc == 0
        ckpt = load_checkpoint(out / "unsupervised.ckpt")
        assert ckpt.config["provenance"]["phase"] == "unsupervised"
        log_lines = (out / "train-log.jsonl").read_text().splitlines()
        assert len(log_lines) == 3  # 24 pairs, batch 8
        assert json.loads(log_lines[0])["loss"]
        assert "phase unsupervised" in capsys.readouterr().out

    def test_unknown_config_key_exits_1(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, PHASE + "not_a_key = 1\n")
        rc = main(["train-phase", "--config", cfg, "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "not_a_key" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_cfg(tmp_path, PHASE)
        out1, out2, out3 = (tmp_path / n for n in ("s1", "s2", "s3"))
        main(["train-phase", "--config", cfg, "--out", str(out1), "--seed", "7"])
        main(["train-phase", "--config", cfg, "--out", str(out2), "--seed", "7"])
        main(["train-phase", "--config", cfg, "--out", str(out3), "--seed", "8"])
        b1 = (out1 / "unsupervised.ckpt").read_bytes()
        b2 = (out2 / "unsupervised.ckpt").read_bytes()
        b3 = (out3 / "unsupervised.ckpt").read_bytes()
        assert b1 == b2
        assert b1 != b3

    def test_config_snapshot_reruns_identically(self, tmp_path):
        cfg = write_cfg(tmp_path, PHASE)
        out1 = tmp_path / "orig"
        main(["train-phase", "--config", cfg, "--out", str(out1)])
        snapshot = out1 / "config-snapshot.txt"
        # the snapshot is itself a valid config file
        out2 = tmp_path / "rerun"
        rc = main(["train-phase", "--config", str(snapshot), "--out", str(out2)])
        assert rc == 0
        assert (out1 / "unsupervised.ckpt").read_bytes() == (out2 / "unsupervised.ckpt").read_bytes()


class TestDivergence:
    def test_diverged_training_exits_2_and_saves_state(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path,
            PHASE.replace("lr = 0.01", "lr = 2000.0").replace("epochs = 1", "epochs = 3")
            + "temperature = trainable\n",
            name="diverge.cfg",
        )
        out = tmp_path / "dv"
        rc = main(["train-phase", "--config", cfg, "--out", str(out)])
        assert rc == 2
        assert "diverged" in capsys.readouterr().err
        assert (out / "unsupervised.diverged.ckpt").exists()
        load_checkpoint(out / "unsupervised.diverged.ckpt")  # parseable state


class TestEval:
    def test_eval_checkpoint_csv(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, PHASE)
        out = tmp_path / "run"
        main(["train-phase", "--config", cfg, "--out", str(out)])
        eval_cfg = write_cfg(tmp_path, TINY + "k = 10\n", name="eval.cfg")
        rc = main([
            "eval", "--config", eval_cfg, "--checkpoint", str(out / "unsupervised.ckpt"),
            "--out", str(tmp_path / "ev"),
        ])
        assert rc == 0
        lines = (tmp_path / "ev" / "eval.csv").read_text().splitlines()
        assert lines[0] == "query_id,ndcg"
        assert "mean nDCG@10" in capsys.readouterr().out

    def test_eval_without_checkpoint_exits_1(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY)
        rc = main(["eval", "--config", cfg, "--out", str(tmp_path / "ev")])
        assert rc == 1

    def test_missing_checkpoint_file_exits_3(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY)
        rc = main([
            "eval", "--config", cfg, "--checkpoint", str(tmp_path / "missing.ckpt"),
            "--out", str(tmp_path / "ev"),
        ])
        assert rc == 3

    def test_corrupt_checkpoint_exits_3(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY)
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + b"\x00" * 20)
        rc = main(["eval", "--config", cfg, "--checkpoint", str(bad), "--out", str(tmp_path / "ev")])
        assert rc == 3


class TestSweepCommand:
    def test_sweep_writes_csv(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path,
            PHASE + "lr_min = 1e-3\nlr_max = 1e-1\nlr_points = 2\n",
            name="sweep.cfg",
        )
        out = tmp_path / "sweep"
        rc = main(["sweep", "--config", cfg, "--out", str(out)])
        assert rc == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "lr,subset_ndcg,status"
        assert len(lines) == 3
        assert "best lr" in capsys.readouterr().out

    def test_sweep_without_range_exits_1(self, tmp_path):
        cfg = write_cfg(tmp_path, PHASE)
        rc = main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")])
        assert rc == 1


class TestPipelineCommand:
    def test_pipeline_writes_checkpoints_and_table(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path,
            TINY
            + "variant = a\n"
            + "unsupervised_batch_size = 8\nunsupervised_epochs = 1\nunsupervised_chunk_size = 0\n"
            + "unsupervised_query_len = 8\nunsupervised_doc_len = 18\n"
            + "supervised_batch_size = 8\nsupervised_epochs = 1\n"
            + "supervised_query_len = 8\nsupervised_doc_len = 18\n"
            + "kd_batch_size = 8\nkd_epochs = 1\nkd_accum_factor = 2\n"
            + "kd_query_len = 8\nkd_doc_len = 18\n",
            name="pipe.cfg",
        )
        out = tmp_path / "pipe"
        rc = main(["run-pipeline", "--config", cfg, "--out", str(out)])
        assert rc == 0
        for phase in ("unsupervised", "supervised", "kd"):
            assert (out / f"a.{phase}.ckpt").exists()
        table = (out / "pipeline-a.csv").read_text().splitlines()
        assert table[0] == "stage,interaction,ndcg@10"
        assert len(table) == 5  # untrained + 3 phases
        assert "pipeline a finished" in capsys.readouterr().out


class TestAblateCommand:
    def test_grid_csv_has_four_rows(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            TINY
            + "variant = c\n"
            + "unsupervised_batch_size = 8\nunsupervised_epochs = 1\nunsupervised_chunk_size = 0\n"
            + "unsupervised_query_len = 8\nunsupervised_doc_len = 18\n"
            + "supervised_batch_size = 8\nsupervised_epochs = 1\n"
            + "supervised_query_len = 8\nsupervised_doc_len = 18\n"
            + "kd_batch_size = 8\nkd_epochs = 1\n"
            + "kd_query_len = 8\nkd_doc_len = 18\n",
            name="ablate.cfg",
        )
        out = tmp_path / "grid"
        rc = main(["ablate", "--config", cfg, "--out", str(out)])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert len(lines) == 5
        header = lines[0].split(",")
        assert header[:2] == ["prompts", "length_compensation"]


class TestInspect:
    def test_prints_shapes_and_config(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, PHASE)
        out = tmp_path / "run"
        main(["train-phase", "--config", cfg, "--out", str(out)])
        rc = main(["inspect-checkpoint", str(out / "unsupervised.ckpt")])
        assert rc == 0
        text = capsys.readouterr().out
        assert "matrix embedding: 512x16" in text
        assert "sha256:" in text
        assert '"provenance"' in text
