"""Chunked and gathered training steps versus the full-batch reference,
the Adam optimizer against its textbook recurrence, and batch sampling."""

import numpy as np
import pytest

from colbert_lab.autodiff import GradStore
from colbert_lab.encoder import (
    EncoderConfig,
    EncoderParams,
    LengthBudget,
    TokenizerConfig,
    tokenize,
)
from colbert_lab.errors import ConfigError, ContractError, DivergenceError
from colbert_lab.losses import TemperatureParam
from colbert_lab.trainer import (
    AdamConfig,
    ChunkPlan,
    LossSpec,
    OptimizerState,
    TrainSample,
    WorkerSet,
    adam_update,
    reps_per_sample,
    single_source_batches,
    train_step_accumulated,
    train_step_full,
    train_step_gathered,
    train_step_gradcache,
    trainable_params,
)

from conftest import assert_grads_close

TOK = TokenizerConfig(vocab_size=128, prompt_len=2)
BUDGET = LengthBudget(query_len=4, doc_len=6)
ENC = EncoderConfig(d_model=8, d_out=6)


def _text(rng, n):
    return " ".join(f"w{rng.integers(0, 50)}" for _ in range(n))


def make_batch(kind, b=8, k=2, seed=7):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(b):
        q = tokenize(_text(rng, 3), "query", TOK, BUDGET, True)
        n_docs = 1 if kind == "infonce" else 1 + k
        docs = [tokenize(_text(rng, 5), "document", TOK, BUDGET, True) for _ in range(n_docs)]
        teacher = rng.standard_normal(n_docs) if kind == "kd" else None
        out.append(TrainSample(q, docs, teacher=teacher))
    return out


def make_spec(kind, interaction="late", trainable_temp=None):
    if trainable_temp is None:
        trainable_temp = kind != "kd"
    temp = (
        TemperatureParam.learnable(0.2) if trainable_temp else TemperatureParam.fixed(0.2)
    )
    return LossSpec(kind=kind, temp=temp, enc_cfg=ENC, interaction=interaction)


def grads_of(report):
    return report.instrumentation["grads"]


class TestChunkPlan:
    def test_partition_in_order(self):
        plan = ChunkPlan.make(10, 3)
        assert plan.bounds == [(0, 3), (3, 6), (6, 9), (9, 10)]
        plan.validate(10)

    def test_coverage_gap_rejected_before_compute(self):
        plan = ChunkPlan.make(8, 4)
        with pytest.raises(ContractError):
            plan.validate(9)

    def test_bad_sizes(self):
        with pytest.raises(ConfigError):
            ChunkPlan.make(0, 1)


class TestWorkerSet:
    def test_shards_partition_batch(self):
        ws = WorkerSet.make(3, 10)
        got = sorted(i for s in ws.shards for i in s)
        assert got == list(range(10))

    def test_empty_shard_rejected(self):
        with pytest.raises(ContractError):
            WorkerSet.make(5, 3)


class TestGradCacheEquivalence:
    @pytest.mark.parametrize("kind", ["infonce", "supervised", "kd"])
    def test_single_chunk_degenerate_plan(self, kind):
        params = EncoderParams.init(TOK, ENC, seed=1)
        spec = make_spec(kind)
        batch = make_batch(kind)
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        cached = train_step_gradcache(
            params, batch, spec, ChunkPlan.make(len(batch), len(batch)), opt, apply_update=False
        )
        assert_grads_close(grads_of(full), grads_of(cached), rtol=1e-10)
        assert cached.loss == pytest.approx(full.loss, abs=1e-12)

    @pytest.mark.parametrize("kind", ["infonce", "supervised", "kd"])
    @pytest.mark.parametrize("chunk", [1, 2, 4, 8])
    def test_all_chunkings_match_full(self, kind, chunk):
        params = EncoderParams.init(TOK, ENC, seed=2)
        spec = make_spec(kind)
        batch = make_batch(kind, b=8)
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        cached = train_step_gradcache(
            params, batch, spec, ChunkPlan.make(8, chunk), opt, apply_update=False
        )
        assert_grads_close(grads_of(full), grads_of(cached), rtol=1e-8)

    @pytest.mark.parametrize("interaction", ["late", "dense"])
    def test_both_interactions(self, interaction):
        params = EncoderParams.init(TOK, ENC, seed=3)
        spec = make_spec("infonce", interaction=interaction)
        batch = make_batch("infonce")
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        cached = train_step_gradcache(
            params, batch, spec, ChunkPlan.make(8, 3), opt, apply_update=False
        )
        assert_grads_close(grads_of(full), grads_of(cached), rtol=1e-8)

    def test_peak_recorded_reps_bounded_by_chunk(self):
        params = EncoderParams.init(TOK, ENC, seed=4)
        spec = make_spec("supervised")
        batch = make_batch("supervised", b=8, k=2)
        opt = OptimizerState(AdamConfig())
        chunk = 2
        report = train_step_gradcache(
            params, batch, spec, ChunkPlan.make(8, chunk), opt, apply_update=False
        )
        rps = reps_per_sample(batch)
        peak = report.instrumentation["peak_live_reps"]
        cots = report.instrumentation["cached_cotangents"]
        assert peak <= chunk * rps
        assert cots == len(batch) * rps
        assert peak + cots <= chunk * rps + len(batch) * rps

    def test_chunk_plan_mismatch_fails_before_compute(self):
        params = EncoderParams.init(TOK, ENC, seed=5)
        spec = make_spec("infonce")
        batch = make_batch("infonce", b=8)
        with pytest.raises(ContractError):
            train_step_gradcache(
                params, batch, spec, ChunkPlan.make(6, 2), OptimizerState(AdamConfig())
            )


class TestGatherEquivalence:
    def test_single_worker_identical(self):
        params = EncoderParams.init(TOK, ENC, seed=6)
        spec = make_spec("infonce")
        batch = make_batch("infonce")
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        gathered = train_step_gathered(
            params, batch, spec, WorkerSet.make(1, 8), opt, apply_update=False
        )
        assert_grads_close(grads_of(full), grads_of(gathered), rtol=1e-10)

    @pytest.mark.parametrize("kind", ["infonce", "supervised", "kd"])
    @pytest.mark.parametrize("workers", [2, 4, 8])
    def test_summed_worker_grads_match_full(self, kind, workers):
        params = EncoderParams.init(TOK, ENC, seed=7)
        spec = make_spec(kind)
        batch = make_batch(kind, b=8)
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        gathered = train_step_gathered(
            params, batch, spec, WorkerSet.make(workers, 8), opt, apply_update=False
        )
        assert_grads_close(grads_of(full), grads_of(gathered), rtol=1e-8)

    def test_composition_gradcache_inside_workers(self):
        params = EncoderParams.init(TOK, ENC, seed=8)
        spec = make_spec("infonce")
        batch = make_batch("infonce", b=8)
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        combo = train_step_gathered(
            params, batch, spec, WorkerSet.make(2, 8), opt, chunk_size=2, apply_update=False
        )
        assert_grads_close(grads_of(full), grads_of(combo), rtol=1e-8)

    def test_worker_execution_order_does_not_matter(self):
        """The reduction is defined in worker-index order, so two runs give
        bit-identical sums regardless of how workers were scheduled."""
        params = EncoderParams.init(TOK, ENC, seed=9)
        spec = make_spec("infonce")
        batch = make_batch("infonce", b=8)
        opt = OptimizerState(AdamConfig())
        a = train_step_gathered(params, batch, spec, WorkerSet.make(4, 8), opt, apply_update=False)
        b = train_step_gathered(params, batch, spec, WorkerSet.make(4, 8), opt, apply_update=False)
        for name in grads_of(a).names():
            assert np.array_equal(grads_of(a)[name], grads_of(b)[name])


class TestAccumulatedKd:
    def test_matches_unaccumulated(self):
        params = EncoderParams.init(TOK, ENC, seed=10)
        spec = make_spec("kd")
        batch = make_batch("kd", b=8)
        opt = OptimizerState(AdamConfig())
        full = train_step_full(params, batch, spec, opt, apply_update=False)
        acc = train_step_accumulated(params, batch, spec, 2, opt, apply_update=False)
        assert_grads_close(grads_of(full), grads_of(acc), rtol=1e-10)
        assert acc.loss == pytest.approx(full.loss, abs=1e-12)

    def test_rejected_for_contrastive_losses(self):
        params = EncoderParams.init(TOK, ENC, seed=11)
        spec = make_spec("infonce")
        batch = make_batch("infonce")
        with pytest.raises(ContractError):
            train_step_accumulated(params, batch, spec, 2, OptimizerState(AdamConfig()))


class TestTrainStepFull:
    def test_zero_lr_leaves_params_bit_unchanged(self):
        params = EncoderParams.init(TOK, ENC, seed=12)
        spec = make_spec("infonce")
        batch = make_batch("infonce")
        before = {k: v.copy() for k, v in trainable_params(params, spec.temp).items()}
        opt = OptimizerState(AdamConfig(lr=0.0))
        train_step_full(params, batch, spec, opt)
        after = trainable_params(params, spec.temp)
        for k in before:
            assert np.array_equal(before[k], after[k])
        assert opt.step == 1

    @pytest.mark.parametrize("seed", range(50))
    def test_small_lr_descends_on_fixed_batch(self, seed):
        params = EncoderParams.init(TOK, ENC, seed=seed)
        spec = make_spec("infonce", trainable_temp=False)
        batch = make_batch("infonce", seed=seed)
        opt = OptimizerState(AdamConfig(lr=1e-4, weight_decay=0.0))
        r1 = train_step_full(params, batch, spec, opt)
        r2 = train_step_full(params, batch, spec, opt, apply_update=False)
        assert r2.loss <= r1.loss + 1e-12

    def test_report_loss_matches_loss_module(self):
        from colbert_lab.trainer import _encode_sample, build_loss
        from colbert_lab.autodiff import Tape

        params = EncoderParams.init(TOK, ENC, seed=13)
        spec = make_spec("supervised")
        batch = make_batch("supervised")
        report = train_step_full(params, batch, spec, OptimizerState(AdamConfig()), apply_update=False)
        tape = Tape()
        reps = [_encode_sample(params, s, spec, tape) for s in batch]
        loss = build_loss(tape, reps, batch, spec)
        assert report.loss == pytest.approx(loss.value[0, 0], abs=1e-12)

    def test_divergent_forward_aborts_with_diagnostic(self):
        params = EncoderParams.init(TOK, ENC, seed=14)
        spec = make_spec("infonce")
        spec.temp.log_tau[0, 0] = -1e4  # collapsed temperature: exp(-log_tau) overflows
        batch = make_batch("infonce")
        with pytest.raises(DivergenceError):
            train_step_full(params, batch, spec, OptimizerState(AdamConfig()))


class TestAdam:
    def test_zero_grads_zero_decay_keep_params(self):
        opt = OptimizerState(AdamConfig(lr=0.1, weight_decay=0.0))
        params = {"w": np.ones((2, 3))}
        adam_update(opt, GradStore({"w": np.zeros((2, 3))}), params)
        assert np.array_equal(params["w"], np.ones((2, 3)))
        assert opt.step == 1

    def test_first_step_magnitude(self):
        rng = np.random.default_rng(15)
        g = rng.standard_normal((3, 3))
        g[np.abs(g) < 0.1] = 0.5  # keep |g| well above eps
        cfg = AdamConfig(lr=1e-3, weight_decay=0.0)
        opt = OptimizerState(cfg)
        params = {"w": np.zeros((3, 3))}
        adam_update(opt, GradStore({"w": g.copy()}), params)
        want = -cfg.lr * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(params["w"], want, rtol=1e-12)

    def test_two_steps_match_textbook_recurrence(self):
        rng = np.random.default_rng(16)
        cfg = AdamConfig(lr=0.01, weight_decay=0.0)
        opt = OptimizerState(cfg)
        w = rng.standard_normal((2, 2))
        params = {"w": w.copy()}
        g1 = rng.standard_normal((2, 2))
        g2 = rng.standard_normal((2, 2))

        # independent trace of the recurrence
        m = np.zeros_like(w); v = np.zeros_like(w); ref = w.copy()
        for t, g in ((1, g1), (2, g2)):
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mh = m / (1 - cfg.beta1**t)
            vh = v / (1 - cfg.beta2**t)
            ref -= cfg.lr * mh / (np.sqrt(vh) + cfg.eps)

        adam_update(opt, GradStore({"w": g1.copy()}), params)
        adam_update(opt, GradStore({"w": g2.copy()}), params)
        np.testing.assert_allclose(params["w"], ref, rtol=1e-12, atol=1e-15)

    def test_weight_decay_skips_log_tau(self):
        cfg = AdamConfig(lr=0.1, weight_decay=0.5)
        opt = OptimizerState(cfg)
        params = {"w": np.ones((1, 1)), "log_tau": np.ones((1, 1))}
        adam_update(opt, GradStore({"w": np.zeros((1, 1)), "log_tau": np.zeros((1, 1))}), params)
        assert params["log_tau"][0, 0] == 1.0
        assert params["w"][0, 0] != 1.0  # decayed

    def test_update_is_pure_function_of_inputs(self):
        rng = np.random.default_rng(17)
        g = rng.standard_normal((2, 2))

        def run():
            opt = OptimizerState(AdamConfig(lr=0.05))
            params = {"w": np.ones((2, 2))}
            adam_update(opt, GradStore({"w": g.copy()}), params)
            adam_update(opt, GradStore({"w": (2 * g).copy()}), params)
            return params["w"]

        assert np.array_equal(run(), run())

    def test_warmup_scales_early_steps(self):
        cfg = AdamConfig(lr=1.0, weight_decay=0.0, warmup_steps=4)
        opt = OptimizerState(cfg)
        params = {"w": np.zeros((1, 1))}
        adam_update(opt, GradStore({"w": np.ones((1, 1))}), params)
        # step 1 of 4: effective lr 0.25
        assert params["w"][0, 0] == pytest.approx(-0.25, rel=1e-6)


class _FakeSource:
    def __init__(self, sid, n):
        self.source_id = sid
        self.samples = list(range(n))


class TestSingleSourceBatches:
    def test_single_source_is_plain_shuffled_batching(self):
        src = _FakeSource("only", 20)
        batches = list(single_source_batches([src], 5, seed=0))
        assert len(batches) == 4
        seen = [s for _, b in batches for s in b]
        assert sorted(seen) == list(range(20))

    def test_every_batch_single_source_with_proportional_counts(self):
        a = _FakeSource("a", 100)
        b = _FakeSource("b", 300)
        batches = list(single_source_batches([a, b], 10, seed=1))
        counts = {"a": 0, "b": 0}
        for sid, batch in batches:
            assert len(batch) == 10
            origin = "a" if all(s in set(a.samples) for s in batch) else "b"
            assert sid == origin
            counts[sid] += 1
        assert counts["a"] == 10
        assert counts["b"] == 30

    def test_sample_appears_at_most_once_per_epoch(self):
        a = _FakeSource("a", 53)
        seen = []
        for _, batch in single_source_batches([a], 10, seed=2):
            seen.extend(batch)
        assert len(seen) == len(set(seen)) == 50  # 3 leftovers dropped

    def test_same_seed_identical_stream(self):
        def stream():
            a = _FakeSource("a", 40)
            b = _FakeSource("b", 60)
            return [(sid, tuple(batch)) for sid, batch in single_source_batches([a, b], 8, seed=3)]

        assert stream() == stream()

    def test_all_sources_too_small_rejected(self):
        with pytest.raises(ConfigError):
            list(single_source_batches([_FakeSource("a", 3)], 10, seed=0))

    def test_small_source_is_skipped_not_fatal(self):
        a = _FakeSource("a", 3)
        b = _FakeSource("b", 25)
        batches = list(single_source_batches([a, b], 10, seed=4))
        assert all(sid == "b" for sid, _ in batches)
        assert len(batches) == 2
