"""MaxSim semantics, blocked kernels vs. the naive oracle, retrieval rules."""

import numpy as np
import pytest

from colbert_lab import kernels
from colbert_lab.autodiff import Tape
from colbert_lab.encoder import MultiVectorRep, dense_as_rep
from colbert_lab.errors import ContractError, InputError, ShapeError
from colbert_lab.kernels import blocked_score_matrix, maxsim_many
from colbert_lab.scoring import build_index, maxsim, retrieve, score_matrix


def _rep(vals, mask=None):
    vals = np.asarray(vals, dtype=float)
    if mask is None:
        mask = np.ones(vals.shape[0], dtype=bool)
    return MultiVectorRep(vectors=vals, scoring_mask=np.asarray(mask, dtype=bool))


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def naive_maxsim(qv, qm, dv, dm):
    """Double-loop oracle, no vectorization."""
    total = 0.0
    for t in range(qv.shape[0]):
        if not qm[t]:
            continue
        best = -np.inf
        for r in range(dv.shape[0]):
            if not dm[r]:
                continue
            best = max(best, float(np.dot(qv[t], dv[r])))
        total += best
    return total


class TestMaxsim:
    def test_standard_basis_full_match(self):
        e = np.eye(3)
        q = _rep(e[:2])
        d = _rep(e[:2])
        assert maxsim(q, d) == pytest.approx(2.0, abs=1e-15)

    def test_max_picks_the_matching_row(self):
        e = np.eye(3)
        q = _rep(e[:1])
        d = _rep(np.vstack([e[1], e[0]]))
        assert maxsim(q, d) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_naive_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        lq, ld, dim = rng.integers(1, 8), rng.integers(1, 9), 6
        qv = _unit_rows(rng, lq, dim)
        dv = _unit_rows(rng, ld, dim)
        qm = rng.random(lq) < 0.8
        dm = rng.random(ld) < 0.8
        dm[rng.integers(0, ld)] = True  # at least one masked-in doc row
        got = maxsim(_rep(qv, qm), _rep(dv, dm))
        want = naive_maxsim(qv, qm, dv, dm)
        assert got == pytest.approx(want, abs=1e-12)

    def test_masked_out_doc_rows_contribute_nothing(self):
        rng = np.random.default_rng(1)
        qv = _unit_rows(rng, 3, 4)
        dv = _unit_rows(rng, 5, 4)
        dm = np.array([True, False, True, False, True])
        got = maxsim(_rep(qv), _rep(dv, dm))
        want = maxsim(_rep(qv), _rep(dv[dm]))
        assert got == pytest.approx(want, abs=1e-15)

    def test_no_masked_doc_rows_rejected(self):
        rng = np.random.default_rng(2)
        q = _rep(_unit_rows(rng, 2, 4))
        d = _rep(_unit_rows(rng, 3, 4), np.zeros(3, dtype=bool))
        with pytest.raises(InputError):
            maxsim(q, d)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            maxsim(_rep(np.ones((1, 3))), _rep(np.ones((1, 4))))

    def test_bounded_by_masked_in_query_rows(self):
        rng = np.random.default_rng(3)
        for seed in range(20):
            r = np.random.default_rng(seed)
            qv = _unit_rows(r, 5, 8)
            dv = _unit_rows(r, 7, 8)
            qm = r.random(5) < 0.7
            s = maxsim(_rep(qv, qm), _rep(dv))
            assert s <= qm.sum() + 1e-12

    def test_differentiable_with_argmax_routing(self):
        rng = np.random.default_rng(4)
        qv = _unit_rows(rng, 3, 5)
        dv = _unit_rows(rng, 4, 5)
        tape = Tape()
        q = MultiVectorRep(tape.parameter("q", qv), np.ones(3, dtype=bool))
        d = MultiVectorRep(tape.constant(dv), np.ones(4, dtype=bool))
        node = maxsim(q, d)
        g = tape.backward(node)["q"]
        sims = qv @ dv.T
        want = dv[sims.argmax(axis=1)]
        np.testing.assert_allclose(g, want, atol=1e-14)


class TestScoreMatrix:
    def test_single_pair_equals_maxsim(self):
        rng = np.random.default_rng(5)
        q = _rep(_unit_rows(rng, 4, 6))
        d = _rep(_unit_rows(rng, 5, 6))
        sm = score_matrix([q], [d])
        assert sm.array[0, 0] == pytest.approx(maxsim(q, d), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_blocked_equals_per_pair_calls(self, seed):
        rng = np.random.default_rng(40 + seed)
        qs = [_rep(_unit_rows(rng, 4, 6), rng.random(4) < 0.9) for _ in range(8)]
        ds = [_rep(_unit_rows(rng, 5, 6)) for _ in range(8)]
        sm = score_matrix(qs, ds)
        for i in range(8):
            for j in range(8):
                assert sm.array[i, j] == pytest.approx(maxsim(qs[i], ds[j]), abs=1e-12)

    def test_dense_identical_unit_vectors_all_ones(self):
        v = np.zeros((1, 4))
        v[0, 0] = 1.0
        qs = [dense_as_rep(v.copy()) for _ in range(3)]
        ds = [dense_as_rep(v.copy()) for _ in range(3)]
        sm = score_matrix(qs, ds, interaction="dense")
        np.testing.assert_allclose(sm.array, np.ones((3, 3)), atol=1e-15)

    def test_dense_mode_rejects_multirow_reps(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ContractError):
            score_matrix([_rep(_unit_rows(rng, 2, 4))], [_rep(_unit_rows(rng, 1, 4))], interaction="dense")

    def test_empty_inputs_rejected(self):
        with pytest.raises(ContractError):
            score_matrix([], [])

    def test_ragged_doc_lengths_match_pairwise(self):
        rng = np.random.default_rng(7)
        qs = [_rep(_unit_rows(rng, 3, 5))]
        ds = [_rep(_unit_rows(rng, n, 5)) for n in (2, 6, 4)]
        sm = score_matrix(qs, ds)
        for j, d in enumerate(ds):
            assert sm.array[0, j] == pytest.approx(maxsim(qs[0], d), abs=1e-12)


class TestBlockedKernel:
    @pytest.mark.parametrize("q_block,d_block", [(1, 1), (2, 3), (64, 256)])
    def test_block_size_invariance(self, q_block, d_block):
        rng = np.random.default_rng(8)
        qv = [_unit_rows(rng, 4, 6) for _ in range(5)]
        dv = [_unit_rows(rng, 3, 6) for _ in range(7)]
        qm = [np.ones(4, dtype=bool)] * 5
        dm = [np.ones(3, dtype=bool)] * 7
        base, _ = blocked_score_matrix(qv, dv, qm, dm, q_block=64, d_block=256)
        got, _ = blocked_score_matrix(qv, dv, qm, dm, q_block=q_block, d_block=d_block)
        np.testing.assert_allclose(got, base, atol=1e-12)

    def test_argmax_ties_take_lowest_packed_row(self):
        qv = [np.array([[1.0, 0.0]])]
        dv = [np.array([[1.0, 0.0], [1.0, 0.0]])]
        masks = [np.ones(1, dtype=bool)], [np.ones(2, dtype=bool)]
        _, argmax = blocked_score_matrix(qv, dv, masks[0], masks[1], want_argmax=True)
        assert argmax[0, 0, 0] == 0


class TestCorpusKernels:
    def _packed(self, rng, n_docs=20, dim=6):
        docs = [_unit_rows(rng, int(rng.integers(2, 7)), dim) for _ in range(n_docs)]
        offsets = np.zeros(n_docs + 1, dtype=np.int64)
        for j, d in enumerate(docs):
            offsets[j + 1] = offsets[j] + d.shape[0]
        return docs, np.vstack(docs), offsets

    @pytest.mark.parametrize("seed", range(10))
    def test_maxsim_many_matches_naive(self, seed):
        rng = np.random.default_rng(100 + seed)
        docs, rows, offsets = self._packed(rng)
        q = _unit_rows(rng, 4, 6)
        got = maxsim_many(q, rows, offsets)
        for j, d in enumerate(docs):
            want = naive_maxsim(q, np.ones(4, dtype=bool), d, np.ones(d.shape[0], dtype=bool))
            assert got[j] == pytest.approx(want, abs=1e-12)

    def test_parallel_equals_sequential_bitwise(self):
        rng = np.random.default_rng(9)
        _, rows, offsets = self._packed(rng, n_docs=50)
        q = _unit_rows(rng, 5, 6)
        old = kernels.get_threads()
        try:
            kernels.set_threads(0)
            seq = maxsim_many(q, rows, offsets)
            kernels.set_threads(2)
            par = maxsim_many(q, rows, offsets)
        finally:
            kernels.set_threads(old)
        assert np.array_equal(seq, par)


class TestRetrieve:
    def _index(self, rng, n=12, dim=6):
        ids = [f"doc-{i:03d}" for i in range(n)]
        reps = [_rep(_unit_rows(rng, 4, dim)) for _ in range(n)]
        return ids, reps, build_index(ids, reps, "late")

    def test_k_at_least_corpus_returns_full_ranking(self):
        rng = np.random.default_rng(10)
        ids, reps, index = self._index(rng)
        q = _rep(_unit_rows(rng, 3, 6))
        out = retrieve(q, index, k=100)
        assert len(out) == len(ids)
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)

    def test_bit_equal_scores_tie_break_by_doc_id(self):
        v = np.zeros((1, 4))
        v[0, 0] = 1.0
        ids = ["z-doc", "a-doc", "m-doc"]
        reps = [_rep(v.copy()) for _ in ids]
        index = build_index(ids, reps, "late")
        out = retrieve(_rep(v.copy()), index, k=3)
        assert [d for d, _ in out] == ["a-doc", "m-doc", "z-doc"]

    def test_empty_index_returns_empty(self):
        index = build_index([], [], "late")
        rng = np.random.default_rng(11)
        assert retrieve(_rep(_unit_rows(rng, 2, 4)), index, k=5) == []

    def test_k_must_be_positive(self):
        rng = np.random.default_rng(12)
        _, _, index = self._index(rng)
        with pytest.raises(ContractError):
            retrieve(_rep(_unit_rows(rng, 2, 6)), index, k=0)

    def test_monotone_transform_preserves_ranking(self):
        rng = np.random.default_rng(13)
        ids, reps, index = self._index(rng)
        q = _rep(_unit_rows(rng, 3, 6))
        from colbert_lab.scoring import corpus_scores

        scores = corpus_scores(q, index)
        base = [d for d, _ in retrieve(q, index, k=len(ids))]
        transformed = 3.0 * scores + 7.0  # positive monotone
        order = np.lexsort((np.asarray(ids), -transformed))
        assert [ids[i] for i in order] == base

    def test_duplicate_doc_ids_rejected(self):
        rng = np.random.default_rng(14)
        reps = [_rep(_unit_rows(rng, 2, 4)) for _ in range(2)]
        with pytest.raises(ContractError):
            build_index(["same", "same"], reps, "late")

    @pytest.mark.parametrize("seed", range(20))
    def test_exact_content_doc_ranks_first_on_random_model(self, seed, tiny_tok_cfg, tiny_enc_cfg):
        """A document repeating the query's content tokens wins retrieval
        even for an untrained, randomly seeded encoder."""
        from colbert_lab.encoder import EncoderParams, LengthBudget, encode_late, tokenize

        params = EncoderParams.init(tiny_tok_cfg, tiny_enc_cfg, seed=seed)
        budget = LengthBudget(query_len=8, doc_len=10)
        rng = np.random.default_rng(seed)
        text = " ".join(f"word{rng.integers(0, 1000)}" for _ in range(6))
        q_rep = encode_late(params, tokenize(text, "query", tiny_tok_cfg, budget, True), tiny_enc_cfg)
        docs = {"exact": text}
        for j in range(15):
            docs[f"other-{j}"] = " ".join(f"noise{rng.integers(0, 1000)}" for _ in range(6))
        ids = sorted(docs)
        reps = [
            encode_late(
                params,
                tokenize(docs[d], "document", tiny_tok_cfg, budget, True),
                tiny_enc_cfg,
            )
            for d in ids
        ]
        index = build_index(ids, reps, "late")
        top = retrieve(q_rep, index, k=1)
        assert top[0][0] == "exact"


class TestNumpyFallback:
    def test_env_flag_selects_fallback_with_matching_scores(self):
        """A subprocess with COLBERT_LAB_DISABLE_NUMBA=1 must import without
        numba and produce the same retrieval scores within 1e-12."""
        import os
        import subprocess
        import sys

        script = (
            "import numpy as np\n"
            "from colbert_lab import kernels\n"
            "assert not kernels.HAS_NUMBA\n"
            "rng = np.random.default_rng(3)\n"
            "q = rng.standard_normal((4, 6))\n"
            "rows = rng.standard_normal((20, 6))\n"
            "offsets = np.array([0, 5, 9, 20], dtype=np.int64)\n"
            "print(repr(kernels.maxsim_many(q, rows, offsets).tolist()))\n"
        )
        env = dict(os.environ, COLBERT_LAB_DISABLE_NUMBA="1")
        out = subprocess.run(
            [sys.executable, "-c", script], env=env, capture_output=True, text=True
        )
        assert out.returncode == 0, out.stderr
        fallback = np.array(eval(out.stdout.strip()))
        rng = np.random.default_rng(3)
        q = rng.standard_normal((4, 6))
        rows = rng.standard_normal((20, 6))
        offsets = np.array([0, 5, 9, 20], dtype=np.int64)
        native = maxsim_many(q, rows, offsets)
        np.testing.assert_allclose(fallback, native, atol=1e-12)


class TestQueryExpansionScoring:
    def test_zeroed_pad_embedding_leaves_scores_unchanged(self, tiny_tok_cfg, tiny_enc_cfg):
        from colbert_lab.encoder import PAD, EncoderParams, LengthBudget, encode_late, tokenize

        params = EncoderParams.init(tiny_tok_cfg, tiny_enc_cfg, seed=0)
        params.embedding[PAD] = 0.0
        budget = LengthBudget(query_len=8, doc_len=8)
        q_tokens = tokenize("alpha beta", "query", tiny_tok_cfg, budget, True)
        d_tokens = tokenize("alpha beta gamma", "document", tiny_tok_cfg, budget, True)
        d_rep = encode_late(params, d_tokens, tiny_enc_cfg)
        plain = encode_late(params, q_tokens, tiny_enc_cfg, query_expansion=False)
        expanded = encode_late(params, q_tokens, tiny_enc_cfg, query_expansion=True)
        assert expanded.scoring_mask.sum() > plain.scoring_mask.sum()
        s_plain = maxsim(plain, d_rep)
        s_expanded = maxsim(expanded, d_rep)
        assert s_expanded == pytest.approx(s_plain, abs=1e-12)
