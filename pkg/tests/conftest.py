"""Shared fixtures and assertion helpers."""

import numpy as np
import pytest

from colbert_lab.autodiff import GradStore
from colbert_lab.encoder import EncoderConfig, LengthBudget, TokenizerConfig


def assert_grads_close(a: GradStore, b: GradStore, rtol=1e-8, atol=1e-12, msg=""):
    """Elementwise gradient comparison.

    ``rtol`` carries the equivalence tolerance; the small ``atol`` guard
    covers entries whose true value is zero up to floating-point
    cancellation, where a relative criterion is meaningless.
    """
    names = sorted(set(a.names()) | set(b.names()))
    for name in names:
        ga = a.get(name)
        gb = b.get(name)
        if ga is None:
            ga = np.zeros_like(gb)
        if gb is None:
            gb = np.zeros_like(ga)
        np.testing.assert_allclose(
            ga, gb, rtol=rtol, atol=atol, err_msg=f"{msg} gradient mismatch for {name!r}"
        )


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor=1e-8) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def tiny_tok_cfg():
    return TokenizerConfig(vocab_size=256, prompt_len=3)


@pytest.fixture
def tiny_enc_cfg():
    return EncoderConfig(d_model=12, d_out=8)


@pytest.fixture
def tiny_budget():
    return LengthBudget(query_len=5, doc_len=8)
