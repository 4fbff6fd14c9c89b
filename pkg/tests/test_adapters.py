import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adapter_sentinel.adapters import (MissingMatrixError, PeftMethod, QuantizationSpec, dora_column_norms,
                                       init_adapter, load_bundle, materialize, nf4_codebook, quantize_dequantize,
                                       save_bundle, with_dense)
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.container import FormatError
from adapter_sentinel.encoder import forward, forward_merged, forward_with_adapter

from conftest import random_bundle

LOW_RANK_LIKE = ("LoRA", "QLoRA", "LoRAPlus", "AdaLoRA")


def power_rank(m, tol=1e-6, max_rank=20):
    """Numerical rank by deflated power iteration (independent of numpy's SVD)."""
    a = m.astype(np.float64).copy()
    top = None
    rng = np.random.default_rng(0)
    for r in range(max_rank):
        v = rng.standard_normal(a.shape[1])
        for _ in range(500):
            v = a.T @ (a @ v)
            n = np.linalg.norm(v)
            if n == 0:
                return r
            v /= n
        s = np.linalg.norm(a @ v)
        top = top or s
        if s <= tol * top:
            return r
        u = a @ v / s
        a -= s * np.outer(u, v)
    return max_rank


@pytest.mark.parametrize("tag", LOW_RANK_LIKE)
def test_delta_rank_bounded(tag):
    b = random_bundle(PeftMethod(tag, 3), d=16)
    for i in range(b.num_layers):
        for t in b.target_set:
            delta = materialize(b, i, t)
            assert power_rank(delta) <= 3
            assert np.linalg.matrix_rank(delta.astype(np.float64), tol=1e-6 * np.abs(delta).max()) <= 3


@pytest.mark.parametrize("tag", ("LoRA", "QLoRA", "LoRAPlus", "AdaLoRA", "DoRA"))
def test_fresh_adapter_has_zero_delta(tag, tiny_base):
    b = init_adapter(PeftMethod(tag, 4), 2, 16, 16, Rng(1), ("q", "v"), tiny_base.target_weights(("q", "v")))
    for i in range(2):
        for t in ("q", "v"):
            assert np.abs(materialize(b, i, t)).max() <= (1e-6 if tag == "DoRA" else 0.0)


def test_dora_column_norms_equal_magnitude(tiny_base):
    b = random_bundle("DoRA", tiny_base)
    for i in range(2):
        for t in ("q", "v"):
            m = b.layers[i].factors[t]["m"].ravel()
            np.testing.assert_allclose(dora_column_norms(b, i, t), np.abs(m), atol=1e-4)


def test_dora_delta_is_weight_minus_base(tiny_base):
    b = random_bundle("DoRA", tiny_base)
    f = b.layers[0].factors["q"]
    w = f["V"].astype(np.float64) + f["B"].astype(np.float64) @ f["A"].astype(np.float64)
    w = f["m"].astype(np.float64) * w / np.linalg.norm(w, axis=0, keepdims=True)
    np.testing.assert_allclose(materialize(b, 0, "q"), w - f["V"], atol=1e-5)


@pytest.mark.parametrize("tag", ("LoRA", "QLoRA", "LoRAPlus", "AdaLoRA", "DoRA"))
def test_merge_then_forward_matches_adapter_path(tag, tiny_base):
    b = random_bundle(tag, tiny_base, targets=("q", "k", "v", "o"), scale=0.05)
    tokens = np.random.default_rng(0).integers(0, 64, (5, 8))
    a = forward_with_adapter(tiny_base, b, tokens).data
    m = forward_merged(tiny_base, b, tokens).data
    assert np.abs(a - m).max() <= 1e-5


def test_zero_adapter_is_identity(tiny_base):
    b = init_adapter(PeftMethod("LoRA", 4), 2, 16, 16, Rng(1))
    tokens = np.random.default_rng(0).integers(0, 64, (3, 8))
    np.testing.assert_array_equal(forward_with_adapter(tiny_base, b, tokens).data, forward(tiny_base, tokens).data)


def test_materialize_untargeted_matrix():
    b = random_bundle("LoRA")
    with pytest.raises(MissingMatrixError):
        materialize(b, 0, "k")


def test_dense_delta_takes_precedence():
    b = random_bundle("LoRA")
    d = np.full((16, 16), 0.5, np.float32)
    p = with_dense(b, {(1, "v"): d})
    assert p.perturbed and not b.perturbed
    np.testing.assert_array_equal(materialize(p, 1, "v"), d)
    np.testing.assert_array_equal(materialize(p, 0, "v"), materialize(b, 0, "v"))


# -------------------------------------------------------------- quantisation

def test_codebook_shape():
    cb = nf4_codebook()
    assert len(cb) == 16 and cb[0] == -1.0 and cb[-1] == 1.0 and 0.0 in cb
    assert (cb < 0).sum() == 7 and (cb > 0).sum() == 8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 300), block=st.sampled_from([1, 7, 64]))
def test_quantize_idempotent(seed, n, block):
    w = np.random.default_rng(seed).standard_normal(n).astype(np.float32)
    spec = QuantizationSpec(block_size=block)
    q1 = quantize_dequantize(w, spec)
    np.testing.assert_array_equal(quantize_dequantize(q1, spec), q1)


def test_quantize_error_bounded_by_half_gap():
    w = np.random.default_rng(1).standard_normal(640).astype(np.float32)
    q = quantize_dequantize(w)
    gap = np.diff(nf4_codebook()).max()
    for s in range(0, 640, 64):
        blk = w[s:s + 64]
        assert np.abs(q[s:s + 64] - blk).max() <= 0.5 * gap * np.abs(blk).max() + 1e-6


def test_quantize_zero_block():
    assert np.array_equal(quantize_dequantize(np.zeros(10, np.float32)), np.zeros(10))


def test_bad_codebook_rejected():
    with pytest.raises(ValueError):
        QuantizationSpec(codebook=tuple(np.linspace(-1, 1, 15)))
    with pytest.raises(ValueError):
        QuantizationSpec(codebook=tuple(np.linspace(-1, 1, 16)))  # no exact zero


# ------------------------------------------------------------------ I/O

@pytest.mark.parametrize("tag", ("LoRA", "QLoRA", "LoRAPlus", "AdaLoRA", "DoRA"))
def test_bundle_roundtrip(tag, tiny_base, tmp_path):
    b = random_bundle(tag, tiny_base)
    b.label = "backdoored"
    b.metadata.update(seed=3, asr=0.9, ca=0.95, note="x")
    save_bundle(b, tmp_path / "a.adapter")
    back = load_bundle(tmp_path / "a.adapter")
    assert back.method == b.method and back.target_set == b.target_set and back.label == "backdoored"
    assert back.metadata == b.metadata
    for i in range(2):
        for t in b.target_set:
            np.testing.assert_array_equal(materialize(back, i, t), materialize(b, i, t))
    assert back.digest() == b.digest()


def test_empty_target_set_rejected(tmp_path):
    b = random_bundle("LoRA")
    b.target_set = ()
    with pytest.raises(ValueError):
        save_bundle(b, tmp_path / "x.adapter")


def test_truncated_bundle_rejected(tmp_path):
    b = random_bundle("LoRA")
    save_bundle(b, tmp_path / "a.adapter")
    raw = (tmp_path / "a.adapter").read_bytes()
    (tmp_path / "b.adapter").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "b.adapter")


def test_dense_bundle_roundtrip(tmp_path):
    b = with_dense(random_bundle("LoRA"), {(0, "q"): np.ones((16, 16), np.float32)}, perturbed=True)
    save_bundle(b, tmp_path / "p.adapter")
    back = load_bundle(tmp_path / "p.adapter")
    assert back.perturbed
    np.testing.assert_array_equal(materialize(back, 0, "q"), np.ones((16, 16)))
