"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest

from unpadbert import kernels

backends = [pytest.param(kernels.fallback, id="numpy")]
if kernels.compiled is not None:
    backends.append(pytest.param(kernels.compiled, id="compiled"))

needs_compiled = pytest.mark.skipif(kernels.compiled is None, reason="extension not built")


def _scatter_case(rng, n=500, vocab=40, dim=6):
    grad = rng.standard_normal((n, dim))
    ids = rng.integers(0, vocab, size=n).astype(np.int64)
    return grad, ids, vocab


@pytest.mark.parametrize("k", backends)
def test_chunk_sumsq_integers_exact(k, rng):
    buf = rng.integers(-50, 50, size=1000).astype(float)
    starts = np.array([0, 10, 10, 999], dtype=np.int64)
    stops = np.array([10, 10, 500, 1000], dtype=np.int64)
    expected = [float(sum(int(x) ** 2 for x in buf[a:b])) for a, b in zip(starts, stops)]
    assert k.chunk_sumsq(buf, starts, stops).tolist() == expected


@pytest.mark.parametrize("k", backends)
def test_scatter_program_order_matches_naive(k, rng):
    grad, ids, vocab = _scatter_case(rng)
    out = np.zeros((vocab, grad.shape[1]))
    k.scatter_accumulate(grad, ids, np.arange(len(ids), dtype=np.int64), 2, out)
    ref = np.zeros_like(out)
    for i, t in enumerate(ids):
        ref[t] += grad[i]
    np.testing.assert_array_equal(out, ref)


@needs_compiled
@pytest.mark.parametrize("width", [1, 2])
def test_scatter_parity_bitwise(width, rng):
    grad, ids, vocab = _scatter_case(rng)
    order = rng.permutation(len(ids)).astype(np.int64)
    a, b = np.zeros((vocab, 6)), np.zeros((vocab, 6))
    kernels.compiled.scatter_accumulate(grad, ids, order, width, a)
    kernels.fallback.scatter_accumulate(grad, ids, order, width, b)
    np.testing.assert_array_equal(a, b)


@needs_compiled
def test_segment_sum_parity_bitwise(rng):
    grad, ids, vocab = _scatter_case(rng)
    pos = np.argsort(ids, kind="stable").astype(np.int64)
    sid = np.ascontiguousarray(ids[pos])
    a, b = np.zeros((vocab, 6)), np.zeros((vocab, 6))
    kernels.compiled.segment_sum_sorted(grad, pos, sid, a)
    kernels.fallback.segment_sum_sorted(grad, pos, sid, b)
    np.testing.assert_array_equal(a, b)


@needs_compiled
def test_chunk_sumsq_parity_reals(rng):
    buf = rng.standard_normal(10000)
    starts = np.arange(0, 10000, 333, dtype=np.int64)
    stops = np.minimum(starts + 333, 10000).astype(np.int64)
    np.testing.assert_allclose(kernels.compiled.chunk_sumsq(buf, starts, stops),
                               kernels.fallback.chunk_sumsq(buf, starts, stops), rtol=1e-13)


def test_backend_flag():
    assert kernels.BACKEND == ("compiled" if kernels.compiled is not None else "numpy")


@needs_compiled
def test_public_api_same_on_fallback(monkeypatch, rng):
    from unpadbert import embedding, lamb

    ids = rng.integers(0, 30, size=400)
    grads = rng.integers(-9, 10, size=(400, 8)).astype(float)
    tensors = lamb.descs([100, 37, 263])
    buf = rng.integers(-20, 21, size=400).astype(float)
    plan = lamb.plan_apex(tensors, 32)

    def results():
        return (
            embedding.embedding_backward_sorted(grads, ids, 30),
            embedding.embedding_backward_scatter(grads, ids, 30, seed=1),
            lamb.chunked_norm_case1(buf, plan),
            lamb.chunked_norm_case2(buf, tensors, plan),
        )

    compiled = results()
    for name in ("chunk_sumsq", "scatter_accumulate", "segment_sum_sorted"):
        monkeypatch.setattr(kernels, name, getattr(kernels.fallback, name))
    for a, b in zip(compiled, results()):
        np.testing.assert_array_equal(a, b)
