import numpy as np
import pytest

from unpadbert.attention import mha_padded, mha_unpadded, stable_softmax
from unpadbert.errors import InvalidInputError
from unpadbert.varlen import compute_batch_offset, mask_from_lengths, nonzero_indices

from conftest import random_lengths


def naive_attention(q, k, v, heads):
    """Loop-based oracle over one unpadded sequence."""
    n, d = q.shape
    dk = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            logits = [float(q[i, sl] @ k[j, sl]) / np.sqrt(dk) for j in range(n)]
            m = max(logits)
            w = np.exp(np.array(logits) - m)
            w /= w.sum()
            out[i, sl] = w @ v[:, sl]
    return out


def _case(rng, heads=2, d=8, L=12):
    lengths = random_lengths(rng, 5, L)
    mask = mask_from_lengths(lengths, L)
    q, k, v = (rng.standard_normal((len(lengths), L, d)) for _ in range(3))
    return lengths, mask, q, k, v


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_unpadded_matches_naive(rng, heads):
    lengths, mask, q, k, v = _case(rng, heads)
    pos = nonzero_indices(mask)
    flat = [a.reshape(-1, 8)[pos] for a in (q, k, v)]
    offs = compute_batch_offset(lengths)
    out = mha_unpadded(*flat, offs, heads)
    for b in range(len(lengths)):
        sl = slice(offs[b], offs[b + 1])
        np.testing.assert_allclose(out[sl], naive_attention(flat[0][sl], flat[1][sl], flat[2][sl], heads), rtol=1e-12, atol=1e-13)


def test_padded_zeroes_masked_rows(rng):
    lengths, mask, q, k, v = _case(rng)
    out = mha_padded(q, k, v, mask, 2)
    assert np.all(out[~mask.astype(bool)] == 0.0)


def test_single_token_returns_value(rng):
    v = rng.standard_normal((1, 4))
    out = mha_unpadded(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), v, [0, 1], 2)
    np.testing.assert_array_equal(out, v)


def test_full_length_batch_equals_unmasked(rng):
    q, k, v = (rng.standard_normal((2, 6, 4)) for _ in range(3))
    mask = np.ones((2, 6), dtype=int)
    out = mha_padded(q, k, v, mask, 1)
    ref = np.stack([naive_attention(q[b], k[b], v[b], 1) for b in range(2)])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_softmax_all_masked_row_is_zero():
    out = stable_softmax(np.array([[-np.inf, -np.inf], [0.0, 0.0]]))
    assert out.tolist() == [[0.0, 0.0], [0.5, 0.5]]


def test_softmax_large_logits_stable():
    out = stable_softmax(np.array([[1000.0, 1000.0]]))
    assert out.tolist() == [[0.5, 0.5]]


def test_head_divisibility():
    x = np.zeros((1, 2, 6))
    with pytest.raises(InvalidInputError):
        mha_padded(x, x, x, np.ones((1, 2)), 4)
    with pytest.raises(InvalidInputError):
        mha_unpadded(x[0], x[0], x[0], [0, 2], 4)


def test_bad_offsets():
    x = np.zeros((3, 2))
    with pytest.raises(InvalidInputError):
        mha_unpadded(x, x, x, [0, 2], 1)
