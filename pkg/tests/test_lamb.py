import math

import numpy as np
import pytest

from unpadbert.errors import InvalidInputError, NumericDomainError
from unpadbert.lamb import (
    ChunkMetaBudget,
    LambState,
    TensorDesc,
    chunked_norm_case1,
    chunked_norm_case2,
    chunked_norm_case3,
    contiguous_max_chunk_num,
    descs,
    lamb_reference_step,
    load_tensor_list,
    metadata_size,
    num_chunks,
    plan_apex,
    plan_contiguous,
    shard_tensors,
    single_pass_sumsq,
)
from unpadbert.report import data_path


def test_metadata_sizes():
    b = ChunkMetaBudget()
    assert metadata_size(110, 320, b) == 110 * 12 + 320 * 5 + 4 == 2924
    assert contiguous_max_chunk_num(b) == 816
    assert metadata_size(1, 816, b, contiguous=True) <= 4096 < metadata_size(1, 817, b, contiguous=True)


def test_budget_rejects_oversized_limits():
    with pytest.raises(InvalidInputError):
        ChunkMetaBudget(max_tensor_num=400, max_chunk_num=320)
    with pytest.raises(InvalidInputError):
        ChunkMetaBudget.from_dict({"max_tensors": 3})


def test_num_chunks():
    assert num_chunks(1, 4) == 1 and num_chunks(8, 4) == 2 and num_chunks(9, 4) == 3


def test_hand_traced_plans():
    # two tensors of 3 chunks each, at most 4 blocks per launch
    b = ChunkMetaBudget(max_tensor_num=2, max_chunk_num=4, arg_budget_bytes=64)
    tensors = descs([12, 12])
    apex = plan_apex(tensors, 4, b)
    assert apex.num_launches == 2
    assert [l.chunks for l in apex.launches] == [((0, 0), (0, 1), (0, 2), (1, 0)), ((1, 1), (1, 2))]
    # contiguous metadata frees 64 - 12 = 52 bytes: 10 blocks fit, so one launch
    assert contiguous_max_chunk_num(b) == 10
    assert plan_contiguous(24, 4, b).num_launches == 1


def test_tensor_limit_starts_new_launch():
    b = ChunkMetaBudget(max_tensor_num=2, max_chunk_num=100, arg_budget_bytes=1024)
    apex = plan_apex(descs([1, 1, 1, 1, 1]), 4, b)
    assert [l.tensors for l in apex.launches] == [(0, 1), (2, 3), (4,)]


def test_plan_covers_every_chunk_once(rng):
    for _ in range(100):
        tensors = descs(rng.integers(1, 5000, size=int(rng.integers(1, 60))))
        cs = int(rng.integers(1, 600))
        apex = plan_apex(tensors, cs)
        ranges = sorted(apex.chunk_ranges())
        assert ranges[0][0] == 0 and ranges[-1][1] == apex.total_numel
        assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
        for l in apex.launches:
            assert len(l.chunks) <= apex.max_chunk_num and len(l.tensors) <= apex.max_tensor_num


def test_contiguous_never_worse(rng):
    for _ in range(200):
        tensors = descs(rng.integers(1, 100000, size=int(rng.integers(1, 400))))
        cs = int(rng.integers(64, 4096))
        total = sum(t.numel for t in tensors)
        assert plan_contiguous(total, cs).num_launches <= plan_apex(tensors, cs).num_launches


def test_bert_large_fixture():
    tensors = load_tensor_list(data_path("bert_large_tensors.json"))
    assert len(tensors) == 389
    sizes = [t.numel for t in tensors]
    assert min(sizes) == 1024 and max(sizes) == 30522 * 1024
    for shard in shard_tensors(tensors, 8):
        assert 1 <= plan_apex(shard, 65536).num_launches <= 5


def test_shard_tensors_tiles_buffer():
    tensors = descs([10, 7, 3])
    shards = shard_tensors(tensors, 3)
    assert [[(t.tensor_id, t.numel) for t in s] for s in shards] == [[(0, 7)], [(0, 3), (1, 4)], [(1, 3), (2, 3)]]


def test_norm_case1_exact_on_integers(rng):
    for _ in range(50):
        tensors = descs(rng.integers(1, 300, size=8))
        buf = rng.integers(-100, 100, size=sum(t.numel for t in tensors)).astype(float)
        plan = plan_apex(tensors, int(rng.integers(1, 64)))
        assert chunked_norm_case1(buf, plan) == float(sum(int(x) ** 2 for x in buf))
        assert single_pass_sumsq(buf) == chunked_norm_case1(buf, plan)


def test_norm_cases_match_naive_reals(rng):
    tensors = descs(rng.integers(1, 3000, size=20))
    buf = rng.standard_normal(sum(t.numel for t in tensors))
    plan = plan_contiguous(len(buf), 257)
    naive = [math.sqrt(math.fsum(x * x for x in seg)) for seg in np.split(buf, np.cumsum([t.numel for t in tensors])[:-1])]
    np.testing.assert_allclose(chunked_norm_case2(buf, tensors, plan), naive, rtol=1e-12)
    np.testing.assert_allclose(chunked_norm_case3(buf, tensors, plan), naive, rtol=1e-12)
    assert chunked_norm_case1(buf, plan) == pytest.approx(math.fsum(buf * buf), rel=1e-12)


def test_norm_plan_mismatch():
    with pytest.raises(InvalidInputError):
        chunked_norm_case1(np.ones(5), plan_contiguous(6, 2))


def _naive_lamb(w, g, m, v, segs, lr, b1, b2, eps, wd, step, clip):
    norm = math.sqrt(sum(x * x for x in g))
    if norm > clip:
        g = g * (clip / norm)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh, vh = m / (1 - b1 ** step), v / (1 - b2 ** step)
    r = mh / (np.sqrt(vh) + eps) + wd * w
    out = w.copy()
    lo = 0
    for s in segs:
        sl = slice(lo, lo + s)
        wn, rn = np.linalg.norm(w[sl]), np.linalg.norm(r[sl])
        ratio = wn / rn if wn > 0 and rn > 0 else 1.0
        out[sl] = w[sl] - lr * ratio * r[sl]
        lo += s
    return out, m, v


@pytest.mark.parametrize("layout", ["contiguous", "apex"])
def test_lamb_step_matches_naive(rng, layout):
    segs = [7, 30, 1, 64]
    n = sum(segs)
    state = LambState.zeros_like(rng.standard_normal(n), descs(segs), lr=0.01)
    w, m, v = state.params.copy(), np.zeros(n), np.zeros(n)
    for step in range(1, 4):
        g = rng.standard_normal(n) * 3
        state = lamb_reference_step(state, g, clip_threshold=1.0, chunk_size=16, layout=layout)
        w, m, v = _naive_lamb(w, g, m, v, segs, 0.01, 0.9, 0.999, 1e-6, 0.01, step, 1.0)
        np.testing.assert_allclose(state.params, w, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(state.exp_avg_sq, v, rtol=1e-12)
    assert state.step == 3


def test_zero_weights_trust_ratio_one():
    state = LambState.zeros_like(np.zeros(4), descs([4]), weight_decay=0.0)
    out = lamb_reference_step(state, np.ones(4), clip_threshold=None)
    assert out.trust_ratio.tolist() == [1.0]


def test_lamb_rejects_non_finite():
    state = LambState.zeros_like(np.ones(3), descs([3]))
    with pytest.raises(NumericDomainError):
        lamb_reference_step(state, np.array([1.0, np.nan, 0.0]))
    with pytest.raises(InvalidInputError):
        lamb_reference_step(state, np.ones(3), layout="rows")
    with pytest.raises(InvalidInputError):
        LambState(np.ones(3), np.ones(2), np.ones(3), descs([3]))


def test_tensor_desc_validation():
    with pytest.raises(InvalidInputError):
        TensorDesc(0, 0)
