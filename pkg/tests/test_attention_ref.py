import numpy as np
import pytest

from prefixbatch.attention_ref import (
    AttentionShapeError,
    EmptySegmentError,
    PartialResult,
    SegmentedKV,
    empty_partial,
    finalize,
    implied_weights,
    merge,
    merge_all,
    naive_attention,
    partial_attention,
    partial_from_logits,
    prefix_shared_attention,
    run_selftest,
)
from prefixbatch.errors import ValidationError


def random_instance(rng, rows=None, dim=None, length=None):
    rows = rows or int(rng.integers(1, 17))
    dim = dim or int(rng.integers(1, 33))
    length = length or int(rng.integers(3, 129))
    return (
        rng.uniform(-10, 10, size=(rows, dim)),
        rng.uniform(-10, 10, size=(length, dim)),
        rng.uniform(-10, 10, size=(length, dim)),
    )


def test_single_key_returns_its_value():
    Q = np.array([[0.3, -1.0]])
    out = finalize(partial_attention(Q, [[5.0, 1.0]], [[2.0, 2.0]]))
    np.testing.assert_array_equal(out, [[2.0, 2.0]])


def test_identical_keys_average_their_values():
    out = finalize(partial_attention([[1.0, 2.0]], [[0.5, 0.5], [0.5, 0.5]], [[1.0, 4.0], [3.0, 0.0]]))
    np.testing.assert_allclose(out, [[2.0, 2.0]], atol=1e-15)


def test_zero_scale_gives_the_mean_value():
    rng = np.random.default_rng(3)
    Q, K, V = random_instance(rng)
    out = finalize(partial_attention(Q, K, V, scale=0.0))
    np.testing.assert_allclose(out, np.broadcast_to(V.mean(axis=0), out.shape), atol=1e-12)


def test_partial_attention_matches_dense_softmax():
    rng = np.random.default_rng(1)
    for _ in range(20):
        Q, K, V = random_instance(rng)
        np.testing.assert_allclose(finalize(partial_attention(Q, K, V)), naive_attention(Q, K, V), atol=1e-10, rtol=0)


def test_merge_with_empty_is_identity():
    rng = np.random.default_rng(2)
    Q, K, V = random_instance(rng, rows=4, dim=8)
    whole = partial_attention(Q, K, V)
    empty = empty_partial(4, 8)
    assert empty.is_empty
    for merged in (merge(whole, empty), merge(empty, whole)):
        np.testing.assert_array_equal(merged.output, whole.output)
        np.testing.assert_array_equal(merged.row_max, whole.row_max)
        np.testing.assert_array_equal(merged.row_sum, whole.row_sum)


def test_two_empty_partials_merge_to_empty():
    merged = merge(empty_partial(2, 3), empty_partial(2, 3))
    assert merged.is_empty
    assert np.all(np.isneginf(merged.row_max))
    assert not np.any(np.isnan(merged.output))


def test_segment_without_keys_is_the_empty_partial():
    partial = partial_attention(np.ones((3, 2)), np.zeros((0, 2)), np.zeros((0, 5)))
    assert partial.is_empty
    assert partial.output.shape == (3, 5)
    with pytest.raises(EmptySegmentError):
        finalize(partial)


def test_split_merge_matches_dense_softmax():
    rng = np.random.default_rng(4)
    for _ in range(100):
        Q, K, V = random_instance(rng)
        cut = int(rng.integers(1, K.shape[0]))
        left = partial_attention(Q, K[:cut], V[:cut])
        right = partial_attention(Q, K[cut:], V[cut:])
        expected = naive_attention(Q, K, V)
        np.testing.assert_allclose(finalize(merge(left, right)), expected, atol=1e-10, rtol=0)
        np.testing.assert_allclose(finalize(merge(right, left)), expected, atol=1e-10, rtol=0)


def test_merge_order_does_not_matter():
    rng = np.random.default_rng(5)
    for _ in range(100):
        Q, K, V = random_instance(rng)
        first, second = sorted(rng.choice(np.arange(1, K.shape[0]), size=2, replace=False))
        a, b, c = (partial_attention(Q, K[lo:hi], V[lo:hi]) for lo, hi in ((0, first), (first, second), (second, None)))
        left = finalize(merge(merge(a, b), c))
        right = finalize(merge(a, merge(b, c)))
        np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)
        np.testing.assert_allclose(finalize(merge_all([c, a, b])), left, atol=1e-10, rtol=0)


def test_large_logits_do_not_overflow():
    Q = np.array([[1000.0]])
    K = np.array([[1.0], [0.999]])
    V = np.array([[1.0], [0.0]])
    out = finalize(partial_attention(Q, K, V, scale=1.0))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, naive_attention(Q, K, V, scale=1.0), atol=1e-12)


def test_shifted_logits_give_the_same_output():
    rng = np.random.default_rng(6)
    logits = rng.uniform(-50, 50, size=(3, 10))
    V = rng.uniform(-10, 10, size=(10, 4))
    base = finalize(partial_from_logits(logits, V))
    np.testing.assert_allclose(finalize(partial_from_logits(logits + 400.0, V)), base, atol=1e-10, rtol=0)


def test_implied_weights_are_row_stochastic():
    rng = np.random.default_rng(7)
    Q, K, V = random_instance(rng)
    logits = (Q @ K.T) / np.sqrt(Q.shape[1])
    weights = implied_weights(partial_from_logits(logits, V), logits)
    np.testing.assert_allclose(weights.sum(axis=1), 1, atol=1e-12)
    assert np.all(weights >= 0)


def test_take_slices_rows():
    partial = PartialResult(np.arange(6.0).reshape(3, 2), np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 2.0]))
    part = partial.take(1, 3)
    assert part.rows == 2
    assert part.dim == 2
    np.testing.assert_array_equal(part.row_max, [2.0, 3.0])


def stacked_reference(query, prefix_k, prefix_v, distinct_k, distinct_v):
    return naive_attention(query, np.vstack([prefix_k, distinct_k]), np.vstack([prefix_v, distinct_v]))


def test_prefix_shared_attention_matches_per_request_attention():
    rng = np.random.default_rng(8)
    dim = 16
    prefix_k, prefix_v = rng.uniform(-10, 10, size=(2, 40, dim))
    distinct = [tuple(rng.uniform(-10, 10, size=(2, length, dim))) for length in (0, 1, 7, 30)]
    queries = [rng.uniform(-10, 10, size=(rows, dim)) for rows in (1, 3, 2, 5)]
    outputs = prefix_shared_attention(queries, SegmentedKV(prefix_k, prefix_v, tuple(distinct)))
    assert [out.shape for out in outputs] == [(1, dim), (3, dim), (2, dim), (5, dim)]
    for query, (distinct_k, distinct_v), out in zip(queries, distinct, outputs):
        expected = stacked_reference(query, prefix_k, prefix_v, distinct_k, distinct_v)
        np.testing.assert_allclose(out, expected, atol=1e-10, rtol=0)


def test_single_request_group_is_plain_attention():
    rng = np.random.default_rng(9)
    Q, K, V = random_instance(rng, length=20)
    segments = SegmentedKV(K[:12], V[:12], ((K[12:], V[12:]),))
    [out] = prefix_shared_attention([Q], segments)
    np.testing.assert_allclose(out, naive_attention(Q, K, V), atol=1e-10, rtol=0)


def test_group_without_prefix():
    rng = np.random.default_rng(10)
    Q, K, V = random_instance(rng, dim=4, length=6)
    segments = SegmentedKV(np.zeros((0, 4)), np.zeros((0, 4)), ((K, V),))
    assert segments.prefix_len == 0
    assert segments.head_dim == 4
    [out] = prefix_shared_attention([Q], segments)
    np.testing.assert_allclose(out, naive_attention(Q, K, V), atol=1e-10, rtol=0)


def test_request_with_no_keys_at_all():
    segments = SegmentedKV(np.zeros((0, 2)), np.zeros((0, 2)), ((np.zeros((0, 2)), np.zeros((0, 2))),))
    with pytest.raises(EmptySegmentError):
        prefix_shared_attention([np.ones((1, 2))], segments)


def test_empty_group():
    segments = SegmentedKV(np.ones((2, 2)), np.ones((2, 2)), ())
    assert prefix_shared_attention([], segments) == []


@pytest.mark.parametrize(
    'Q, K, V',
    [
        (np.ones(3), np.ones((2, 3)), np.ones((2, 3))),
        (np.ones((1, 3)), np.ones((2, 4)), np.ones((2, 3))),
        (np.ones((1, 3)), np.ones((2, 3)), np.ones((3, 3))),
        (np.ones((0, 3)), np.ones((2, 3)), np.ones((2, 3))),
    ],
)
def test_shape_errors(Q, K, V):
    with pytest.raises(AttentionShapeError):
        partial_attention(Q, K, V)


def test_non_finite_inputs_are_rejected():
    with pytest.raises(ValidationError):
        partial_attention([[np.nan]], [[1.0]], [[1.0]])
    with pytest.raises(ValidationError):
        partial_attention([[1.0]], [[1.0]], [[1.0]], scale=-1.0)


def test_mismatched_partials_do_not_merge():
    with pytest.raises(AttentionShapeError):
        merge(empty_partial(2, 3), empty_partial(3, 3))
    with pytest.raises(ValidationError):
        merge_all([])


def test_mismatched_segments():
    with pytest.raises(AttentionShapeError):
        SegmentedKV(np.ones((2, 3)), np.ones((2, 3)), ((np.ones((1, 4)), np.ones((1, 3))),))
    with pytest.raises(AttentionShapeError):
        SegmentedKV(np.ones((2, 3)), np.ones((2, 3)), ((np.ones((1, 3)), np.ones((1, 5))),))
    segments = SegmentedKV(np.ones((2, 3)), np.ones((2, 3)), ((np.ones((1, 3)), np.ones((1, 3))),))
    with pytest.raises(AttentionShapeError):
        prefix_shared_attention([np.ones((1, 3)), np.ones((1, 3))], segments)
    with pytest.raises(AttentionShapeError):
        prefix_shared_attention([np.ones((1, 2))], segments)


def test_selftest_passes():
    result = run_selftest(instances=20, seed=11)
    assert result['passed'], result
    assert result['failed_checks'] == []
    assert result['instances'] == 20
    assert set(result['max_errors']) == {
        'two_way_merge',
        'split_associativity',
        'empty_identity',
        'shift_stability',
        'row_stochastic',
        'prefix_shared',
    }
    assert result['tolerances']['empty_identity'] == 1e-12
    assert result['tolerances']['prefix_shared'] == 1e-10


def test_selftest_is_deterministic():
    assert run_selftest(instances=3, seed=5) == run_selftest(instances=3, seed=5)


def test_selftest_needs_instances():
    with pytest.raises(ValidationError):
        run_selftest(instances=0)
