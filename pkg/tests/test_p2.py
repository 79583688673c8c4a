import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from traverse_p2.errors import BadMagic, TooFewTraversals, TruncatedFile
from traverse_p2.p2 import (
    ALL_ZERO,
    P2Config,
    compute_p2,
    decode_scores,
    encode_scores,
    neighbor_counts,
    normalize_counts,
    p2_score,
    p2_scores,
    score_histogram,
)
from traverse_p2.spatial import count_brute


def entropy_oracle(row):
    """Straight transcription with plain floats, independent of numpy."""
    total = sum(row)
    if total == 0:
        return 0.0
    h = -sum((n / total) * math.log(n / total) for n in row if n > 0)
    return h / math.log(len(row))


# H(0.75, 0.25) / ln 2, evaluated with entropy_oracle and frozen
SCORE_3_1 = 0.8112781244591328


def test_frozen_value_matches_oracle():
    assert abs(entropy_oracle([3, 1]) - SCORE_3_1) < 1e-15


@pytest.mark.parametrize(
    "row, expected, tol",
    [((0, 0), 0.0, 0.0), ((7, 7), 1.0, 1e-12), ((3, 1), SCORE_3_1, 1e-9), ((5, 0), 0.0, 0.0)],
)
def test_score_examples(row, expected, tol):
    assert abs(p2_score(row) - expected) <= tol


def test_normalize_counts():
    np.testing.assert_allclose(normalize_counts([3, 1]), [0.75, 0.25])
    np.testing.assert_allclose(normalize_counts([5, 5, 5]), [1 / 3] * 3)
    assert normalize_counts([0, 0]) is ALL_ZERO


def test_rejects_single_traversal():
    with pytest.raises(TooFewTraversals):
        p2_score([4])
    with pytest.raises(TooFewTraversals):
        neighbor_counts([np.zeros((1, 3))], np.zeros((1, 3)), P2Config())


rows = st.lists(st.integers(0, 1000), min_size=2, max_size=25)


@given(rows)
def test_matches_oracle_and_range(row):
    s = p2_score(row)
    assert 0.0 <= s <= 1.0
    assert abs(s - entropy_oracle(row)) < 1e-12


@given(rows, st.randoms(use_true_random=False))
def test_permutation_invariance(row, rnd):
    shuffled = list(row)
    rnd.shuffle(shuffled)
    assert abs(p2_score(row) - p2_score(shuffled)) < 1e-12


@given(rows, st.integers(1, 50))
def test_scale_invariance(row, k):
    assert abs(p2_score([k * v for v in row]) - p2_score(row)) < 1e-12


@given(rows)
def test_log_base_independence(row):
    a = p2_scores(np.array([row]))[0]
    b = p2_scores(np.array([row]), log=np.log2)[0]
    assert abs(a - b) < 1e-12


@given(st.integers(2, 30), st.integers(1, 500))
def test_uniform_is_one_and_single_support_is_zero(T, n):
    assert abs(p2_score([n] * T) - 1.0) < 1e-12
    single = [0] * T
    single[T // 2] = n
    assert p2_score(single) == 0.0


def test_far_query_counts_zero(rng):
    clouds = [rng.random((100, 3)), rng.random((100, 3))]
    counts = neighbor_counts(clouds, [[100.0, 100.0, 100.0]], P2Config())
    np.testing.assert_array_equal(counts, [[0, 0]])


def test_counts_match_brute_with_planted_neighbors(rng):
    queries = rng.random((30, 3)) * 10
    clouds = []
    for t in range(4):
        planted = np.repeat(queries, t + 1, axis=0) + rng.normal(0, 0.05, (30 * (t + 1), 3))
        clouds.append(np.concatenate([rng.random((2000, 3)) * 10, planted]))
    cfg = P2Config(radius_r=0.3)
    counts = neighbor_counts(clouds, queries, cfg)
    for i, q in enumerate(queries):
        for t, c in enumerate(clouds):
            assert counts[i, t] == count_brute(c, q, 0.3)


def test_compute_p2_equal_presence_and_single_presence():
    q = np.array([[0.0, 0.0, 0.0]])
    same = [np.array([[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]])] * 3
    assert abs(compute_p2(same, q, P2Config()).scores[0] - 1.0) < 1e-9
    one = [same[0], np.array([[9.0, 9.0, 9.0]]), np.array([[9.0, 9.0, 9.0]])]
    res = compute_p2(one, q, P2Config(), keep_counts=True)
    assert res.scores[0] == 0.0
    np.testing.assert_array_equal(res.per_traversal_counts, [[2, 0, 0]])


def test_config_validation():
    with pytest.raises(ValueError):
        P2Config(radius_r=0.0)
    with pytest.raises(ValueError):
        P2Config(min_traversals=1)


def test_score_file_round_trip(rng):
    s = rng.random(1234).astype(np.float32)
    back = decode_scores(encode_scores(s))
    assert back.tobytes() == s.tobytes()
    assert decode_scores(encode_scores([])).shape == (0,)
    with pytest.raises(BadMagic):
        decode_scores(b"NOPE" + encode_scores(s)[4:])
    with pytest.raises(TruncatedFile):
        decode_scores(encode_scores(s)[:-1])


def test_histogram_sums_to_count(rng):
    s = np.concatenate([rng.random(1000), [0.0, 1.0]])
    counts, edges = score_histogram(s)
    assert counts.sum() == s.size and len(counts) == 20
    assert edges[0] == 0.0 and edges[-1] == 1.0
