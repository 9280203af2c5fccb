import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_map
from splatreg.errors import EmptyCorrespondenceError, EmptySubmapError, NoSemanticsError
from splatreg.model import GaussianMap
from splatreg.semantic import (
    CorrespondenceSet,
    MatchConfig,
    QuerySet,
    Sampling,
    extract_submap,
    match,
    relevancy,
    relevancy_scores,
)


def scalar_relevancy(e, positives, negatives) -> float:
    """Plain-Python evaluation of the pairwise-softmax relevancy."""
    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    best = -1.0
    for q in positives:
        worst = 2.0
        for n in negatives:
            a, b = math.exp(cos(e, q)), math.exp(cos(e, n))
            worst = min(worst, a / (a + b))
        best = max(best, worst)
    return best


def test_relevancy_examples():
    q, n = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    assert relevancy([1.0, 1.0, 0], QuerySet(q, n)) == pytest.approx(0.5, abs=1e-12)
    assert relevancy(q, QuerySet(q, n)) == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert math.e / (math.e + 1) == pytest.approx(0.7311, abs=1e-4)


def test_relevancy_matches_scalar_oracle(rng):
    for _ in range(50):
        pos = rng.normal(size=(int(rng.integers(1, 3)), 6))
        neg = rng.normal(size=(2, 6))
        e = rng.normal(size=6)
        assert relevancy(e, QuerySet(pos, neg)) == pytest.approx(scalar_relevancy(e, pos, neg), abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_relevancy_bounds_and_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    Q = QuerySet(rng.normal(size=(2, 5)), rng.normal(size=(3, 5)))
    e = rng.normal(size=(20, 5))
    r = relevancy_scores(e, Q)
    e_inv = 1.0 / (1.0 + math.e ** 2)
    assert np.all((r >= e_inv - 1e-15) & (r <= 1 - e_inv + 1e-15))
    np.testing.assert_allclose(relevancy_scores(c * e, Q), r, atol=1e-12)


def test_queryset_validation():
    with pytest.raises(ValueError):
        QuerySet(np.zeros((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        QuerySet(np.ones((1, 3)), np.ones((1, 4)))
    with pytest.raises(ValueError):
        QuerySet(np.ones((1, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        relevancy_scores(np.ones((2, 4)), QuerySet(np.ones(3), np.ones(3)))


def _cluster_map(rng, n=30):
    means = rng.normal(scale=0.1, size=(n, 3))
    means[-1] = [100.0, 0.0, 0.0]
    emb = np.tile([1.0, 0.0], (n, 1))
    return GaussianMap(means=means, quats=np.tile([1.0, 0, 0, 0], (n, 1)), scales=np.ones((n, 3)),
                       embeddings=emb)


class TestExtract:
    Q = QuerySet([1.0, 0.0], [0.0, 1.0])

    def test_zero_threshold_selects_all(self, rng):
        m = random_map(rng, n=25, dim=2)
        np.testing.assert_array_equal(extract_submap(m, self.Q, MatchConfig(min_relevancy=0.0)), np.arange(25))

    def test_threshold_only(self, rng):
        m = random_map(rng, n=40, dim=2)
        cfg = MatchConfig(min_relevancy=0.55)
        expected = np.flatnonzero(relevancy_scores(m.embeddings, self.Q) >= 0.55)
        np.testing.assert_array_equal(extract_submap(m, self.Q, cfg), expected)

    def test_deflate_removes_isolated(self, rng):
        m = _cluster_map(rng)
        # Nearest-neighbour distances: ~0.05 inside the cluster, ~100 for the far one.
        nn = np.sort(np.linalg.norm(m.means[:, None] - m.means[None], axis=2), axis=1)[:, 1]
        cut = np.median(nn) + 2.0 * np.std(nn)
        assert nn[-1] > cut and np.all(nn[:-1] <= cut)
        out = extract_submap(m, self.Q, MatchConfig(min_relevancy=0.5, deflate_sigma=2.0))
        np.testing.assert_array_equal(out, np.arange(len(m) - 1))

    def test_inflate_adds_neighbours(self):
        means = np.array([[0.0, 0, 0], [0.5, 0, 0], [5.0, 0, 0]])
        emb = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        m = GaussianMap(means=means, quats=np.tile([1.0, 0, 0, 0], (3, 1)), scales=np.ones((3, 3)),
                        embeddings=emb)
        np.testing.assert_array_equal(extract_submap(m, self.Q, MatchConfig(min_relevancy=0.6)), [0])
        np.testing.assert_array_equal(
            extract_submap(m, self.Q, MatchConfig(min_relevancy=0.6, inflate_radius=1.0)), [0, 1])

    def test_errors(self, rng):
        with pytest.raises(NoSemanticsError):
            extract_submap(random_map(rng, n=3, dim=0), self.Q, MatchConfig())
        m = random_map(rng, n=5, dim=2).replace(embeddings=np.tile([0.0, 1.0], (5, 1)))
        with pytest.raises(EmptySubmapError):
            extract_submap(m, self.Q, MatchConfig(min_relevancy=0.6))


class TestMatch:
    def test_self_match_tiny_radius(self, rng):
        m = random_map(rng, n=20, dim=4)
        cfg = MatchConfig(m_candidates=1, radius=1e-9, bidirectional=False)
        corr = match(m, m, np.arange(20), np.arange(20), cfg)
        np.testing.assert_array_equal(corr.source, np.arange(20))
        np.testing.assert_array_equal(corr.target, np.arange(20))
        np.testing.assert_allclose(corr.weight, 1.0, atol=1e-15)

    def test_orthogonal_embeddings_give_zero_weights(self, rng):
        a = random_map(rng, n=10, dim=2).replace(embeddings=np.tile([1.0, 0.0], (10, 1)))
        b = random_map(rng, n=12, dim=2).replace(embeddings=np.tile([0.0, 1.0], (12, 1)))
        corr = match(a, b, np.arange(10), np.arange(12), MatchConfig(m_candidates=3))
        assert len(corr) > 0 and np.all(corr.weight == 0.0)

    @pytest.mark.parametrize("sampling", list(Sampling))
    def test_deterministic_and_thread_independent(self, rng, sampling):
        a, b = random_map(rng, n=60, dim=6), random_map(rng, n=50, dim=6)
        cfg = MatchConfig(m_candidates=5, radius=4.0, sampling=sampling, seed=9)
        first = match(a, b, np.arange(60), np.arange(50), cfg)
        assert first.equals(match(a, b, np.arange(60), np.arange(50), cfg))
        assert first.equals(match(a, b, np.arange(60), np.arange(50), cfg, workers=4))

    def test_gate_and_candidate_bounds(self, rng):
        a, b = random_map(rng, n=40, dim=6), random_map(rng, n=40, dim=6)
        src, tgt = np.arange(0, 40, 2), np.arange(1, 40, 3)
        cfg = MatchConfig(m_candidates=4, radius=3.0, bidirectional=False, seed=1)
        corr = match(a, b, src, tgt, cfg)
        assert set(corr.source) <= set(src) and set(corr.target) <= set(tgt)
        dist = np.linalg.norm(a.means[corr.source] - b.means[corr.target], axis=1)
        assert np.all(dist <= 3.0)
        counts = np.bincount(corr.source, minlength=40)
        assert counts.max() <= 4
        # Brute-force oracle for how many in-gate candidates each source Gaussian has.
        for i in src:
            gate = np.linalg.norm(b.means[tgt] - a.means[i], axis=1) <= 3.0
            e = a.embeddings[i] / np.linalg.norm(a.embeddings[i])
            et = b.embeddings[tgt] / np.linalg.norm(b.embeddings[tgt], axis=1, keepdims=True)
            positive = gate & (et @ e > 0)
            expected = min(4, positive.sum()) if positive.any() else min(4, gate.sum())
            assert counts[i] == expected
        order = np.lexsort((corr.target, corr.source))
        np.testing.assert_array_equal(order, np.arange(len(corr)))

    def test_weights_are_clamped_cosines(self, rng):
        a, b = random_map(rng, n=15, dim=3), random_map(rng, n=15, dim=3)
        corr = match(a, b, np.arange(15), np.arange(15), MatchConfig(m_candidates=15, sampling="uniform"))
        ea = a.embeddings / np.linalg.norm(a.embeddings, axis=1, keepdims=True)
        eb = b.embeddings / np.linalg.norm(b.embeddings, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", ea[corr.source], eb[corr.target])
        np.testing.assert_allclose(corr.weight, np.clip(cos, 0, 1), atol=1e-15)
        assert len(corr) == 15 * 15

    def test_bidirectional_adds_reverse_pairs(self, rng):
        a, b = random_map(rng, n=30, dim=4), random_map(rng, n=5, dim=4)
        one = match(a, b, np.arange(30), np.arange(5), MatchConfig(m_candidates=1, bidirectional=False))
        both = match(a, b, np.arange(30), np.arange(5), MatchConfig(m_candidates=1))
        assert set(zip(one.source, one.target)) <= set(zip(both.source, both.target))
        assert set(both.target) == set(range(5))

    def test_errors(self, rng):
        a, b = random_map(rng, n=5, dim=4), random_map(rng, n=5, dim=4)
        with pytest.raises(EmptyCorrespondenceError, match="radius"):
            match(a, b.replace(means=b.means + 1e6), np.arange(5), np.arange(5), MatchConfig(radius=1.0))
        with pytest.raises(NoSemanticsError):
            match(a, random_map(rng, n=5, dim=0), np.arange(5), np.arange(5), MatchConfig())
        with pytest.raises(EmptySubmapError):
            match(a, b, np.arange(0), np.arange(5), MatchConfig())


def test_correspondence_set_validation():
    with pytest.raises(ValueError):
        CorrespondenceSet([0, 0], [1, 1], [0.5, 0.5])
    with pytest.raises(ValueError):
        CorrespondenceSet([0], [1], [1.5])
    with pytest.raises(ValueError):
        CorrespondenceSet([-1], [1], [0.5])
    c = CorrespondenceSet([2, 0], [1, 3], [0.5, 1.0])
    assert list(c) == [(2, 1, 0.5), (0, 3, 1.0)]
    with pytest.raises(IndexError):
        c.check_bounds(2, 5)


def test_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(m_candidates=0)
    with pytest.raises(ValueError):
        MatchConfig(radius=0.0)
    with pytest.raises(ValueError):
        MatchConfig(sampling="greedy")
    assert MatchConfig(sampling="uniform").sampling is Sampling.UNIFORM
