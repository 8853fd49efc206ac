import numpy as np
import pytest

from gtpvit.attention import AttentionTensor, update_sizes
from gtpvit.errors import ConfigError, ShapeError, StrategyError
from gtpvit.graph import PropagationView
from gtpvit.linalg import IndexSet
from gtpvit.reduction import (
    ReductionConfig,
    Strategy,
    apply_merge,
    plan_csv_lines,
    propagate,
    score_broadcasting,
    score_regeneration,
    select_tokens,
    select_tokens_baseline,
)


def random_attention(seed, heads=2, n=4):
    rng = np.random.default_rng(seed)
    maps = np.exp(rng.normal(size=(heads, n, n)))
    maps /= maps.sum(axis=2, keepdims=True)
    return AttentionTensor(maps, np.ones(n))


def identity_attention(heads, n):
    return AttentionTensor(np.tile(np.eye(n), (heads, 1, 1)), np.ones(n))


def uniform_attention(heads, n):
    return AttentionTensor(np.full((heads, n, n), 1.0 / n), np.ones(n))


class TestScores:
    def test_regeneration_identity_maps(self):
        np.testing.assert_array_equal(score_regeneration(identity_attention(3, 5)), np.ones(5))

    def test_regeneration_uniform_maps(self):
        np.testing.assert_allclose(score_regeneration(uniform_attention(2, 4)), 0.25)

    def test_regeneration_bruteforce(self):
        attn = random_attention(50)
        expected = np.array(
            [max(attn.maps[h][i, i] for h in range(2)) for i in range(4)]
        )
        np.testing.assert_allclose(score_regeneration(attn, "max"), expected)

    def test_regeneration_mean_aggregator(self):
        attn = random_attention(51)
        expected = np.array(
            [np.mean([attn.maps[h][i, i] for h in range(2)]) for i in range(4)]
        )
        np.testing.assert_allclose(score_regeneration(attn, "mean"), expected)

    def test_broadcasting_identity_maps(self):
        np.testing.assert_array_equal(score_broadcasting(identity_attention(2, 5)), np.zeros(5))

    def test_broadcasting_uniform_maps(self):
        np.testing.assert_allclose(score_broadcasting(uniform_attention(3, 4)), 3 / 4)

    def test_broadcasting_bruteforce(self):
        attn = random_attention(52)
        expected = np.zeros(4)
        for i in range(4):
            per_head = []
            for h in range(2):
                per_head.append(sum(attn.maps[h][j, i] for j in range(4) if j != i))
            expected[i] = max(per_head)
        np.testing.assert_allclose(score_broadcasting(attn, "max"), expected, atol=1e-12)


class TestSelectTokens:
    def test_p_zero_keeps_all(self):
        plan = select_tokens(np.array([0.1, 0.2]), np.array([0.5, 0.5]), 0)
        assert list(plan.kept) == [0, 1]
        assert len(plan.propagated) == 0

    def test_hand_products(self):
        gamma = np.array([0.5, 0.1, 0.4])
        psi = np.array([0.2, 0.9, 0.5])
        plan = select_tokens(gamma, psi, 1)
        # products: [0.10, 0.09, 0.20] -> propagate token 1
        assert list(plan.propagated) == [1]
        assert list(plan.kept) == [0, 2]
        np.testing.assert_allclose(plan.scores, [0.10, 0.09, 0.20])

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(53)
        for _ in range(50):
            n = int(rng.integers(3, 12))
            gamma = rng.uniform(0.01, 1, n)
            psi = rng.uniform(0.01, 1, n)
            p = int(rng.integers(1, n))
            base = select_tokens(gamma, psi, p)
            for c in (0.5, 3.0, 1e6):
                scaled_g = select_tokens(c * gamma, psi, p)
                scaled_p = select_tokens(gamma, c * psi, p)
                assert list(scaled_g.kept) == list(base.kept)
                assert list(scaled_p.kept) == list(base.kept)

    def test_cls_always_kept(self):
        gamma = np.array([0.0, 0.9, 0.1, 0.5])
        psi = np.array([0.0, 0.9, 0.1, 0.5])
        plan = select_tokens(gamma, psi, 2, cls_index=0)
        assert 0 in plan.kept
        assert list(plan.propagated) == [2, 3]

    def test_p_too_large(self):
        with pytest.raises(ConfigError):
            select_tokens(np.ones(3), np.ones(3), 3)
        with pytest.raises(ConfigError):
            select_tokens(np.ones(3), np.ones(3), 2, cls_index=0)

    def test_tie_break_lower_index(self):
        plan = select_tokens(np.ones(4), np.ones(4), 2)
        # all products tie: keep lowest indices
        assert list(plan.kept) == [0, 1]
        assert list(plan.propagated) == [2, 3]


class TestDiagShiftInvariance:
    def test_gamma_ranking_invariant_under_shift(self):
        """max over heads commutes with the constant -1 shift, so ranking
        by the shifted diagonal convention gives the same partition."""
        rng = np.random.default_rng(54)
        for _ in range(50):
            attn = random_attention(int(rng.integers(1 << 30)), heads=3, n=8)
            p = int(rng.integers(1, 7))
            gamma = score_regeneration(attn, "max")
            shifted = np.max(np.einsum("hii->hi", attn.maps) - 1.0, axis=0)
            ones = np.ones(8)
            a = select_tokens(gamma, ones, p)
            b = select_tokens(shifted, ones, p)
            assert list(a.kept) == list(b.kept)
            assert list(a.propagated) == list(b.propagated)


class TestPropagate:
    def hand_view(self):
        dense = np.array(
            [
                [0.5, 0.0],
                [0.0, 0.25],
                [1.0, 0.0],
                [0.0, 0.0],
            ]
        )
        r, c = np.nonzero(dense)
        return PropagationView(4, 2, r, c, dense[r, c]), dense

    def test_alpha_zero_is_row_selection_bitwise(self):
        rng = np.random.default_rng(55)
        x = rng.normal(size=(6, 3))
        view, _ = self.hand_view()
        plan = select_tokens(np.arange(6, 0, -1, dtype=float), np.ones(6), 2)
        out = propagate(x, plan, view, 0.0)
        expected = x[plan.kept.indices]
        assert out.tobytes() == expected.tobytes()

    def test_hand_computed(self):
        rng = np.random.default_rng(56)
        x = rng.normal(size=(6, 3))
        view, dense = self.hand_view()
        # propagate rows 1 and 4; keep 0,2,3,5
        gamma = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
        plan = select_tokens(gamma, np.ones(6), 2)
        assert list(plan.propagated) == [1, 4]
        out = propagate(x, plan, view, 0.25)
        expected = x[[0, 2, 3, 5]] + 0.25 * dense @ x[[1, 4]]
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_cls_row_passes_through(self):
        rng = np.random.default_rng(57)
        x = rng.normal(size=(5, 3))
        gamma = np.array([0.0, 1.0, 0.0, 1.0, 1.0])
        plan = select_tokens(gamma, np.ones(5), 1, cls_index=0)
        assert list(plan.propagated) == [2]
        dense = np.array([[0.5], [0.0], [0.25]])
        r, c = np.nonzero(dense)
        view = PropagationView(3, 1, r, c, dense[r, c])
        out = propagate(x, plan, view, 0.5, cls_index=0)
        np.testing.assert_array_equal(out[0], x[0])
        np.testing.assert_allclose(out[1:], x[[1, 3, 4]] + 0.5 * dense @ x[[2]])

    def test_matches_update_sizes_on_1d_features(self):
        """Propagating a feature map equal to the size vector must agree
        with the size-update operator: same expression, same result."""
        rng = np.random.default_rng(58)
        view, _ = self.hand_view()
        sizes = rng.uniform(1, 4, size=6)
        plan = select_tokens(np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0]), np.ones(6), 2)
        feats = propagate(sizes[:, None], plan, view, 0.3)[:, 0]
        svec = update_sizes(sizes[[0, 2, 3, 5]], sizes[[1, 4]], view, 0.3)
        np.testing.assert_allclose(feats, svec, atol=1e-15)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(59)
        x = rng.normal(size=(6, 3))
        view, _ = self.hand_view()
        plan = select_tokens(np.arange(6, 0, -1, dtype=float), np.ones(6), 1)
        with pytest.raises(ShapeError):
            propagate(x, plan, view, 0.5)


class TestBaselines:
    def test_random_deterministic(self):
        attn = random_attention(60, n=8)
        x = np.zeros((8, 4))
        a = select_tokens_baseline(Strategy.RANDOM, attn, x, 3, seed=99)
        b = select_tokens_baseline(Strategy.RANDOM, attn, x, 3, seed=99)
        assert list(a.propagated) == list(b.propagated)
        c = select_tokens_baseline(Strategy.RANDOM, attn, x, 3, seed=100)
        assert list(a.propagated) != list(c.propagated)

    def test_cls_attn_requires_cls(self):
        attn = random_attention(61)
        with pytest.raises(StrategyError):
            select_tokens_baseline(Strategy.CLS_ATTN, attn, np.zeros((4, 2)), 1, seed=0)

    def test_cls_attn_ranks_by_cls_row(self):
        maps = np.zeros((1, 4, 4))
        maps[0, 0] = [0.1, 0.5, 0.1, 0.3]
        maps[0, 1:] = 0.25
        attn = AttentionTensor(maps, np.ones(4))
        plan = select_tokens_baseline(Strategy.CLS_ATTN, attn, np.zeros((4, 2)), 1, 0, cls_index=0)
        # lowest CLS attention among tokens 1..3 is token 2
        assert list(plan.propagated) == [2]

    def test_diag_and_broad_rank_by_their_score(self):
        attn = random_attention(62, n=6)
        x = np.zeros((6, 4))
        diag = select_tokens_baseline(Strategy.DIAG_ATTN, attn, x, 2, 0)
        gamma = score_regeneration(attn)
        assert set(diag.propagated) == set(np.argsort(gamma, kind="stable")[:2].tolist())
        broad = select_tokens_baseline(Strategy.BROAD_ATTN, attn, x, 2, 0)
        psi = score_broadcasting(attn)
        assert set(broad.propagated) == set(np.argsort(psi, kind="stable")[:2].tolist())

    def test_cossim_identical_pair_merges_first(self):
        x = np.array(
            [
                [1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        attn = random_attention(63, n=4)
        plan = select_tokens_baseline(Strategy.COS_SIM, attn, x, 1, 0)
        assert plan.matches == ((0, 1),)
        assert list(plan.propagated) == [0]

    def test_cossim_merge_is_size_weighted(self):
        x = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 5.0]])
        sizes = np.array([3.0, 1.0, 1.0, 1.0])
        attn = AttentionTensor(np.tile(np.eye(4) / 1.0, (1, 1, 1)), sizes)
        plan = select_tokens_baseline(Strategy.COS_SIM, attn, x, 1, 0)
        assert plan.matches == ((0, 1),)
        merged, new_sizes = apply_merge(x, sizes, plan)
        np.testing.assert_allclose(merged[0], (3 * x[0] + 1 * x[1]) / 4)
        assert new_sizes[0] == 4.0

    def test_all_strategies_remove_same_count(self):
        attn = random_attention(64, n=9)
        rng = np.random.default_rng(65)
        x = rng.normal(size=(9, 4))
        for strategy in Strategy:
            plan = select_tokens_baseline(strategy, attn, x, 3, seed=7, cls_index=0)
            assert len(plan.propagated) == 3
            assert len(plan.kept) == 6
            assert 0 in plan.kept

    def test_cossim_capacity_check(self):
        attn = random_attention(66, n=4)
        with pytest.raises(ConfigError):
            select_tokens_baseline(Strategy.COS_SIM, attn, np.ones((4, 2)), 3, 0)


class TestReductionConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ReductionConfig(p_per_layer=-1)
        with pytest.raises(ConfigError):
            ReductionConfig(theta=0.0)
        with pytest.raises(ConfigError):
            ReductionConfig(alpha=-0.1)
        with pytest.raises(ConfigError):
            ReductionConfig(aggregator="median")


class TestPlanDump:
    def test_csv_line(self):
        plan = select_tokens(np.array([0.5, 0.1, 0.4]), np.array([0.2, 0.9, 0.5]), 1)
        line = plan_csv_lines(3, plan, lambda r: r * 10)
        assert line.strip().split(",")[0] == "3"
        assert "0 20" in line
