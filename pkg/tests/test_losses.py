import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from crossrank.errors import ConfigError, DegenerateEmbeddingError, NumericError, ValidationError
from crossrank.losses import (LossConfig, classic_margin_loss, cosine_sim_matrix, distillation_loss,
                              gene_image_contrastive, rank_loss_embeddings, ranking_loss_full,
                              ranking_loss_sampled, ranking_residual, sample_all_pairings,
                              sample_pairings, total_loss)
from crossrank.numcore import grad_check, l2_normalize_backward, l2_normalize_rows

SUM = LossConfig()
MEAN = LossConfig(reduction="mean")


def sims(seed, n, d=4):
    rng = np.random.default_rng(seed)
    a, b = oracles.unit_rows(rng, n, d), oracles.unit_rows(rng, n, d)
    return a @ a.T, b @ b.T


def numeric_grad(fn, x, eps=1e-6):
    # central differences in extended precision, one entry at a time
    x = x.astype(np.longdouble)
    out = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = fn(x)
        x[idx] = orig - eps
        down = fn(x)
        x[idx] = orig
        out[idx] = float((up - down) / (2 * np.longdouble(eps)))
    return out


def random_orthogonal(rng, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q


class TestCosine:
    def test_orthonormal_identity(self):
        np.testing.assert_array_equal(cosine_sim_matrix(np.eye(3), np.eye(3)), np.eye(3))

    def test_self_similarity_is_one(self, rng):
        a = oracles.unit_rows(rng, 4, 5)
        np.testing.assert_allclose(np.diag(cosine_sim_matrix(a, a)), 1.0, atol=1e-15)

    def test_matches_naive(self, rng):
        a, b = oracles.unit_rows(rng, 6, 5), oracles.unit_rows(rng, 7, 5)
        np.testing.assert_allclose(cosine_sim_matrix(a, b), oracles.dot_matrix(a, b), rtol=0, atol=1e-12)

    def test_clamped(self):
        a = np.array([[1.0 + 1e-12, 0.0]])
        assert cosine_sim_matrix(a, a)[0, 0] == 1.0

    def test_zero_row_is_error(self):
        with pytest.raises(DegenerateEmbeddingError):
            cosine_sim_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2))


class TestContrastive:
    def test_orthonormal_tau_one(self):
        loss, _, _ = gene_image_contrastive(np.eye(2), np.eye(2), LossConfig(tau=1.0))
        assert loss == pytest.approx(2 * math.log(1 + math.exp(-1)), rel=1e-12)
        assert loss == pytest.approx(0.62652, abs=5e-6)

    def test_orthonormal_default_tau(self):
        loss, _, _ = gene_image_contrastive(np.eye(2), np.eye(2), SUM)
        assert loss == pytest.approx(2 * math.log1p(math.exp(-10)), rel=1e-10)
        assert loss == pytest.approx(9.08e-5, rel=1e-3)

    def test_frozen_value(self):
        rng = np.random.default_rng(3)
        i, g = oracles.unit_rows(rng, 5, 4), oracles.unit_rows(rng, 5, 4)
        loss, _, _ = gene_image_contrastive(i, g, SUM)
        assert loss == pytest.approx(46.40140225069367, rel=1e-12)

    @pytest.mark.parametrize("tau", [0.05, 0.1, 1.0])
    def test_matches_naive(self, rng, tau):
        i, g = oracles.unit_rows(rng, 6, 5), oracles.unit_rows(rng, 6, 5)
        terms = oracles.info_nce(i, g, tau)
        loss, _, _ = gene_image_contrastive(i, g, LossConfig(tau=tau))
        assert loss == pytest.approx(sum(terms), rel=1e-9)
        loss, _, _ = gene_image_contrastive(i, g, LossConfig(tau=tau, reduction="mean"))
        assert loss == pytest.approx(sum(terms) / 6, rel=1e-9)

    def test_row_permutation_invariance(self, rng):
        i, g = oracles.unit_rows(rng, 6, 5), oracles.unit_rows(rng, 6, 5)
        perm = rng.permutation(6)
        a = gene_image_contrastive(i, g, SUM)[0]
        b = gene_image_contrastive(i[perm], g[perm], SUM)[0]
        assert a == pytest.approx(b, rel=1e-12)

    def test_decreasing_in_positive_similarity(self):
        # g_0 turns toward i_0 through a fourth axis, so its similarity to i_1, i_2 stays 0
        i = np.eye(4)[:3]
        losses = []
        for c in (0.0, 0.5, 0.9):
            g = np.array([[c, 0, 0, np.sqrt(1 - c * c)], [0, 1, 0, 0], [0, 0, 1, 0]])
            losses.append(gene_image_contrastive(i, g, SUM)[0])
        assert losses[0] > losses[1] > losses[2]

    def test_errors(self):
        with pytest.raises(ConfigError):
            gene_image_contrastive(np.eye(2), np.eye(2), LossConfig(tau=0.0))
        with pytest.raises(ValidationError):
            gene_image_contrastive(np.eye(2)[:1], np.eye(2)[:1], SUM)
        with pytest.raises(ValidationError):
            gene_image_contrastive(np.eye(3), np.eye(3)[:2], SUM)


class TestDistillation:
    def test_orthonormal_tau_one(self):
        loss, _ = distillation_loss(np.eye(2), np.eye(2), LossConfig(tau=1.0))
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-12)
        assert loss == pytest.approx(0.31326, abs=5e-6)

    def test_is_mean_regardless_of_reduction(self, rng):
        t, s = oracles.unit_rows(rng, 5, 4), oracles.unit_rows(rng, 5, 4)
        a, _ = distillation_loss(t, s, SUM)
        b, _ = distillation_loss(t, s, MEAN)
        assert a == b
        assert a == pytest.approx(sum(oracles.info_nce(t, s, 0.1)) / 5, rel=1e-9)

    def test_joint_permutation(self, rng):
        t, s = oracles.unit_rows(rng, 6, 4), oracles.unit_rows(rng, 6, 4)
        perm = rng.permutation(6)
        assert distillation_loss(t, s, SUM)[0] == pytest.approx(distillation_loss(t[perm], s[perm], SUM)[0])

    @given(st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        loss, _ = distillation_loss(oracles.unit_rows(rng, 4, 3), oracles.unit_rows(rng, 4, 3), SUM)
        assert loss >= 0


class TestResidual:
    def test_desirable_example(self):
        sg = np.array([[1, 0.8, 0.5], [0.8, 1, 0], [0.5, 0, 1]])
        si = np.array([[1, 0.9, 0.2], [0.9, 1, 0], [0.2, 0, 1]])
        assert ranking_residual(sg, si, 0, 1, 2) == pytest.approx(-0.4)

    def test_inconsistent_example(self):
        sg = np.array([[1, 0.8, 0.5], [0.8, 1, 0], [0.5, 0, 1]])
        si = np.array([[1, 0.2, 0.9], [0.2, 1, 0], [0.9, 0, 1]])
        assert ranking_residual(sg, si, 0, 1, 2) == pytest.approx(1.0)

    def test_tie_is_zero(self):
        sg = np.array([[1, 0.5, 0.5], [0.5, 1, 0], [0.5, 0, 1]])
        assert ranking_residual(sg, np.eye(3), 0, 1, 2) == 0.0

    def test_indices_distinct(self):
        with pytest.raises(ValidationError):
            ranking_residual(np.eye(3), np.eye(3), 0, 0, 2)

    @given(st.integers(0, 2**31))
    def test_symmetry_in_targets(self, seed):
        sg, si = sims(seed, 6)
        p, q, r = np.random.default_rng(seed).permutation(6)[:3]
        assert ranking_residual(sg, si, p, q, r) == ranking_residual(sg, si, p, r, q)


class TestRankingFull:
    def test_identical_is_zero(self):
        sg, _ = sims(0, 7)
        assert ranking_loss_full(sg, sg, SUM)[0] == 0.0

    def test_frozen_value(self):
        rng = np.random.default_rng(7)
        a, b = oracles.unit_rows(rng, 6, 4), oracles.unit_rows(rng, 6, 4)
        loss, _ = ranking_loss_full(a @ a.T, b @ b.T, SUM)
        assert loss == pytest.approx(117.18695928166262, rel=1e-12)

    def test_single_dominating_triplet(self):
        # only anchor 0 has a gene gap; the image gap is zero, so l = 1 for (0,1,2) and (0,2,1)
        sg = np.zeros((3, 3))
        sg[0, 1] = 1.0
        loss, _ = ranking_loss_full(sg, np.zeros((3, 3)), SUM)
        assert loss == 2.0

    @pytest.mark.parametrize("n", [3, 5, 8])
    def test_matches_triple_loop(self, n):
        sg, si = sims(n, n)
        loss, _ = ranking_loss_full(sg, si, SUM)
        assert abs(loss - oracles.ranking_full(sg, si)) < 1e-12
        loss, _ = ranking_loss_full(sg, si, MEAN)
        assert abs(loss - oracles.ranking_full(sg, si) / (n * (n - 1) * (n - 2))) < 1e-12

    def test_gradient_by_differences(self):
        # exact zeros from cancelling triplets make a relative check ill-posed here
        sg, si = sims(3, 5)
        _, d = ranking_loss_full(sg, si, SUM)
        np.testing.assert_allclose(d, numeric_grad(lambda a: ranking_loss_full(sg, a, SUM)[0], si),
                                   rtol=0, atol=1e-9)

    def test_too_small(self):
        with pytest.raises(ValidationError):
            ranking_loss_full(np.eye(2), np.eye(2), SUM)


class TestSampler:
    @pytest.mark.parametrize("n", [3, 4, 10, 33])
    def test_cycle_contract(self, n):
        for seed in range(20):
            anchor = seed % n
            pairs = sample_pairings(n, anchor, seed)
            assert pairs.shape == (n - 1, 2)
            assert anchor not in pairs
            np.testing.assert_array_equal(np.bincount(pairs.ravel(), minlength=n),
                                          [0 if i == anchor else 2 for i in range(n)])

    def test_n4_covers_all_unordered_pairs(self):
        for seed in range(10):
            pairs = sample_pairings(4, 0, seed)
            assert {frozenset(p) for p in pairs.tolist()} == {frozenset(s) for s in ([1, 2], [1, 3], [2, 3])}

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_pairings(9, 2, 5), sample_pairings(9, 2, 5))

    def test_errors(self):
        with pytest.raises(ValidationError):
            sample_pairings(2, 0, 0)
        with pytest.raises(ValidationError):
            sample_pairings(5, 5, 0)

    def test_all_pairings_shape(self):
        assert sample_all_pairings(6, 0).shape == (6, 5, 2)


class TestRankingSampled:
    @given(st.integers(3, 9), st.integers(0, 2**31))
    def test_identical_is_zero(self, n, seed):
        sg, _ = sims(seed, n)
        assert ranking_loss_sampled(sg, sg, sample_all_pairings(n, seed), SUM)[0] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_n4_half_of_full(self, seed):
        sg, si = sims(seed, 4)
        full, _ = ranking_loss_full(sg, si, SUM)
        part, _ = ranking_loss_sampled(sg, si, sample_all_pairings(4, seed), SUM)
        assert part == full / 2

    def test_matches_loop(self):
        sg, si = sims(4, 7)
        pairs = sample_all_pairings(7, 4)
        assert ranking_loss_sampled(sg, si, pairs, SUM)[0] == pytest.approx(
            oracles.ranking_sampled(sg, si, pairs), abs=1e-12)
        assert ranking_loss_sampled(sg, si, pairs, MEAN)[0] == pytest.approx(
            oracles.ranking_sampled(sg, si, pairs) / 42, abs=1e-12)

    def test_pairing_mismatch(self):
        sg, si = sims(0, 5)
        with pytest.raises(ValidationError):
            ranking_loss_sampled(sg, si, sample_all_pairings(4, 0), SUM)

    def test_gradient(self):
        sg, si = sims(8, 6)
        pairs = sample_all_pairings(6, 8)
        _, d = ranking_loss_sampled(sg, si, pairs, SUM)
        np.testing.assert_allclose(d, numeric_grad(lambda a: ranking_loss_sampled(sg, a, pairs, SUM)[0], si),
                                   rtol=0, atol=1e-9)


class TestClassicMargin:
    @staticmethod
    def _anchor0_only(image_gap):
        # only anchor 0 has a gene ordering (q=1 above r=2); other anchors are ties
        sg = np.zeros((3, 3))
        sg[0, 1], sg[0, 2] = 0.9, 0.1
        si = np.zeros((3, 3))
        si[0, 1], si[0, 2] = image_gap / 2, -image_gap / 2
        return sg, si, sample_all_pairings(3, 0)

    def test_satisfied_margin(self):
        sg, si, pairs = self._anchor0_only(2 * 0.1)
        assert classic_margin_loss(sg, si, 0.1, pairs, SUM)[0] == 0.0

    def test_zero_image_gap_costs_eps(self):
        # two cyclic pairs for anchor 0, each contributes eps
        sg, si, pairs = self._anchor0_only(0.0)
        assert classic_margin_loss(sg, si, 0.25, pairs, SUM)[0] == pytest.approx(2 * 0.25)

    def test_matches_oracle(self):
        sg, si = sims(2, 7)
        pairs = sample_all_pairings(7, 2)
        loss, _ = classic_margin_loss(sg, si, 0.2, pairs, SUM)
        assert loss == pytest.approx(oracles.margin_sampled(sg, si, 0.2, pairs), abs=1e-12)

    def test_epsilon_positive(self):
        with pytest.raises(ConfigError):
            classic_margin_loss(np.eye(3), np.eye(3), 0.0, sample_all_pairings(3, 0), SUM)


class TestEmbeddingLevel:
    def _setup(self, seed, n=8, d=16):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((n, d)), rng.standard_normal((n, d)), sample_all_pairings(n, seed)

    @pytest.mark.parametrize("detach", [False, True])
    def test_gradients(self, detach):
        g_raw, i_raw, pairs = self._setup(1)
        cfg = LossConfig(detach_gene_sims=detach)

        def fn(a):
            g, _ = l2_normalize_rows(a[0])
            i, _ = l2_normalize_rows(a[1])
            loss, d_i, d_g = rank_loss_embeddings(g, i, pairs, cfg)
            if a[0].dtype != np.float64:
                return loss, None
            return loss, [l2_normalize_backward(a[0], g, d_g), l2_normalize_backward(a[1], i, d_i)]
        if detach:
            _, grads = fn([g_raw, i_raw])
            np.testing.assert_array_equal(grads[0], 0.0)
            assert grad_check(lambda a: (fn([g_raw, a[0]])[0], [fn([g_raw, a[0].astype(float)])[1][1]]),
                              [i_raw]) < 1e-5
        else:
            assert grad_check(fn, [g_raw, i_raw]) < 1e-5

    def test_identical_modalities_zero(self):
        g, _, pairs = self._setup(2)
        g, _ = l2_normalize_rows(g)
        assert rank_loss_embeddings(g, g, pairs, SUM)[0] == 0.0

    def test_orthogonal_invariance(self, rng):
        n, d = 7, 5
        g, i = oracles.unit_rows(rng, n, d), oracles.unit_rows(rng, n, d)
        q = random_orthogonal(rng, d)
        pairs = sample_all_pairings(n, 0)
        a = [gene_image_contrastive(i, g, SUM)[0], distillation_loss(i, g, SUM)[0],
             rank_loss_embeddings(g, i, pairs, SUM)[0]]
        b = [gene_image_contrastive(i @ q, g @ q, SUM)[0], distillation_loss(i @ q, g @ q, SUM)[0],
             rank_loss_embeddings(g @ q, i @ q, pairs, SUM)[0]]
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


class TestTotal:
    def test_weights(self):
        assert total_loss({"contrastive": 1.0, "rank": 2.0, "distil": 3.0}, SUM) == 14.0

    def test_zero_weights(self):
        cfg = LossConfig(lambda1=0.0, lambda2=0.0)
        assert total_loss({"contrastive": 1.5, "rank": 2.0, "distil": 3.0}, cfg) == 1.5

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_linear(self, c, r, d):
        parts = {"contrastive": c, "rank": r, "distil": d}
        double = {k: 2 * v for k, v in parts.items()}
        assert total_loss(double, SUM) == pytest.approx(2 * total_loss(parts, SUM), abs=1e-9)

    def test_names_nonfinite_component(self):
        with pytest.raises(NumericError) as exc:
            total_loss({"contrastive": 1.0, "rank": float("inf"), "distil": 0.0}, SUM)
        assert exc.value.component == "rank"


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(tau=0), dict(lambda1=-1), dict(reduction="max"),
                                    dict(margin_mode="fixed", epsilon=0), dict(contrastive_branch="x")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw).validate()
