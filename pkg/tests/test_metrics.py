import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthaudit.metrics import (
    EmbeddingSet,
    auc_roc,
    fid,
    inception_score,
    kid,
    pearson_and_fit,
    roc_points,
    spd_matrix,
    wilson_interval,
)


def emb(arr):
    return EmbeddingSet(np.asarray(arr, dtype=np.float64))


class TestFid:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 4))
        assert abs(fid(emb(x), emb(x))) < 1e-6

    def test_1d_gaussian_mean_shift(self):
        # population-level: N(0,1) vs N(1,1) -> squared 2-Wasserstein = 1
        rng = np.random.default_rng(1)
        base = rng.normal(size=(20000, 1))
        shifted = base + 1.0  # identical covariance by construction
        assert fid(emb(base), emb(shifted)) == pytest.approx(1.0, abs=1e-9)

    def test_2d_isotropic_covariance_scaling(self):
        # C=I vs C=4I, equal means -> Tr(I + 4I - 2*2I) = 2
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5000, 2))
        x = x - x.mean(axis=0)
        # whiten exactly, then rescale
        cov = np.cov(x, rowvar=False, ddof=1)
        l = np.linalg.cholesky(np.linalg.inv(cov))
        xw = x @ l
        assert fid(emb(xw), emb(2.0 * xw)) == pytest.approx(2.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(60, 3))
        assert fid(emb(a), emb(b)) == pytest.approx(fid(emb(b), emb(a)), abs=1e-9)
        assert fid(emb(a), emb(b)) >= -1e-6

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            emb([[1.0, np.nan], [0.0, 1.0]])


class TestKid:
    def test_constant_identical_sets_exact_zero(self):
        x = np.ones((5, 3))
        assert kid(emb(x), emb(x)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_kernel_sums_3v3(self):
        # independent oracle: explicit double loops over the kernel
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        y = x + 5.0
        d = 2

        def k(a, b):
            return (np.dot(a, b) / d + 1.0) ** 3

        m = n = 3
        sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
        syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
        expected = sxx + syy - 2 * sxy
        assert kid(emb(x), emb(y)) == pytest.approx(expected, rel=1e-12)
        assert kid(emb(x), emb(y)) > 0

    def test_unbiasedness_near_zero(self):
        rng = np.random.default_rng(7)
        vals = []
        for _ in range(200):
            a = rng.normal(size=(20, 4))
            b = rng.normal(size=(20, 4))
            vals.append(kid(emb(a), emb(b)))
        vals = np.array(vals)
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean()) < 3 * se

    def test_rejects_tiny_sets(self):
        with pytest.raises(ValueError):
            kid(emb([[1.0]]), emb([[1.0], [2.0]]))


class TestInceptionScore:
    def test_identical_rows_is_one(self):
        p = np.tile([0.2, 0.3, 0.5], (8, 1))
        assert inception_score(p) == pytest.approx(1.0, abs=1e-6)

    def test_one_hot_uniform_coverage_is_k(self):
        k = 10
        p = np.eye(k)
        assert inception_score(p) == pytest.approx(k, rel=1e-6)

    def test_bounds(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p = rng.dirichlet(np.ones(5), size=30)
            s = inception_score(p)
            assert 1.0 - 1e-9 <= s <= 5.0 + 1e-9

    def test_rejects_invalid_rows(self):
        with pytest.raises(ValueError):
            inception_score(np.array([[0.5, 0.2]]))


class TestAuc:
    def test_perfect_separation(self):
        assert auc_roc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_tied_is_half(self):
        assert auc_roc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_four_point_toy(self):
        # pairwise oracle: members [0.9, 0.8] vs non-members [0.85, 0.7]
        # wins: (0.9>0.85), (0.9>0.7), (0.8<0.85), (0.8>0.7) -> 3/4
        assert auc_roc([0.9, 0.8, 0.85, 0.7], [1, 1, 0, 0]) == pytest.approx(0.75)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(13)
        scores = rng.normal(size=40)
        truth = rng.integers(0, 2, size=40)
        truth[0], truth[1] = 1, 0
        pos = scores[truth == 1]
        neg = scores[truth == 0]
        wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        assert auc_roc(scores, truth) == pytest.approx(wins / (len(pos) * len(neg)))

    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_complement_property(self, raw):
        scores = np.array(raw)
        truth = np.arange(scores.size) % 2
        assert auc_roc(scores, truth) + auc_roc(scores, 1 - truth) == pytest.approx(1.0)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(17)
        scores = rng.normal(size=30)
        truth = np.arange(30) % 2
        assert auc_roc(np.exp(scores), truth) == pytest.approx(auc_roc(scores, truth))

    def test_roc_points_staircase(self):
        pts = roc_points([0.9, 0.8, 0.85, 0.7], [1, 1, 0, 0])
        assert pts[0].tolist() == [0.0, 0.0]
        assert pts[-1].tolist() == [1.0, 1.0]
        assert (np.diff(pts[:, 0]) >= 0).all()
        assert (np.diff(pts[:, 1]) >= 0).all()


class TestPearsonFit:
    def test_identity(self):
        r, a, b = pearson_and_fit([1, 2, 3, 4], [1, 2, 3, 4])
        assert (r, a, b) == pytest.approx((1.0, 1.0, 0.0))

    def test_exact_negative_line(self):
        x = np.array([0.0, 1.0, 2.0, 5.0])
        r, a, b = pearson_and_fit(x, -2 * x + 3)
        assert (r, a, b) == pytest.approx((-1.0, -2.0, 3.0))

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=5)
        y = rng.normal(size=5)
        design = np.column_stack([x, np.ones(5)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        _, a, b = pearson_and_fit(x, y)
        assert a == pytest.approx(coef[0], abs=1e-10)
        assert b == pytest.approx(coef[1], abs=1e-10)


class TestWilson:
    def test_half_at_100(self):
        lo, hi = wilson_interval(50, 100)
        assert lo == pytest.approx(0.4038, abs=1e-3)
        assert hi == pytest.approx(0.5962, abs=1e-3)

    def test_zero_successes_boundary(self):
        lo, hi = wilson_interval(0, 10)
        z = 1.96
        assert lo == 0.0
        assert hi == pytest.approx(z * z / (10 + z * z), abs=1e-9)

    @given(st.integers(1, 200), st.data())
    @settings(max_examples=100, deadline=None)
    def test_containment(self, n, data):
        k = data.draw(st.integers(0, n))
        lo, hi = wilson_interval(k, n)
        assert 0.0 <= lo <= k / n <= hi <= 1.0


class TestSpd:
    def test_equal_rates_zero(self):
        preds = [1, 0, 1, 0]
        groups = ["a", "a", "b", "b"]
        m = spd_matrix(preds, groups)
        assert np.allclose(m.spd, 0.0)

    def test_rate_gap(self):
        preds = [1] * 8 + [0] * 2 + [1] * 5 + [0] * 5
        groups = ["a"] * 10 + ["b"] * 10
        m = spd_matrix(preds, groups)
        i, j = m.groups.index("a"), m.groups.index("b")
        assert m.spd[i, j] == pytest.approx(0.3)

    def test_antisymmetry_and_diagonal(self):
        rng = np.random.default_rng(23)
        preds = rng.integers(0, 2, size=90)
        groups = rng.choice(["x", "y", "z"], size=90)
        m = spd_matrix(preds, groups)
        assert np.allclose(m.spd, -m.spd.T)
        assert np.allclose(np.diag(m.spd), 0.0)
        assert np.allclose(np.diag(m.ci_lo), 0.0)

    def test_relabeling_permutes(self):
        preds = [1, 0, 1, 1, 0, 0]
        groups = ["a", "a", "a", "b", "b", "b"]
        m1 = spd_matrix(preds, groups)
        swapped = ["b" if g == "a" else "a" for g in groups]
        m2 = spd_matrix(preds, swapped)
        assert m1.spd[0, 1] == pytest.approx(m2.spd[1, 0])

    def test_min_count_flagging(self):
        preds = [1, 0, 1]
        groups = ["a", "a", "b"]
        m = spd_matrix(preds, groups, min_count=2)
        assert m.flagged_groups == ["b"]
