import numpy as np
import pytest

from tsal360 import metrics


def loop_cc(pred, gt):
    """Straightforward float64 Pearson, written independently of metrics.cc."""
    p = [float(v) for v in np.asarray(pred).ravel()]
    q = [float(v) for v in np.asarray(gt).ravel()]
    n = len(p)
    mp = sum(p) / n
    mq = sum(q) / n
    sp = (sum((x - mp) ** 2 for x in p) / n) ** 0.5
    sq = (sum((x - mq) ** 2 for x in q) / n) ** 0.5
    return sum((x - mp) * (y - mq) for x, y in zip(p, q)) / (n * sp * sq)


def loop_sim(pred, gt):
    p = [float(v) for v in np.asarray(pred).ravel()]
    q = [float(v) for v in np.asarray(gt).ravel()]
    tp, tq = sum(p), sum(q)
    return sum(min(x / tp, y / tq) for x, y in zip(p, q))


def loop_kld(pred, gt):
    import math

    p = [float(v) for v in np.asarray(pred).ravel()]
    q = [float(v) for v in np.asarray(gt).ravel()]
    tp, tq = sum(p), sum(q)
    return sum(
        (y / tq) * math.log((y / tq) / (x / tp + 1e-7) + 1e-7) for x, y in zip(p, q)
    )


class TestHandValues:
    def test_cc_identity_and_negation(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(0, 1, (6, 12))
        assert abs(metrics.cc(m, m) - 1.0) < 1e-12
        assert abs(metrics.cc(m.max() - m, m) + 1.0) < 1e-12

    def test_cc_hand_computed_example(self):
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        gt = np.array([[1.0, 3.0], [2.0, 4.0]])
        assert abs(metrics.cc(pred, gt) - 0.8) < 1e-12

    def test_sim_identity_disjoint_and_hand_value(self):
        m = np.array([[0.2, 0.8], [0.5, 0.1]])
        assert abs(metrics.sim(m, m) - 1.0) < 1e-12
        a = np.array([1.0, 1.0, 0.0, 0.0])
        b = np.array([0.0, 0.0, 2.0, 1.0])
        assert metrics.sim(a, b) == 0.0
        assert abs(metrics.sim(np.array([0.5, 0.5]), np.array([0.25, 0.75])) - 0.75) < 1e-12

    def test_kld_identity_small_map(self):
        m = np.array([[0.4, 0.3], [0.2, 0.1]])
        assert abs(metrics.kld(m, m)) < 1e-5

    def test_kld_delta_vs_uniform(self):
        # q=[1,0], p=[.5,.5]: q*ln(q/(p+eps)+eps) = ln(2/(1+2e-7)+1e-7)
        val = metrics.kld(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
        assert abs(val - np.log(2.0)) < 1e-5

    def test_kld_is_asymmetric(self):
        p = np.array([0.5, 0.5])
        q = np.array([1.0, 1e-6])
        assert metrics.kld(p, q) != metrics.kld(q, p)


class TestInvariances:
    def test_cc_affine_invariance(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (8, 16))
        b = rng.uniform(0, 1, (8, 16))
        base = metrics.cc(a, b)
        assert abs(metrics.cc(3.7 * a + 0.4, b) - base) < 1e-10
        assert abs(metrics.cc(a, 0.2 * b + 5.0) - base) < 1e-10

    def test_sim_kld_scale_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.01, 1, (8, 16))
        b = rng.uniform(0.01, 1, (8, 16))
        assert abs(metrics.sim(5.0 * a, b) - metrics.sim(a, b)) < 1e-9
        assert abs(metrics.kld(5.0 * a, 0.3 * b) - metrics.kld(a, b)) < 1e-6

    def test_kld_nonnegative_up_to_eps_effects(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.uniform(0.001, 1, (8, 16))
            b = rng.uniform(0.001, 1, (8, 16))
            assert metrics.kld(a, b) >= -metrics.EPS * a.size

    def test_zero_variance_raises(self):
        with pytest.raises(ValueError, match="zero-variance"):
            metrics.cc(np.ones((4, 4)), np.random.default_rng(0).uniform(0, 1, (4, 4)))


class TestLoopOracleEquivalence:
    def test_hundred_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = rng.uniform(0.001, 1.0, (8, 16))
            b = rng.uniform(0.001, 1.0, (8, 16))
            assert abs(metrics.cc(a, b) - loop_cc(a, b)) < 1e-6
            assert abs(metrics.sim(a, b) - loop_sim(a, b)) < 1e-6
            assert abs(metrics.kld(a, b) - loop_kld(a, b)) < 1e-6


class TestAggregate:
    def test_fold_and_overall_math(self):
        scores = [
            {"cc": 0.2, "sim": 0.1, "kld": 2.0},
            {"cc": 0.4, "sim": 0.3, "kld": 4.0},
            {"cc": 0.8, "sim": 0.5, "kld": 1.0},
        ]
        agg = metrics.aggregate(scores, [0, 0, 1])
        assert abs(agg["folds"][0].cc_mean - 0.3) < 1e-12
        assert abs(agg["folds"][0].cc_std - 0.1) < 1e-12        # population std
        assert abs(agg["folds"][1].cc_mean - 0.8) < 1e-12
        # overall = mean of fold means, std across fold means
        assert abs(agg["overall"].cc_mean - 0.55) < 1e-12
        assert abs(agg["overall"].cc_std - 0.25) < 1e-12
        assert agg["samples"].n == 3

    def test_reports_render(self):
        scores = [{"cc": 0.5, "sim": 0.4, "kld": 1.5}] * 4
        agg = metrics.aggregate(scores, [0, 0, 1, 1])
        csv = metrics.report_csv(agg)
        assert csv.splitlines()[0] == "fold,metric,mean,std"
        assert "overall,cc,0.500000" in csv
        table = metrics.report_table(agg)
        assert "CC" in table and "overall" in table

    def test_mismatched_lengths_raise(self):
        with pytest.raises(ValueError, match="fold assignments"):
            metrics.aggregate([{"cc": 0, "sim": 0, "kld": 0}], [0, 1])
