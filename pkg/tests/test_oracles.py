import numpy as np
import pytest

from mistcl.oracles import (
    DiscreteJoint,
    ce_gradient_decomposition,
    check_normalization_cancellation,
    corrupt,
    exact_mi,
    fisher_expectation_check,
    log_conditional_autodiff,
    mi_double_loop,
    mi_gradient_fd,
    mi_gradient_full,
    mi_gradient_simplified,
    verify_report,
)


def diagonal(n, big=20.0):
    return DiscreteJoint(np.where(np.eye(n, dtype=bool), big, -big))


class TestMI:
    def test_uniform_zero(self):
        assert abs(exact_mi(DiscreteJoint(np.zeros((3, 5))))) < 1e-12

    def test_bijection(self):
        assert exact_mi(diagonal(4)) == pytest.approx(np.log(4), abs=1e-6)

    def test_double_loop(self):
        j = DiscreteJoint.random(np.random.default_rng(0), 3, 5)
        assert abs(exact_mi(j) - mi_double_loop(j)) < 1e-12

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            j = DiscreteJoint.random(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)), scale=3.0)
            assert exact_mi(j) >= -1e-12


class TestGradient:
    def test_uniform_stationary(self):
        np.testing.assert_allclose(mi_gradient_simplified(DiscreteJoint(np.zeros((4, 3)))), 0.0, atol=1e-15)

    def test_fd_and_full(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            j = DiscreteJoint.random(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            g = mi_gradient_simplified(j)
            assert np.abs(g - mi_gradient_fd(j)).max() < 1e-6
            assert np.abs(g - mi_gradient_full(j)).max() < 1e-10


class TestCancellation:
    def test_random(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            j = DiscreteJoint.random(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            assert check_normalization_cancellation(j) < 1e-12

    def test_two_by_two(self):
        assert check_normalization_cancellation(DiscreteJoint(np.array([[1.0, 2.0], [3.0, 4.0]]))) < 1e-12

    def test_negative_control(self):
        j = DiscreteJoint.random(np.random.default_rng(0), 3, 4)
        assert check_normalization_cancellation(corrupt(j)) > 1e-3


class TestFisher:
    def test_sigma_zero_exact(self):
        chk = fisher_expectation_check(10, 1.7, 0.0, seed=0, replications=100)
        assert chk.empirical == 1.7**2

    def test_known_value(self):
        chk = fisher_expectation_check(10, 0.0, 1.0, seed=0)
        assert chk.predicted == pytest.approx(0.1)
        assert abs(chk.empirical - 0.1) < 0.005

    def test_invalid(self):
        with pytest.raises(ValueError):
            fisher_expectation_check(0, 0.0, 1.0, seed=0)


class TestCEDecomposition:
    def test_sum_matches_fd(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            j = DiscreteJoint.random(rng, 3, 4)
            x, y = int(rng.integers(3)), int(rng.integers(4))
            a, b = ce_gradient_decomposition(j, x, y)

            def logcond(logits):
                p = DiscreteJoint(logits).probs()
                return np.log(p[x, y] / p[x].sum())

            fd = np.zeros_like(j.logits)
            for idx in np.ndindex(*j.shape):
                up, down = j.logits.copy(), j.logits.copy()
                up[idx] += 1e-6
                down[idx] -= 1e-6
                fd[idx] = (logcond(up) - logcond(down)) / 2e-6
            assert np.abs(a + b - fd).max() < 1e-6
            np.testing.assert_allclose(a + b, log_conditional_autodiff(j, x, y), atol=1e-12)

    def test_uniform_marginal_term_nonzero(self):
        j = DiscreteJoint(np.zeros((3, 3)))
        _, marginal = ce_gradient_decomposition(j, 0, 1)
        assert np.abs(marginal).max() > 1e-3
        np.testing.assert_allclose(mi_gradient_simplified(j), 0.0, atol=1e-15)

    def test_degenerate(self):
        a, b = ce_gradient_decomposition(DiscreteJoint(np.zeros((1, 1))), 0, 0)
        np.testing.assert_allclose(a, 0.0, atol=1e-15)
        np.testing.assert_allclose(b, 0.0, atol=1e-15)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            ce_gradient_decomposition(DiscreteJoint(np.zeros((2, 2))), 2, 0)


def test_verify_report_passes():
    report = verify_report()
    assert report["passed"], [c for c in report["checks"] if not c["passed"]]
