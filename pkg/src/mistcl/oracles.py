"""Exact checks of mutual-information gradient identities on a toy joint.

The toy model parameterises a full joint ``p(x, y)`` over an ``|X| x |Y|``
grid by a single softmax over all logits, so both marginals sum to one by
construction. Everything here is closed-form numpy; the finite-difference
and second-implementation oracles live alongside for the verify suite.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nx


@dataclass
class DiscreteJoint:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or min(self.logits.shape) < 1:
            raise ValueError(f"logits must be a non-empty matrix, got shape {self.logits.shape}")

    @classmethod
    def random(cls, rng: np.random.Generator, nx_: int, ny: int, scale: float = 1.0) -> "DiscreteJoint":
        return cls(scale * rng.standard_normal((nx_, ny)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.probs()
        return p.sum(axis=1), p.sum(axis=0)

    def jacobian(self) -> np.ndarray:
        """``J[x, y, a, b] = d p(x, y) / d logit(a, b)``."""
        p = self.probs().ravel()
        jac = np.diag(p) - np.outer(p, p)
        return jac.reshape(*self.shape, *self.shape)


class _UnnormalizedJoint(DiscreteJoint):
    """A deliberately broken table: ``exp(logit)`` over a frozen normaliser.

    Its entries no longer sum to one once the logits move, so the marginal
    derivative sums are non-zero. Used as a negative control.
    """

    def __init__(self, logits, frozen_norm: float):
        super().__init__(logits)
        self.frozen_norm = float(frozen_norm)

    def probs(self) -> np.ndarray:
        return np.exp(self.logits) / self.frozen_norm

    def jacobian(self) -> np.ndarray:
        p = self.probs().ravel()
        return np.diag(p).reshape(*self.shape, *self.shape)


def corrupt(j: DiscreteJoint, scale: float = 1.2) -> DiscreteJoint:
    """Negative control: the same table rescaled and with its normaliser frozen."""
    return _UnnormalizedJoint(j.logits, np.exp(j.logits).sum() / scale)


def exact_mi(j: DiscreteJoint) -> float:
    """Mutual information in nats."""
    p = j.probs()
    px, py = p.sum(axis=1), p.sum(axis=0)
    return float(np.sum(p * (np.log(p) - np.log(px)[:, None] - np.log(py)[None, :])))


def mi_double_loop(j: DiscreteJoint) -> float:
    """Second implementation of :func:`exact_mi` with explicit loops."""
    logits = j.logits
    m = max(max(row) for row in logits.tolist())
    w = [[np.exp(v - m) for v in row] for row in logits.tolist()]
    z = sum(sum(row) for row in w)
    p = [[v / z for v in row] for row in w]
    px = [sum(row) for row in p]
    py = [sum(p[x][y] for x in range(len(p))) for y in range(len(p[0]))]
    total = 0.0
    for x in range(len(p)):
        for y in range(len(p[0])):
            total += p[x][y] * np.log(p[x][y] / (px[x] * py[y]))
    return float(total)


def _log_ratio(j: DiscreteJoint) -> np.ndarray:
    p = j.probs()
    px, py = p.sum(axis=1), p.sum(axis=0)
    return np.log(p) - np.log(px)[:, None] - np.log(py)[None, :]


def mi_gradient_simplified(j: DiscreteJoint) -> np.ndarray:
    """``sum_{x,y} dp(x,y)/dtheta * log(p(x,y) / (p(x) p(y)))`` per logit."""
    return np.einsum("xyab,xy->ab", j.jacobian(), _log_ratio(j))


def mi_gradient_full(j: DiscreteJoint) -> np.ndarray:
    """The chain-rule gradient before the marginal terms are cancelled."""
    p = j.probs()
    px, py = p.sum(axis=1), p.sum(axis=0)
    jac = j.jacobian()
    dpx = jac.sum(axis=1)
    dpy = jac.sum(axis=0)
    first = np.einsum("xyab,xy->ab", jac, _log_ratio(j))
    joint_term = np.einsum("xy,xyab->ab", p / p, jac)
    x_term = np.einsum("xy,xab->ab", p / px[:, None], dpx)
    y_term = np.einsum("xy,yab->ab", p / py[None, :], dpy)
    return first + joint_term - x_term - y_term


def mi_gradient_fd(j: DiscreteJoint, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros(j.shape)
    for a in range(j.shape[0]):
        for b in range(j.shape[1]):
            up, down = j.logits.copy(), j.logits.copy()
            up[a, b] += step
            down[a, b] -= step
            grad[a, b] = (exact_mi(DiscreteJoint(up)) - exact_mi(DiscreteJoint(down))) / (2 * step)
    return grad


def check_normalization_cancellation(j: DiscreteJoint) -> float:
    """Largest ``|sum_x dp(x)/dtheta_i|`` or ``|sum_y dp(y)/dtheta_i|`` over all logits."""
    jac = j.jacobian()
    sum_x = jac.sum(axis=1).sum(axis=0)
    sum_y = jac.sum(axis=0).sum(axis=0)
    return float(max(np.abs(sum_x).max(), np.abs(sum_y).max()))


class FisherCheck(NamedTuple):
    empirical: float
    predicted: float
    std_error: float


def fisher_expectation_check(
    n: int, mu: float, sigma: float, seed: int, replications: int = 100_000
) -> FisherCheck:
    """Monte-Carlo mean of the squared ``n``-sample gradient mean.

    Gradients are drawn as ``mu + sigma * z``. The square is expanded as
    ``mu**2 + sigma*zbar*(2*mu + sigma*zbar)`` so ``sigma = 0`` gives ``mu**2``
    exactly.
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    zbar = rng.standard_normal((replications, n)).mean(axis=1)
    excess = sigma * zbar * (2.0 * mu + sigma * zbar)
    empirical = mu * mu + float(excess.mean())
    se = float(excess.std(ddof=1) / np.sqrt(replications)) if replications > 1 else 0.0
    return FisherCheck(empirical, mu * mu + sigma * sigma / n, se)


def ce_gradient_decomposition(j: DiscreteJoint, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``d log p(y|x) / dtheta`` into its joint and marginal parts.

    Returns ``(dp(x,y)/dtheta / p(x,y), -dp(x)/dtheta / p(x))``; their sum is
    the gradient of ``log p(y|x)``.
    """
    if not (0 <= x < j.shape[0] and 0 <= y < j.shape[1]):
        raise IndexError(f"({x}, {y}) outside a {j.shape} joint")
    p = j.probs()
    jac = j.jacobian()
    joint = jac[x, y] / p[x, y]
    marginal = -jac[x].sum(axis=0) / p[x].sum()
    return joint, marginal


def log_conditional_autodiff(j: DiscreteJoint, x: int, y: int) -> np.ndarray:
    """``d log p(y|x) / dtheta`` through the reverse-mode engine."""
    g = nx.Graph()
    theta = g.input("theta", value=j.logits.ravel()[None, :])
    logp = nx.log_softmax(theta)
    ny = j.shape[1]
    pick = np.zeros((1, j.logits.size))
    pick[0, x * ny + y] = 1.0
    row = np.zeros((1, j.logits.size))
    row[0, x * ny : (x + 1) * ny] = 1.0
    # log p(y|x) = log p(x,y) - log sum_y' p(x,y')
    joint = nx.sum(nx.multiply(logp, g.constant(pick)))
    marg = nx.log(nx.sum(nx.multiply(nx.exp(logp), g.constant(row))))
    g.set_output(joint - marg)
    nx.evaluate(g)
    return nx.input_gradient(g, "theta").reshape(j.shape)


# ---------------------------------------------------------------------------
# Verify suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0


def _suite_mi_gradient(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    fd_err = full_err = 0.0
    t0 = time.perf_counter()
    for _ in range(trials):
        j = DiscreteJoint.random(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        g = mi_gradient_simplified(j)
        fd_err = max(fd_err, float(np.abs(g - mi_gradient_fd(j)).max()))
        full_err = max(full_err, float(np.abs(g - mi_gradient_full(j)).max()))
    dt = time.perf_counter() - t0
    return [
        CheckResult("mi_gradient_vs_finite_differences", fd_err < 1e-6, fd_err, 1e-6, f"{trials} joints", dt),
        CheckResult("mi_gradient_vs_unsimplified", full_err < 1e-10, full_err, 1e-10, f"{trials} joints", dt),
    ]


def _suite_cancellation(trials: int = 100, seed: int = 1) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        j = DiscreteJoint.random(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        worst = max(worst, check_normalization_cancellation(j))
    control = check_normalization_cancellation(corrupt(DiscreteJoint.random(rng, 3, 4)))
    return [
        CheckResult("normalization_cancellation", worst < 1e-12, worst, 1e-12, f"{trials} joints"),
        CheckResult("normalization_negative_control", control > 1e-3, control, 1e-3, "corrupted table"),
    ]


def _suite_fisher(seed: int = 2) -> list[CheckResult]:
    out = []
    worst_z = 0.0
    for mu in (0.0, 1.0):
        for sigma in (0.5, 1.0):
            ns = (5, 10, 20, 40)
            excess = []
            for n in ns:
                chk = fisher_expectation_check(n, mu, sigma, seed + n)
                worst_z = max(worst_z, abs(chk.empirical - chk.predicted) / chk.std_error)
                excess.append(chk.empirical - mu * mu)
            slope = float(np.polyfit(np.log(ns), np.log(excess), 1)[0])
            out.append(CheckResult(f"fisher_slope_mu{mu:g}_sigma{sigma:g}", abs(slope + 1) <= 0.1, slope, 0.1))
    out.insert(0, CheckResult("fisher_expectation_3se", worst_z <= 3.0, worst_z, 3.0, "max |z| over grid"))
    return out


def _suite_ce_decomposition(trials: int = 20, seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        j = DiscreteJoint.random(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        x, y = int(rng.integers(j.shape[0])), int(rng.integers(j.shape[1]))
        a, b = ce_gradient_decomposition(j, x, y)
        worst = max(worst, float(np.abs(a + b - log_conditional_autodiff(j, x, y)).max()))
    return [CheckResult("ce_decomposition_vs_autodiff", worst < 1e-10, worst, 1e-10, f"{trials} joints")]


def verify(seed: int = 0) -> list[CheckResult]:
    results = []
    for suite in (_suite_mi_gradient, _suite_cancellation, _suite_fisher, _suite_ce_decomposition):
        t0 = time.perf_counter()
        part = suite(seed=seed + len(results))
        for r in part:
            r.seconds = r.seconds or time.perf_counter() - t0
        results.extend(part)
    return results


def verify_report(seed: int = 0) -> dict:
    results = verify(seed)
    return {
        "passed": all(r.passed for r in results),
        "checks": [
            {"name": r.name, "passed": r.passed, "value": r.value, "threshold": r.threshold, "detail": r.detail}
            for r in results
        ],
    }


def verify_json(seed: int = 0) -> str:
    return json.dumps(verify_report(seed), indent=2)
