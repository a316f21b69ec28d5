"""Built-in numerical self-checks, runnable without the test suite.

Each check re-derives its expected values on the spot (closed forms, brute
force double loops, a scalar optimizer) and compares the package's answer
against them. Intended as a fast post-install smoke screen; the pytest
suite is the authoritative verification.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import KernelSpec, LambdaSchedule, categorical_cross_entropy, mmd2, update_lambda
from .model import (
    ModelConfig,
    apply_max_norm,
    conv2d_forward,
    dense_forward,
    maxpool2d_forward,
    softmax_forward,
)
from .training import TrainConfig, adam_step, init_adam


def _check_gradients():
    rng = np.random.default_rng(0)
    mat = Tensor(rng.normal(size=(4, 3)))
    dense_w, dense_b = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=5))
    labels = Tensor(np.eye(4)[[0, 2, 1]])
    cases = {
        "elementwise": lambda t: ad.tsum(ad.mul(ad.relu(t), ad.exp(ad.scale(t, 0.3)))),
        "matmul": lambda t: ad.tsum(ad.matmul(t, mat)),
        "dense": lambda t: ad.tsum(dense_forward(t, dense_w, dense_b)),
        "softmax+ce": lambda t: categorical_cross_entropy(softmax_forward(t), labels),
    }
    worst = 0.0
    for seed in range(5):
        r = np.random.default_rng(seed)
        for name, f in cases.items():
            # magnitudes bounded away from zero so relu kinks stay out of reach
            data = r.uniform(0.1, 1.5, size=(3, 4)) * r.choice([-1.0, 1.0], size=(3, 4))
            x = Tensor(data, requires_grad=True)
            worst = max(worst, grad_check(f, x))
        conv_x = Tensor(r.normal(size=(1, 5, 5, 2)), requires_grad=True)
        kernel = Tensor(r.normal(size=(3, 3, 2, 2)))
        worst = max(worst, grad_check(
            lambda t: ad.tsum(conv2d_forward(t, kernel, Tensor(np.zeros(2)))), conv_x))
        pool_x = Tensor(r.permutation(36).astype(float).reshape(1, 6, 6, 1), requires_grad=True)
        worst = max(worst, grad_check(lambda t: ad.tsum(maxpool2d_forward(t)), pool_x))
        mmd_x = Tensor(r.normal(size=(4, 3)), requires_grad=True)
        mmd_y = Tensor(r.normal(size=(5, 3)))
        spec = KernelSpec(bandwidths=(0.8, 1.6))
        worst = max(worst, grad_check(lambda t: mmd2(t, mmd_y, spec, "biased"), mmd_x))
        worst = max(worst, grad_check(lambda t: mmd2(t, mmd_y, spec, "unbiased"), mmd_x))
    return worst < 1e-4, f"max relative error {worst:.2e} (threshold 1e-4)"


def _check_mmd_brute_force():
    rng = np.random.default_rng(1)
    sigmas = (0.7, 1.9)

    def kernel(a, b):
        d2 = float(((a - b) ** 2).sum())
        return sum(math.exp(-d2 / (2 * s * s)) for s in sigmas)

    worst = 0.0
    for _ in range(10):
        m, n = rng.integers(2, 7, size=2)
        x, y = rng.normal(size=(m, 3)), rng.normal(size=(n, 3))
        for estimator in ("biased", "unbiased"):
            got = mmd2(Tensor(x), Tensor(y), KernelSpec(bandwidths=sigmas), estimator).item()
            sxx = sum(kernel(x[i], x[j]) for i in range(m) for j in range(m)
                      if estimator == "biased" or i != j)
            syy = sum(kernel(y[i], y[j]) for i in range(n) for j in range(n)
                      if estimator == "biased" or i != j)
            sxy = sum(kernel(x[i], y[j]) for i in range(m) for j in range(n))
            if estimator == "biased":
                want = sxx / (m * m) + syy / (n * n) - 2 * sxy / (m * n)
            else:
                want = sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2 * sxy / (m * n)
            worst = max(worst, abs(got - want))
    return worst < 1e-10, f"max |difference| {worst:.2e} vs brute force"


def _check_adam():
    cfg = TrainConfig()
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step({"w": p}, {"w": np.array([0.5])}, init_adam({"w": p}), cfg)
    first_ok = abs(p.data[0] - (-0.000499999990)) < 1e-12

    p = Tensor(np.array([1.0]), requires_grad=True)
    params = {"w": p}
    state = init_adam(params)
    m = v = 0.0
    theta = 1.0
    worst = 0.0
    for t in range(1, 21):
        g = 2.0 * theta
        adam_step(params, {"w": np.array([2.0 * p.data[0]])}, state, cfg)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        theta -= cfg.learning_rate * (m / (1 - cfg.beta1 ** t)) / (
            math.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.epsilon)
        worst = max(worst, abs(p.data[0] - theta))
    return first_ok and worst < 1e-12, f"single-step ok={first_ok}, 20-step drift {worst:.2e}"


def _check_schedule():
    sched = LambdaSchedule(lambda_max=1.0, gamma=10.0)
    vals = (
        (update_lambda(sched, 0, 30), 0.0),
        (update_lambda(sched, 5, 11), 2.0 / (1.0 + math.exp(-5.0)) - 1.0),
        (update_lambda(sched, 29, 30), 2.0 / (1.0 + math.exp(-10.0)) - 1.0),
    )
    worst = max(abs(got - want) for got, want in vals)
    return worst < 1e-12, f"max schedule error {worst:.2e}"


def _check_softmax():
    out = softmax_forward(Tensor([[1.0, 2.0, 3.0]])).data[0]
    e = np.exp([1.0, 2.0, 3.0] - np.max([1.0, 2.0, 3.0]))
    want = e / e.sum()
    stable = softmax_forward(Tensor([[1000.0, 0.0]])).data
    return (np.abs(out - want).max() < 1e-12 and np.isfinite(stable).all(),
            f"three-way values within {np.abs(out - want).max():.2e}")


def _check_shapes():
    expected = {(16,): 197136, (16, 32): 93312, (16, 32, 64): 43264,
                (4, 8): 23328, (8, 16): 46656}
    got = {f: ModelConfig(conv_filters=f).flatten_dim() for f in expected}
    return got == expected, f"flatten dims {got}"


def _check_max_norm():
    w = Tensor(np.random.default_rng(2).normal(size=(30, 8)) * 4.0)
    apply_max_norm(w, 3.0)
    once = w.data.copy()
    apply_max_norm(w, 3.0)
    norms = np.sqrt((w.data ** 2).sum(axis=0))
    return (np.array_equal(once, w.data) and (norms <= 3.0 + 1e-12).all(),
            f"max column norm {norms.max():.12f}")


CHECKS = (
    ("gradient-suite", _check_gradients),
    ("mmd-brute-force", _check_mmd_brute_force),
    ("adam-oracle", _check_adam),
    ("lambda-schedule", _check_schedule),
    ("softmax-values", _check_softmax),
    ("shape-chain", _check_shapes),
    ("max-norm", _check_max_norm),
)


def run_selftest(out=print):
    """Run every check; returns 0 when all pass."""
    failures = 0
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # noqa: BLE001 - report, keep checking
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failures += 0 if ok else 1
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
