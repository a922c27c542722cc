"""Numerical oracles and the self-test suite behind ``ginflow selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import gmlatent
from .flow import FlowModel, build_random_mixer


def numerical_jacobian(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``fn: R^D -> R^D`` at a single point."""
    x = np.asarray(x, dtype=np.float64)
    D = x.size
    J = np.empty((D, D))
    for k in range(D):
        step = np.zeros(D)
        step[k] = eps
        J[:, k] = (fn(x + step) - fn(x - step)) / (2 * eps)
    return J


def log_abs_det_numeric(model: FlowModel, point: np.ndarray, eps: float = 1e-5) -> float:
    J = numerical_jacobian(lambda v: model.forward(v[None, :])[0][0], point, eps)
    return float(np.linalg.slogdet(J)[1])


def perturbed(model: FlowModel, scale: float, seed: int) -> FlowModel:
    """Copy of ``model`` with N(0, scale^2) noise added to every parameter."""
    rng = np.random.default_rng(seed)
    out = model.copy()
    for k in out.params:
        out.params[k] += scale * rng.standard_normal(out.params[k].shape)
    return out


def naive_nll(w, u, means, variances) -> float:
    """Per-sample double loop over the Gaussian mixture loss."""
    total = 0.0
    B, D = np.shape(w)
    for b in range(B):
        acc = 0.0
        for i in range(D):
            mu = means[u[b]][i]
            var = variances[u[b]][i]
            acc += (w[b][i] - mu) ** 2 / (2.0 * var) + 0.5 * np.log(var)
        total += acc / D
    return total / B


def coupling_loss_fn(model: FlowModel, x: np.ndarray, u: np.ndarray, mixture):
    """Scalar loss of the whole flow for :func:`diffcore.grad_check`."""

    def f(g, tensors):
        w, _ = model.forward_graph(g.constant(x), tensors)
        return gmlatent.nll(w, u, mixture)

    return f


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float


def _ops_loss(g, t):
    h = dc.tanh(dc.linear(t["x"], t["w"], t["b"]))
    h = dc.add(dc.mul(h, dc.exp(dc.scale(h, 0.5))), dc.relu(dc.neg(h)))
    a, b = dc.split(h, [(0, 1), (1, 3)])
    h = dc.take_cols(dc.concat([dc.reduce_mean(b, axis=1, keepdims=True), a]), [1, 0])
    return dc.reduce_sum(dc.mul(h, h))


def run_selftest(seeds: int = 3) -> list[CheckResult]:
    """Gradient checks, bijectivity, volume preservation and loss oracles."""
    results = []

    def record(name, fn, limit, worse_if_above=True):
        tic = time.perf_counter()
        try:
            value = float(fn())
            ok = value < limit if worse_if_above else value > limit
        except Exception:  # a crash is a failed check, not a crashed selftest
            value, ok = float("nan"), False
        results.append(CheckResult(name, bool(ok), value, limit, time.perf_counter() - tic))

    def op_grads():
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(s)
            params = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 3)),
                      "b": rng.normal(size=3)}
            worst = max(worst, dc.grad_check(_ops_loss, params, eps=1e-5))
        return worst

    def flow_grads():
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(100 + s)
            model = perturbed(FlowModel(4, n_blocks=2, hidden=(6,), seed=s), 0.3, s)
            x = rng.normal(size=(8, 4))
            u = np.arange(8) % 2
            mix = gmlatent.fit_full(model.forward(x)[0], u, 2)
            worst = max(worst, dc.grad_check(coupling_loss_fn(model, x, u, mix), model.params))
        return worst

    def bijectivity():
        rng = np.random.default_rng(1)
        x = 3.0 * rng.normal(size=(1000, 10))
        gin = perturbed(FlowModel(10, seed=1), 0.01, 1)
        mixer = build_random_mixer(10, seed=0)
        return max(np.abs(m.inverse(m.forward(x)[0]) - x).max() for m in (gin, mixer))

    def volume():
        rng = np.random.default_rng(2)
        gin = perturbed(FlowModel(10, seed=2), 0.01, 2)
        return max(abs(log_abs_det_numeric(gin, p)) for p in rng.normal(size=(5, 10)))

    def loss_oracle():
        rng = np.random.default_rng(3)
        w = rng.normal(size=(50, 6))
        u = rng.integers(0, 4, size=50)
        mix = gmlatent.MixtureParams(rng.normal(size=(4, 6)), rng.uniform(0.1, 3, size=(4, 6)))
        return abs(gmlatent.nll(w, u, mix) - naive_nll(w, u, mix.means, mix.variances))

    record("op_gradients", op_grads, 1e-5)
    record("flow_loss_gradients", flow_grads, 1e-5)
    record("bijectivity", bijectivity, 1e-6)
    record("volume_preservation", volume, 1e-3)
    record("nll_oracle", loss_oracle, 1e-12)
    return results
