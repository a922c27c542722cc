"""Class-conditional factorial Gaussian over the flow output.

Each class ``u`` owns a mean and a diagonal variance per latent dimension.
They are not learned by gradient descent: every training iteration replaces
them with the statistics of the current minibatch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

VAR_FLOOR = 1e-6


@dataclass
class MixtureParams:
    means: np.ndarray      # (M, D)
    variances: np.ndarray  # (M, D)
    var_floor: float = VAR_FLOOR
    skipped_updates: int = field(default=0, compare=False)

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64)
        self.variances = np.array(self.variances, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape != self.variances.shape:
            raise ValueError("means and variances must both be (M, D)")

    @classmethod
    def standard(cls, n_classes: int, dim: int, var_floor: float = VAR_FLOOR) -> "MixtureParams":
        return cls(np.zeros((n_classes, dim)), np.ones((n_classes, dim)), var_floor)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.means.copy(), self.variances.copy(), self.var_floor,
                             self.skipped_updates)

    def validate(self):
        if not np.all(self.variances >= self.var_floor):
            raise ValueError(f"variance below floor {self.var_floor}")


def _check_labels(u, n_classes: int) -> np.ndarray:
    u = np.asarray(u)
    if u.ndim != 1 or not np.issubdtype(u.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if u.size and (u.min() < 0 or u.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return u.astype(np.intp)


def nll(w, u, params: MixtureParams):
    """Mean over the batch of ``(1/D) sum_i (w_i - mu_i)^2 / (2 var_i) + log sigma_i``.

    ``w`` may be a numpy array (returns a float) or a graph tensor (returns a
    scalar tensor differentiable w.r.t. ``w``, with the mixture held fixed).
    """
    u = _check_labels(u, params.n_classes)
    params.validate()
    mu = params.means[u]
    var = params.variances[u]
    if isinstance(w, Tensor):
        if w.shape != mu.shape:
            raise dc.DimensionError(f"latent shape {w.shape} does not match {mu.shape}")
        diff = dc.add(w, -mu)
        quad = dc.mul(dc.mul(diff, diff), 0.5 / var)
        per_elem = dc.add(quad, 0.5 * np.log(var))
        return dc.reduce_mean(per_elem)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != mu.shape:
        raise dc.DimensionError(f"latent shape {w.shape} does not match {mu.shape}")
    return float(np.mean((w - mu) ** 2 / (2.0 * var) + 0.5 * np.log(var)))


def nll_live(w: Tensor, u, n_classes: int, unbiased: bool = True,
             var_floor: float = VAR_FLOOR) -> Tensor:
    """Loss with the batch statistics kept inside the graph.

    Gradients then flow through the per-class means and variances too. Every
    class present in ``u`` needs at least two samples.
    """
    u = _check_labels(u, n_classes)
    g = w.graph
    counts = np.bincount(u, minlength=n_classes)
    present = np.flatnonzero(counts)
    if np.any(counts[present] < 2):
        raise ValueError("every class in the batch needs at least two samples")
    remap = np.full(n_classes, -1)
    remap[present] = np.arange(len(present))
    onehot = np.zeros((len(u), len(present)))
    onehot[np.arange(len(u)), remap[u]] = 1.0
    avg = onehot.T / counts[present][:, None]
    mu = dc.matmul(g.constant(avg), w)                       # (K, D)
    diff = dc.add(w, dc.neg(dc.matmul(g.constant(onehot), mu)))
    denom = counts[present] - (1 if unbiased else 0)
    var = dc.matmul(g.constant(onehot.T / denom[:, None]), dc.mul(diff, diff))
    var = dc.add(var, np.full(var.shape, var_floor))
    var_rows = dc.matmul(g.constant(onehot), var)
    quad = dc.scale(dc.mul(dc.mul(diff, diff), dc.reciprocal(var_rows)), 0.5)
    per_elem = dc.add(quad, dc.scale(dc.log(var_rows), 0.5))
    return dc.reduce_mean(per_elem)


def update_from_batch(w, u, params: MixtureParams, unbiased: bool = True) -> MixtureParams:
    """Replace each class's mean and variance by its minibatch statistics.

    Classes with fewer than two samples in the batch keep their previous
    values and bump ``skipped_updates``. Variances are floored at
    ``params.var_floor``.
    """
    w = np.asarray(w, dtype=np.float64)
    u = _check_labels(u, params.n_classes)
    out = params.copy()
    ddof = 1 if unbiased else 0
    for c in range(params.n_classes):
        rows = w[u == c]
        if len(rows) < 2:
            if len(rows) == 1:
                out.skipped_updates += 1
            continue
        out.means[c] = rows.mean(axis=0)
        out.variances[c] = np.maximum(rows.var(axis=0, ddof=ddof), params.var_floor)
    return out


def fit_full(w, u, n_classes: int, unbiased: bool = True, var_floor: float = VAR_FLOOR) -> MixtureParams:
    """Mixture statistics from a full pass over a dataset."""
    return update_from_batch(w, u, MixtureParams.standard(n_classes, np.shape(w)[1], var_floor),
                             unbiased)


def sample_latent(params: MixtureParams, u, count: int, temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``count`` latents of class ``u`` from N(mu, (T sigma)^2)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 <= int(u) < params.n_classes:
        raise ValueError(f"unknown label {u}")
    rng = np.random.default_rng() if rng is None else rng
    sigma = np.sqrt(params.variances[int(u)]) * temperature
    return params.means[int(u)] + sigma * rng.standard_normal((count, params.dim))
