"""Synthetic conditionally-Gaussian data pushed through a random RealNVP.

Each class gets a 2-d Gaussian cluster (means uniform on [-5, 5], variances
uniform on [0.5, 3], drawn once per class). The remaining dimensions are small
independent noise. A randomly initialised coupling flow mixes the
concatenated latents into the observations.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container
from .diffcore import NumericError
from .flow import MIXER_CLAMP, FlowModel, build_random_mixer

MAGIC = b"GINDATA1"
PROBE_LIMIT = 1e6
MAX_MIXER_TRIES = 100


@dataclass(frozen=True)
class GroundTruthSpec:
    n_classes: int = 5
    n_informative: int = 2
    n_total: int = 10
    n_samples: int = 100_000
    mean_low: float = -5.0
    mean_high: float = 5.0
    var_low: float = 0.5
    var_high: float = 3.0
    noise_scale: float = 0.01
    mixer_blocks: int = 8
    mixer_clamp: float = MIXER_CLAMP
    mixer_seed: int = 0
    data_seed: int = 0
    reject_trivial: bool = True

    def __post_init__(self):
        if not 1 <= self.n_informative <= self.n_total:
            raise ValueError("need 1 <= n_informative <= n_total")
        if self.n_total < 2:
            raise ValueError("need at least 2 dimensions")
        if self.n_classes < 1 or self.n_samples < 1:
            raise ValueError("need at least one class and one sample")
        if not (self.mean_low < self.mean_high and 0 < self.var_low < self.var_high):
            raise ValueError("invalid cluster ranges")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if not 0 < self.mixer_clamp <= 2:
            raise ValueError("mixer_clamp must lie in (0, 2]")


@dataclass
class LabeledDataset:
    x: np.ndarray
    u: np.ndarray
    z: np.ndarray | None = None
    provenance: dict | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.int64)
        if self.x.ndim != 2 or self.u.shape != (len(self.x),):
            raise ValueError("x must be (N, D) and u must be (N,)")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.float64)
            if self.z.shape != self.x.shape:
                raise ValueError("z must match x in shape")

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        if self.provenance and "spec" in self.provenance:
            return int(self.provenance["spec"]["n_classes"])
        return int(self.u.max()) + 1 if len(self.u) else 0

    def subset(self, n: int) -> "LabeledDataset":
        z = None if self.z is None else self.z[:n]
        return LabeledDataset(self.x[:n], self.u[:n], z, self.provenance)


def cluster_params(spec: GroundTruthSpec, rng: np.random.Generator):
    """Per-class means and variances of the informative dimensions."""
    k = (spec.n_classes, spec.n_informative)
    means = rng.uniform(spec.mean_low, spec.mean_high, size=k)
    variances = rng.uniform(spec.var_low, spec.var_high, size=k)
    return means, variances


def gen_latents(spec: GroundTruthSpec):
    """Returns ``(z, u, means, variances)``.

    Labels are balanced (counts differ by at most one) and shuffled. Cluster
    parameters are drawn first, so changing ``n_samples`` keeps the clusters.
    """
    rng = np.random.default_rng(spec.data_seed)
    means, variances = cluster_params(spec, rng)
    u = rng.permutation(np.arange(spec.n_samples) % spec.n_classes).astype(np.int64)
    z = np.empty((spec.n_samples, spec.n_total))
    eps = rng.standard_normal((spec.n_samples, spec.n_informative))
    z[:, : spec.n_informative] = means[u] + np.sqrt(variances[u]) * eps
    z[:, spec.n_informative :] = spec.noise_scale * rng.standard_normal(
        (spec.n_samples, spec.n_total - spec.n_informative))
    return z, u, means, variances


def mix(z, mixer: FlowModel) -> np.ndarray:
    if mixer.dim != np.shape(z)[1]:
        raise ValueError(f"mixer dim {mixer.dim} does not match latent dim {np.shape(z)[1]}")
    x, _ = mixer.forward(z)
    if not np.all(np.isfinite(x)):
        raise NumericError("mixer produced non-finite output")
    return x


def _mixer_ok(mixer: FlowModel, probe: np.ndarray) -> bool:
    try:
        x, _ = mixer.forward(probe)
    except NumericError:
        return False
    return bool(np.all(np.isfinite(x)) and np.abs(x).max() <= PROBE_LIMIT)


def is_trivial_mixer(mixer: FlowModel, probe: np.ndarray, n_informative: int) -> bool:
    """True if the raw observations already pass the recovery verdict.

    Such a mixer barely rotates the informative latents out of their axes, so
    recovering them would not demonstrate anything.
    """
    from .analysis import Thresholds, match_latents, spectrum_of

    x, _ = mixer.forward(probe)
    th = Thresholds()
    spec = spectrum_of(x)
    if spec.informative_count != n_informative or (spec.gap_ratio or 0.0) < th.min_gap:
        return False
    return match_latents(probe[:, :n_informative], x).min_abs_r >= th.min_abs_r


def accept_mixer(spec: GroundTruthSpec, probe: np.ndarray):
    """First mixer seed from ``spec.mixer_seed`` upward that is bounded and not trivial."""
    rejected = []
    for k in range(MAX_MIXER_TRIES):
        seed = spec.mixer_seed + k
        mixer = build_random_mixer(spec.n_total, spec.mixer_blocks, seed, clamp=spec.mixer_clamp)
        if _mixer_ok(mixer, probe) and not (
                spec.reject_trivial and is_trivial_mixer(mixer, probe, spec.n_informative)):
            return mixer, rejected
        rejected.append(seed)
    raise NumericError(f"no acceptable mixer in {MAX_MIXER_TRIES} seeds from {spec.mixer_seed}")


def generate(spec: GroundTruthSpec) -> tuple[LabeledDataset, FlowModel]:
    z, u, means, variances = gen_latents(spec)
    mixer, rejected = accept_mixer(spec, z[:1000])
    x = mix(z, mixer)
    if np.abs(x).max() > PROBE_LIMIT:
        # the probe is a subset; the full batch must obey the same rule
        raise NumericError("mixer output exceeds the magnitude limit on the full dataset")
    provenance = {
        "spec": asdict(spec),
        "mixer_seed_used": mixer.seed,
        "rejected_mixer_seeds": rejected,
        "cluster_means": means.tolist(),
        "cluster_variances": variances.tolist(),
    }
    return LabeledDataset(x, u, z, provenance), mixer


def augment(x, sigma: float = 0.01, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add fresh i.i.d. N(0, sigma^2) noise to every element."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng() if rng is None else rng
    return x + sigma * rng.standard_normal(x.shape)


def save(dataset: LabeledDataset, path) -> Path:
    arrays = {"x": dataset.x, "u": dataset.u}
    if dataset.z is not None:
        arrays["z"] = dataset.z
    header = {"format": "ginflow-dataset", "version": 1, "provenance": dataset.provenance or {}}
    return container.write(path, MAGIC, header, arrays)


def load(path) -> LabeledDataset:
    header, arrays = container.read(path, MAGIC)
    if header.get("format") != "ginflow-dataset" or "x" not in arrays or "u" not in arrays:
        raise container.CorruptFileError("not a dataset file")
    return LabeledDataset(arrays["x"], arrays["u"], arrays.get("z"), header.get("provenance") or None)
