"""Affine coupling flows: GIN (volume preserving) and RealNVP.

A flow maps data ``x`` to latents ``w``. Each block first permutes the
dimensions with a fixed random permutation and then applies two affine
coupling functions with swapped active/passive halves::

    y_passive = x_passive
    y_active  = x_active * exp(s(x_passive)) + t(x_passive)

``s`` and ``t`` come out of one MLP, concatenated. The raw scale is clamped
with ``2 tanh``. In GIN mode the last scale component is replaced by the
negative sum of the others so every coupling has unit Jacobian determinant.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from . import diffcore as dc
from .diffcore import Graph, NumericError, Tensor

MODES = ("gin", "rnvp")
ZERO_SUM = ("negsum", "mean")
INITS = ("identity", "normal", "uniform")
MAGIC = b"GINFLOW1"


@dataclass(frozen=True)
class SubnetSpec:
    """Fully connected coupling function, ReLU after all but the last layer."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"bad layer widths {self.layer_widths}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def shapes(self, prefix: str) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            out[f"{prefix}.W{i}"] = (a, b)
            out[f"{prefix}.b{i}"] = (b,)
        return out

    def apply(self, x: Tensor, params, prefix: str) -> Tensor:
        h = x
        for i in range(self.n_layers):
            h = dc.linear(h, params[f"{prefix}.W{i}"], params[f"{prefix}.b{i}"])
            if i < self.n_layers - 1:
                h = dc.relu(h)
        return h


def effective_scale(raw: Tensor, mode: str = "gin", zero_sum: str = "negsum",
                    clamp: float = 2.0) -> Tensor:
    """Clamped log-scale; in GIN mode each row sums to zero.

    ``negsum``: clamp the first m-1 components, then the last one is the
    negative of their sum. ``mean``: clamp everything and subtract the row mean.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    g = raw.graph
    m = raw.shape[-1]
    if mode == "rnvp":
        return dc.scale(dc.tanh(raw), clamp)
    if zero_sum == "mean":
        c = dc.scale(dc.tanh(raw), clamp)
        centre = dc.reduce_mean(c, axis=1, keepdims=True)
        return dc.add(c, dc.neg(dc.concat([centre] * m, axis=1)))
    if zero_sum != "negsum":
        raise ValueError(f"unknown zero-sum rule {zero_sum!r}")
    if m == 1:
        return g.constant(np.zeros(raw.shape))
    head = dc.scale(dc.tanh(dc.slice_cols(raw, 0, m - 1)), clamp)
    last = dc.neg(dc.reduce_sum(head, axis=1, keepdims=True))
    return dc.concat([head, last], axis=1)


class CouplingBlock:
    """Two affine coupling functions with swapped halves.

    The first function keeps columns ``[0, d)`` fixed and transforms
    ``[d, D)``; the second does the reverse. ``d = D // 2``.
    """

    def __init__(self, index: int, dim: int, hidden=(10, 10), mode="gin",
                 zero_sum="negsum", clamp=2.0):
        if dim < 2:
            raise ValueError("coupling needs at least 2 dimensions")
        self.index = index
        self.dim = dim
        self.split = dim // 2
        self.mode = mode
        self.zero_sum = zero_sum
        self.clamp = clamp
        d = self.split
        # (passive range, active range) per coupling function
        self.halves = [((0, d), (d, dim)), ((d, dim), (0, d))]
        self.subnets = []
        for (plo, phi), (alo, ahi) in self.halves:
            self.subnets.append(SubnetSpec((phi - plo, *hidden, 2 * (ahi - alo))))

    def prefix(self, j: int) -> str:
        return f"b{self.index}.c{j}"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for j, net in enumerate(self.subnets):
            out.update(net.shapes(self.prefix(j)))
        return out

    def _scale_shift(self, j: int, passive: Tensor, params) -> tuple[Tensor, Tensor]:
        (alo, ahi) = self.halves[j][1]
        m = ahi - alo
        st = self.subnets[j].apply(passive, params, self.prefix(j))
        s = effective_scale(dc.slice_cols(st, 0, m), self.mode, self.zero_sum, self.clamp)
        t = dc.slice_cols(st, m, 2 * m)
        return s, t

    def forward(self, x: Tensor, params) -> tuple[Tensor, Tensor | None]:
        """Returns ``(y, logdet)``; ``logdet`` is ``None`` in GIN mode (identically 0)."""
        logdet = None
        for j, ((plo, phi), (alo, ahi)) in enumerate(self.halves):
            passive = dc.slice_cols(x, plo, phi)
            active = dc.slice_cols(x, alo, ahi)
            s, t = self._scale_shift(j, passive, params)
            active = dc.add(dc.mul(active, dc.exp(s)), t)
            parts = [passive, active] if j == 0 else [active, passive]
            x = dc.concat(parts, axis=1)
            if self.mode == "rnvp":
                ld = dc.reduce_sum(s, axis=1)
                logdet = ld if logdet is None else dc.add(logdet, ld)
        dc.check_finite(x, "coupling output", block=self.index)
        return x, logdet

    def inverse(self, y: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
        g = Graph(record=False)
        bound = {k: g.constant(params[k]) for k in self.param_shapes()}
        x = np.array(y, dtype=np.float64)
        for j in (1, 0):
            (plo, phi), (alo, ahi) = self.halves[j]
            s, t = self._scale_shift(j, g.constant(x[:, plo:phi]), bound)
            x[:, alo:ahi] = (x[:, alo:ahi] - t.value) * np.exp(-s.value)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in inverse coupling", block=self.index)
        return x


def couple_forward(x, block: CouplingBlock, params: dict[str, np.ndarray]):
    """Numpy convenience: one block without its permutation. Returns ``(y, logdet)``."""
    g = Graph(record=False)
    bound = {k: g.constant(params[k]) for k in block.param_shapes()}
    y, logdet = block.forward(g.constant(x), bound)
    ld = np.zeros(y.shape[0]) if logdet is None else logdet.value
    return y.value, ld


class FlowModel:
    """Stack of permutation + coupling blocks mapping data to latents."""

    def __init__(self, dim: int, n_blocks: int = 8, hidden=(10, 10), mode: str = "gin",
                 seed: int = 0, init: str = "identity", zero_sum: str = "negsum",
                 clamp: float = 2.0, permutations=None, params=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if zero_sum not in ZERO_SUM:
            raise ValueError(f"unknown zero-sum rule {zero_sum!r}")
        if init not in INITS:
            raise ValueError(f"unknown init {init!r}")
        self.dim = int(dim)
        self.n_blocks = int(n_blocks)
        self.hidden = tuple(int(h) for h in hidden)
        self.mode = mode
        self.seed = int(seed)
        self.init = init
        self.zero_sum = zero_sum
        self.clamp = float(clamp)
        self.blocks = [CouplingBlock(i, self.dim, self.hidden, mode, zero_sum, self.clamp)
                       for i in range(self.n_blocks)]

        rng = np.random.default_rng(self.seed)
        if permutations is None:
            permutations = [rng.permutation(self.dim) for _ in range(self.n_blocks)]
        self.permutations = [np.asarray(p, dtype=np.int64) for p in permutations]
        if len(self.permutations) != self.n_blocks or any(
            sorted(p.tolist()) != list(range(self.dim)) for p in self.permutations
        ):
            raise ValueError("permutations do not match the model layout")
        self.inverse_permutations = [np.argsort(p) for p in self.permutations]

        shapes = self.param_shapes()
        if params is None:
            params = _init_params(shapes, init, rng)
        missing = set(shapes) - set(params)
        if missing or any(tuple(params[k].shape) != shapes[k] for k in shapes):
            raise ValueError(f"parameter set does not match the architecture: {sorted(missing)}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for block in self.blocks:
            out.update(block.param_shapes())
        return out

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def bind(self, g: Graph, trainable: bool = True) -> dict[str, Tensor]:
        if trainable:
            return {k: g.param(k, v) for k, v in self.params.items()}
        return {k: g.constant(v) for k, v in self.params.items()}

    def forward_graph(self, x: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor | None]:
        logdet = None
        for block, perm in zip(self.blocks, self.permutations):
            x = dc.take_cols(x, perm)
            x, ld = block.forward(x, params)
            if ld is not None:
                logdet = ld if logdet is None else dc.add(logdet, ld)
        return x, logdet

    def forward(self, x, chunk: int = 20000) -> tuple[np.ndarray, np.ndarray]:
        """Data to latents. Returns ``(w, logdet)``; GIN logdet is exactly zero."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise dc.DimensionError(f"expected (N, {self.dim}) input, got {x.shape}")
        ws, lds = [], []
        for lo in range(0, max(len(x), 1), chunk):
            g = Graph(record=False)
            w, ld = self.forward_graph(g.constant(x[lo:lo + chunk]), self.bind(g, False))
            ws.append(w.value)
            lds.append(np.zeros(len(w.value)) if ld is None else ld.value)
        return np.concatenate(ws), np.concatenate(lds)

    def inverse(self, w) -> np.ndarray:
        """Latents to data."""
        x = np.asarray(w, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise dc.DimensionError(f"expected (N, {self.dim}) input, got {x.shape}")
        for block, inv in zip(reversed(self.blocks), reversed(self.inverse_permutations)):
            x = block.inverse(x, self.params)[:, inv]
        return x

    def effective_scales(self, x) -> list[np.ndarray]:
        """Effective log-scale matrices of every coupling function, in order."""
        x = np.asarray(x, dtype=np.float64)
        g = Graph(record=False)
        params = self.bind(g, False)
        h = g.constant(x)
        out = []
        for block, perm in zip(self.blocks, self.permutations):
            h = dc.take_cols(h, perm)
            for j, ((plo, phi), _) in enumerate(block.halves):
                s, _t = block._scale_shift(j, dc.slice_cols(h, plo, phi), params)
                out.append(s.value)
            h, _ = block.forward(h, params)
        return out

    def copy(self) -> "FlowModel":
        return FlowModel(**self.architecture(), permutations=self.permutations, params=self.params)

    def architecture(self) -> dict:
        return {
            "dim": self.dim, "n_blocks": self.n_blocks, "hidden": list(self.hidden),
            "mode": self.mode, "seed": self.seed, "init": self.init,
            "zero_sum": self.zero_sum, "clamp": self.clamp,
        }

    def header(self) -> dict:
        return {**self.architecture(), "permutations": [p.tolist() for p in self.permutations]}

    def save(self, path, extra_header: dict | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None) -> Path:
        """Write a checkpoint: JSON header plus little-endian float64 weights."""
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        for k, v in (extra_arrays or {}).items():
            arrays[f"extra/{k}"] = v
        head = {"format": "ginflow-model", "version": 1, "model": self.header(),
                "extra": extra_header or {}}
        return container.write(path, MAGIC, head, arrays)

    @classmethod
    def from_header(cls, model: dict, params: dict[str, np.ndarray]) -> "FlowModel":
        return cls(model["dim"], model["n_blocks"], tuple(model["hidden"]), model["mode"],
                   model["seed"], model["init"], model["zero_sum"], model["clamp"],
                   permutations=model["permutations"], params=params)

    @classmethod
    def load(cls, path) -> tuple["FlowModel", dict, dict[str, np.ndarray]]:
        """Returns ``(model, extra_header, extra_arrays)``."""
        head, arrays = container.read(path, MAGIC)
        if head.get("format") != "ginflow-model":
            raise container.CorruptFileError("not a model checkpoint")
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
        return cls.from_header(head["model"], params), head.get("extra", {}), extra


def _init_params(shapes, init: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    last_layer = {}
    for name in shapes:
        prefix, leaf = name.rsplit(".", 1)
        last_layer[prefix] = max(last_layer.get(prefix, 0), int(leaf[1:]))
    for name, shape in shapes.items():
        prefix, leaf = name.rsplit(".", 1)
        is_final = int(leaf[1:]) == last_layer[prefix]
        fan_in = shapes[f"{prefix}.W{leaf[1:]}"][0]
        if init == "uniform":
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf[0] == "b" or (is_final and init == "identity"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


MIXER_CLAMP = 1.0


def build_random_mixer(dim: int, n_blocks: int = 8, seed: int = 0, hidden=(10, 10),
                       identity: bool = False, clamp: float = MIXER_CLAMP) -> FlowModel:
    """Randomly initialised RealNVP used as the ground-truth mixing function.

    All weights and biases are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    ``identity=True`` zeros the final layers instead, leaving only the permutations.
    The log-scale is ``clamp * tanh(raw)``; the default 1.0 keeps random mixers
    strongly nonlinear without the heavy output tails a clamp of 2 produces.
    """
    if dim < 2:
        raise ValueError("mixer needs dim >= 2")
    mixer = FlowModel(dim, n_blocks, hidden, mode="rnvp", seed=seed, init="uniform", clamp=clamp)
    if identity:
        for block in mixer.blocks:
            for j, net in enumerate(block.subnets):
                last = net.n_layers - 1
                mixer.params[f"{block.prefix(j)}.W{last}"][:] = 0.0
                mixer.params[f"{block.prefix(j)}.b{last}"][:] = 0.0
    return mixer
