"""Maximum-likelihood training of a GIN on labelled data.

Every iteration: augment the batch with small Gaussian noise, map it to the
latent space, refresh the per-class mixture from that batch, evaluate the
negative log-likelihood, backpropagate and take an Adam step. Training runs
in two phases; the second uses the learning rate divided by
``lr_decay_factor``. A phase ends when the windowed epoch loss stops improving.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datagen
from . import gmlatent
from .diffcore import Graph, NumericError
from .flow import FlowModel
from .gmlatent import MixtureParams

HISTORY_FIELDS = ("step", "phase", "lr", "batch_loss", "wall_ms", "event")


class NumericAbort(NumericError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr_initial: float = 1e-3
    lr_decay_factor: float = 10.0
    batch_size: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window: int = 20
    tolerance: float = 1e-3
    max_epochs_per_phase: int = 500
    aug_sigma: float = 0.01
    seed: int = 0
    n_blocks: int = 8
    hidden_width: int = 10
    hidden_layers: int = 2
    zero_sum: str = "negsum"
    unbiased_variance: bool = True
    stop_gradient: bool = True
    checkpoint_every: int = 0

    def validate(self, n_classes: int | None = None):
        if self.lr_initial < 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning rate must be non-negative and decay positive")
        if self.window < 1 or self.max_epochs_per_phase < 1:
            raise ValueError("window and epoch cap must be positive")
        if n_classes is not None and self.batch_size < 2 * n_classes:
            raise ValueError(f"batch_size {self.batch_size} < 2 * n_classes ({2 * n_classes})")

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers

    def phase_lr(self, phase: int) -> float:
        return self.lr_initial / self.lr_decay_factor ** (phase - 1)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    phase: int = 1
    phase_epochs: int = 0
    done: bool = False
    partial: bool = False
    epoch_losses: list = field(default_factory=lambda: [[], []])
    history: list = field(default_factory=list)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng_state: dict | None = None

    def log_event(self, name: str):
        if self.history:
            row = self.history[-1]
            row["event"] = f"{row['event']};{name}" if row["event"] else name

    def events(self) -> list[tuple[int, str]]:
        return [(r["step"], e) for r in self.history if r["event"] for e in r["event"].split(";")]


def make_model(dim: int, config: TrainConfig) -> FlowModel:
    return FlowModel(dim, config.n_blocks, config.hidden, mode="gin", seed=config.seed,
                     init="identity", zero_sum=config.zero_sum)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: TrainState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam update with bias correction; ``state.step`` is the 1-based step."""
    t = state.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient for {name}", t)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def _rng(state: TrainState, config: TrainConfig) -> np.random.Generator:
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    return rng


def train_epoch(model: FlowModel, mixture: MixtureParams, dataset, config: TrainConfig,
                state: TrainState, lr: float | None = None) -> MixtureParams:
    """One pass over ``dataset`` in shuffled minibatches; returns the updated mixture."""
    lr = config.phase_lr(state.phase) if lr is None else lr
    rng = _rng(state, config)
    n = len(dataset)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    losses = []
    for lo in range(0, n - bs + 1, bs):
        tic = time.perf_counter()
        idx = order[lo:lo + bs]
        xb = datagen.augment(dataset.x[idx], config.aug_sigma, rng)
        ub = dataset.u[idx]
        state.step += 1

        g = Graph()
        params = model.bind(g)
        try:
            w, _ = model.forward_graph(g.constant(xb), params)
        except NumericError as exc:
            raise NumericAbort(str(exc), state.step) from exc
        mixture = gmlatent.update_from_batch(w.value, ub, mixture, config.unbiased_variance)
        if config.stop_gradient:
            loss = gmlatent.nll(w, ub, mixture)
        else:
            loss = gmlatent.nll_live(w, ub, mixture.n_classes, config.unbiased_variance,
                                     mixture.var_floor)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericAbort("non-finite loss", state.step)
        grads = g.backward(loss)
        adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.eps)

        losses.append(value)
        state.history.append({
            "step": state.step, "phase": state.phase, "lr": lr, "batch_loss": value,
            "wall_ms": (time.perf_counter() - tic) * 1e3, "event": "",
        })
    state.epoch += 1
    state.epoch_losses[state.phase - 1].append(float(np.mean(losses)))
    state.rng_state = rng.bit_generator.state
    return mixture


def converged(epoch_losses, window: int, tolerance: float) -> bool:
    """Relative improvement between the last two windows of epoch losses.

    The denominator is ``max(|previous window mean|, 1)`` because the loss
    crosses zero during training.
    """
    if len(epoch_losses) < 2 * window:
        return False
    prev = float(np.mean(epoch_losses[-2 * window:-window]))
    cur = float(np.mean(epoch_losses[-window:]))
    return (prev - cur) / max(abs(prev), 1.0) < tolerance


@dataclass
class TrainResult:
    model: FlowModel
    mixture: MixtureParams
    state: TrainState

    @property
    def partial(self) -> bool:
        return self.state.partial


def run_schedule(model: FlowModel, dataset, config: TrainConfig, state: TrainState | None = None,
                 mixture: MixtureParams | None = None, max_epochs: int | None = None,
                 on_epoch=None) -> TrainResult:
    """Two-phase training until both phases converge (or hit the epoch cap).

    ``max_epochs`` stops early after that many epochs in this call (for
    checkpoint/resume); ``on_epoch(result)`` runs after every epoch.
    """
    n_classes = dataset.n_classes
    config.validate(n_classes)
    state = TrainState() if state is None else state
    if mixture is None:
        mixture = MixtureParams.standard(n_classes, model.dim)
    ran = 0
    while not state.done and (max_epochs is None or ran < max_epochs):
        mixture = train_epoch(model, mixture, dataset, config, state)
        state.phase_epochs += 1
        ran += 1
        losses = state.epoch_losses[state.phase - 1]
        hit_cap = state.phase_epochs >= config.max_epochs_per_phase
        if converged(losses, config.window, config.tolerance) or hit_cap:
            if hit_cap and not converged(losses, config.window, config.tolerance):
                state.partial = True
                state.log_event("cap_reached")
            else:
                state.log_event("converged")
            if state.phase == 1:
                state.phase = 2
                state.phase_epochs = 0
                state.log_event("phase_change")
            else:
                state.done = True
        if on_epoch is not None:
            on_epoch(TrainResult(model, mixture, state))
    return TrainResult(model, mixture, state)


def full_data_loss(model: FlowModel, dataset, config: TrainConfig) -> float:
    """NLL of the whole dataset with mixture statistics fitted on that same pass."""
    w, _ = model.forward(dataset.x)
    mix = gmlatent.fit_full(w, dataset.u, dataset.n_classes, config.unbiased_variance)
    return gmlatent.nll(w, dataset.u, mix)


# ---------------------------------------------------------------------------
# persistence


def history_to_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({**row, "lr": repr(row["lr"]), "batch_loss": repr(row["batch_loss"]),
                         "wall_ms": f"{row['wall_ms']:.3f}"})
    return buf.getvalue()


def history_from_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({"step": int(row["step"]), "phase": int(row["phase"]), "lr": float(row["lr"]),
                     "batch_loss": float(row["batch_loss"]), "wall_ms": float(row["wall_ms"]),
                     "event": row["event"]})
    return rows


def save_checkpoint(path, result: TrainResult, config: TrainConfig) -> Path:
    st = result.state
    hist = st.history
    arrays = {
        "mixture_means": result.mixture.means,
        "mixture_variances": result.mixture.variances,
        "history_step": np.array([r["step"] for r in hist], dtype=np.int64),
        "history_phase": np.array([r["phase"] for r in hist], dtype=np.int64),
        "history_lr": np.array([r["lr"] for r in hist], dtype=np.float64),
        "history_loss": np.array([r["batch_loss"] for r in hist], dtype=np.float64),
        "history_wall_ms": np.array([r["wall_ms"] for r in hist], dtype=np.float64),
    }
    for name in st.m:
        arrays[f"adam_m/{name}"] = st.m[name]
        arrays[f"adam_v/{name}"] = st.v[name]
    header = {
        "config": asdict(config),
        "mixture": {"var_floor": result.mixture.var_floor,
                    "skipped_updates": result.mixture.skipped_updates},
        "state": {
            "step": st.step, "epoch": st.epoch, "phase": st.phase,
            "phase_epochs": st.phase_epochs, "done": st.done, "partial": st.partial,
            "epoch_losses": st.epoch_losses, "rng_state": st.rng_state,
            "events": [[i, r["event"]] for i, r in enumerate(hist) if r["event"]],
        },
    }
    return result.model.save(path, header, arrays)


def load_checkpoint(path) -> tuple[TrainResult, TrainConfig]:
    model, header, arrays = FlowModel.load(path)
    known = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in header.get("config", {}).items() if k in known})
    mix_head = header.get("mixture", {})
    mixture = MixtureParams(arrays["mixture_means"], arrays["mixture_variances"],
                            mix_head.get("var_floor", gmlatent.VAR_FLOOR),
                            mix_head.get("skipped_updates", 0))
    sh = header.get("state", {})
    history = [
        {"step": int(s), "phase": int(p), "lr": float(lr), "batch_loss": float(l),
         "wall_ms": float(ms), "event": ""}
        for s, p, lr, l, ms in zip(arrays["history_step"], arrays["history_phase"],
                                   arrays["history_lr"], arrays["history_loss"],
                                   arrays["history_wall_ms"])
    ]
    for i, event in sh.get("events", []):
        history[i]["event"] = event
    state = TrainState(
        step=sh.get("step", 0), epoch=sh.get("epoch", 0), phase=sh.get("phase", 1),
        phase_epochs=sh.get("phase_epochs", 0), done=sh.get("done", False),
        partial=sh.get("partial", False), epoch_losses=sh.get("epoch_losses", [[], []]),
        history=history, rng_state=sh.get("rng_state"),
        m={k[len("adam_m/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_v/")},
    )
    return TrainResult(model, mixture, state), config
