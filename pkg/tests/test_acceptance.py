"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary). Criteria 4, 5 and 7 train full-size models and take tens
of minutes on one core; trained models are shared between criteria.
"""
import json
import time

import numpy as np
import pytest

from ginflow import analysis, checks, cli, datagen, gmlatent, train
from ginflow import diffcore as dc
from ginflow.checks import log_abs_det_numeric, naive_nll, perturbed
from ginflow.cli import ExperimentConfig
from ginflow.flow import FlowModel

SEEDS = (0, 1, 2)


def report(lines, capsys, n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    lines.append((n, line))
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


class Runs:
    """Trains each (config, seed) pair at most once per session."""

    def __init__(self):
        self.cache = {}

    def get(self, name: str, train_seed: int, **overrides):
        key = (name, train_seed)
        if key not in self.cache:
            cfg = ExperimentConfig().override(train_seed=train_seed, **overrides)
            ds, mixer = datagen.generate(cfg.data)
            model = train.make_model(ds.dim, cfg.train)
            result = train.run_schedule(model, ds, cfg.train)
            found, _ = analysis.analyze(result.model, ds, cfg.thresholds)
            self.cache[key] = (found, result, ds, mixer)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


def summary(found: analysis.Analysis) -> str:
    rs = [round(p["abs_r"], 3) for p in found.recovery.pairs]
    gap = found.spectrum.gap_ratio
    return f"count={found.spectrum.informative_count} gap={gap:.3g} |r|={rs}"


def two_of_three(runs, name, **overrides):
    passed, notes = 0, []
    for seed in SEEDS:
        found = runs.get(name, seed, **overrides)[0]
        ok = found.verdict()["recovery_pass"]
        passed += ok
        notes.append(f"seed {seed} {'ok' if ok else 'fail'} ({summary(found)})")
        if passed == 2 or len(notes) - passed == 2:
            break
    return passed >= 2, "; ".join(notes)


def exp1_model(runs):
    """First passing Experiment-1 model (seed order), else seed 0."""
    for seed in SEEDS:
        if ("exp1", seed) in runs.cache and runs.cache[("exp1", seed)][0].verdict()["recovery_pass"]:
            return runs.cache[("exp1", seed)]
    return runs.get("exp1", 0)


# ---------------------------------------------------------------------------


def _op_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    return {
        "matmul": (lambda g, t: dc.reduce_sum(dc.mul(dc.matmul(t["a"], t["b"]), t["c"])),
                   {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)),
                    "c": rng.normal(size=(3, 2))}),
        "linear": (lambda g, t: dc.reduce_sum(dc.tanh(dc.linear(t["x"], t["w"], t["b"]))),
                   {"x": rng.normal(size=(5, 3)), "w": rng.normal(size=(3, 4)),
                    "b": rng.normal(size=4)}),
        "add_mul": (lambda g, t: dc.reduce_sum(dc.mul(dc.add(t["a"], t["b"]), t["a"])),
                    {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}),
        "scale_neg": (lambda g, t: dc.reduce_sum(dc.mul(dc.neg(dc.scale(t["a"], 1.7)), t["a"])),
                      {"a": rng.normal(size=(2, 3))}),
        "relu": (lambda g, t: dc.reduce_sum(dc.mul(dc.relu(t["a"]), t["a"])),
                 {"a": rng.normal(size=(4, 3))}),
        "tanh": (lambda g, t: dc.reduce_sum(dc.tanh(t["a"])), {"a": rng.normal(size=(4, 3))}),
        "exp": (lambda g, t: dc.reduce_sum(dc.exp(t["a"])), {"a": rng.normal(size=(4, 3))}),
        "log": (lambda g, t: dc.reduce_sum(dc.log(t["a"])), {"a": pos(4, 3)}),
        "reciprocal": (lambda g, t: dc.reduce_sum(dc.reciprocal(t["a"])), {"a": pos(4, 3)}),
        "sum_axis": (lambda g, t: dc.reduce_sum(dc.mul(dc.reduce_sum(t["a"], axis=1), t["v"])),
                     {"a": rng.normal(size=(4, 3)), "v": rng.normal(size=4)}),
        "mean_axis": (lambda g, t: dc.reduce_sum(dc.mul(
            dc.reduce_mean(t["a"], axis=0, keepdims=True), t["v"])),
            {"a": rng.normal(size=(4, 3)), "v": rng.normal(size=(1, 3))}),
        "slice_concat": (lambda g, t: dc.reduce_sum(dc.mul(
            dc.concat([dc.slice_cols(t["a"], 2, 4), dc.slice_cols(t["a"], 0, 2)]), t["b"])),
            {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}),
        "take": (lambda g, t: dc.reduce_sum(dc.mul(dc.take_cols(t["a"], [2, 0, 1]), t["b"])),
                 {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3, 3))}),
    }


def test_criterion_1_gradients(acceptance_lines, capsys):
    tic = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for name, (f, params) in _op_cases(rng).items():
            err = dc.grad_check(f, params, eps=1e-5)
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
        model = perturbed(FlowModel(4, n_blocks=2, hidden=(6,), seed=seed), 0.3, seed)
        x = rng.normal(size=(8, 4))
        u = np.arange(8) % 2
        mix = gmlatent.fit_full(model.forward(x)[0], u, 2)
        err = dc.grad_check(checks.coupling_loss_fn(model, x, u, mix), model.params, eps=1e-5)
        if err > worst:
            worst, where = err, f"coupling loss seed {seed}"
    secs = time.perf_counter() - tic
    report(acceptance_lines, capsys, 1, worst < 1e-5 and secs < 10,
           f"max rel err {worst:.2e} ({where}), {secs:.1f}s")


def test_criterion_2_volume(runs, acceptance_lines, capsys):
    found, result, ds, _ = exp1_model(runs)
    tic = time.perf_counter()
    rng = np.random.default_rng(2)
    # a fresh GIN is a pure permutation; the perturbed copy has non-trivial scales.
    # Larger perturbations saturate every clamp and the numerical Jacobian
    # becomes too ill-conditioned (cond ~1e14) to mean anything.
    untrained = [FlowModel(10, seed=0), perturbed(FlowModel(10, seed=0), 0.01, 0)]
    trained_pts = ds.x[rng.choice(len(ds), 20, replace=False)]
    random_pts = rng.normal(size=(20, 10))
    worst = max(abs(log_abs_det_numeric(m, p)) for m in untrained for p in random_pts)
    worst = max(worst, max(abs(log_abs_det_numeric(result.model, p)) for p in trained_pts))
    secs = time.perf_counter() - tic
    report(acceptance_lines, capsys, 2, worst < 1e-3 and secs < 30,
           f"max |log det| {worst:.2e} over 20 points, {secs:.1f}s")


def test_criterion_3_bijectivity(runs, acceptance_lines, capsys):
    _, result, ds, mixer = exp1_model(runs)
    rng = np.random.default_rng(3)
    x = ds.x[rng.choice(len(ds), 1000, replace=False)]
    z = ds.z[:1000]
    errs = {
        "trained gin": np.abs(result.model.inverse(result.model.forward(x)[0]) - x).max(),
        "perturbed gin": np.abs((m := perturbed(FlowModel(10, seed=3), 0.01, 3)).inverse(
            m.forward(x)[0]) - x).max(),
        "mixer": np.abs(mixer.inverse(mixer.forward(z)[0]) - z).max(),
    }
    worst = max(errs.values())
    report(acceptance_lines, capsys, 3, worst < 1e-6,
           ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


def test_criterion_4_experiment_one(runs, acceptance_lines, capsys):
    ok, notes = two_of_three(runs, "exp1")
    report(acceptance_lines, capsys, 4, ok, notes)


def test_criterion_5_experiment_two(runs, acceptance_lines, capsys):
    ok, notes = two_of_three(runs, "exp2", n_classes=3)
    lm = runs.get("exp2", 0, n_classes=3)[0].lmatrix
    below = lm.n_classes < lm.required_conditions and not lm.enough_conditions
    report(acceptance_lines, capsys, 5, ok and below,
           f"{notes}; L-matrix M={lm.n_classes} < {lm.required_conditions}: {below}")


def test_criterion_6_statistic_structure(runs, acceptance_lines, capsys):
    found = exp1_model(runs)[0]
    fit = found.stat_fit
    ok = fit.max_quad_mass <= 0.1 and fit.min_dominance >= 10
    report(acceptance_lines, capsys, 6, ok,
           f"quad mass {[round(q, 4) for q in fit.quad_mass]}, "
           f"dominance {[round(d, 1) for d in fit.dominance]}")


def test_criterion_7_small_data_degrades(runs, acceptance_lines, capsys):
    notes, degraded = [], 0
    for seed in SEEDS:
        found = runs.get("small", seed, n_samples=10_000)[0]
        bad = not found.verdict()["recovery_pass"]
        degraded += bad
        notes.append(f"seed {seed} {'degraded' if bad else 'recovered'} ({summary(found)})")
        if bad:
            break
    report(acceptance_lines, capsys, 7, degraded >= 1, "; ".join(notes))


def test_criterion_8_loss_oracle(acceptance_lines, capsys):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        M, D, B = rng.integers(2, 7), rng.integers(1, 11), rng.integers(5, 200)
        mix = gmlatent.MixtureParams(rng.normal(size=(M, D)) * 3, rng.uniform(0.05, 4, size=(M, D)))
        w = rng.normal(size=(B, D)) * 2
        u = rng.integers(0, M, size=B)
        worst = max(worst, abs(gmlatent.nll(w, u, mix) - naive_nll(w, u, mix.means, mix.variances)))
    report(acceptance_lines, capsys, 8, worst < 1e-12, f"max |diff| {worst:.1e} over 20 batches")


def test_criterion_9_determinism(tmp_path, acceptance_lines, capsys):
    # reduced size: determinism does not depend on the scale of the run
    base = ExperimentConfig().override(n_samples=5000, max_epochs_per_phase=5, window=2)
    outputs = []
    for k in ("a", "b"):
        cfg = base.override(output_dir=str(tmp_path / k))
        cli.cmd_full_experiment(cfg)
        capsys.readouterr()
        outputs.append((tmp_path / k / "report.json").read_bytes())
    same = outputs[0] == outputs[1]
    json.loads(outputs[0])
    report(acceptance_lines, capsys, 9, same,
           f"report.json {'byte-identical' if same else 'differs'} ({len(outputs[0])} bytes)")
