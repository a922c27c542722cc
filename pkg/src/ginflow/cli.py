"""Command-line entry point: ``ginflow {gen-data,train,analyze,selftest,full-experiment}``.

Every command reads one flat JSON experiment config (or the defaults), applies
``--preset``, ``--classes``, ``--samples`` and ``--set key=value`` overrides in
that order, and writes its outputs below the output directory. The output
directory comes from ``--output-dir``, else ``$GIN_OUTPUT_DIR``, else the config.

Exit codes: 0 ok, 1 acceptance failure, 2 usage error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import analysis, checks, datagen, train
from . import diffcore as dc
from .container import CorruptFileError
from .datagen import GroundTruthSpec
from .diffcore import NumericError
from .flow import FlowModel
from .train import TrainConfig

CONFIG_VERSION = 1
OUTPUT_ENV = "GIN_OUTPUT_DIR"

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DATA_FILE = "data.bin"
CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.csv"
CONFIG_FILE = "config.json"

# the training seed is called ``train_seed`` in the flat config
_TRAIN_RENAMES = {"seed": "train_seed"}

KEY_DOCS = {
    "version": "config schema version (required in files)",
    "output_dir": "directory for all outputs",
    "n_classes": "number of classes / mixture components",
    "n_informative": "latent dimensions that depend on the class",
    "n_total": "total data dimension",
    "n_samples": "number of generated records",
    "mean_low": "lower bound of the class means",
    "mean_high": "upper bound of the class means",
    "var_low": "lower bound of the class variances",
    "var_high": "upper bound of the class variances",
    "noise_scale": "std of the uninformative latent dimensions",
    "mixer_blocks": "coupling blocks in the ground-truth mixer",
    "mixer_clamp": "log-scale clamp of the ground-truth mixer",
    "mixer_seed": "first mixer seed to try",
    "data_seed": "seed for class parameters and latent samples",
    "reject_trivial": "skip mixers whose raw output already passes recovery",
    "lr_initial": "phase-1 learning rate",
    "lr_decay_factor": "phase-2 learning rate is lr_initial / this",
    "batch_size": "records per Adam step",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "eps": "Adam denominator epsilon",
    "window": "epochs in the convergence window",
    "tolerance": "relative windowed improvement that counts as converged",
    "max_epochs_per_phase": "epoch cap per phase",
    "aug_sigma": "std of the noise added to every training batch",
    "train_seed": "seed for model init, shuffling and augmentation",
    "n_blocks": "GIN coupling blocks",
    "hidden_width": "units per hidden layer",
    "hidden_layers": "hidden layers per subnet",
    "zero_sum": "how scales are made to sum to zero: negsum or mean",
    "unbiased_variance": "divide class variances by B-1 instead of B",
    "stop_gradient": "treat batch mixture statistics as constants",
    "checkpoint_every": "write a checkpoint every k epochs (0 = only at the end)",
    "min_abs_r": "matched |Pearson r| needed for latent matching",
    "min_gap": "spectrum gap ratio needed for dimension discovery",
    "max_quad_mass": "largest allowed relative mass of the quadratic block",
    "min_dominance": "smallest allowed per-row dominance of the linear block",
}

PRESETS = {
    "exp1": {},
    "exp2": {"n_classes": 3},
    "small-data": {"n_samples": 10_000},
    "low-lr": {"lr_initial": 1e-4},
    "high-lr": {"lr_initial": 1e-2},
}

PRESET_DOCS = {
    "exp1": "five classes, 100k records (the defaults)",
    "exp2": "three classes",
    "small-data": "10k records; expected to degrade",
    "low-lr": "initial lr 1e-4; prone to bad local optima",
    "high-lr": "initial lr 1e-2; the scale of the informative dims tends to collapse",
}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data: GroundTruthSpec = field(default_factory=GroundTruthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: analysis.Thresholds = field(default_factory=analysis.Thresholds)
    output_dir: str = "ginflow-out"
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        out = {"version": self.version, "output_dir": self.output_dir}
        out.update(asdict(self.data))
        out.update({_TRAIN_RENAMES.get(k, k): v for k, v in asdict(self.train).items()})
        out.update(asdict(self.thresholds))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict, require_version: bool = True) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(config_keys()))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        if require_version and "version" not in raw:
            raise UsageError("config is missing the 'version' field")
        merged = {**cls().to_dict(), **raw}
        if merged["version"] != CONFIG_VERSION:
            raise UsageError(f"unsupported config version {merged['version']!r}")
        defaults = cls().to_dict()
        for key, value in merged.items():
            merged[key] = _check_type(key, value, defaults[key])
        try:
            data = GroundTruthSpec(**{f.name: merged[f.name] for f in fields(GroundTruthSpec)})
            tr = TrainConfig(**{f.name: merged[_TRAIN_RENAMES.get(f.name, f.name)]
                                for f in fields(TrainConfig)})
            th = analysis.Thresholds(**{f.name: merged[f.name]
                                        for f in fields(analysis.Thresholds)})
            tr.validate(data.n_classes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if tr.zero_sum not in ("negsum", "mean"):
            raise UsageError("zero_sum must be 'negsum' or 'mean'")
        return cls(data, tr, th, merged["output_dir"], merged["version"])

    def override(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def config_keys() -> list[str]:
    return list(ExperimentConfig().to_dict())


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")
    return value


def parse_assignment(text: str, defaults: dict) -> tuple[str, object]:
    """``key=value`` with the value parsed according to the key's default type."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {text!r}")
    if key not in defaults:
        raise UsageError(f"unknown config key {key!r}")
    default = defaults[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            value = low in ("true", "1")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return key, value


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = ExperimentConfig.from_dict(raw)
    else:
        cfg = ExperimentConfig()
    changes = {}
    for name in args.preset or []:
        changes.update(PRESETS[name])
    if args.classes is not None:
        changes["n_classes"] = args.classes
    if args.samples is not None:
        changes["n_samples"] = args.samples
    defaults = cfg.to_dict()
    for item in args.set or []:
        key, value = parse_assignment(item, defaults)
        changes[key] = value
    out = os.environ.get(OUTPUT_ENV)
    if args.output_dir:
        out = args.output_dir
    if out:
        changes["output_dir"] = out
    return cfg.override(**changes) if changes else cfg


# ---------------------------------------------------------------------------
# commands


def _out(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(cfg: ExperimentConfig, path: Path | None = None) -> Path:
    ds, mixer = datagen.generate(cfg.data)
    path = datagen.save(ds, path or _out(cfg) / DATA_FILE)
    prov = ds.provenance
    print(f"wrote {path}: {len(ds)} records, dim {ds.dim}, {ds.n_classes} classes, "
          f"mixer seed {prov['mixer_seed_used']} (rejected {prov['rejected_mixer_seeds']})")
    return path


def _load_data(path: Path) -> datagen.LabeledDataset:
    if not path.exists():
        raise UsageError(f"dataset {path} not found; run gen-data first")
    return datagen.load(path)


def cmd_train(cfg: ExperimentConfig, data_path: Path | None = None, resume: Path | None = None,
              max_epochs: int | None = None) -> train.TrainResult:
    out = _out(cfg)
    ds = _load_data(data_path or out / DATA_FILE)
    config = cfg.train
    if resume is not None:
        result, saved = train.load_checkpoint(resume)
        if saved != config:
            raise UsageError("checkpoint was trained with a different training config")
        model, state, mixture = result.model, result.state, result.mixture
    else:
        model, state, mixture = train.make_model(ds.dim, config), None, None
    if model.dim != ds.dim:
        raise UsageError(f"model dim {model.dim} != dataset dim {ds.dim}")
    ckpt = out / CHECKPOINT_FILE

    def on_epoch(res):
        losses = res.state.epoch_losses[res.state.phase - 1]
        loss = losses[-1] if losses else float("nan")
        print(f"epoch {res.state.epoch:4d} phase {res.state.phase} loss {loss:.5f}", flush=True)
        if config.checkpoint_every and res.state.epoch % config.checkpoint_every == 0:
            train.save_checkpoint(ckpt, res, config)

    result = train.run_schedule(model, ds, config, state=state, mixture=mixture,
                                max_epochs=max_epochs, on_epoch=on_epoch)
    train.save_checkpoint(ckpt, result, config)
    (out / HISTORY_FILE).write_text(train.history_to_csv(result.state.history))
    events = ", ".join(f"{e}@{s}" for s, e in result.state.events()) or "none"
    print(f"wrote {ckpt} after {result.state.epoch} epochs; events: {events}")
    return result


def _load_model(path: Path):
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return train.load_checkpoint(path)[0].model
    except KeyError:
        # a bare model file without training state
        return FlowModel.load(path)[0]


def training_summary(result: train.TrainResult) -> dict:
    st = result.state
    return {
        "epochs": st.epoch,
        "steps": st.step,
        "partial": st.partial,
        "events": [[s, e] for s, e in st.events()],
        "final_epoch_loss": st.epoch_losses[st.phase - 1][-1] if st.epoch_losses[st.phase - 1]
        else None,
    }


def cmd_analyze(cfg: ExperimentConfig, ckpt_path: Path | None = None,
                data_path: Path | None = None, extra: dict | None = None):
    out = _out(cfg)
    model = _load_model(ckpt_path or out / CHECKPOINT_FILE)
    ds = _load_data(data_path or out / DATA_FILE)
    if model.dim != ds.dim:
        raise UsageError(f"checkpoint dim {model.dim} does not match dataset dim {ds.dim}")
    result, w = analysis.analyze(model, ds, cfg.thresholds)
    paths = analysis.emit_report(result, w, ds.u, out, extra)
    spec = result.spectrum
    print("spectrum:", " ".join(f"{s:.4g}" for s in spec.stds))
    print(f"informative count {spec.informative_count}, gap ratio {spec.gap_ratio}")
    if result.recovery is not None:
        print("matched |r|:", " ".join(f"{p['abs_r']:.4f}" for p in result.recovery.pairs))
    if result.lmatrix is not None:
        lm = result.lmatrix
        print(f"L-matrix: {lm.n_classes} classes, {lm.required_conditions} needed, rank {lm.rank}"
              f" of {lm.n_dims * lm.n_stats}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return result


def cmd_selftest(seeds: int = 3, inject: str | None = None) -> bool:
    if inject is not None:
        with dc.corrupted_rule(inject):
            results = checks.run_selftest(seeds)
    else:
        results = checks.run_selftest(seeds)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.value:.3g} (limit {r.limit:g}, {r.seconds:.2f}s)")
    ok = all(r.passed for r in results)
    print("selftest", "passed" if ok else "FAILED")
    return ok


def cmd_full_experiment(cfg: ExperimentConfig) -> bool:
    out = _out(cfg)
    (out / CONFIG_FILE).write_text(cfg.to_json())
    data_path = cmd_gen_data(cfg)
    result = cmd_train(cfg, data_path)
    # the output location is not part of the experiment
    settings = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    extra = {"config": settings, "training": training_summary(result)}
    report = cmd_analyze(cfg, out / CHECKPOINT_FILE, data_path, extra)
    verdict = report.verdict()
    for name, ok in verdict.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    passed = verdict["recovery_pass"]
    print("experiment", "PASS" if passed else "FAIL")
    return passed


# ---------------------------------------------------------------------------
# argument parsing


def _key_listing() -> str:
    defaults = ExperimentConfig().to_dict()
    lines = ["config keys (JSON file or --set key=value):"]
    for key in config_keys():
        lines.append(f"  {key} = {defaults[key]!r}: {KEY_DOCS[key]}")
    lines.append("presets:")
    for name, doc in PRESET_DOCS.items():
        lines.append(f"  {name}: {doc}")
    lines.append(f"output dir precedence: --output-dir, ${OUTPUT_ENV}, output_dir key")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="ginflow", description=__doc__.splitlines()[0],
                                     epilog=_key_listing(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--preset", action="append", choices=sorted(PRESETS),
                        help="apply a named preset (repeatable)")
    common.add_argument("--classes", type=int, help="shorthand for n_classes")
    common.add_argument("--samples", type=int, help="shorthand for n_samples")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--output-dir", help=f"output directory (beats ${OUTPUT_ENV})")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=_key_listing(), formatter_class=fmt)

    add("gen-data", "generate the synthetic dataset")
    p = add("train", "train a GIN on a dataset")
    p.add_argument("--data", type=Path, help="dataset file (default: <out>/data.bin)")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs in this call")
    p = add("analyze", "analyse a trained model")
    p.add_argument("--checkpoint", type=Path, help="default: <out>/model.ckpt")
    p.add_argument("--data", type=Path, help="default: <out>/data.bin")
    add("full-experiment", "generate, train and analyse; PASS/FAIL against thresholds")

    p = sub.add_parser("selftest", help="run the invariant checks (< 60 s)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--inject-fault", choices=sorted(dc.BACKWARD_RULES), metavar="OP",
                   help="corrupt the gradient rule of OP; the selftest must then fail")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "selftest":
            return EXIT_OK if cmd_selftest(args.seeds, args.inject_fault) else EXIT_FAIL
        cfg = resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            if args.max_epochs is not None and args.max_epochs < 1:
                raise UsageError("--max-epochs must be positive")
            cmd_train(cfg, args.data, args.resume, args.max_epochs)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.checkpoint, args.data)
        elif args.command == "full-experiment":
            return EXIT_OK if cmd_full_experiment(cfg) else EXIT_FAIL
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CorruptFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
