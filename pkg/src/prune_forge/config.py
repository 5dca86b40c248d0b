"""Experiment configuration files.

Configs are INI-style key/value files read with :mod:`configparser`::

    # comments start with '#' or ';'
    [run]
    seed = 0              # base seed; [sweep] seeds override it per run
    steps = 2000
    batch_size = 64
    eval_interval = 50
    out = runs/example

    [model]
    kind = mlp            # mlp | lstm
    dtype = float32
    input_dim = 32        # mlp keys
    hidden_widths = 256 256
    width_multiplier = 1.0
    output_dim = 10
    preset = large        # lstm keys: preset (small|medium|large) or hidden
    seq_len = 32

    [data]                # teacher dataset for kind = mlp
    seed = 0
    teacher_widths = 128 128

    [optimizer]
    kind = momentum       # sgd | momentum
    momentum = 0.9
    clip_norm = none

    [lr]
    kind = exp            # constant | exp | step
    lr = 0.05
    rate = 0.5
    every = 1000

    [pruning]             # omit the section to train dense
    s_i = 0.0
    s_f = 0.875
    t0 = 200
    n = 8
    delta_t = 100
    scheme = simultaneous # simultaneous | layerwise_constant | global

    [sweep]               # only read by `compare`
    seeds = 0 1 2
    dense = 1.0 0.5 0.25  # width multipliers (mlp) or presets (lstm)
    sparse = 0.5 0.75 0.9 # final sparsities applied to the largest model

Lists are whitespace or comma separated; ``none`` means unset.  Unknown
sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, ParameterError
from .models import LM_PRESETS, LstmLmConfig, MlpConfig, ModelSpec, TeacherConfig
from .pruning import PruningSchedule, Scheme
from .train import LrSchedule, OptimizerConfig, TrainConfig

@dataclass
class SweepSpec:
    seeds: tuple = (0,)
    dense: tuple = ()
    sparse: tuple = ()


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepSpec | None = None
    out: str = "runs"

    @property
    def run_id(self):
        return run_id(self)


def _split_list(text):
    return [x for x in text.replace(",", " ").split() if x]


def _convert(value, annotation, default):
    text = value.strip()
    if text.lower() in ("none", "null", ""):
        return None
    kind = type(default) if default is not None else None
    if annotation in ("float | None", float) or kind is float:
        return float(text)
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(text)
    if kind is tuple:
        return tuple(_split_list(text))
    return text


def _build(cls, section, skip=()):
    defaults = cls()
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        f = known[key]
        try:
            kwargs[key] = _convert(value, f.type, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ParameterError) as exc:
        raise ConfigError(str(exc)) from exc


def _model_spec(sec, data_sec):
    sec = dict(sec)
    kind = sec.pop("kind", "mlp")
    dtype = sec.pop("dtype", "float32")
    if dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")
    spec = ModelSpec(kind=kind, dtype=dtype)
    if kind == "mlp":
        mlp = _build(MlpConfig, sec)
        spec.mlp = replace(mlp, hidden_widths=tuple(int(w) for w in mlp.hidden_widths))
        teacher = _build(TeacherConfig, data_sec)
        teacher = replace(teacher, teacher_widths=tuple(int(w) for w in teacher.teacher_widths))
        if teacher.input_dim != spec.mlp.input_dim or teacher.n_classes != spec.mlp.output_dim:
            teacher = replace(teacher, input_dim=spec.mlp.input_dim, n_classes=spec.mlp.output_dim)
        spec.teacher = teacher
    elif kind == "lstm":
        preset = sec.pop("preset", None)
        lm = _build(LstmLmConfig, sec)
        if preset is not None:
            if preset not in LM_PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            lm = replace(lm, hidden=LM_PRESETS[preset])
        spec.lm = lm
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return spec


SECTIONS = {"run", "model", "data", "optimizer", "lr", "pruning", "sweep"}


def parse_config(text, source="<config>"):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(cp.sections()) - SECTIONS
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")

    def sec(name):
        return dict(cp[name]) if cp.has_section(name) else {}

    run = sec("run")
    out = run.pop("out", "runs")
    try:
        run_kw = {k: int(v) for k, v in run.items()}
    except ValueError as exc:
        raise ConfigError(f"{source}: [run] values must be integers") from exc
    bad = set(run_kw) - {"seed", "steps", "batch_size", "eval_interval"}
    if bad:
        raise ConfigError(f"{source}: unknown [run] key(s) {sorted(bad)}")

    pruning = None
    if cp.has_section("pruning"):
        p = sec("pruning")
        if "scheme" in p:
            try:
                Scheme(p["scheme"].strip())
            except ValueError as exc:
                raise ConfigError(f"unknown pruning scheme {p['scheme']!r}") from exc
        pruning = _build(PruningSchedule, p)

    opt = _build(OptimizerConfig, sec("optimizer"))
    if opt.clip_norm is not None:
        opt = replace(opt, clip_norm=float(opt.clip_norm))
    train = TrainConfig(
        model=_model_spec(sec("model"), sec("data")),
        optimizer=opt,
        lr=_build(LrSchedule, sec("lr")),
        pruning=pruning,
        **run_kw,
    )

    sweep = None
    if cp.has_section("sweep"):
        s = sec("sweep")
        bad = set(s) - {"seeds", "dense", "sparse"}
        if bad:
            raise ConfigError(f"{source}: unknown [sweep] key(s) {sorted(bad)}")
        try:
            sweep = SweepSpec(
                seeds=tuple(int(x) for x in _split_list(s.get("seeds", str(train.seed)))),
                dense=tuple(_split_list(s.get("dense", ""))),
                sparse=tuple(float(x) for x in _split_list(s.get("sparse", ""))),
            )
        except ValueError as exc:
            raise ConfigError(f"{source}: bad [sweep] value") from exc
    return ExperimentConfig(train=train, sweep=sweep, out=out)


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, Scheme):
        return v.value
    if v is None:
        return "none"
    return str(v)


def _section(obj, skip=()):
    return {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}


def config_to_text(cfg):
    """Canonical text form; equal configs give identical text."""
    if isinstance(cfg, ExperimentConfig):
        train, sweep, out = cfg.train, cfg.sweep, cfg.out
    else:
        train, sweep, out = cfg, None, None
    cp = configparser.ConfigParser(interpolation=None)
    run = {
        "seed": str(train.seed),
        "steps": str(train.steps),
        "batch_size": str(train.batch_size),
        "eval_interval": str(train.eval_interval),
    }
    if out is not None:
        run["out"] = out
    cp["run"] = run
    spec = train.model
    model = {"kind": spec.kind, "dtype": spec.dtype}
    if spec.kind == "mlp":
        model.update(_section(spec.mlp))
        cp["model"] = model
        cp["data"] = _section(spec.teacher, skip=("input_dim", "n_classes"))
    else:
        model.update(_section(spec.lm))
        cp["model"] = model
    cp["optimizer"] = _section(train.optimizer)
    cp["lr"] = _section(train.lr)
    if train.pruning is not None:
        cp["pruning"] = _section(train.pruning)
    if sweep is not None:
        cp["sweep"] = _section(sweep)
    lines = []
    for name in cp.sections():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in sorted(cp[name].items())]
        lines.append("")
    return "\n".join(lines)


def run_id(cfg):
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:12]


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)


__all__ = [
    "ExperimentConfig",
    "SweepSpec",
    "config_to_text",
    "load_config",
    "parse_config",
    "run_id",
    "with_seed",
]
