"""Run manifests: an INI file mapping onto PhaseConfig, SessionPlan and the data source.

Sections and keys::

    [run]      seed batch_size jitter_std momentum warmup_fraction
    [model]    encoder_dims head_hidden output_dim
    [targets]  count lr epochs method
    [loss]     alpha tau tau_o lambda perturb_distribution perturb_scope
               ce_scope use_pscl use_ce use_orth
    [phase1]   epochs lr lars_trust skip
    [phase2]   epochs lr finetune_encoder
    [phase3]   epochs lr finetune_encoder exemplars_per_class assignment_strategy
    [plan]     base_classes sessions ways shots
    [data]     source path num_classes dim cluster_std
               samples_per_class_train samples_per_class_val separation seed

Unknown sections or keys are errors. ``data.seed`` defaults to ``run.seed``.
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import os
from dataclasses import dataclass, field

from .data import SyntheticSpec, generate_synthetic, load_feature_file
from .errors import ConfigurationError, InvalidArgumentError
from .protocol import PhaseConfig, SessionPlan

# (section, key) -> (owner, attribute)
_PHASE_KEYS = {
    ("run", "seed"): "seed",
    ("run", "batch_size"): "batch_size",
    ("run", "jitter_std"): "jitter_std",
    ("run", "momentum"): "momentum",
    ("run", "warmup_fraction"): "warmup_fraction",
    ("model", "encoder_dims"): "encoder_dims",
    ("model", "head_hidden"): "head_hidden",
    ("model", "output_dim"): "output_dim",
    ("targets", "count"): "target_count",
    ("targets", "lr"): "target_lr",
    ("targets", "epochs"): "target_epochs",
    ("targets", "method"): "target_method",
    ("loss", "alpha"): "alpha",
    ("loss", "tau"): "tau",
    ("loss", "tau_o"): "tau_o",
    ("loss", "lambda"): "lam",
    ("loss", "perturb_distribution"): "perturb_distribution",
    ("loss", "perturb_scope"): "perturb_scope",
    ("loss", "ce_scope"): "ce_scope",
    ("loss", "use_pscl"): "use_pscl",
    ("loss", "use_ce"): "use_ce",
    ("loss", "use_orth"): "use_orth",
    ("phase1", "epochs"): "epochs_phase1",
    ("phase1", "lr"): "lr_phase1",
    ("phase1", "lars_trust"): "lars_trust",
    ("phase1", "skip"): "skip_pretrain",
    ("phase2", "epochs"): "epochs_phase2",
    ("phase2", "lr"): "lr_phase2",
    ("phase2", "finetune_encoder"): "finetune_encoder_phase2",
    ("phase3", "epochs"): "epochs_phase3",
    ("phase3", "lr"): "lr_phase3",
    ("phase3", "finetune_encoder"): "finetune_encoder_phase3",
    ("phase3", "exemplars_per_class"): "exemplars_per_class",
    ("phase3", "assignment_strategy"): "assignment_strategy",
}
_PLAN_KEYS = ("base_classes", "sessions", "ways", "shots")
_DATA_KEYS = ("source", "path", "num_classes", "dim", "cluster_std", "samples_per_class_train",
              "samples_per_class_val", "separation", "seed")
SECTIONS = ("run", "model", "targets", "loss", "phase1", "phase2", "phase3", "plan", "data")

ABLATIONS = {
    "none": {},
    "ce-only": dict(use_pscl=False, use_ce=True, use_orth=False),
    "pscl-only": dict(use_pscl=True, use_ce=False, use_orth=False),
    "no-pscl": dict(use_pscl=False),
    "no-ce": dict(use_ce=False),
    "no-orth": dict(use_orth=False),
}


@dataclass(frozen=True)
class RunConfig:
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    plan: SessionPlan = field(default_factory=SessionPlan)
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    feature_file: str | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.feature_file is None):
            raise ConfigurationError("exactly one data source (synthetic or feature file) must be set")

    def load_dataset(self):
        if self.feature_file is not None:
            return load_feature_file(self.feature_file)
        return generate_synthetic(self.synthetic)


def _coerce(value: str, like):
    v = value.strip()
    if isinstance(like, bool):
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, enum.Enum):
        return type(like).parse(v)
    if isinstance(like, int):
        return int(v)
    if isinstance(like, float):
        return float(v)
    if isinstance(like, tuple):
        return tuple(int(p) for p in v.replace(",", " ").split())
    return v


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _items(parser: configparser.ConfigParser):
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            yield section, key, value


def parse_overrides(pairs) -> list:
    """``section.key=value`` strings -> ``(section, key, value)`` triples."""
    out = []
    for pair in pairs or ():
        name, sep, value = pair.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigurationError(f"override {pair!r} is not of the form section.key=value")
        out.append((section.strip(), key.strip(), value))
    return out


def build_run_config(text: str | None = None, overrides=(), seed: int | None = None) -> RunConfig:
    """Merge defaults, manifest ``text``, ``section.key=value`` overrides and a seed.

    Seed precedence: explicit ``seed``, then ``run.seed`` from file or
    overrides, then the ``ORCO_SEED`` environment variable, then 0.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
    entries = list(_items(parser)) + list(parse_overrides(overrides))
    defaults = PhaseConfig()
    phase_kw, plan_kw, data_kw = {}, {}, {}
    for section, key, value in entries:
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")
        try:
            if (section, key) in _PHASE_KEYS:
                attr = _PHASE_KEYS[(section, key)]
                phase_kw[attr] = _coerce(value, getattr(defaults, attr))
            elif section == "plan" and key in _PLAN_KEYS:
                plan_kw[key] = int(value)
            elif section == "data" and key in _DATA_KEYS:
                like = getattr(SyntheticSpec(), key, "")
                data_kw[key] = _coerce(value, like)
            else:
                raise ConfigurationError(f"unknown key {section}.{key}")
        except (ValueError, InvalidArgumentError) as exc:
            raise ConfigurationError(f"{section}.{key}: {exc}") from None
    if seed is not None:
        phase_kw["seed"] = int(seed)
    elif "seed" not in phase_kw and os.environ.get("ORCO_SEED", "").strip():
        try:
            phase_kw["seed"] = int(os.environ["ORCO_SEED"])
        except ValueError:
            raise ConfigurationError("ORCO_SEED must be an integer") from None
    try:
        phase = PhaseConfig(**phase_kw)
        plan = SessionPlan(**plan_kw)
        source = data_kw.pop("source", "file" if "path" in data_kw else "synthetic")
        path = data_kw.pop("path", None)
        if source == "synthetic":
            if path is not None:
                raise ConfigurationError("data.path given with data.source = synthetic")
            data_kw.setdefault("seed", phase.seed)
            return RunConfig(phase, plan, SyntheticSpec(**data_kw), None)
        if source == "file":
            if path is None:
                raise ConfigurationError("data.source = file needs data.path")
            if data_kw:
                raise ConfigurationError(f"synthetic keys given for a feature file: {sorted(data_kw)}")
            return RunConfig(phase, plan, None, str(path))
        raise ConfigurationError(f"unknown data.source {source!r}")
    except (InvalidArgumentError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from None


def load_run_config(path=None, overrides=(), seed=None) -> RunConfig:
    text = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return build_run_config(text, overrides, seed)


def dump_run_config(cfg: RunConfig) -> str:
    """The effective configuration as a manifest that parses back to ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser.add_section(section)
    for (section, key), attr in _PHASE_KEYS.items():
        parser.set(section, key, _format(getattr(cfg.phase, attr)))
    for key in _PLAN_KEYS:
        parser.set("plan", key, _format(getattr(cfg.plan, key)))
    if cfg.feature_file is not None:
        parser.set("data", "source", "file")
        parser.set("data", "path", cfg.feature_file)
    else:
        parser.set("data", "source", "synthetic")
        for f in dataclasses.fields(SyntheticSpec):
            parser.set("data", f.name, _format(getattr(cfg.synthetic, f.name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
