"""Experiment configuration: defaults, INI round-trip, schema validation, hashing.

The on-disk format is a sectioned key-value text file (configparser syntax).
Every field has a default; a config parses, validates against the committed
schema, and serializes back canonically so its sha256 hash is stable.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import jsonschema

from .corpus import TARGET_LABEL, VOCAB


@dataclass
class CorpusSection:
    seed: int = 2024
    per_class: int = 100


@dataclass
class ModelSection:
    channels: tuple[int, int] = (16, 32)
    hidden: int = 64
    kernel: int = 5
    n_mels: int = 40
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    label_smoothing: float = 0.1
    seed: int = 7


@dataclass
class BnnSection:
    prior_sigma: float = 1.0
    sigma_init: float = 0.05
    epochs: int = 8
    batch_size: int = 32
    lr: float = 5e-4
    kl_weight: float = 0.0  # 0 -> 1 / N_train
    seed: int = 7


@dataclass
class EvolutionarySection:
    delta_max: float = 0.02
    budget: int = 10000
    population: int = 20
    mutation_rate: float = 0.05
    mutation_scale: float = 0.2
    similarity_min: float = 0.95
    similarity_penalty: float = 10.0


@dataclass
class ZerothOrderSection:
    delta_max: float = 0.02
    budget: int = 10000
    beta: float = 1e-3
    latent_dim: int = 512
    estimator_draws: int = 8
    step_size: float = 0.05
    b_scale: float = 1.0


@dataclass
class GaussianSection:
    snr_db: float = 10.0


@dataclass
class DetectorSection:
    statistic: str = "hidden_std"
    T: int = 32
    projections: int = 64
    translation_invariant: bool = True
    quantile_points: int = 256
    td_segments: int = 4
    ls_window: int = 3


@dataclass
class Task1Section:
    per_family: int = 100


@dataclass
class Task2Section:
    per_cell: int = 25
    target_label: str = TARGET_LABEL
    defenses: tuple[str, ...] = ("none", "ls", "ds", "td", "bnn")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/exp"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    bnn: BnnSection = field(default_factory=BnnSection)
    evolutionary: EvolutionarySection = field(default_factory=EvolutionarySection)
    zeroth_order: ZerothOrderSection = field(default_factory=ZerothOrderSection)
    gaussian: GaussianSection = field(default_factory=GaussianSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    task1: Task1Section = field(default_factory=Task1Section)
    task2: Task2Section = field(default_factory=Task2Section)

    def __post_init__(self):
        if self.task2.target_label not in VOCAB:
            raise ValueError(f"unknown target label {self.task2.target_label!r}")


_SECTIONS = {
    "corpus": CorpusSection,
    "model": ModelSection,
    "bnn": BnnSection,
    "attack.evolutionary": EvolutionarySection,
    "attack.zeroth_order": ZerothOrderSection,
    "attack.gaussian": GaussianSection,
    "detector": DetectorSection,
    "task1": Task1Section,
    "task2": Task2Section,
}
_ATTR_FOR_SECTION = {
    "corpus": "corpus",
    "model": "model",
    "bnn": "bnn",
    "attack.evolutionary": "evolutionary",
    "attack.zeroth_order": "zeroth_order",
    "attack.gaussian": "gaussian",
    "detector": "detector",
    "task1": "task1",
    "task2": "task2",
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, kind):
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"invalid boolean {text!r}")
    if kind is str:
        return text
    raise ValueError(f"unsupported config type {kind}")


def _field_kind(f):
    # tuples are serialized as comma lists; element type from the default
    if isinstance(f.default, tuple) or (f.default_factory is not None
                                        and isinstance(f.default_factory, type(tuple))):
        return tuple
    return type(f.default)


def to_ini(config: ExperimentConfig) -> str:
    """Canonical text form: fixed section and key order, typed formatting."""
    out = io.StringIO()
    out.write("[experiment]\n")
    out.write(f"seed = {config.seed}\n")
    out.write(f"output_dir = {config.output_dir}\n\n")
    for section, cls in _SECTIONS.items():
        obj = getattr(config, _ATTR_FOR_SECTION[section])
        out.write(f"[{section}]\n")
        for f in fields(cls):
            out.write(f"{f.name} = {_format_value(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def from_ini(text: str) -> ExperimentConfig:
    """Parse a sectioned key-value config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    config = ExperimentConfig()
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key == "seed":
                    config.seed = int(raw)
                elif key == "output_dir":
                    config.output_dir = raw
                else:
                    raise ValueError(f"unknown key {key!r} in [experiment]")
            continue
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        obj = getattr(config, _ATTR_FOR_SECTION[section])
        known = {f.name: f for f in fields(cls)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                element = type(default[0]) if default else str
                value = tuple(_parse_value(part.strip(), element)
                              for part in raw.split(",") if part.strip())
            elif isinstance(default, bool):
                value = _parse_value(raw, bool)
            else:
                value = _parse_value(raw, type(default))
            setattr(obj, key, value)
    validate_config(config)
    return config


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_ini(fh.read())


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_ini(config))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(to_ini(config).encode()).hexdigest()[:16]


def config_dict(config: ExperimentConfig) -> dict:
    """Nested plain-dict view used for schema validation."""
    raw = asdict(config)
    raw["task2"]["defenses"] = list(raw["task2"]["defenses"])
    raw["model"]["channels"] = list(raw["model"]["channels"])
    return raw


def load_schema(name: str) -> dict:
    with resources.files("advaudio.schema").joinpath(name).open() as fh:
        return json.load(fh)


def validate_config(config: ExperimentConfig) -> None:
    """Check the config against the committed schema; raises on violation."""
    jsonschema.validate(config_dict(config), load_schema("config.schema.json"))


def validate_report(report: dict) -> None:
    jsonschema.validate(report, load_schema("report.schema.json"))
