"""Run configuration: defaults, YAML loading with line-anchored errors, overrides.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
command-line flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from vismae.errors import ConfigError, MissingArtifactError
from vismae.io import atomic_write_text
from vismae.model import EncoderConfig
from vismae.training import TrainConfig

RUN_CONFIG_FORMAT_VERSION = 1
RUN_CONFIG_FILENAME = "run_config.yaml"


@dataclass(frozen=True)
class DataConfig:
    n_patients: int = 500
    signal_strength: float = 1.0
    missingness_rate: float = 0.05
    positive_rate: float = 0.22
    split_fractions: tuple[float, float, float] = (0.72, 0.08, 0.20)

    def __post_init__(self):
        if len(self.split_fractions) != 3:
            raise ConfigError("split_fractions needs three entries (train, validation, test)")
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))


@dataclass(frozen=True)
class EvaluationConfig:
    n_resamples: int = 1000

    def __post_init__(self):
        if not isinstance(self.n_resamples, int) or self.n_resamples < 100:
            raise ConfigError(f"evaluation.n_resamples must be an integer >= 100, got {self.n_resamples!r}")


@dataclass(frozen=True)
class AttributionConfig:
    n_samples: int = 200
    max_patients: int = 100

    def __post_init__(self):
        if not isinstance(self.n_samples, int) or self.n_samples < 100:
            raise ConfigError(f"attribution.n_samples must be an integer >= 100, got {self.n_samples!r}")
        if not isinstance(self.max_patients, int) or self.max_patients < 1:
            raise ConfigError(f"attribution.max_patients must be an integer >= 1, got {self.max_patients!r}")


@dataclass(frozen=True)
class PathsConfig:
    cohort: str | None = None
    out: str = "runs/default"


_SECTIONS = {
    "data": DataConfig,
    "model": EncoderConfig,
    # the root seed lives at top level, not in the training section
    "training": TrainConfig,
    "evaluation": EvaluationConfig,
    "attribution": AttributionConfig,
    "paths": PathsConfig,
}
_TOP_LEVEL = {"format_version", "seed", *_SECTIONS}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    format_version: int = RUN_CONFIG_FORMAT_VERSION

    def train_config(self) -> TrainConfig:
        """Training settings carrying the root seed."""
        return TrainConfig(**{**asdict(self.training), "seed": self.seed})

    def to_dict(self) -> dict:
        d = {"format_version": self.format_version, "seed": self.seed}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            if name == "training":
                section.pop("seed")
            if name == "data":
                section["split_fractions"] = list(section["split_fractions"])
            d[name] = section
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def write(self, directory: str | Path) -> Path:
        return atomic_write_text(Path(directory) / RUN_CONFIG_FILENAME, self.to_yaml())


def _key_lines(node: yaml.Node) -> dict[str, int]:
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value if isinstance(k, yaml.ScalarNode)}


def _child(node: yaml.Node, key: str) -> yaml.Node | None:
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            if isinstance(k, yaml.ScalarNode) and k.value == key:
                return v
    return None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse YAML text into a RunConfig; every error names the offending line."""
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: malformed YAML ({problem})") from None
    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    lines = _key_lines(node)
    for key in raw:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"{source}:{lines.get(key, 1)}: unknown key {key!r}")
    if raw.get("format_version", RUN_CONFIG_FORMAT_VERSION) != RUN_CONFIG_FORMAT_VERSION:
        raise ConfigError(f"{source}:{lines.get('format_version', 1)}: unsupported format_version")

    kwargs: dict = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError(f"{source}:{lines['seed']}: seed must be an integer")
        kwargs["seed"] = raw["seed"]
    for name, cls in _SECTIONS.items():
        if name not in raw or raw[name] is None:
            continue
        section = raw[name]
        line = lines.get(name, 1)
        if not isinstance(section, dict):
            raise ConfigError(f"{source}:{line}: section {name!r} must be a mapping")
        sub_lines = _key_lines(_child(node, name))
        allowed = {f.name for f in fields(cls)} - ({"seed"} if name == "training" else set())
        for key in section:
            if key not in allowed:
                raise ConfigError(f"{source}:{sub_lines.get(key, line)}: unknown key {name}.{key}")
        try:
            kwargs[name] = cls(**section)
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"{source}:{line}: invalid {name} section: {exc}") from None
    return RunConfig(**kwargs)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"config file not found: {p}")
    return parse_run_config(p.read_text(encoding="utf-8"), str(p))
