"""Experiment configuration: INI sections whose values are JSON literals.

Every dataclass field becomes one ``key = value`` line, so a written file
round-trips to an equal config and every CLI flag has a config counterpart.
"""

from __future__ import annotations

import configparser
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .checkpoint import config_hash
from .corpus import CorpusManifest, CorruptionSpec, PerturbSpec
from .models import AcousticModelSpec, DiscriminatorSpec, GeneratorSpec
from .training import AmTrainConfig, GanTrainConfig, GridSpec


class ConfigError(ValueError):
    pass


@dataclass
class SplitSpec:
    """How the synthetic corpus is cut into disjoint utterance sets."""

    clean_train: int = 200
    noisy_train: int = 200
    dev: int = 60
    test: int = 60
    hours: list = field(default_factory=lambda: [0.005, 0.01, 0.02, 0.04])

    def __post_init__(self):
        if min(self.clean_train, self.noisy_train, self.dev, self.test) < 1:
            raise ConfigError("every split needs at least one utterance")
        if any(h <= 0 for h in self.hours):
            raise ConfigError("partition sizes must be positive")

    @property
    def total(self) -> int:
        return self.clean_train + self.noisy_train + self.dev + self.test


@dataclass
class ExperimentConfig:
    corpus: CorpusManifest = field(default_factory=lambda: CorpusManifest(n_utterances=520))
    splits: SplitSpec = field(default_factory=SplitSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    acoustic_model: AcousticModelSpec = field(default_factory=AcousticModelSpec)
    am_training: AmTrainConfig = field(default_factory=AmTrainConfig)
    finetune: AmTrainConfig = field(default_factory=lambda: AmTrainConfig(lr=0.02, max_epochs=5))
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    mtr_sets: str = "s+v"

    def hash(self) -> str:
        return config_hash(to_dict(self))


_SECTIONS = {
    "corpus": CorpusManifest, "splits": SplitSpec, "corruption": CorruptionSpec,
    "perturb": PerturbSpec, "acoustic_model": AcousticModelSpec, "am_training": AmTrainConfig,
    "finetune": AmTrainConfig, "gan": GanTrainConfig, "generator": GeneratorSpec,
    "discriminator": DiscriminatorSpec, "grid": GridSpec,
}
_TUPLE_FIELDS = {"tokens_per_utt", "segment_frames", "gain_range", "speed_factors", "volume_factors"}


def to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def _section_items(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _encode(value) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {"output_dir": _encode(cfg.output_dir), "seeds": _encode(cfg.seeds),
                            "mtr_sets": _encode(cfg.mtr_sets)}
    for name in ("corpus", "splits", "corruption", "perturb", "acoustic_model", "am_training",
                 "finetune", "grid"):
        parser[name] = {k: _encode(v) for k, v in _section_items(getattr(cfg, name)).items()}
    gan = _section_items(cfg.gan)
    gen, disc = gan.pop("generator"), gan.pop("discriminator")
    parser["gan"] = {k: _encode(v) for k, v in gan.items()}
    parser["generator"] = {k: _encode(v) for k, v in _section_items(gen).items()}
    parser["discriminator"] = {k: _encode(v) for k, v in _section_items(disc).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _decode(section: str, key: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"[{section}] {key}: value is not valid JSON: {raw!r}") from exc
    if key in _TUPLE_FIELDS and isinstance(value, list):
        value = tuple(value)
    return value


def _build(section: str, cls, items: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(items) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**items)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = sorted(set(parser.sections()) - set(_SECTIONS) - {"experiment"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    items = {s: {k: _decode(s, k, v) for k, v in parser[s].items()} for s in parser.sections()}
    default = ExperimentConfig()
    kwargs = {}
    for name in ("corpus", "splits", "corruption", "perturb", "acoustic_model", "am_training",
                 "finetune", "grid"):
        base = _section_items(getattr(default, name))
        base.update(items.get(name, {}))
        kwargs[name] = _build(name, _SECTIONS[name], base)
    gen = _section_items(default.gan.generator)
    gen.update(items.get("generator", {}))
    disc = _section_items(default.gan.discriminator)
    disc.update(items.get("discriminator", {}))
    nested = sorted({"generator", "discriminator"} & set(items.get("gan", {})))
    if nested:
        raise ConfigError(f"[gan] {nested[0]}: set these fields in the [{nested[0]}] section")
    gan = _section_items(default.gan)
    gan.update(items.get("gan", {}))
    gan["generator"] = _build("generator", GeneratorSpec, gen)
    gan["discriminator"] = _build("discriminator", DiscriminatorSpec, disc)
    kwargs["gan"] = _build("gan", GanTrainConfig, gan)
    exp = items.get("experiment", {})
    extra = sorted(set(exp) - {"output_dir", "seeds", "mtr_sets"})
    if extra:
        raise ConfigError(f"[experiment] unknown keys: {', '.join(extra)}")
    cfg = ExperimentConfig(**kwargs, **exp)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.corpus.validate()
    except ValueError as exc:
        raise ConfigError(f"[corpus] {exc}") from exc
    if cfg.splits.total > cfg.corpus.n_utterances:
        raise ConfigError(f"splits need {cfg.splits.total} utterances but the corpus has "
                          f"{cfg.corpus.n_utterances}")
    am = cfg.acoustic_model
    if (am.feature_dim, am.n_senones) != (cfg.corpus.feature_dim, cfg.corpus.n_senones):
        raise ConfigError("acoustic model F/C must match the corpus")
    if cfg.gan.generator.feature_dim != cfg.corpus.feature_dim or \
            cfg.gan.discriminator.feature_dim != cfg.corpus.feature_dim:
        raise ConfigError("generator/discriminator feature_dim must match the corpus")
    if not cfg.seeds:
        raise ConfigError("seeds list is empty")


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def override(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``section.key=json`` overrides by re-parsing the edited text."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(dumps(cfg))
    for item in assignments:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in parser:
            raise ConfigError(f"unknown section {section!r}")
        value = value.strip()
        try:
            json.loads(value)
        except json.JSONDecodeError:
            value = json.dumps(value)       # bare strings need no quotes on the command line
        parser[section][key] = value
    buf = io.StringIO()
    parser.write(buf)
    return loads(buf.getvalue())
