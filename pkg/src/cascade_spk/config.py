"""Pipeline configuration: one JSON document with a section per stage.

Leaves can be overridden with dotted paths (``dino.epochs=3``); values are
parsed as JSON literals and fall back to plain strings.
"""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .corpus import SyntheticCorpusSpec
from .dino import DinoConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .filtering import FilterConfig
from .finetune import FinetuneConfig
from .scoring import ScoringConfig


@dataclass
class PathsConfig:
    workdir: str = "work"


@dataclass
class PipelineConfig:
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    # when set, replaces the seed of every section
    seed: typing.Optional[int] = None

    def __post_init__(self):
        if self.encoder.feature_dim != self.corpus.feature_dim:
            raise ConfigError("encoder.feature_dim must equal corpus.feature_dim")
        if self.seed is not None:
            for section in SEEDED_SECTIONS:
                getattr(self, section).seed = self.seed
        if not 0 < self.scoring.eval_speakers < self.corpus.num_speakers - 1:
            raise ConfigError("scoring.eval_speakers must leave at least two training speakers")


SEEDED_SECTIONS = ("corpus", "dino", "filter", "finetune", "scoring")


def _coerce(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return build(hint, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        (inner, *_) = typing.get_args(hint) or (typing.Any,)
        items = [_coerce(v, inner, f"{path}[{n}]") for n, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{path}: expected an integer")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def build(cls, data, path=""):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "config"
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def parse_override(text):
    """``"a.b=1"`` -> ``(["a", "b"], 1)``."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data, overrides):
    data = json.loads(json.dumps(data))
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides=(), seed=None, workdir=None):
    """Read, override and validate a pipeline config."""
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if workdir is not None:
        data.setdefault("paths", {})["workdir"] = str(workdir)
    return build(PipelineConfig, data)


def config_hash(cfg):
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
