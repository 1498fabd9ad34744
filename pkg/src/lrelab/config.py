"""Run configuration: one YAML file, optionally patched with ``section.key=value`` overrides."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from lrelab.exceptions import ConfigError
from lrelab.lre import DEFAULT_BETA, OperatorKind
from lrelab.model import ModelConfig
from lrelab.projection import DEFAULT_BETAS
from lrelab.synthetic import SyntheticSpec
from lrelab.trainer import TrainConfig

SECTIONS = ("model", "data", "train", "lre", "eval", "projection")
TOP_LEVEL = ("output_dir", "seed")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"       # or "bats"
    bats_path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_documents: int = 6000         # corpus size when source is "bats"
    tokenizer_path: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "bats"):
            raise ConfigError("data.source", f"expected 'synthetic' or 'bats', got {self.source!r}")
        if self.source == "bats" and not self.bats_path:
            raise ConfigError("data.bats_path", "required when data.source is 'bats'")


@dataclass(frozen=True)
class LreConfig:
    layers: tuple = (1,)
    beta: float = DEFAULT_BETA
    n_samples: int = 8
    kinds: tuple = tuple(k.value for k in OperatorKind)
    method: str = "forward"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for k in self.kinds:
            try:
                OperatorKind(k)
            except ValueError:
                raise ConfigError("lre.kinds", f"unknown operator kind {k!r}") from None
        if not self.beta > 0:
            raise ConfigError("lre.beta", "must be positive")
        if self.n_samples < 1:
            raise ConfigError("lre.n_samples", "must be at least 1")
        if self.method not in ("forward", "fd"):
            raise ConfigError("lre.method", "expected 'forward' or 'fd'")


@dataclass(frozen=True)
class EvalConfig:
    n_runs: int = 4
    layer_range: tuple = (1,)
    min_stem: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layer_range", tuple(int(l) for l in self.layer_range))
        if self.n_runs < 1:
            raise ConfigError("eval.n_runs", "must be at least 1")
        if not self.layer_range:
            raise ConfigError("eval.layer_range", "must name at least one layer")


@dataclass(frozen=True)
class ProjectionConfig:
    betas: tuple = DEFAULT_BETAS
    seeds: tuple = (0, 1, 2, 3, 4)
    layer: int | None = None        # defaults to the first lre layer

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.betas or any(not b > 0 for b in self.betas):
            raise ConfigError("projection.betas", "must be positive")
        if not self.seeds:
            raise ConfigError("projection.seeds", "need at least one seed")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    data: DataConfig
    train: TrainConfig
    lre: LreConfig
    eval: EvalConfig
    projection: ProjectionConfig
    output_dir: Path
    seed: int = 0

    def __post_init__(self):
        n_layers = self.model.n_layers
        for name, layers in (("lre.layers", self.lre.layers), ("eval.layer_range", self.eval.layer_range)):
            if any(not 0 <= l <= n_layers for l in layers):
                raise ConfigError(name, f"layers must lie in 0..{n_layers}, got {list(layers)}")


def _build(cls, section, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected a mapping")
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(raw)
        return cls(**raw)
    except ConfigError as exc:
        if exc.field.startswith(section + "."):
            raise
        raise ConfigError(f"{section}.{exc.field}", exc.message) from None
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from None


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Set ``a.b.c=value`` entries; values are parsed as YAML scalars or lists."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(key, f"{p!r} is not a section")
            node = nxt
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(raw) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config section")
    data_raw = dict(raw.get("data") or {})
    if "synthetic" in data_raw:
        data_raw["synthetic"] = _build(SyntheticSpec, "data.synthetic", data_raw["synthetic"])
    for key in ("bats_path", "tokenizer_path"):
        if data_raw.get(key) and base_dir is not None:
            data_raw[key] = str((base_dir / data_raw[key]).resolve())
    if "output_dir" not in raw:
        raise ConfigError("output_dir", "required")
    out = Path(raw["output_dir"])
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be an unsigned integer")
    return RunConfig(
        model=_build(ModelConfig, "model", raw.get("model")),
        data=_build(DataConfig, "data", data_raw),
        train=_build(TrainConfig, "train", raw.get("train")),
        lre=_build(LreConfig, "lre", raw.get("lre")),
        eval=_build(EvalConfig, "eval", raw.get("eval")),
        projection=_build(ProjectionConfig, "projection", raw.get("projection")),
        output_dir=out,
        seed=seed,
    )


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a YAML run config.

    Data paths inside it resolve against the file's directory; ``output_dir``
    resolves against the working directory.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config", f"{path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    return parse_config(apply_overrides(raw or {}, overrides), base_dir=path.parent)
