"""Experiment configuration.

One TOML tree covers every module (model shape, architecture routing, data
synthesis, training, sampling, diagnostics) plus the global seed and output
directory. Dotted --set overrides are parsed as TOML literals. A config's
sha256 goes into every output manifest so runs can be traced back exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .architectures import ARCH_NAMES, Model, UniXLayout, default_fork_layer
from .data import DataConfig
from .sampling import SamplerConfig
from .training import TrainConfig
from .transformer import ModelConfig


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# Separated-layer split sweep used by the layout experiments and the
# parameter-accounting matrix, for a 28-layer stack.
SPLIT_SWEEP = ((3, 3), (7, 7), (11, 11), (3, 11), (5, 9), (9, 5), (11, 3))


@dataclass(frozen=True)
class ModelShape:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 512
    rope_base: float = 10000.0
    tied_head: bool = False


@dataclass(frozen=True)
class TrainSection:
    lr: float = 5e-5
    warmup_ratio: float = 0.03
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_tokens: int = 2048
    steps: int = 500
    checkpoint_every: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            warmup_ratio=self.warmup_ratio,
            betas=tuple(self.betas),
            eps=self.eps,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            batch_tokens=self.batch_tokens,
        )


@dataclass(frozen=True)
class DiagSection:
    r_pairs: int = 4
    n_max: int = 4
    batch_tokens: int = 2048
    selectors: str = "all"


@dataclass(frozen=True)
class UniXSection:
    n_shallow: int = 1
    m_deep: int = 1


@dataclass(frozen=True)
class UniForkSection:
    fork_layer: int = -1  # -1: fork the deep third


_SECTIONS = {
    "model": ModelShape,
    "data": DataConfig,
    "training": TrainSection,
    "sampler": SamplerConfig,
    "diagnostics": DiagSection,
    "unix": UniXSection,
    "unifork": UniForkSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/exp"
    arch: str = "shared"
    model: ModelShape = field(default_factory=ModelShape)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    diagnostics: DiagSection = field(default_factory=DiagSection)
    unix: UniXSection = field(default_factory=UniXSection)
    unifork: UniForkSection = field(default_factory=UniForkSection)

    def __post_init__(self):
        if self.arch not in ARCH_NAMES:
            raise ConfigError(f"arch must be one of {ARCH_NAMES}, got {self.arch!r}")

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            n_layers=m.n_layers,
            d_model=m.d_model,
            n_heads=m.n_heads,
            d_ff=m.d_ff,
            v_text=self.data.v_text,
            v_vis=self.data.codebook_k,
            max_seq=m.max_seq,
            rope_base=m.rope_base,
            tied_head=m.tied_head,
        )

    def layout(self) -> UniXLayout:
        return UniXLayout(self.unix.n_shallow, self.unix.m_deep,
                          self.model.n_layers)

    def fork_layer(self) -> int:
        if self.unifork.fork_layer < 0:
            return default_fork_layer(self.model.n_layers)
        return self.unifork.fork_layer

    def build_model(self, seed: int = None) -> Model:
        return Model(
            self.model_config(),
            self.arch,
            layout=self.layout() if self.arch == "unix" else None,
            fork_layer=self.fork_layer() if self.arch == "unifork" else None,
            seed=self.seed if seed is None else seed,
        )

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out": self.out, "arch": self.arch}
        for name, cls in _SECTIONS.items():
            section = getattr(self, name)
            out[name] = {
                f.name: _plain(getattr(section, f.name)) for f in fields(cls)
            }
        return out

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def config_from_dict(tree: dict) -> ExperimentConfig:
    tree = dict(tree)
    kwargs = {}
    for key in ("seed", "out", "arch"):
        if key in tree:
            kwargs[key] = tree.pop(key)
    for name, cls in _SECTIONS.items():
        if name in tree:
            section = tree.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            valid = {f.name for f in fields(cls)}
            unknown = set(section) - valid
            if unknown:
                raise ConfigError(
                    f"unknown keys in [{name}]: {sorted(unknown)}"
                )
            if name == "training" and "betas" in section:
                section = dict(section, betas=tuple(section["betas"]))
            try:
                kwargs[name] = cls(**section)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad [{name}] section: {e}") from e
    if tree:
        raise ConfigError(f"unknown config keys: {sorted(tree)}")
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def parse_override(text: str) -> tuple:
    """Parse a ``section.key=value`` override; the value is a TOML literal."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    path, raw = text.split("=", 1)
    path = path.strip()
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path.split("."), value


def apply_override(tree: dict, path: list, value):
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {'.'.join(path)} crosses a scalar")
    node[path[-1]] = value


def load_config(path=None, overrides=(), seed=None, out=None, arch=None
                ) -> ExperimentConfig:
    tree = {}
    if path is not None:
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            tree = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"malformed TOML in {path}: {e}") from e
    for text in overrides:
        key_path, value = parse_override(text)
        apply_override(tree, key_path, value)
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = out
    if arch is not None:
        tree["arch"] = arch
    return config_from_dict(tree)
