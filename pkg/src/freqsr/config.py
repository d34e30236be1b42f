"""Experiment configuration: ``key = value`` text files with typed defaults.

Precedence, lowest first: built-in defaults, the config file, environment
variables named ``FREQSR_<KEY>`` (upper case), explicit overrides (the CLI
flags). Unknown keys are an error everywhere.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .const_opt import LMConfig
from .expr import TokenLibrary
from .model import ModelConfig
from .policy import PolicyConfig
from .sampler import SampleConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config_text", "ENV_PREFIX", "CONFIG_VERSION"]

ENV_PREFIX = "FREQSR_"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    # problems and data
    problems: tuple[str, ...] = ()
    noise_levels: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    n_train: int = 100
    n_test: int = 100
    # token library
    binary: tuple[str, ...] = ("+", "-", "*", "/", "^")
    unary: tuple[str, ...] = ("sin", "cos", "log", "sqrt", "exp")
    constant: bool = True
    one: bool = True
    # sampling
    batch: int = 1000
    oversampling: float = 2.0
    max_nodes: int = 32
    # model
    embed_dim: int = 10
    dct_clip: int = 8
    encoder_layers: int = 0
    decoder_layers: int = 1
    heads: int = 1
    ff_dim: int = 2048
    # policy
    policy: str = "grpo"
    reward: str = "bic"
    likelihood: str = "gaussian"
    alpha: float = 5.0
    lam: float = 0.2
    epsilon: float = 0.2
    beta: float = 0.01
    entropy_coef: float = 0.005
    steps_per_epoch: int = 5
    epochs_per_ref: int = 5
    learning_rate: float = 1e-4
    epochs: int = 600
    spl_eta: float = 0.99
    tpsr_lambda: float = 0.1
    # constant fitting
    lm_max_iter: int = 50
    # running
    time_limit_s: float | None = None
    stop_on_solution: bool = False
    checkpoint_every: int = 0
    threads: int = 0  # 0 = logical cores

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}", "version")
        if self.encoder_layers != 0:
            raise ConfigError("only decoder-only models are supported (encoder_layers = 0)", "encoder_layers")
        for key in ("n_train", "n_test", "batch", "max_nodes", "decoder_layers", "heads", "ff_dim", "lm_max_iter"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        if self.oversampling < 1:
            raise ConfigError("oversampling must be >= 1", "oversampling")
        if any(n < 0 for n in self.noise_levels):
            raise ConfigError("noise levels must be >= 0", "noise_levels")
        # building the parts surfaces their own validation errors
        try:
            self.policy_config()
            self.sample_config()
            self.model_config(1)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def library(self, n_vars: int) -> TokenLibrary:
        try:
            return TokenLibrary.build(n_vars, self.binary, self.unary, self.constant, self.one)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.embed_dim, self.ff_dim, self.decoder_layers, self.heads,
                           self.dct_clip, self.max_nodes)

    def sample_config(self) -> SampleConfig:
        return SampleConfig(batch=self.batch, oversampling=self.oversampling, max_nodes=self.max_nodes)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            alpha=self.alpha, lam=self.lam, epsilon=self.epsilon, beta=self.beta,
            entropy_coef=self.entropy_coef, steps_per_epoch=self.steps_per_epoch,
            epochs_per_ref=self.epochs_per_ref, learning_rate=self.learning_rate, epochs=self.epochs,
            policy=self.policy, reward=self.reward, spl_eta=self.spl_eta, tpsr_lambda=self.tpsr_lambda,
            likelihood=self.likelihood, time_limit_s=self.time_limit_s,
        )

    def lm_config(self) -> LMConfig:
        return LMConfig(max_iter=self.lm_max_iter)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return _build({**dataclasses.asdict(self), **changes})


_TYPES = typing.get_type_hints(ExperimentConfig)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def _convert(key: str, raw: str):
    hint = _TYPES[key]
    text = raw.strip()
    try:
        if typing.get_origin(hint) is tuple:
            (inner, _) = typing.get_args(hint)
            return tuple(_scalar(inner, part.strip()) for part in text.split(",") if part.strip())
        if typing.get_origin(hint) in (typing.Union, types.UnionType):
            if text.lower() in ("none", ""):
                return None
            inner = next(a for a in typing.get_args(hint) if a is not type(None))
            return _scalar(inner, text)
        return _scalar(hint, text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw.strip()!r} ({exc})", key) from None


def _scalar(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected true or false")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _check_key(key: str, where: str) -> None:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r} ({where})", key)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        _check_key(key, f"{source}:{lineno}")
        out[key] = _convert(key, value)
    return out


def _build(values: Mapping) -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: Mapping[str, object] | None = None,
                environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``FREQSR_*`` variables, then ``overrides``.

    String override values are parsed like file values.
    """
    values: dict = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    environ = os.environ if environ is None else environ
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            _check_key(key, f"environment variable {name}")
            values[key] = _convert(key, raw)
    for key, value in (overrides or {}).items():
        _check_key(key, "override")
        values[key] = _convert(key, value) if isinstance(value, str) else value
    return _build(values)
