"""Run configuration: a YAML file mapped onto nested dataclasses.

Schema (all keys optional; defaults shown)::

    variant: fission_ld          # fedvae | fission_l | fission_d | fission_ld | fission_hld
    seed: 0                      # overridden by $FVAE_SEED
    prior: null                  # identical | one_hot | symmetrical | random | wave | learnable
    prior_seed: null             # required for prior: random (defaults to seed)
    recon: bernoulli             # bernoulli | gaussian_fixed_var
    gaussian_var: 0.1
    lr: 0.001
    optimizer: adam              # adam | sgd
    consistency_grad: both       # both | encoder_only | decoder_only
    architecture:
      z1_dim: 16
      z2_dim: 8
      enc_hidden: [256, 128]
      enc2_hidden: [32]
      hidden_activation: relu
      extra_decoder_layers: {}   # group -> extra hidden layers on that branch
    federation:
      k: 2
      clients_per_group: 10
      participation_p: 0.5
      rounds: 70
      local_epochs: 5
      batch_size: 32
    data:
      source: synthetic          # synthetic | mnist
      n_per_group: 1024
      eval_n_per_group: 256
      side: 8
      mnist_dir: null
      fashion_dir: null
    save_every: 0                # 0 = only the final checkpoint
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .errors import ConfigError
from .federation import FederationConfig
from .models import CONSISTENCY_GRAD, VARIANTS, ModelConfig, default_prior
from .priors import STRATEGIES


@dataclass
class Architecture:
    z1_dim: int = 16
    z2_dim: int = 8
    enc_hidden: List[int] = field(default_factory=lambda: [256, 128])
    enc2_hidden: List[int] = field(default_factory=lambda: [32])
    hidden_activation: str = "relu"
    extra_decoder_layers: Dict[str, int] = field(default_factory=dict)


@dataclass
class FederationSection:
    k: int = 2
    clients_per_group: int = 10
    participation_p: float = 0.5
    rounds: int = 70
    local_epochs: int = 5
    batch_size: int = 32


@dataclass
class DataSection:
    source: str = "synthetic"
    n_per_group: int = 1024
    eval_n_per_group: int = 256
    side: int = 8
    mnist_dir: Optional[str] = None
    fashion_dir: Optional[str] = None


@dataclass
class RunConfig:
    variant: str = "fission_ld"
    seed: int = 0
    prior: Optional[str] = None
    prior_seed: Optional[int] = None
    recon: str = "bernoulli"
    gaussian_var: float = 0.1
    lr: float = 1e-3
    optimizer: str = "adam"
    consistency_grad: str = "both"
    architecture: Architecture = field(default_factory=Architecture)
    federation: FederationSection = field(default_factory=FederationSection)
    data: DataSection = field(default_factory=DataSection)
    save_every: int = 0

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        return _build(cls, raw or {}, "config").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw or {})

    def with_env(self) -> "RunConfig":
        seed = os.environ.get("FVAE_SEED")
        if seed is None:
            return self
        try:
            return dataclasses.replace(self, seed=int(seed))
        except ValueError as exc:
            raise ConfigError(f"FVAE_SEED must be an integer, got {seed!r}") from exc

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict(_merge(self.to_dict(), changes))

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    # -- validation and derived configs -------------------------------------

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.prior is not None and self.prior not in STRATEGIES:
            raise ConfigError(f"unknown prior {self.prior!r}; expected one of {STRATEGIES}")
        if self.consistency_grad not in CONSISTENCY_GRAD:
            raise ConfigError(f"consistency_grad must be one of {CONSISTENCY_GRAD}")
        if self.save_every < 0:
            raise ConfigError("save_every must be >= 0")
        d = self.data
        if d.source not in ("synthetic", "mnist"):
            raise ConfigError(f"data.source must be synthetic or mnist, got {d.source!r}")
        if d.source == "synthetic" and self.federation.k != 2:
            raise ConfigError("the synthetic dataset has exactly 2 groups; set federation.k: 2")
        if d.source == "mnist":
            if self.federation.k != 2:
                raise ConfigError("Mixed MNIST has exactly 2 groups; set federation.k: 2")
            if not d.mnist_dir or not d.fashion_dir:
                raise ConfigError("data.source mnist needs data.mnist_dir and data.fashion_dir")
        if d.n_per_group < 1 or d.eval_n_per_group < 1:
            raise ConfigError("dataset sizes must be positive")
        self.model_config(input_dim=1).validate()
        self.federation_config().validate()
        return self

    @property
    def prior_name(self):
        return self.prior or default_prior(self.variant)

    def model_config(self, input_dim) -> ModelConfig:
        a = self.architecture
        return ModelConfig(
            kind=self.variant,
            k=self.federation.k,
            input_dim=input_dim,
            z1_dim=a.z1_dim,
            z2_dim=a.z2_dim,
            enc_hidden=tuple(a.enc_hidden),
            enc2_hidden=tuple(a.enc2_hidden),
            hidden_activation=a.hidden_activation,
            prior=self.prior_name,
            prior_seed=self.prior_seed if self.prior_seed is not None else self.seed,
            recon=self.recon,
            gaussian_var=self.gaussian_var,
            extra_decoder_layers={int(g): int(n) for g, n in a.extra_decoder_layers.items()},
            consistency_grad=self.consistency_grad,
        )

    def federation_config(self) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            k=f.k,
            clients_per_group=f.clients_per_group,
            participation_p=f.participation_p,
            rounds=f.rounds,
            local_epochs=f.local_epochs,
            batch_size=f.batch_size,
            seed=self.seed,
            lr=self.lr,
            optimizer=self.optimizer,
        )


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        sub = {"architecture": Architecture, "federation": FederationSection, "data": DataSection}.get(name)
        if sub is not None and cls is RunConfig:
            kwargs[name] = _build(sub, value or {}, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, f, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(value, f, where):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{where} may not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return [int(v) for v in value]
        if isinstance(default, dict):
            return {str(k): int(v) for k, v in dict(value).items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value {value!r}") from exc
    if f.type in ("Optional[int]",):
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: expected an integer") from exc
    if not isinstance(value, (str, int, float)):
        raise ConfigError(f"{where}: bad value {value!r}")
    return value


def _merge(base, changes):
    out = dict(base)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out
