"""Federated FissionVAE: decoupled priors, per-group decoder branches and
hierarchical latents, trained with group-aware FedAvg."""

from .config import RunConfig
from .federation import FederationConfig, fedavg, group_aware_aggregate
from .models import FissionVAE, LossBreakdown, ModelConfig
from .priors import PriorSpec, kl_to_prior, make_prior_means

__all__ = [
    "FederationConfig",
    "FissionVAE",
    "LossBreakdown",
    "ModelConfig",
    "PriorSpec",
    "RunConfig",
    "fedavg",
    "group_aware_aggregate",
    "kl_to_prior",
    "make_prior_means",
]
__version__ = "0.1.0"
