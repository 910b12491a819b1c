"""Per-group Gaussian priors over the first latent level and closed-form KL terms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, UnsupportedPathwayError, UsageError

STRATEGIES = ("identical", "one_hot", "symmetrical", "random", "wave", "learnable")


@dataclass(frozen=True)
class LatentDistribution:
    """Diagonal Gaussian given by its mean and log-variance (rows = samples)."""

    mean: np.ndarray
    log_var: np.ndarray

    @property
    def var(self):
        return np.exp(self.log_var)


@dataclass(frozen=True, eq=False)
class PriorSpec:
    strategy: str
    k: int
    dim: int
    means: Optional[np.ndarray]
    seed: Optional[int] = None

    @property
    def sampleable(self):
        return self.means is not None

    def mean_for(self, group):
        if not 0 <= group < self.k:
            raise UsageError(f"group {group} out of range for k={self.k}")
        if self.means is None:
            return None
        return self.means[group]


def make_prior_means(strategy, k, dim, seed=None) -> PriorSpec:
    """Build the k x dim prior-mean matrix for one of the six strategies.

    Groups are 0-indexed here. ``one_hot`` puts group g's 1 at index g + 1 and
    ``symmetrical`` alternates +1, -1, +2, -2, ... starting with group 0, which
    reproduces the two-group example column ([0,1,0,0],[0,0,1,0] and
    [1,1,1,1],[-1,-1,-1,-1]).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown prior strategy {strategy!r}; expected one of {STRATEGIES}")
    if k <= 0 or dim <= 0:
        raise ConfigError("k and dim must be positive")
    if strategy == "learnable":
        return PriorSpec(strategy, k, dim, None, seed)

    means = np.zeros((k, dim))
    if strategy == "one_hot":
        if dim <= k:
            raise ConfigError(f"one_hot needs dim > k (got dim={dim}, k={k})")
        for g in range(k):
            means[g, g + 1] = 1.0
    elif strategy == "symmetrical":
        for g in range(k):
            magnitude = math.ceil((g + 1) / 2)
            means[g, :] = magnitude if g % 2 == 0 else -magnitude
    elif strategy == "wave":
        if dim < k:
            raise ConfigError(f"wave needs dim >= k (got dim={dim}, k={k})")
        width = dim // k
        for g in range(k):
            means[g, g * width:(g + 1) * width] = 1.0
    elif strategy == "random":
        if seed is None:
            raise ConfigError("random prior strategy requires a seed")
        means = np.random.default_rng(seed).standard_normal((k, dim))
    means.setflags(write=False)
    return PriorSpec(strategy, k, dim, means, seed)


def kl_diag_gaussians(mu_q, log_var_q, mu_p, log_var_p):
    """KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p)) summed over the last axis."""
    mu_q, log_var_q = np.asarray(mu_q), np.asarray(log_var_q)
    mu_p, log_var_p = np.asarray(mu_p), np.asarray(log_var_p)
    if mu_q.shape[-1] != np.shape(mu_p)[-1]:
        raise UsageError(f"dimension mismatch: {mu_q.shape[-1]} vs {np.shape(mu_p)[-1]}")
    diff = mu_q - mu_p
    terms = log_var_p - log_var_q + (np.exp(log_var_q) + diff * diff) * np.exp(-log_var_p) - 1.0
    return 0.5 * terms.sum(axis=-1)


def kl_diag_gaussians_grads(mu_q, log_var_q, mu_p, log_var_p):
    """Partial derivatives of ``kl_diag_gaussians`` w.r.t. all four arguments."""
    inv_var_p = np.exp(-log_var_p)
    var_q = np.exp(log_var_q)
    diff = mu_q - mu_p
    d_mu_q = diff * inv_var_p
    d_lv_q = 0.5 * (var_q * inv_var_p - 1.0)
    d_mu_p = -d_mu_q
    d_lv_p = 0.5 * (1.0 - (var_q + diff * diff) * inv_var_p)
    return d_mu_q, d_lv_q, d_mu_p, d_lv_p


def kl_to_prior(q: LatentDistribution, prior_mean):
    """KL between q and N(prior_mean, I), including the constant so it is >= 0."""
    mean = np.asarray(q.mean)
    log_var = np.asarray(q.log_var)
    prior_mean = np.asarray(prior_mean)
    if mean.shape != log_var.shape or mean.shape[-1] != prior_mean.shape[-1]:
        raise UsageError(
            f"dimension mismatch: mean {mean.shape}, log_var {log_var.shape}, prior {prior_mean.shape}"
        )
    diff = mean - prior_mean
    return 0.5 * (np.exp(log_var) + diff * diff - 1.0 - log_var).sum(axis=-1)


def sample_prior(spec: PriorSpec, group, n, rng, dtype=np.float64):
    """Draw ``n`` i.i.d. samples from N(mean_group, I)."""
    if not 0 <= group < spec.k:
        raise UsageError(f"group {group} out of range for k={spec.k}")
    if not spec.sampleable:
        raise UnsupportedPathwayError(
            "learnable priors cannot be sampled directly; generate through the z2 pathway (from_z2)"
        )
    eps = rng.standard_normal((n, spec.dim))
    return (spec.means[group] + eps).astype(dtype)
