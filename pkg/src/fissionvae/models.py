"""FedVAE and the FissionVAE variants, with losses and manual gradients.

Variants:

    fedvae       one decoder, identical (zero-mean) prior for every group
    fission_l    one decoder, per-group prior means
    fission_d    one decoder branch per group, identical prior
    fission_ld   one decoder branch per group, per-group prior means
    fission_hld  two latent levels, branched p(z1|z2) and p(x|z1), per-group or learnable prior

Parameter names encode aggregation routing: everything under ``branch{g}.`` is
a decoder branch of group g, everything else is shared by all clients.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, UnsupportedPathwayError, UsageError
from .losses import RECON_MODES, check_pixels, recon_from_logits
from .nn import LayerStack, ParamSet, sigmoid
from .priors import (
    LatentDistribution,
    PriorSpec,
    kl_diag_gaussians,
    kl_diag_gaussians_grads,
    make_prior_means,
    sample_prior,
)

VARIANTS = ("fedvae", "fission_l", "fission_d", "fission_ld", "fission_hld")
LOSS_TERMS = ("recon", "kl_z1", "kl_z2", "consistency", "recon_from_z2")
PATHWAYS = ("from_z2", "from_z1_via_encoder", "from_z1_direct")
CONSISTENCY_GRAD = ("both", "encoder_only", "decoder_only")
LOG_VAR_BOUND = 10.0

_BRANCH_RE = re.compile(r"^branch(\d+)\.")


def branch_of(name) -> Optional[int]:
    """Group index owning parameter ``name``, or None for shared parameters."""
    m = _BRANCH_RE.match(name)
    return int(m.group(1)) if m else None


def is_branched(kind):
    return kind in ("fission_d", "fission_ld", "fission_hld")


def is_hierarchical(kind):
    return kind == "fission_hld"


def default_prior(kind):
    return "identical" if kind in ("fedvae", "fission_d") else "wave"


@dataclass
class LossBreakdown:
    recon: float = 0.0
    kl_z1: float = 0.0
    kl_z2: float = 0.0
    consistency: float = 0.0
    recon_from_z2: float = 0.0
    total: float = 0.0
    n: int = 0

    @staticmethod
    def combine(recon, kl_z1, kl_z2, consistency, recon_from_z2):
        # fixed summation order; LossBreakdown.total is defined by this expression
        return recon + kl_z1 + kl_z2 + consistency + recon_from_z2

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def mean_of(cls, parts: Sequence["LossBreakdown"]):
        """Sample-weighted mean of several breakdowns."""
        n = sum(p.n for p in parts)
        if n == 0:
            return cls()
        out = {}
        for name in ("recon", "kl_z1", "kl_z2", "consistency", "recon_from_z2", "total"):
            out[name] = sum(getattr(p, name) * p.n for p in parts) / n
        return cls(n=n, **out)


@dataclass
class VaeForwardResult:
    q_z1: LatentDistribution
    z1: np.ndarray
    x_recon: np.ndarray
    losses: LossBreakdown
    per_sample_total: np.ndarray
    q_z2: Optional[LatentDistribution] = None
    z2: Optional[np.ndarray] = None
    p_z1_given_z2: Optional[LatentDistribution] = None
    z1_reconstructed: Optional[np.ndarray] = None


def _split_head(out, dim):
    mu = out[:, :dim]
    raw_lv = out[:, dim:]
    lv = np.clip(raw_lv, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    mask = (raw_lv > -LOG_VAR_BOUND) & (raw_lv < LOG_VAR_BOUND)
    return mu, lv, mask


def reparameterize(q: LatentDistribution, rng=None, eps=None):
    """z = mean + exp(log_var / 2) * eps with eps ~ N(0, I); ``eps`` overrides the draw."""
    lv = np.clip(q.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    if eps is None:
        if rng is None:
            raise UsageError("reparameterize needs an rng or explicit eps")
        eps = rng.standard_normal(np.shape(q.mean)).astype(np.asarray(q.mean).dtype, copy=False)
    return q.mean + np.exp(0.5 * lv) * eps


@dataclass
class ModelConfig:
    kind: str = "fission_ld"
    k: int = 2
    input_dim: int = 784
    z1_dim: int = 16
    z2_dim: int = 8
    enc_hidden: Tuple[int, ...] = (256, 128)
    enc2_hidden: Tuple[int, ...] = (32,)
    hidden_activation: str = "relu"
    prior: Optional[str] = None
    prior_seed: Optional[int] = None
    recon: str = "bernoulli"
    gaussian_var: float = 0.1
    extra_decoder_layers: Dict[int, int] = field(default_factory=dict)
    consistency_grad: str = "both"

    def validate(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        if self.k < 1 or self.input_dim < 1 or self.z1_dim < 1 or self.z2_dim < 1:
            raise ConfigError("k, input_dim and latent dims must be positive")
        if any(h < 1 for h in tuple(self.enc_hidden) + tuple(self.enc2_hidden)):
            raise ConfigError("hidden widths must be positive")
        prior = self.prior or default_prior(self.kind)
        if self.kind in ("fedvae", "fission_d") and prior != "identical":
            raise ConfigError(f"{self.kind} is defined with the identical prior, got {prior!r}")
        if prior == "learnable" and not is_hierarchical(self.kind):
            raise ConfigError("the learnable prior is only available for fission_hld")
        if self.recon not in RECON_MODES:
            raise ConfigError(f"unknown reconstruction mode {self.recon!r}")
        if self.gaussian_var <= 0:
            raise ConfigError("gaussian_var must be positive")
        if self.consistency_grad not in CONSISTENCY_GRAD:
            raise ConfigError(f"consistency_grad must be one of {CONSISTENCY_GRAD}")
        for g, extra in self.extra_decoder_layers.items():
            if not 0 <= int(g) < self.k or extra < 0:
                raise ConfigError(f"bad extra_decoder_layers entry {g}: {extra}")
            if extra and not is_branched(self.kind):
                raise ConfigError("heterogeneous decoders need a branched variant")
        return self


def _deepen(hidden, extra):
    if not extra:
        return tuple(hidden)
    return tuple(hidden) + (max(hidden),) * extra


class FissionVAE:
    """Architecture and loss definitions; parameters are passed in explicitly."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        c = config
        self.kind = c.kind
        self.k = c.k
        self.prior: PriorSpec = make_prior_means(c.prior or default_prior(c.kind), c.k, c.z1_dim, c.prior_seed)
        self.branched = is_branched(c.kind)
        self.hierarchical = is_hierarchical(c.kind)
        act = c.hidden_activation

        self.encoder = LayerStack.mlp("encoder", [c.input_dim, *c.enc_hidden, 2 * c.z1_dim], hidden=act)
        n_branches = c.k if self.branched else 1
        dec_hidden = tuple(reversed(c.enc_hidden))
        self.decoders = []
        self.decoders_z1 = []
        for b in range(n_branches):
            extra = int(c.extra_decoder_layers.get(b, c.extra_decoder_layers.get(str(b), 0)))
            prefix = f"branch{b}." if self.branched else ""
            self.decoders.append(
                LayerStack.mlp(f"{prefix}decoder", [c.z1_dim, *_deepen(dec_hidden, extra), c.input_dim], hidden=act)
            )
            if self.hierarchical:
                hidden2 = _deepen(tuple(reversed(c.enc2_hidden)), extra)
                self.decoders_z1.append(
                    LayerStack.mlp(f"{prefix}decoder_z1", [c.z2_dim, *hidden2, 2 * c.z1_dim], hidden=act)
                )
        if self.hierarchical:
            self.encoder2 = LayerStack.mlp("encoder2", [c.z1_dim, *c.enc2_hidden, 2 * c.z2_dim], hidden=act)

    # -- structure ---------------------------------------------------------

    def stacks(self):
        out = [self.encoder]
        if self.hierarchical:
            out.append(self.encoder2)
        for b in range(len(self.decoders)):
            if self.hierarchical:
                out.append(self.decoders_z1[b])
            out.append(self.decoders[b])
        return out

    def param_names(self):
        names = []
        for s in self.stacks():
            names += s.param_names()
        return names

    def init_params(self, rng, dtype=np.float32) -> ParamSet:
        params = {}
        for s in self.stacks():
            params.update(s.init(rng, dtype))
        return params

    def _branch(self, group):
        if not 0 <= group < self.k:
            raise UsageError(f"group {group} out of range for k={self.k}")
        return group if self.branched else 0

    def _prior_mean(self, group, dtype):
        m = self.prior.mean_for(group)
        return None if m is None else m.astype(dtype)

    @property
    def valid_pathways(self):
        if self.hierarchical:
            return PATHWAYS if self.prior.sampleable else ("from_z2",)
        return ("from_z1_direct",)

    # -- inference ---------------------------------------------------------

    def encode(self, params, x) -> LatentDistribution:
        out, _ = self.encoder.forward(params, x)
        mu, lv, _ = _split_head(out, self.config.z1_dim)
        return LatentDistribution(mu, lv)

    def forward(self, params, x, group, rng=None, noise=None, need_grads=True, grad_terms=None):
        """Evaluate the variant's loss on a single-group batch.

        Returns ``(VaeForwardResult, grads)``; losses are batch means and grads
        are gradients of the batch-mean total. ``noise`` maps ``"z1"``/``"z2"``
        to fixed standard-normal draws (test hook). ``grad_terms`` restricts the
        gradient to a subset of LOSS_TERMS (the reported losses are unaffected).
        """
        x = check_pixels(x)
        if x.ndim != 2:
            raise UsageError("x must be a 2-d batch")
        branch = self._branch(group)
        noise = noise or {}
        terms = set(LOSS_TERMS if grad_terms is None else grad_terms)
        unknown = terms - set(LOSS_TERMS)
        if unknown:
            raise UsageError(f"unknown loss terms {sorted(unknown)}")
        w = {t: float(t in terms) for t in LOSS_TERMS}
        if self.hierarchical:
            return self._forward_hier(params, x, group, branch, rng, noise, need_grads, w)
        return self._forward_flat(params, x, group, branch, rng, noise, need_grads, w)

    def loss_and_grads(self, params, x, group, rng=None, noise=None, grad_terms=None):
        res, grads = self.forward(params, x, group, rng, noise, need_grads=True, grad_terms=grad_terms)
        return res.losses, grads

    def _noise(self, noise, key, shape, rng, dtype):
        eps = noise.get(key)
        if eps is None:
            if rng is None:
                raise UsageError("forward needs an rng or explicit noise")
            eps = rng.standard_normal(shape).astype(dtype, copy=False)
        return eps

    def _kl_prior(self, mu, lv, group):
        m = self._prior_mean(group, mu.dtype)
        if m is None:
            return np.zeros(mu.shape[0], dtype=mu.dtype), None
        kl = kl_diag_gaussians(mu, lv, m, np.zeros_like(lv))
        d_mu = mu - m
        d_lv = 0.5 * (np.exp(lv) - 1.0)
        return kl, (d_mu, d_lv)

    def _finish(self, grads_by_name, params):
        return {name: grads_by_name.get(name, np.zeros_like(p)) for name, p in params.items()}

    def _forward_flat(self, params, x, group, branch, rng, noise, need_grads, w):
        c = self.config
        n = x.shape[0]
        dtype = params[self.encoder.layers[0].weight_name].dtype
        enc_out, enc_cache = self.encoder.forward(params, x)
        mu, lv, lv_mask = _split_head(enc_out, c.z1_dim)
        std = np.exp(0.5 * lv)
        eps = self._noise(noise, "z1", mu.shape, rng, dtype)
        z = mu + std * eps
        dec = self.decoders[branch]
        logits, dec_cache = dec.forward(params, z)
        recon, d_logits = recon_from_logits(x, logits, c.recon, c.gaussian_var)
        kl, kl_grads = self._kl_prior(mu, lv, group)
        per_sample = recon + kl
        r, k1 = float(recon.mean()), float(kl.mean())
        losses = LossBreakdown(recon=r, kl_z1=k1, total=LossBreakdown.combine(r, k1, 0.0, 0.0, 0.0), n=n)
        result = VaeForwardResult(LatentDistribution(mu, lv), z, sigmoid(logits), losses, per_sample)
        if not need_grads:
            return result, None

        scale = 1.0 / n
        d_z, dec_grads = dec.backward(params, dec_cache, d_logits * (scale * w["recon"]))
        d_mu = d_z
        d_lv = d_z * eps * 0.5 * std
        if kl_grads is not None:
            s_kl = scale * w["kl_z1"]
            d_mu = d_mu + kl_grads[0] * s_kl
            d_lv = d_lv + kl_grads[1] * s_kl
        d_enc = np.concatenate([d_mu, d_lv * lv_mask], axis=1)
        _, enc_grads = self.encoder.backward(params, enc_cache, d_enc)
        return result, self._finish({**enc_grads, **dec_grads}, params)

    def _forward_hier(self, params, x, group, branch, rng, noise, need_grads, w):
        c = self.config
        n = x.shape[0]
        d1 = c.z1_dim
        dtype = params[self.encoder.layers[0].weight_name].dtype

        # q(z1|x)
        enc_out, enc_cache = self.encoder.forward(params, x)
        mu1, lv1, mask1 = _split_head(enc_out, d1)
        std1 = np.exp(0.5 * lv1)
        eps1 = self._noise(noise, "z1", mu1.shape, rng, dtype)
        z1 = mu1 + std1 * eps1
        # q(z2|z1)
        enc2_out, enc2_cache = self.encoder2.forward(params, z1)
        mu2, lv2, mask2 = _split_head(enc2_out, c.z2_dim)
        std2 = np.exp(0.5 * lv2)
        eps2 = self._noise(noise, "z2", mu2.shape, rng, dtype)
        z2 = mu2 + std2 * eps2
        # p(z1|z2)
        dz1 = self.decoders_z1[branch]
        dz1_out, dz1_cache = dz1.forward(params, z2)
        mu1p, lv1p, mask1p = _split_head(dz1_out, d1)
        # p(x|z1) on the encoder sample and on the decoder mean of z1
        dec = self.decoders[branch]
        logits, dec_cache = dec.forward(params, z1)
        logits2, dec_cache2 = dec.forward(params, mu1p)

        recon, d_logits = recon_from_logits(x, logits, c.recon, c.gaussian_var)
        recon2, d_logits2 = recon_from_logits(x, logits2, c.recon, c.gaussian_var)
        zeros2 = np.zeros_like(lv2)
        kl2 = kl_diag_gaussians(mu2, lv2, zeros2, zeros2)
        cons = kl_diag_gaussians(mu1, lv1, mu1p, lv1p)
        kl1, kl1_grads = self._kl_prior(mu1, lv1, group)

        per_sample = recon + kl1 + kl2 + cons + recon2
        parts = [float(a.mean()) for a in (recon, kl1, kl2, cons, recon2)]
        losses = LossBreakdown(*parts, total=LossBreakdown.combine(*parts), n=n)
        result = VaeForwardResult(
            LatentDistribution(mu1, lv1), z1, sigmoid(logits), losses, per_sample,
            q_z2=LatentDistribution(mu2, lv2), z2=z2,
            p_z1_given_z2=LatentDistribution(mu1p, lv1p), z1_reconstructed=mu1p,
        )
        if not need_grads:
            return result, None

        s = 1.0 / n
        grads: Dict[str, np.ndarray] = {}

        def accumulate(g):
            for name, val in g.items():
                grads[name] = grads[name] + val if name in grads else val

        # recon_from_z2 flows through p(x|z1) into mu1p
        d_mu1p, g = dec.backward(params, dec_cache2, d_logits2 * (s * w["recon_from_z2"]))
        accumulate(g)
        c_mu1, c_lv1, c_mu1p, c_lv1p = (
            gr * (s * w["consistency"]) for gr in kl_diag_gaussians_grads(mu1, lv1, mu1p, lv1p)
        )
        to_encoder = c.consistency_grad in ("both", "encoder_only")
        to_decoder = c.consistency_grad in ("both", "decoder_only")
        d_lv1p = np.zeros_like(lv1p)
        if to_decoder:
            d_mu1p = d_mu1p + c_mu1p
            d_lv1p = c_lv1p
        d_z2, g = dz1.backward(params, dz1_cache, np.concatenate([d_mu1p, d_lv1p * mask1p], axis=1))
        accumulate(g)
        # z2 = mu2 + std2 * eps2, plus KL(q(z2|z1) || N(0, I))
        s_kl2 = s * w["kl_z2"]
        d_mu2 = d_z2 + mu2 * s_kl2
        d_lv2 = d_z2 * eps2 * 0.5 * std2 + 0.5 * (np.exp(lv2) - 1.0) * s_kl2
        d_z1, g = self.encoder2.backward(params, enc2_cache, np.concatenate([d_mu2, d_lv2 * mask2], axis=1))
        accumulate(g)
        d_z1_dec, g = dec.backward(params, dec_cache, d_logits * (s * w["recon"]))
        accumulate(g)
        d_z1 = d_z1 + d_z1_dec
        d_mu1 = d_z1
        d_lv1 = d_z1 * eps1 * 0.5 * std1
        if to_encoder:
            d_mu1 = d_mu1 + c_mu1
            d_lv1 = d_lv1 + c_lv1
        if kl1_grads is not None:
            s_kl1 = s * w["kl_z1"]
            d_mu1 = d_mu1 + kl1_grads[0] * s_kl1
            d_lv1 = d_lv1 + kl1_grads[1] * s_kl1
        _, g = self.encoder.backward(params, enc_cache, np.concatenate([d_mu1, d_lv1 * mask1], axis=1))
        accumulate(g)
        return result, self._finish(grads, params)

    # -- generation --------------------------------------------------------

    def generate(self, params, group, pathway, n, rng, swap_map=None):
        """Decode ``n`` samples for ``group`` along ``pathway``; returns pixel means.

        ``swap_map`` reassigns which group's prior feeds each group's decoder
        branch; the identity map is the default.
        """
        if pathway not in self.valid_pathways:
            raise UnsupportedPathwayError(
                f"pathway {pathway!r} is not valid for {self.kind} using the {self.prior.strategy} prior; "
                f"valid pathways: {', '.join(self.valid_pathways)}"
            )
        branch = self._branch(group)
        prior_group = group
        if swap_map is not None:
            swap = list(swap_map)
            if sorted(swap) != list(range(self.k)):
                raise UsageError(f"swap_map must be a permutation of 0..{self.k - 1}, got {swap}")
            prior_group = swap[group]
        c = self.config
        dtype = params[self.encoder.layers[0].weight_name].dtype
        dec = self.decoders[branch]
        if pathway == "from_z1_direct":
            z1 = sample_prior(self.prior, prior_group, n, rng, dtype)
        else:
            if pathway == "from_z2":
                z2 = rng.standard_normal((n, c.z2_dim)).astype(dtype)
            else:
                z1_in = sample_prior(self.prior, prior_group, n, rng, dtype)
                out, _ = self.encoder2.forward(params, z1_in)
                mu2, lv2, _ = _split_head(out, c.z2_dim)
                z2 = reparameterize(LatentDistribution(mu2, lv2), rng)
            out, _ = self.decoders_z1[branch].forward(params, z2)
            z1 = out[:, : c.z1_dim]
        logits, _ = dec.forward(params, z1)
        return sigmoid(logits)
