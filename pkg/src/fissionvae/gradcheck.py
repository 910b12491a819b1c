"""Central finite-difference checks of every hand-written gradient, in float64."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .losses import recon_from_logits, recon_loss, recon_loss_grad
from .models import LOSS_TERMS, VARIANTS, FissionVAE, ModelConfig
from .nn import ACTIVATIONS, LayerStack
from .priors import LatentDistribution, kl_diag_gaussians, kl_diag_gaussians_grads, kl_to_prior

STEP = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as this, so near-zero gradients are
# compared in absolute terms
FLOOR = 1e-6


@dataclass
class GradRow:
    component: str
    max_rel_error: float
    seeds: int

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h=STEP):
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def numeric_grads_multi(f: Callable[[], dict], arrays: dict, h=STEP):
    """Like ``numeric_grad`` for a function returning several named scalars at once."""
    result = {}
    for name, arr in arrays.items():
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            up = f()
            arr[i] = orig - h
            down = f()
            arr[i] = orig
            for term in up:
                result.setdefault(term, {}).setdefault(name, np.zeros(arr.shape))[i] = (up[term] - down[term]) / (2 * h)
    return result


def check_layer(activation, seed, corrupt=False):
    rng = np.random.default_rng(seed)
    stack = LayerStack.mlp("net", [4, 5, 3, 2], hidden=activation, out=activation)
    params = stack.init(rng, np.float64)
    for layer in stack.layers:
        # nonzero biases keep ReLU pre-activations off the kink at exactly 0
        params[layer.bias_name] = rng.standard_normal(layer.fan_out) * 0.5
    x = rng.standard_normal((3, 4))
    proj = rng.standard_normal((3, 2))

    def loss():
        y, _ = stack.forward(params, x)
        return float((y * proj).sum())

    y, cache = stack.forward(params, x)
    gx, grads = stack.backward(params, cache, proj)
    if corrupt:
        grads["net.0.weight"] = grads["net.0.weight"] * 1.01
    err = rel_error(gx, numeric_grad(loss, x))
    for name, arr in params.items():
        err = max(err, rel_error(grads[name], numeric_grad(loss, arr)))
    return err


def check_kl_prior(seed):
    rng = np.random.default_rng(seed)
    mu, lv, m = rng.standard_normal(5), rng.standard_normal(5) * 0.5, rng.standard_normal(5)
    f = lambda: float(kl_to_prior(LatentDistribution(mu, lv), m))
    d_mu, d_lv, d_m, _ = kl_diag_gaussians_grads(mu, lv, m, np.zeros(5))
    return max(rel_error(d_mu, numeric_grad(f, mu)), rel_error(d_lv, numeric_grad(f, lv)),
               rel_error(d_m, numeric_grad(f, m)))


def check_kl_pair(seed):
    rng = np.random.default_rng(seed)
    args = [rng.standard_normal(5) * s for s in (1.0, 0.5, 1.0, 0.5)]
    f = lambda: float(kl_diag_gaussians(*args))
    analytic = kl_diag_gaussians_grads(*args)
    return max(rel_error(a, numeric_grad(f, arr)) for a, arr in zip(analytic, args))


def check_recon(mode, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (3, 6))
    logits = rng.standard_normal((3, 6))
    f = lambda: float(recon_from_logits(x, logits, mode)[0].sum())
    _, d_logits = recon_from_logits(x, logits, mode)
    err = rel_error(d_logits, numeric_grad(f, logits))
    x_hat = rng.uniform(0.05, 0.95, (3, 6))
    g = lambda: float(recon_loss(x, x_hat, mode).sum())
    return max(err, rel_error(recon_loss_grad(x, x_hat, mode), numeric_grad(g, x_hat)))


def tiny_model(kind, recon="bernoulli", prior=None):
    cfg = ModelConfig(kind=kind, k=2, input_dim=4, z1_dim=2, z2_dim=2, enc_hidden=(3,),
                      enc2_hidden=(2,), hidden_activation="tanh", prior=prior, recon=recon)
    return FissionVAE(cfg)


def check_variant(kind, seed, recon="bernoulli"):
    """Per-term max relative error of the loss gradient for one variant."""
    model = tiny_model(kind, recon)
    rng = np.random.default_rng(seed)
    params = model.init_params(rng, np.float64)
    group = int(rng.integers(0, 2))
    x = rng.uniform(0, 1, (3, 4))
    noise = {"z1": rng.standard_normal((3, 2)), "z2": rng.standard_normal((3, 2))}

    def values():
        res, _ = model.forward(params, x, group, noise=noise, need_grads=False)
        return res.losses.as_dict()

    active = [t for t in LOSS_TERMS if model.hierarchical or t in ("recon", "kl_z1")]
    numeric = numeric_grads_multi(values, params)
    errs = {}
    for term in active + ["total"]:
        _, grads = model.loss_and_grads(params, x, group, noise=noise,
                                        grad_terms=None if term == "total" else [term])
        errs[term] = max(rel_error(grads[n], numeric[term][n]) for n in params)
    return errs


def run(seeds=20, corrupt=False) -> List[GradRow]:
    rows = []
    for act in ACTIVATIONS:
        err = max(check_layer(act, s, corrupt=corrupt) for s in range(seeds))
        rows.append(GradRow(f"dense:{act}", err, seeds))
    rows.append(GradRow("loss:kl_to_prior", max(check_kl_prior(s) for s in range(seeds)), seeds))
    rows.append(GradRow("loss:kl_gaussian_pair", max(check_kl_pair(s) for s in range(seeds)), seeds))
    for mode in ("bernoulli", "gaussian_fixed_var"):
        rows.append(GradRow(f"loss:recon_{mode}", max(check_recon(mode, s) for s in range(seeds)), seeds))
    for kind in VARIANTS:
        worst = {}
        for s in range(seeds):
            for term, err in check_variant(kind, 1000 + s).items():
                worst[term] = max(worst.get(term, 0.0), err)
        for term, err in worst.items():
            rows.append(GradRow(f"{kind}:{term}", err, seeds))
        gauss = max(check_variant(kind, 2000 + s, "gaussian_fixed_var")["total"] for s in range(seeds))
        rows.append(GradRow(f"{kind}:total[gaussian]", gauss, seeds))
    return rows


def format_table(rows: List[GradRow]) -> str:
    lines = [f"{'component':<32} {'max_rel_err':>12}  status"]
    for r in rows:
        lines.append(f"{r.component:<32} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
