import numpy as np
import pytest

from conftest import tiny
from fissionvae.errors import ConfigError, UnsupportedPathwayError, UsageError
from fissionvae.models import (
    LOSS_TERMS,
    VARIANTS,
    FissionVAE,
    LossBreakdown,
    ModelConfig,
    branch_of,
    reparameterize,
)
from fissionvae.priors import LatentDistribution


# -- independent straight-line recomputation -------------------------------

def mlp(params, prefix, x):
    i = 0
    while f"{prefix}.{i + 1}.weight" in params:
        x = np.tanh(x @ params[f"{prefix}.{i}.weight"].T + params[f"{prefix}.{i}.bias"])
        i += 1
    return x @ params[f"{prefix}.{i}.weight"].T + params[f"{prefix}.{i}.bias"]


def bce_logits(x, logits):
    # -[x log s(l) + (1 - x) log(1 - s(l))], written out directly
    s = 1 / (1 + np.exp(-logits))
    return -(x * np.log(s) + (1 - x) * np.log(1 - s)).sum(axis=1)


def kl(mq, lq, mp, lp):
    return 0.5 * (lp - lq + (np.exp(lq) + (mq - mp) ** 2) / np.exp(lp) - 1).sum(axis=1)


def oracle_total(model, params, x, group, e1, e2=None):
    d1 = model.config.z1_dim
    pre = f"branch{group}." if model.branched else ""
    h = mlp(params, "encoder", x)
    mu1, lv1 = h[:, :d1], h[:, d1:]
    z1 = mu1 + np.exp(lv1 / 2) * e1
    recon = bce_logits(x, mlp(params, pre + "decoder", z1))
    m = model.prior.means
    kl1 = kl(mu1, lv1, m[group], np.zeros(d1)) if m is not None else 0.0
    if not model.hierarchical:
        return np.mean(recon + kl1)
    d2 = model.config.z2_dim
    h2 = mlp(params, "encoder2", z1)
    mu2, lv2 = h2[:, :d2], h2[:, d2:]
    z2 = mu2 + np.exp(lv2 / 2) * e2
    hp = mlp(params, pre + "decoder_z1", z2)
    mu1p, lv1p = hp[:, :d1], hp[:, d1:]
    recon2 = bce_logits(x, mlp(params, pre + "decoder", mu1p))
    return np.mean(recon + kl1 + kl(mu2, lv2, 0, 0) + kl(mu1, lv1, mu1p, lv1p) + recon2)


@pytest.mark.parametrize("kind", VARIANTS)
def test_total_matches_independent_recomputation(kind):
    for case in range(10):
        rng = np.random.default_rng([case, 77])
        model = tiny(kind)
        params = model.init_params(rng, np.float64)
        x = rng.uniform(0, 1, (5, 6))
        g = case % 2
        noise = {"z1": rng.standard_normal((5, 4)), "z2": rng.standard_normal((5, 2))}
        res, _ = model.forward(params, x, g, noise=noise, need_grads=False)
        assert res.losses.total == pytest.approx(oracle_total(model, params, x, g, noise["z1"], noise["z2"]),
                                                 abs=1e-6)


@pytest.mark.parametrize("kind", VARIANTS)
def test_breakdown_identity_exact(kind):
    model = tiny(kind)
    rng = np.random.default_rng(5)
    for _ in range(100):
        params = model.init_params(rng, np.float64)
        res, _ = model.forward(params, rng.uniform(0, 1, (3, 6)), int(rng.integers(2)), rng=rng, need_grads=False)
        b = res.losses
        assert b.total == b.recon + b.kl_z1 + b.kl_z2 + b.consistency + b.recon_from_z2
        assert b.total == pytest.approx(res.per_sample_total.mean(), rel=1e-12)
        if not model.hierarchical:
            assert b.kl_z2 == b.consistency == b.recon_from_z2 == 0.0


def test_prior_only_changes_kl_term(rng):
    base, shifted = tiny("fedvae"), tiny("fission_l", prior="wave")
    params = base.init_params(rng, np.float64)
    x = rng.uniform(0, 1, (4, 6))
    noise = {"z1": rng.standard_normal((4, 4))}
    a, _ = base.forward(params, x, 1, noise=noise, need_grads=False)
    b, _ = shifted.forward(params, x, 1, noise=noise, need_grads=False)
    assert a.losses.recon == b.losses.recon
    assert a.losses.kl_z1 != b.losses.kl_z1


def constant_head(params, prefix, values):
    """Zero the last layer of ``prefix`` so it always outputs ``values``."""
    last = max(int(n.split(".")[-2]) for n in params if n.startswith(prefix + ".") and n.endswith("weight"))
    params[f"{prefix}.{last}.weight"][:] = 0
    params[f"{prefix}.{last}.bias"][:] = values


def test_encoder_on_prior_gives_zero_kl(rng):
    model = tiny("fission_ld", prior="wave")
    params = model.init_params(rng, np.float64)
    constant_head(params, "encoder", np.concatenate([model.prior.means[1], np.zeros(4)]))
    res, _ = model.forward(params, rng.uniform(0, 1, (3, 6)), 1, rng=rng, need_grads=False)
    assert res.losses.kl_z1 == 0.0
    assert res.losses.total == res.losses.recon


def test_consistency_zero_when_decoder_matches_encoder(rng):
    model = tiny("fission_hld")
    params = model.init_params(rng, np.float64)
    head = np.array([0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.0, -0.1])
    constant_head(params, "encoder", head)
    constant_head(params, "branch0.decoder_z1", head)
    res, _ = model.forward(params, rng.uniform(0, 1, (3, 6)), 0, rng=rng, need_grads=False)
    assert res.losses.consistency == 0.0


def test_learnable_prior_disables_kl_z1(rng):
    model = tiny("fission_hld", prior="learnable")
    params = model.init_params(rng, np.float64)
    res, grads = model.forward(params, rng.uniform(0, 1, (3, 6)), 0, rng=rng, grad_terms=["kl_z1"])
    assert res.losses.kl_z1 == 0.0
    assert all(not g.any() for g in grads.values())
    assert model.valid_pathways == ("from_z2",)


@pytest.mark.parametrize("kind", ["fission_d", "fission_ld", "fission_hld"])
def test_branch_isolation(kind, rng):
    model = tiny(kind)
    params = model.init_params(rng, np.float64)
    _, grads = model.loss_and_grads(params, rng.uniform(0, 1, (4, 6)), 0, rng=rng)
    for name, g in grads.items():
        if branch_of(name) == 1:
            assert not g.any(), name
        elif branch_of(name) == 0:
            assert g.any(), name


def test_group_out_of_range(rng):
    model = tiny("fedvae")
    with pytest.raises(UsageError):
        model.forward(model.init_params(rng), np.zeros((1, 6)), 2, rng=rng)


def test_consistency_grad_toggle(rng):
    x = rng.uniform(0, 1, (3, 6))
    noise = {"z1": rng.standard_normal((3, 4)), "z2": rng.standard_normal((3, 2))}
    params = tiny("fission_hld").init_params(np.random.default_rng(0), np.float64)
    out = {}
    for mode in ("both", "encoder_only", "decoder_only"):
        model = tiny("fission_hld", consistency_grad=mode)
        _, out[mode] = model.loss_and_grads(params, x, 0, noise=noise, grad_terms=["consistency"])
    assert all(not g.any() for n, g in out["encoder_only"].items() if "decoder_z1" in n)
    assert any(g.any() for n, g in out["decoder_only"].items() if "decoder_z1" in n)
    # both = encoder_only + decoder_only, term by term
    for n in params:
        np.testing.assert_allclose(out["both"][n], out["encoder_only"][n] + out["decoder_only"][n], atol=1e-12)


def test_log_var_clamp_blocks_gradient(rng):
    model = tiny("fedvae")
    params = model.init_params(rng, np.float64)
    params["encoder.1.bias"][4:] = 50.0  # log-variance head far above the bound
    params["encoder.1.weight"][4:] = 0.0
    res, grads = model.forward(params, rng.uniform(0, 1, (2, 6)), 0, rng=rng)
    assert np.all(res.q_z1.log_var == 10.0)
    assert not grads["encoder.1.bias"][4:].any()


def test_reparameterize_zero_noise_and_tiny_variance():
    q = LatentDistribution(np.array([1.0, -2.0]), np.array([0.3, -1e9]))
    assert reparameterize(q, eps=np.zeros(2)).tolist() == [1.0, -2.0]
    z = reparameterize(q, eps=np.ones(2))
    assert z[1] == pytest.approx(-2.0, abs=np.exp(-5) + 1e-12)


def test_reparameterize_moments(rng):
    mu, lv = np.array([0.5, -1.0, 2.0]), np.array([0.0, -1.0, 0.7])
    q = LatentDistribution(np.broadcast_to(mu, (100_000, 3)), np.broadcast_to(lv, (100_000, 3)))
    z = reparameterize(q, rng)
    np.testing.assert_allclose(z.mean(axis=0), mu, atol=0.02 * np.abs(mu).max())
    np.testing.assert_allclose(z.var(axis=0), np.exp(lv), rtol=0.02)


def test_reparameterize_needs_noise_source():
    with pytest.raises(UsageError):
        reparameterize(LatentDistribution(np.zeros(1), np.zeros(1)))


def test_structure_per_variant():
    for kind in VARIANTS:
        names = tiny(kind).param_names()
        branches = {branch_of(n) for n in names} - {None}
        assert branches == ({0, 1} if kind in ("fission_d", "fission_ld", "fission_hld") else set())
        assert any(n.startswith("encoder2.") for n in names) == (kind == "fission_hld")
        assert len(names) == len(set(names))


def test_default_priors():
    assert tiny("fedvae").prior.strategy == "identical"
    assert tiny("fission_d").prior.strategy == "identical"
    assert tiny("fission_l").prior.strategy == "wave"


@pytest.mark.parametrize("kind,prior", [("fedvae", "wave"), ("fission_d", "one_hot"), ("fission_ld", "learnable")])
def test_invalid_variant_prior_pairs(kind, prior):
    with pytest.raises(ConfigError):
        tiny(kind, prior=prior)


def test_extra_decoder_layers_deepen_one_branch():
    model = tiny("fission_ld", extra_decoder_layers={1: 2})
    depth = [len(d.layers) for d in model.decoders]
    assert depth == [2, 4]


def test_generate_pathways(rng):
    model = tiny("fission_hld")
    params = model.init_params(rng)
    for p in ("from_z2", "from_z1_via_encoder", "from_z1_direct"):
        out = model.generate(params, 1, p, 5, rng)
        assert out.shape == (5, 6) and out.min() >= 0 and out.max() <= 1


def test_from_z2_rejected_for_flat_variant(rng):
    model = tiny("fission_ld")
    with pytest.raises(UnsupportedPathwayError, match="from_z1_direct"):
        model.generate(model.init_params(rng), 0, "from_z2", 2, rng)


def test_identity_swap_is_bit_identical():
    model = tiny("fission_hld")
    params = model.init_params(np.random.default_rng(0))
    a = model.generate(params, 1, "from_z1_direct", 8, np.random.default_rng(9))
    b = model.generate(params, 1, "from_z1_direct", 8, np.random.default_rng(9), swap_map=[0, 1])
    c = model.generate(params, 1, "from_z1_direct", 8, np.random.default_rng(9), swap_map=[1, 0])
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_swap_map_must_be_permutation(rng):
    model = tiny("fission_ld")
    with pytest.raises(UsageError):
        model.generate(model.init_params(rng), 0, "from_z1_direct", 2, rng, swap_map=[0, 0])


def test_unknown_grad_term(rng):
    model = tiny("fedvae")
    with pytest.raises(UsageError):
        model.forward(model.init_params(rng), np.zeros((1, 6)), 0, rng=rng, grad_terms=["elbo"])


def test_mean_of_weights_by_count():
    a = LossBreakdown(recon=1.0, total=1.0, n=1)
    b = LossBreakdown(recon=4.0, total=4.0, n=3)
    m = LossBreakdown.mean_of([a, b])
    assert m.total == pytest.approx(3.25) and m.n == 4


def test_model_config_validation():
    with pytest.raises(ConfigError):
        FissionVAE(ModelConfig(kind="vae"))
    with pytest.raises(ConfigError):
        FissionVAE(ModelConfig(kind="fission_hld", consistency_grad="neither"))
    assert set(LOSS_TERMS) == {"recon", "kl_z1", "kl_z2", "consistency", "recon_from_z2"}
