import math

import numpy as np
import pytest

from fissionvae.errors import ConfigError, DataError
from fissionvae.gradcheck import check_recon
from fissionvae.losses import recon_from_logits, recon_loss


def test_bernoulli_half_is_ln2_per_pixel():
    x = np.full((2, 5), 0.5)
    np.testing.assert_allclose(recon_loss(x, x, "bernoulli") / 5, math.log(2))


def test_gaussian_equal_is_constant():
    x = np.random.default_rng(0).uniform(0, 1, (3, 4))
    const = 0.5 * 4 * math.log(2 * math.pi * 0.1)
    np.testing.assert_allclose(recon_loss(x, x, "gaussian_fixed_var", 0.1), const)


def test_gaussian_quadratic_part():
    x = np.zeros((1, 2))
    x_hat = np.array([[0.3, 0.4]])
    const = math.log(2 * math.pi * 0.5)
    assert recon_loss(x, x_hat, "gaussian_fixed_var", 0.5)[0] == pytest.approx(0.25 / 1.0 + const)


def test_pixels_outside_unit_interval_rejected():
    with pytest.raises(DataError):
        recon_loss(np.array([[1.2]]), np.array([[0.5]]))
    with pytest.raises(DataError):
        recon_loss(np.array([[-0.1]]), np.array([[0.5]]))


def test_unknown_mode():
    with pytest.raises(ConfigError):
        recon_loss(np.zeros((1, 1)), np.zeros((1, 1)), "laplace")


@pytest.mark.parametrize("mode", ["bernoulli", "gaussian_fixed_var"])
def test_logit_form_agrees_with_probability_form(mode, rng):
    x = rng.uniform(0, 1, (4, 7))
    logits = rng.standard_normal((4, 7)) * 2
    p = 1 / (1 + np.exp(-logits))
    loss, _ = recon_from_logits(x, logits, mode)
    np.testing.assert_allclose(loss, recon_loss(x, p, mode), rtol=1e-10)


def test_logit_form_stable_for_large_logits():
    loss, grad = recon_from_logits(np.array([[1.0, 0.0]]), np.array([[800.0, -800.0]]))
    assert np.isfinite(loss).all() and loss[0] == pytest.approx(0.0)
    assert np.isfinite(grad).all()


@pytest.mark.parametrize("mode", ["bernoulli", "gaussian_fixed_var"])
def test_recon_gradients_vs_finite_differences(mode):
    assert max(check_recon(mode, s) for s in range(5)) <= 1e-4
