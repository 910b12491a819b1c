"""Pixel reconstruction losses.

Both modes return the negative log-likelihood summed over pixels, one value
per row, so they sit on the same scale as the KL terms of the ELBO.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DataError
from .nn import sigmoid

RECON_MODES = ("bernoulli", "gaussian_fixed_var")


def check_pixels(x):
    x = np.asarray(x)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DataError(f"pixel values must lie in [0, 1], got range [{x.min()}, {x.max()}]")
    return x


def recon_loss(x, decoder_output, mode="bernoulli", gaussian_var=0.1):
    """Per-row reconstruction NLL of ``x`` given decoder pixel means in [0, 1]."""
    x = check_pixels(x)
    x_hat = np.asarray(decoder_output)
    if mode == "bernoulli":
        tiny = np.finfo(x_hat.dtype if x_hat.dtype.kind == "f" else np.float64).tiny
        p = np.clip(x_hat, tiny, 1.0 - np.finfo(np.float64).epsneg)
        bce = -(x * np.log(p) + (1.0 - x) * np.log1p(-p))
        return bce.sum(axis=-1)
    if mode == "gaussian_fixed_var":
        d = x.shape[-1]
        sq = ((x - x_hat) ** 2).sum(axis=-1)
        return 0.5 * sq / gaussian_var + 0.5 * d * math.log(2 * math.pi * gaussian_var)
    raise ConfigError(f"unknown reconstruction mode {mode!r}")


def recon_loss_grad(x, decoder_output, mode="bernoulli", gaussian_var=0.1):
    """d recon_loss / d decoder_output."""
    x_hat = np.asarray(decoder_output)
    if mode == "bernoulli":
        return (x_hat - x) / (x_hat * (1.0 - x_hat))
    if mode == "gaussian_fixed_var":
        return (x_hat - x) / gaussian_var
    raise ConfigError(f"unknown reconstruction mode {mode!r}")


def recon_from_logits(x, logits, mode="bernoulli", gaussian_var=0.1):
    """Per-row loss and its gradient w.r.t. the pre-sigmoid decoder logits."""
    if mode == "bernoulli":
        loss = (np.logaddexp(0, logits) - x * logits).sum(axis=-1)
        return loss, sigmoid(logits) - x
    if mode == "gaussian_fixed_var":
        p = sigmoid(logits)
        d = x.shape[-1]
        resid = p - x
        loss = 0.5 * (resid * resid).sum(axis=-1) / gaussian_var + 0.5 * d * math.log(2 * math.pi * gaussian_var)
        return loss, resid / gaussian_var * p * (1 - p)
    raise ConfigError(f"unknown reconstruction mode {mode!r}")
