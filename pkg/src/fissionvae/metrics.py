"""Desk-scale quality metrics: NLL, PCA-space Fréchet distance, latent
separation and group fidelity of generated samples."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import NumericalError, UsageError
from .models import FissionVAE, LossBreakdown
from .nn import ParamSet

FRECHET_COMPONENTS = 16
FRECHET_EPS = 1e-6


def nll(model: FissionVAE, params: ParamSet, dataset: Dataset, seed=0, batch_size=256):
    """Mean per-sample negative ELBO (the variant's total loss), one latent draw per datum."""
    return evaluate_losses(model, params, dataset, seed, batch_size).total


def evaluate_losses(model: FissionVAE, params: ParamSet, dataset: Dataset, seed=0, batch_size=256) -> LossBreakdown:
    parts = []
    for g in range(model.k):
        idx = dataset.group_indices(g)
        rng = np.random.default_rng([seed, g])
        for start in range(0, len(idx), batch_size):
            x = dataset.flat(idx[start:start + batch_size]).astype(_dtype(params))
            res, _ = model.forward(params, x, g, rng=rng, need_grads=False)
            parts.append(res.losses)
    return LossBreakdown.mean_of(parts)


def _dtype(params):
    return next(iter(params.values())).dtype


def sqrtm_psd(matrix):
    """Square root of a symmetric PSD matrix by eigendecomposition."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise NumericalError(f"matrix is not PSD (eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2):
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    root1 = sqrtm_psd(cov1)
    inner = root1 @ cov2 @ root1
    # tr((cov1 cov2)^(1/2)) == tr((root1 cov2 root1)^(1/2)); the latter is symmetric
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise NumericalError(f"product covariance has a negative eigenvalue {vals.min():.3g}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


@dataclass
class FrechetResult:
    value: float
    components: int
    regularized: bool


class PCAProjection:
    def __init__(self, reference, n_components=FRECHET_COMPONENTS):
        reference = np.asarray(reference, dtype=np.float64)
        self.mean = reference.mean(axis=0)
        _, _, vt = np.linalg.svd(reference - self.mean, full_matrices=False)
        self.components = vt[: min(n_components, vt.shape[0])]

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def frechet_proxy(real, generated, n_components=FRECHET_COMPONENTS, projection=None) -> FrechetResult:
    """Fréchet distance between Gaussian fits of both sets in the real set's top PCA subspace."""
    real = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    generated = np.asarray(generated, dtype=np.float64).reshape(len(generated), -1)
    d = min(n_components, real.shape[1])
    if len(real) < d + 1 or len(generated) < d + 1:
        raise UsageError(f"need at least {d + 1} samples per set, got {len(real)} and {len(generated)}")
    proj = projection or PCAProjection(real, d)
    a, b = proj(real), proj(generated)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d)
    regularized = False
    for cov in (cov_a, cov_b):
        if np.linalg.eigvalsh(cov).min() < FRECHET_EPS:
            regularized = True
    if regularized:
        cov_a = cov_a + FRECHET_EPS * np.eye(d)
        cov_b = cov_b + FRECHET_EPS * np.eye(d)
    value = frechet_distance(a.mean(axis=0), cov_a, b.mean(axis=0), cov_b)
    return FrechetResult(value, d, regularized)


def latent_separation_from(mean, log_var, groups):
    """Mean pairwise distance between group centroids of the posterior means,
    divided by the mean within-group spread (std of the aggregate posterior)."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.exp(np.asarray(log_var, dtype=np.float64))
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < 2:
        raise UsageError("latent separation needs at least two groups")
    centroids, spreads = [], []
    for g in labels:
        sel = groups == g
        centroids.append(mean[sel].mean(axis=0))
        spreads.append(np.sqrt((mean[sel].var(axis=0) + var[sel].mean(axis=0)).mean()))
    inter = np.mean([np.linalg.norm(centroids[i] - centroids[j])
                     for i, j in itertools.combinations(range(len(labels)), 2)])
    return float(inter / np.mean(spreads))


def latent_separation(model: FissionVAE, params: ParamSet, dataset: Dataset):
    q = model.encode(params, dataset.flat().astype(_dtype(params)))
    return latent_separation_from(q.mean, q.log_var, dataset.groups)


class GroupProbe:
    """Multinomial logistic regression on raw pixels, fit by full-batch gradient descent."""

    def __init__(self, k, l2=1e-3):
        self.k = k
        self.l2 = l2
        self.weight = None
        self.bias = None

    @property
    def trained(self):
        return self.weight is not None

    def fit(self, x, groups, steps=300, lr=0.5):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        y = np.eye(self.k)[np.asarray(groups)]
        w = np.zeros((x.shape[1], self.k))
        b = np.zeros(self.k)
        n = len(x)
        for _ in range(steps):
            logits = x @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - y) / n
            w -= lr * (x.T @ g + self.l2 * w)
            b -= lr * g.sum(axis=0)
        self.weight, self.bias = w, b
        return self

    def predict(self, x):
        if not self.trained:
            raise UsageError("the group probe has not been trained")
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return np.argmax(x @ self.weight + self.bias, axis=1)

    def accuracy(self, x, groups):
        return float(np.mean(self.predict(x) == np.asarray(groups)))


def group_fidelity(generated: Dict[int, np.ndarray], probe: GroupProbe) -> Dict[int, float]:
    """Per group g, the fraction of group-g generations the probe assigns to g."""
    if not probe.trained:
        raise UsageError("the group probe has not been trained")
    out = {}
    for g, samples in sorted(generated.items()):
        samples = np.asarray(samples)
        out[g] = float(np.mean(probe.predict(samples) == g)) if len(samples) else float("nan")
    return out


@dataclass
class MetricReport:
    variant: str
    prior: str
    pathway: str
    nll: float
    frechet_proxy: float
    latent_separation: float
    group_fidelity: List[float]
    sample_counts: List[int]
    frechet_regularized: bool = False
    swap_priors: bool = False
    eval_seed: int = 0
    config_hash: str = ""

    @property
    def mean_fidelity(self):
        return float(np.mean(self.group_fidelity))

    def to_dict(self):
        return asdict(self)

    def csv_row(self):
        return [self.variant, self.prior, self.pathway, self.nll, self.frechet_proxy,
                self.latent_separation, *self.group_fidelity]


def csv_header(k):
    return ["variant", "prior", "pathway", "nll", "frechet_proxy", "latent_separation",
            *[f"fidelity_g{g}" for g in range(k)]]


def generate_per_group(model: FissionVAE, params: ParamSet, pathway, counts: Sequence[int], seed=0, swap_map=None):
    out = {}
    for g, n in enumerate(counts):
        rng = np.random.default_rng([seed, g, 7])
        out[g] = model.generate(params, g, pathway, int(n), rng, swap_map=swap_map)
    return out


def evaluate_model(model: FissionVAE, params: ParamSet, eval_set: Dataset, probe: GroupProbe,
                   pathways: Optional[Sequence[str]] = None, seed=0, swap_map=None,
                   config_hash="") -> List[MetricReport]:
    """One MetricReport per pathway; generates as many samples per group as the eval set holds."""
    if eval_set.k > model.k:
        raise UsageError(f"eval set has {eval_set.k} groups but the model was built for {model.k}")
    counts = [len(eval_set.group_indices(g)) for g in range(model.k)]
    loss = nll(model, params, eval_set, seed)
    sep = latent_separation(model, params, eval_set)
    real = eval_set.flat()
    projection = PCAProjection(real, FRECHET_COMPONENTS)
    reports = []
    for pathway in pathways or model.valid_pathways:
        generated = generate_per_group(model, params, pathway, counts, seed, swap_map)
        fid = frechet_proxy(real, np.concatenate([generated[g] for g in range(model.k)]), projection=projection)
        fidelity = group_fidelity(generated, probe)
        reports.append(MetricReport(
            variant=model.kind, prior=model.prior.strategy, pathway=pathway, nll=loss,
            frechet_proxy=fid.value, latent_separation=sep,
            group_fidelity=[fidelity[g] for g in range(model.k)], sample_counts=counts,
            frechet_regularized=fid.regularized, swap_priors=swap_map is not None,
            eval_seed=seed, config_hash=config_hash,
        ))
    return reports
