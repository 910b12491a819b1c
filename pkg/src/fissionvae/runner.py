"""Glue between a RunConfig and the library: datasets, clients, model, training."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .config import RunConfig
from .data import Dataset, load_mixed_mnist, partition, synth_two_group
from .errors import DataError
from .federation import ClientState, RoundReport, train_federated
from .metrics import GroupProbe, evaluate_losses
from .models import FissionVAE
from .nn import ParamSet

log = logging.getLogger(__name__)

_EVAL_SEED_OFFSET = 10_000


def load_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, eval) datasets named by the config."""
    d = config.data
    if d.source == "synthetic":
        train = synth_two_group(d.n_per_group, d.side, seed=config.seed)
        evals = synth_two_group(d.eval_n_per_group, d.side, seed=config.seed + _EVAL_SEED_OFFSET)
        return train, evals
    return (load_mixed_mnist(d.mnist_dir, d.fashion_dir, "train"),
            load_mixed_mnist(d.mnist_dir, d.fashion_dir, "test"))


def build_model(config: RunConfig, dataset: Dataset) -> FissionVAE:
    input_dim = int(np.prod(dataset.images.shape[1:]))
    return FissionVAE(config.model_config(input_dim))


def init_params(config: RunConfig, model: FissionVAE) -> ParamSet:
    return model.init_params(np.random.default_rng([config.seed, 0xC0FFEE]))


def make_clients(config: RunConfig, dataset: Dataset) -> List[ClientState]:
    f = config.federation
    if dataset.k != f.k:
        raise DataError(f"dataset has {dataset.k} groups but the config asks for k={f.k}")
    shards = partition(dataset, f.k, f.clients_per_group, config.seed)
    return [
        ClientState(cid, cid // f.clients_per_group, dataset.flat(idx).astype(np.float32))
        for cid, idx in sorted(shards.items())
    ]


def train_probe(dataset: Dataset, k) -> GroupProbe:
    return GroupProbe(k).fit(dataset.flat(), dataset.groups)


@dataclass
class TrainResult:
    model: FissionVAE
    params: ParamSet
    initial_params: ParamSet
    reports: List[RoundReport] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def train(config: RunConfig, workers=1, dataset: Optional[Dataset] = None,
          on_round: Optional[Callable] = None, track_loss=True) -> TrainResult:
    """Federated training as configured; returns the final global parameters.

    ``initial_loss``/``final_loss`` are the mean negative ELBO of the global
    model over the whole training set before round 1 and after the last round.
    """
    if dataset is None:
        dataset, _ = load_datasets(config)
    model = build_model(config, dataset)
    params0 = init_params(config, model)
    clients = make_clients(config, dataset)
    params, reports = train_federated(model, params0, clients, config.federation_config(),
                                      workers=workers, on_round=on_round)
    result = TrainResult(model, params, params0, reports)
    if track_loss:
        result.initial_loss = evaluate_losses(model, params0, dataset, seed=config.seed).total
        result.final_loss = evaluate_losses(model, params, dataset, seed=config.seed).total
    return result


def append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
