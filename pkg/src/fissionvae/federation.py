"""Simulated federated training: broadcast, local training, FedAvg.

Determinism contract: every client draws from its own RNG seeded by
(seed, client id, round), and aggregation always runs over clients sorted by
id, so the aggregated model does not depend on how many workers ran the
clients or in which order they finished.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericalError, ProtocolError, UsageError
from .models import FissionVAE, LossBreakdown, branch_of
from .nn import ParamSet, compatible, copy_params, make_optimizer

log = logging.getLogger(__name__)

_PARTICIPATION_STREAM = 0x5A17


@dataclass
class FederationConfig:
    k: int = 2
    clients_per_group: int = 10
    participation_p: float = 0.5
    rounds: int = 70
    local_epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    optimizer: str = "adam"

    def validate(self):
        if self.k < 1 or self.clients_per_group < 1 or self.batch_size < 1:
            raise ConfigError("k, clients_per_group and batch_size must be positive")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be non-negative")
        if not 0.0 < self.participation_p <= 1.0:
            raise ConfigError(f"participation_p must be in (0, 1], got {self.participation_p}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self

    @property
    def n_clients(self):
        return self.k * self.clients_per_group


@dataclass
class ClientState:
    id: int
    group: int
    data: np.ndarray

    @property
    def n(self):
        return int(self.data.shape[0])


@dataclass
class ClientResult:
    client_id: int
    group: int
    n: int
    params: Optional[ParamSet]
    losses: LossBreakdown
    error: Optional[str] = None


@dataclass
class RoundReport:
    round: int
    participants: List[int]
    redraws: int
    client_losses: Dict[int, dict]
    aggregate_loss: float
    excluded: Dict[int, str] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_record(self, **extra):
        rec = asdict(self)
        rec["client_losses"] = {str(k): v for k, v in self.client_losses.items()}
        rec["excluded"] = {str(k): v for k, v in self.excluded.items()}
        rec.update(extra)
        return rec


def fedavg(models: Sequence[Tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count weighted mean of parameter sets, accumulated in float64."""
    if not models:
        raise UsageError("fedavg needs at least one model")
    first = models[0][0]
    for params, n in models:
        if not compatible(first, params):
            raise ProtocolError("fedavg received parameter sets with different names, order or shapes")
        if n <= 0:
            raise ProtocolError(f"client sample count must be positive, got {n}")
    total = float(sum(n for _, n in models))
    out = {}
    for name, ref in first.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for params, n in models:
            acc += (n / total) * params[name].astype(np.float64)
        out[name] = acc.astype(ref.dtype)
    return out


def group_aware_aggregate(global_params: ParamSet, models: Sequence[Tuple[ParamSet, int, int]]) -> ParamSet:
    """Shared tensors averaged over everyone, branch-g tensors over group g only.

    Branches without any participant this round keep the previous global values.
    """
    if not models:
        raise UsageError("group_aware_aggregate needs at least one model")
    for params, _, group in models:
        if not compatible(global_params, params):
            raise ProtocolError("client parameters are not compatible with the global model")
        for name, value in params.items():
            b = branch_of(name)
            if b is not None and b != group and not np.array_equal(value, global_params[name]):
                raise ProtocolError(f"client of group {group} modified foreign branch tensor {name!r}")

    shared = [(p, n) for p, n, _ in models]
    by_group: Dict[int, List[Tuple[ParamSet, int]]] = {}
    for p, n, g in models:
        by_group.setdefault(g, []).append((p, n))

    out = {}
    for name, value in global_params.items():
        b = branch_of(name)
        pool = shared if b is None else by_group.get(b)
        if not pool:
            out[name] = value.copy()
        else:
            out[name] = fedavg([({name: p[name]}, n) for p, n in pool])[name]
    return out


def sample_participants(config: FederationConfig, round_index: int) -> Tuple[List[int], int]:
    """Bernoulli(p) participation per client; an empty draw is redrawn.

    Returns the sorted participant ids and the number of redraws.
    """
    rng = np.random.default_rng([config.seed, round_index, _PARTICIPATION_STREAM])
    redraws = 0
    while True:
        mask = rng.random(config.n_clients) < config.participation_p
        if mask.any():
            return [int(i) for i in np.flatnonzero(mask)], redraws
        redraws += 1


def client_rng(seed, client_id, round_index):
    return np.random.default_rng([seed, client_id, round_index])


def local_train(model: FissionVAE, global_params: ParamSet, client: ClientState,
                config: FederationConfig, round_index: int) -> ClientResult:
    """Minibatch training of a private copy of the global weights on one client."""
    rng = client_rng(config.seed, client.id, round_index)
    params = copy_params(global_params)
    opt = make_optimizer(config.optimizer, config.lr)
    parts = []
    try:
        for _ in range(config.local_epochs):
            order = rng.permutation(client.n)
            for start in range(0, client.n, config.batch_size):
                batch = client.data[order[start:start + config.batch_size]]
                losses, grads = model.loss_and_grads(params, batch, client.group, rng=rng)
                if not np.isfinite(losses.total):
                    raise NumericalError(f"non-finite loss on client {client.id}")
                params = opt.step(params, grads)
                parts.append(losses)
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise NumericalError(f"non-finite parameter {name} on client {client.id}")
    except NumericalError as exc:
        log.warning("round %d: client %d dropped: %s", round_index, client.id, exc)
        return ClientResult(client.id, client.group, client.n, None, LossBreakdown(), str(exc))
    return ClientResult(client.id, client.group, client.n, params, LossBreakdown.mean_of(parts))


def run_round(model: FissionVAE, global_params: ParamSet, clients: Sequence[ClientState],
              config: FederationConfig, round_index: int, workers: int = 1,
              executor: Optional[ThreadPoolExecutor] = None) -> Tuple[ParamSet, RoundReport]:
    t0 = time.perf_counter()
    ids, redraws = sample_participants(config, round_index)
    by_id = {c.id: c for c in clients}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigError(f"participants {missing} have no client state")
    chosen = [by_id[i] for i in ids]
    snapshot = copy_params(global_params)
    for v in snapshot.values():
        v.setflags(write=False)

    def job(client):
        return local_train(model, snapshot, client, config, round_index)

    if executor is not None:
        results = list(executor.map(job, chosen))
    elif workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, chosen))
    else:
        results = [job(c) for c in chosen]
    results.sort(key=lambda r: r.client_id)

    ok = [r for r in results if r.params is not None]
    excluded = {r.client_id: r.error for r in results if r.params is None}
    if ok:
        new_params = group_aware_aggregate(global_params, [(r.params, r.n, r.group) for r in ok])
        agg = LossBreakdown.mean_of([r.losses for r in ok]).total
    else:
        log.error("round %d: every participant failed; global model unchanged", round_index)
        new_params = copy_params(global_params)
        agg = float("nan")
    report = RoundReport(
        round=round_index,
        participants=ids,
        redraws=redraws,
        client_losses={r.client_id: r.losses.as_dict() for r in ok},
        aggregate_loss=agg,
        excluded=excluded,
        wall_time=time.perf_counter() - t0,
    )
    return new_params, report


def train_federated(model: FissionVAE, params: ParamSet, clients: Sequence[ClientState],
                    config: FederationConfig, workers: int = 1, start_round: int = 1,
                    on_round: Optional[Callable[[ParamSet, RoundReport], None]] = None):
    """Run ``config.rounds`` rounds; returns the final params and all reports."""
    config.validate()
    reports = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(start_round, start_round + config.rounds):
            params, report = run_round(model, params, clients, config, r, executor=pool)
            reports.append(report)
            if on_round is not None:
                on_round(params, report)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, reports
