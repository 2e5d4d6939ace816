"""Server loop, client local training and sample-weighted aggregation."""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedssd.data import LabeledDataset
from fedssd.distill import (
    CompositeLossSpec,
    CredibilityMatrix,
    LossMode,
    Teacher,
    backward,
    class_weights,
    credibility_matrix,
)
from fedssd.errors import FedSSDError, ShapeError
from fedssd.metrics import RoundMetrics, RoundRecord, evaluate
from fedssd.nn import Batch, ModelParams, OptimizerState, init_mlp, sgd_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSSD1"


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    participation: float = 1.0
    rounds: int = 100
    local_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    loss: CompositeLossSpec = field(default_factory=CompositeLossSpec)
    hidden: tuple[int, ...] = (64, 32)
    init_seed: int = 0
    sampling_seed: int = 1
    training_seed: int = 2
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def clients_per_round(self) -> int:
        # guard against products such as 0.7 * 10 = 7.000000000000001
        return max(1, math.ceil(self.participation * self.n_clients - 1e-9))


def sample_clients(n_clients: int, participation: float, seed: int, round: int) -> tuple[int, ...]:
    """``ceil(C*N)`` distinct client ids, sorted; a pure function of ``(seed, round)``."""
    m = max(1, math.ceil(participation * n_clients - 1e-9))
    if m >= n_clients:
        return tuple(range(n_clients))
    rng = np.random.default_rng([seed, round])
    return tuple(sorted(int(i) for i in rng.choice(n_clients, m, replace=False)))


def client_seed(training_seed: int, round: int, client: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([training_seed, round, client])


@dataclass
class ClientResult:
    client: int
    params: ModelParams
    n_samples: int
    loss_ce: float
    loss_distill: float


def client_update(
    global_params: ModelParams,
    cred: CredibilityMatrix | None,
    local_data: LabeledDataset,
    config: FederationConfig,
    seed,
    client: int = 0,
) -> ClientResult:
    """Train a copy of the global model on one client's data.

    Minibatches come from a fresh permutation each epoch; momentum starts
    from zero. ``global_params`` doubles as the frozen teacher.
    """
    if len(local_data) == 0:
        raise FedSSDError(f"client {client} has no data")
    spec = config.loss
    m_class = None
    if spec.mode is LossMode.SSD:
        if cred is None:
            raise ValueError("SSD mode needs a credibility matrix")
        m_class = class_weights(cred)
    teacher = Teacher(global_params, m_class)
    rng = np.random.default_rng(seed)
    params = global_params
    state = OptimizerState.fresh(params, config.learning_rate, config.momentum)
    x, y = local_data.features, local_data.labels
    n = len(local_data)
    ce_sum = dl_sum = 0.0
    steps = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            losses, grads = backward(params, Batch(x[idx], y[idx]), spec, teacher)
            params, state = sgd_step(params, grads, state)
            ce_sum += losses.ce
            dl_sum += losses.distill
            steps += 1
    steps = max(steps, 1)
    return ClientResult(client, params, n, ce_sum / steps, dl_sum / steps)


def aggregate(models: Sequence[ModelParams], sizes: Sequence[int]) -> ModelParams:
    """Size-weighted mean, summed in the given order.

    Computed as offsets from the first model so identical inputs come back
    unchanged, then clipped to the coordinate range of the inputs to absorb
    rounding.
    """
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(sizes):
        raise ValueError(f"{len(models)} models but {len(sizes)} sizes")
    for m in models[1:]:
        models[0].check_same_shape(m)
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes < 0) or not sizes.sum() > 0:
        raise ValueError("sizes must be non-negative with a positive total")
    weights = sizes / sizes.sum()
    flats = [m.flat() for m in models]
    base = flats[0]
    acc = np.zeros_like(base)
    for w, f in zip(weights, flats):
        acc += w * (f - base)
    stack = np.stack(flats)
    out = np.clip(base + acc, stack.min(axis=0), stack.max(axis=0))
    return models[0].with_flat(out)


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params.flat().tobytes()).hexdigest()


@dataclass(frozen=True)
class FederatedData:
    clients: tuple[LabeledDataset, ...]
    auxiliary: LabeledDataset
    test: LabeledDataset

    @property
    def n_classes(self) -> int:
        return self.test.n_classes


@dataclass
class FederationResult:
    records: list[RoundRecord]
    final: ModelParams
    initial: ModelParams
    round_params: list[ModelParams] = field(default_factory=list)


def run_federation(
    config: FederationConfig,
    data: FederatedData,
    initial: ModelParams | None = None,
    keep_round_params: bool = False,
) -> FederationResult:
    if len(data.clients) != config.n_clients:
        raise ValueError(f"{len(data.clients)} client datasets for n_clients={config.n_clients}")
    if initial is None:
        initial = init_mlp(data.test.dim, data.n_classes, config.hidden, config.init_seed)
    spec = config.loss
    global_params = initial
    start_eval = evaluate(global_params, data.test)
    records: list[RoundRecord] = []
    round_params: list[ModelParams] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for t in range(config.rounds):
            cred = None
            if spec.mode is LossMode.SSD:
                cred = credibility_matrix(global_params, data.auxiliary, round=t)
            selected = sample_clients(config.n_clients, config.participation, config.sampling_seed, t)
            active = [i for i in selected if len(data.clients[i])]
            for i in set(selected) - set(active):
                log.warning("round %d: client %d has no data, skipped", t, i)

            def work(i: int, g=global_params, a=cred, t=t) -> ClientResult:
                try:
                    return client_update(
                        g, a, data.clients[i], config, client_seed(config.training_seed, t, i), i
                    )
                except (FedSSDError, ValueError) as exc:
                    raise FedSSDError(f"round {t}, client {i}: {exc}") from exc

            if pool is not None:
                results = list(pool.map(work, active))
            else:
                results = [work(i) for i in active]
            results.sort(key=lambda r: r.client)

            acc_local = {r.client: evaluate(r.params, data.test).accuracy for r in results}
            if results:
                global_params = aggregate([r.params for r in results], [r.n_samples for r in results])
            post = evaluate(global_params, data.test)
            metrics = RoundMetrics(
                acc_global=post.accuracy,
                acc_global_start=start_eval.accuracy,
                acc_local=acc_local,
                class_accuracy=post.class_accuracy,
                confusion=post.confusion,
                losses={r.client: (r.loss_ce, r.loss_distill) for r in results},
            )
            records.append(RoundRecord(t, selected, cred, params_digest(global_params), metrics))
            if keep_round_params:
                round_params.append(global_params)
            start_eval = post
            log.info(
                "round %d: acc_global=%.4f acc_local=%.4f",
                t, post.accuracy, metrics.acc_local_mean,
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(records, global_params, initial, round_params)


def save_checkpoint(params: ModelParams, path) -> Path:
    """Little-endian: magic ``FSSD1``, layer count, ``(fan_out, fan_in)`` pairs, f64 payload."""
    path = Path(path)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", len(params.layers))
    for fan_out, fan_in in params.shapes:
        out += struct.pack("<II", fan_out, fan_in)
    out += params.flat().astype("<f8").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
    return path


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:5]!r})")
    pos = 5
    (n_layers,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", raw, pos))
        pos += 8
    size = sum(o * i + o for o, i in shapes)
    payload = np.frombuffer(raw, dtype="<f8", offset=pos)
    if payload.size != size:
        raise ShapeError(f"{path}: {payload.size} values, header implies {size}")
    template = ModelParams(tuple((np.zeros((o, i)), np.zeros(o)) for o, i in shapes))
    return template.with_flat(payload.astype(np.float64))


def build_federated_data(
    train: LabeledDataset,
    test: LabeledDataset,
    n_clients: int,
    *,
    strategy: str = "dirichlet",
    parameter: float = 0.5,
    aux_per_class: int = 64,
    partition_seed: int = 0,
    aux_seed: int = 0,
) -> FederatedData:
    """Carve the auxiliary set out of ``train`` and partition the rest."""
    from fedssd.data import partition_dirichlet, partition_iid, partition_quantity, sample_auxiliary

    split = sample_auxiliary(train, aux_per_class, aux_seed)
    pool = train.subset(split.remaining, train.name)
    if strategy == "dirichlet":
        plan = partition_dirichlet(pool, n_clients, parameter, partition_seed)
    elif strategy == "quantity":
        plan = partition_quantity(pool, n_clients, int(parameter), partition_seed)
    elif strategy == "iid":
        plan = partition_iid(pool, n_clients, partition_seed)
    else:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    return FederatedData(tuple(plan.client_datasets(pool)), split.auxiliary, test)
