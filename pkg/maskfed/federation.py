import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from maskfed.models.masks import (
    BinaryMask,
    MaskKind,
    MaskPolicy,
    apply_mask,
    generate_mask,
)
from maskfed.models.vit import (
    GradSet,
    ModelConfig,
    ParamSet,
    init_params,
    loss_and_grad,
    param_shapes,
    predict,
)
from maskfed.numerics import RandomStream
from maskfed.utils.datasets import LabeledImage
from maskfed.utils.errors import (
    ConfigError,
    ContractViolation,
    TrainingDiverged,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "MASKFED_THREADS"
DEFAULT_LEARNING_RATE = 0.0001
DEFAULT_NUM_CLIENTS = 5
METRICS_HEADER = [
    "epoch",
    "step",
    "policy",
    "R",
    "mean_train_loss",
    "test_accuracy",
]


@dataclass(frozen=True)
class FederationConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy.no_mask)
    num_clients: int = DEFAULT_NUM_CLIENTS
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = DEFAULT_LEARNING_RATE
    root_seed: int = 0
    partition: str = "iid-shuffle"
    telemetry: bool = False
    threads: int = 1

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("federation.num_clients: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("federation.epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("federation.batch_size: must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("federation.learning_rate: must be > 0")
        if self.partition != "iid-shuffle":
            raise ConfigError(
                f"federation.partition: unknown strategy '{self.partition}'"
            )
        if self.threads < 1:
            raise ConfigError("federation.threads: must be >= 1")


@dataclass(frozen=True)
class ClientUpdate:
    """Masked gradients of one client for one round, with the mask used."""

    client: int
    epoch: int
    step: int
    masked_grads: GradSet
    mask: BinaryMask
    loss: float


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    step: int
    mean_train_loss: float
    test_accuracy: float

    def as_row(self, policy: MaskPolicy) -> list[object]:
        return [
            self.epoch,
            self.step,
            policy.kind.value,
            policy.zero_prob,
            self.mean_train_loss,
            self.test_accuracy,
        ]


@dataclass
class UpdateTelemetry:
    """Per-entry counts of how often each global parameter changed.

    step_counts counts aggregation rounds with at least one contributing
    client; epoch_counts counts epochs with at least one such round.
    """

    steps_per_epoch: int
    epochs: int = 0
    step_counts: dict[str, np.ndarray] = field(default_factory=dict)
    epoch_counts: dict[str, np.ndarray] = field(default_factory=dict)
    _touched: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_shapes(
        shapes: dict[str, tuple[int, int]], steps_per_epoch: int
    ) -> "UpdateTelemetry":
        def zeros(dtype: type) -> dict[str, np.ndarray]:
            return {n: np.zeros(s, dtype=dtype) for n, s in shapes.items()}

        return UpdateTelemetry(
            steps_per_epoch=steps_per_epoch,
            step_counts=zeros(np.int64),
            epoch_counts=zeros(np.int64),
            _touched=zeros(bool),
        )

    def record_step(self, contributors: dict[str, np.ndarray]) -> None:
        for name, count in contributors.items():
            updated = count > 0
            self.step_counts[name] += updated
            self._touched[name] |= updated

    def close_epoch(self) -> None:
        self.epochs += 1
        for name, touched in self._touched.items():
            self.epoch_counts[name] += touched
            touched[...] = False


@dataclass
class ServerState:
    params: ParamSet
    step: int = 0
    history: list[EpochMetrics] = field(default_factory=list)
    telemetry: Optional[UpdateTelemetry] = None


def worker_threads(requested: int) -> int:
    """Worker pool size, capped by the MASKFED_THREADS variable."""
    cap = os.environ.get(THREADS_ENV)
    if cap is None:
        return requested
    try:
        return max(1, min(requested, int(cap)))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: '{cap}' is not an integer")


def partition_dataset(
    dataset: Sequence[LabeledImage], num_clients: int, seed: int
) -> list[list[LabeledImage]]:
    """Seeded shuffle dealt round-robin into near-equal disjoint shards."""
    if num_clients < 1:
        raise ConfigError("federation.num_clients: must be >= 1")
    if len(dataset) < num_clients:
        raise ConfigError(
            f"Dataset of {len(dataset)} items cannot feed {num_clients} "
            "clients"
        )
    order = RandomStream(seed).derive("partition").permutation(len(dataset))
    return [
        [dataset[i] for i in order[n::num_clients]]
        for n in range(num_clients)
    ]


def client_train_step(
    global_params: ParamSet,
    batch: Sequence[LabeledImage],
    policy: MaskPolicy,
    client: int,
    epoch: int,
    seed: int,
    config: ModelConfig,
    step: int = 0,
) -> ClientUpdate:
    """One client round: gradient at the global parameters, masked with the
    client's mask for this epoch."""
    loss, grads = loss_and_grad(batch, global_params, config)
    mask = generate_mask(policy, param_shapes(config), client, epoch, seed)
    logger.debug(
        f"client {client} epoch {epoch} step {step}: loss {loss:.6f}, "
        f"{mask.count_zeros()}/{mask.size()} entries masked"
    )
    return ClientUpdate(
        client=client,
        epoch=epoch,
        step=step,
        masked_grads=apply_mask(grads, mask),
        mask=mask,
        loss=loss,
    )


def _canonical(
    server: ServerState, updates: Sequence[ClientUpdate]
) -> list[ClientUpdate]:
    if not updates:
        raise ContractViolation("Cannot aggregate an empty round")
    rounds = {(u.epoch, u.step) for u in updates}
    if len(rounds) > 1:
        raise ContractViolation(
            f"Updates from different rounds in one aggregation: "
            f"{sorted(rounds)}"
        )
    clients = [u.client for u in updates]
    if len(set(clients)) != len(clients):
        raise ContractViolation(f"Duplicate client ids in round: {clients}")
    for u in updates:
        for name, w in server.params.items():
            grad = u.masked_grads.get(name)
            if grad is None or grad.shape != w.shape:
                raise ContractViolation(
                    f"Client {u.client} sent a gradient for {name} that does "
                    f"not match the global shape {w.shape}"
                )
    return sorted(updates, key=lambda u: u.client)


def aggregate_plain(
    server: ServerState, updates: Sequence[ClientUpdate], lr: float
) -> ServerState:
    """FedSGD: w <- w - lr * mean of the client gradients."""
    ordered = _canonical(server, updates)
    for u in ordered:
        if u.mask.count_zeros():
            raise ContractViolation(
                f"Client {u.client} sent masked gradients to plain "
                "aggregation"
            )
    n = len(ordered)
    params: ParamSet = {}
    contributors: dict[str, np.ndarray] = {}
    for name, w in server.params.items():
        total = np.zeros_like(w)
        for u in ordered:
            total += u.masked_grads[name]
        params[name] = w - lr * (total / n)
        contributors[name] = np.full(w.shape, n, dtype=np.int64)
    if server.telemetry is not None:
        server.telemetry.record_step(contributors)
    return replace(server, params=params, step=server.step + 1)


def aggregate_masked(
    server: ServerState, updates: Sequence[ClientUpdate], lr: float
) -> ServerState:
    """Mask-aware FedSGD.

    Each entry is moved by the mean over the clients whose mask bit was 1;
    entries no client contributed to stay exactly as they were.
    """
    ordered = _canonical(server, updates)
    params: ParamSet = {}
    contributors: dict[str, np.ndarray] = {}
    for name, w in server.params.items():
        total = np.zeros_like(w)
        count = np.zeros(w.shape, dtype=np.int64)
        for u in ordered:
            bits = u.mask.bits[name]
            if bits.shape != w.shape:
                raise ContractViolation(
                    f"Client {u.client} mask for {name} has shape "
                    f"{bits.shape}, expected {w.shape}"
                )
            total += u.masked_grads[name]
            count += bits
        mean = total / np.maximum(count, 1)
        params[name] = np.where(count > 0, w - lr * mean, w)
        contributors[name] = count
    if server.telemetry is not None:
        server.telemetry.record_step(contributors)
    return replace(server, params=params, step=server.step + 1)


def evaluate(
    params: ParamSet, testset: Sequence[LabeledImage], config: ModelConfig
) -> float:
    if not testset:
        logger.warning("Empty test set, accuracy is undefined")
        return math.nan
    correct = sum(
        predict(item.image, params, config) == item.label for item in testset
    )
    return correct / len(testset)


def steps_per_epoch(
    shards: Sequence[Sequence[object]], batch_size: int
) -> int:
    return math.ceil(max(len(s) for s in shards) / batch_size)


def run_federation(
    fed_config: FederationConfig,
    dataset: Sequence[LabeledImage],
    testset: Sequence[LabeledImage],
    initial_params: Optional[ParamSet] = None,
) -> tuple[ServerState, list[list[object]]]:
    """Run FedSGD with masked clients for the configured number of epochs.

    Within an epoch every client walks its reshuffled shard in batches, one
    batch per round; a client whose shard is exhausted sits the round out.
    Test accuracy is measured at the end of every epoch.
    """
    model, policy = fed_config.model, fed_config.mask_policy
    seed = fed_config.root_seed
    shapes = param_shapes(model)
    policy.validate_layers(shapes)
    params = (
        init_params(model, seed)
        if initial_params is None
        else dict(initial_params)
    )
    shards = partition_dataset(dataset, fed_config.num_clients, seed)
    rounds = steps_per_epoch(shards, fed_config.batch_size)
    server = ServerState(
        params=params,
        telemetry=(
            UpdateTelemetry.for_shapes(shapes, rounds)
            if fed_config.telemetry
            else None
        ),
    )
    aggregate = (
        aggregate_plain if policy.kind == MaskKind.NONE else aggregate_masked
    )
    bs = fed_config.batch_size
    logger.info(
        f"Federation {policy.label}: {fed_config.num_clients} clients, "
        f"{fed_config.epochs} epochs x {rounds} rounds, lr "
        f"{fed_config.learning_rate}"
    )

    threads = worker_threads(fed_config.threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for epoch in range(fed_config.epochs):
            orders = [
                RandomStream(seed)
                .derive("shuffle", n, epoch)
                .permutation(len(shard))
                for n, shard in enumerate(shards)
            ]
            losses: list[float] = []
            for step in range(rounds):
                jobs = []
                for n, shard in enumerate(shards):
                    picks = orders[n][step * bs : (step + 1) * bs]
                    if not len(picks):
                        logger.debug(f"client {n} has no batch at {step}")
                        continue
                    jobs.append(
                        pool.submit(
                            client_train_step,
                            server.params,
                            [shard[i] for i in picks],
                            policy,
                            n,
                            epoch,
                            seed,
                            model,
                            step,
                        )
                    )
                updates = [job.result() for job in jobs]
                for u in updates:
                    if not math.isfinite(u.loss):
                        raise TrainingDiverged(epoch + 1, step, u.loss)
                losses.extend(u.loss for u in updates)
                server = aggregate(server, updates, fed_config.learning_rate)
            if server.telemetry is not None:
                server.telemetry.close_epoch()
            metrics = EpochMetrics(
                epoch=epoch + 1,
                step=server.step,
                mean_train_loss=float(np.mean(losses)),
                test_accuracy=evaluate(server.params, testset, model),
            )
            server.history.append(metrics)
            logger.info(
                f"{policy.label} epoch {metrics.epoch}: train loss "
                f"{metrics.mean_train_loss:.4f}, test accuracy "
                f"{metrics.test_accuracy:.4f}"
            )

    return server, [m.as_row(policy) for m in server.history]
