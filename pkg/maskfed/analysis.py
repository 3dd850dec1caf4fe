import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.stats import binom

from maskfed.federation import UpdateTelemetry, worker_threads
from maskfed.models.masks import MaskKind, MaskPolicy
from maskfed.models.vit import POSITIONAL_EMBEDDING
from maskfed.numerics import RandomStream
from maskfed.utils.errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

PMF_HEADER = ["f", "analytic_p", "empirical_p", "policy", "R", "m", "n"]
SUMMARY_HEADER = [
    "policy",
    "R",
    "m",
    "n",
    "trials",
    "tv_distance",
    "mean_analytic",
    "mean_empirical",
]
PMF_NOTE = "analytic_p = C(m,f) (1-R^n)^f (R^n)^(m-f)"
TRIALS_PER_CHUNK = 10000
NORMALIZATION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class UpdateCountPmf:
    """Probability that one scalar parameter is updated in exactly f of m
    epochs, for f = 0..m."""

    epochs: int
    clients: int
    zero_prob: float
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        p = self.probabilities
        if p.shape != (self.epochs + 1,):
            raise ContractViolation(
                f"Expected {self.epochs + 1} probabilities, got {p.shape}"
            )
        if np.any(p < 0) or np.any(p > 1):
            raise ContractViolation("Probabilities must lie in [0, 1]")
        if abs(p.sum() - 1.0) > NORMALIZATION_TOLERANCE:
            raise ContractViolation(f"Probabilities sum to {p.sum()!r}")

    @property
    def mean(self) -> float:
        return pmf_mean(self.probabilities)

    @property
    def variance(self) -> float:
        return pmf_variance(self.probabilities)

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probabilities)


@dataclass(frozen=True)
class SimulatedUpdateCounts:
    """Monte Carlo update counts. ``parameters`` covers every parameter
    except E_pos, which is reported on its own in ``positional``."""

    parameters: UpdateCountPmf
    positional: UpdateCountPmf
    trials: int


@dataclass(frozen=True)
class UpdateCountHistogram:
    """Normalized histograms of how often each scalar parameter of a run
    changed, counted in epochs and in aggregation rounds."""

    epochs: int
    steps: int
    epoch_frequencies: np.ndarray
    step_frequencies: np.ndarray
    per_parameter: dict[str, np.ndarray]

    def as_pmf(self, clients: int, zero_prob: float) -> UpdateCountPmf:
        return UpdateCountPmf(
            self.epochs, clients, zero_prob, self.epoch_frequencies
        )


def _check_args(m: int, n: int, zero_prob: float) -> None:
    if m < 0:
        raise ContractViolation(f"Epoch count must be >= 0, got {m}")
    if n < 1:
        raise ContractViolation(f"Client count must be >= 1, got {n}")
    if not 0.0 <= zero_prob <= 1.0:
        raise ContractViolation(f"Zero probability {zero_prob} not in [0, 1]")


def update_count_pmf(m: int, n: int, zero_prob: float) -> UpdateCountPmf:
    """Binomial(m, 1 - R**n): a parameter moves in an epoch iff at least
    one of the n clients kept it, independently per epoch."""
    _check_args(m, n, zero_prob)
    update_prob = 1.0 - zero_prob**n
    probabilities = binom.pmf(np.arange(m + 1), m, update_prob)
    return UpdateCountPmf(m, n, zero_prob, np.asarray(probabilities, float))


def locked_update_count_pmf(
    m: int, n: int, zero_prob: float
) -> UpdateCountPmf:
    """Locked masks: the parameter moves every epoch or never."""
    _check_args(m, n, zero_prob)
    probabilities = np.zeros(m + 1)
    never = zero_prob**n
    probabilities[0] += never
    probabilities[m] += 1.0 - never
    return UpdateCountPmf(m, n, zero_prob, probabilities)


def policy_update_count_pmf(
    policy: MaskPolicy, m: int, n: int, name: str = ""
) -> UpdateCountPmf:
    """Closed form for one parameter tensor under any policy."""
    zero_prob = policy.zero_prob_for(name)
    if policy.kind == MaskKind.LOCKED:
        return locked_update_count_pmf(m, n, zero_prob)
    return update_count_pmf(m, n, zero_prob)


def pmf_mean(probabilities: np.ndarray) -> float:
    return float(np.arange(len(probabilities)) @ probabilities)


def pmf_variance(probabilities: np.ndarray) -> float:
    f = np.arange(len(probabilities))
    mean = f @ probabilities
    return float(((f - mean) ** 2) @ probabilities)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    if p.shape != q.shape:
        raise ContractViolation(
            f"Cannot compare distributions of shape {p.shape} and {q.shape}"
        )
    return float(0.5 * np.abs(p - q).sum())


def _count_chunk(
    stream: RandomStream,
    locked: bool,
    m: int,
    n: int,
    zero_prob: float,
    size: int,
) -> np.ndarray:
    if locked:
        kept = (stream.random((size, n)) >= zero_prob).any(axis=1)
        counts = np.where(kept, m, 0)
    else:
        kept_each = stream.random((size, m, n)) >= zero_prob
        counts = kept_each.any(axis=2).sum(axis=1)
    return np.bincount(counts, minlength=m + 1)


def _simulate(
    stream: RandomStream,
    locked: bool,
    m: int,
    n: int,
    zero_prob: float,
    trials: int,
    threads: int,
) -> UpdateCountPmf:
    sizes = [
        min(TRIALS_PER_CHUNK, trials - start)
        for start in range(0, trials, TRIALS_PER_CHUNK)
    ]
    with ThreadPoolExecutor(max_workers=worker_threads(threads)) as pool:
        jobs = [
            pool.submit(
                _count_chunk,
                stream.derive("chunk", i),
                locked,
                m,
                n,
                zero_prob,
                size,
            )
            for i, size in enumerate(sizes)
        ]
        counts = np.sum([job.result() for job in jobs], axis=0)
    assert counts.sum() == trials, "every trial lands in one bin"
    return UpdateCountPmf(m, n, zero_prob, counts / trials)


def simulate_update_counts(
    policy: MaskPolicy,
    m: int,
    n: int,
    trials: int,
    seed: int,
    threads: int = 1,
) -> SimulatedUpdateCounts:
    """Monte Carlo estimate of the update-count distribution.

    Each trial follows one scalar parameter through m epochs of n clients:
    per-epoch masks draw n fresh bits every epoch, locked masks draw them
    once. The parameter counts as updated in an epoch when any bit is 1.
    Trials are split into chunks with their own derived streams, so the
    result does not depend on the thread count.
    """
    if trials < 1:
        raise ContractViolation(f"Need at least one trial, got {trials}")
    _check_args(m, n, policy.zero_prob)
    locked = policy.kind == MaskKind.LOCKED
    root = RandomStream(seed).derive("update-counts", policy.label)
    parameters = _simulate(
        root.derive("parameters"),
        locked,
        m,
        n,
        policy.zero_prob if policy.is_random else 0.0,
        trials,
        threads,
    )
    positional = _simulate(
        root.derive("positional"),
        locked,
        m,
        n,
        policy.zero_prob_for(POSITIONAL_EMBEDDING),
        trials,
        threads,
    )
    logger.debug(
        f"Simulated {trials} trials of {policy.label} (m={m}, n={n}): "
        f"mean {parameters.mean:.4f}"
    )
    return SimulatedUpdateCounts(parameters, positional, trials)


def layout_update_count_pmf(
    policy: MaskPolicy,
    shapes: Mapping[str, tuple[int, int]],
    m: int,
    n: int,
) -> UpdateCountPmf:
    """Update-count distribution of a parameter drawn uniformly from the
    whole model: each tensor's closed form weighted by its entry count."""
    policy.validate_layers(shapes)
    total = sum(rows * cols for rows, cols in shapes.values())
    if total == 0:
        raise ContractViolation("Layout has no parameters")
    mixture = np.zeros(m + 1)
    for name, (rows, cols) in shapes.items():
        pmf = policy_update_count_pmf(policy, m, n, name)
        mixture += (rows * cols) * pmf.probabilities
    return UpdateCountPmf(m, n, policy.zero_prob, mixture / total)


def empirical_update_counts_from_run(
    telemetry: Optional[UpdateTelemetry],
) -> UpdateCountHistogram:
    """Histograms of the update counts a federation run recorded."""
    if telemetry is None:
        raise ConfigError(
            "telemetry: update counts need a run with telemetry enabled"
        )
    steps = telemetry.epochs * telemetry.steps_per_epoch
    epoch_counts = np.concatenate(
        [c.ravel() for c in telemetry.epoch_counts.values()]
    )
    step_counts = np.concatenate(
        [c.ravel() for c in telemetry.step_counts.values()]
    )
    per_parameter = {
        name: np.bincount(c.ravel(), minlength=telemetry.epochs + 1)
        for name, c in telemetry.epoch_counts.items()
    }
    return UpdateCountHistogram(
        epochs=telemetry.epochs,
        steps=steps,
        epoch_frequencies=np.bincount(
            epoch_counts, minlength=telemetry.epochs + 1
        )
        / epoch_counts.size,
        step_frequencies=np.bincount(step_counts, minlength=steps + 1)
        / step_counts.size,
        per_parameter=per_parameter,
    )


def pmf_rows(
    policy: MaskPolicy, analytic: UpdateCountPmf, empirical: UpdateCountPmf
) -> list[list[object]]:
    if analytic.epochs != empirical.epochs:
        raise ContractViolation("Analytic and empirical supports differ")
    return [
        [
            f,
            float(analytic.probabilities[f]),
            float(empirical.probabilities[f]),
            policy.kind.value,
            policy.zero_prob,
            analytic.epochs,
            analytic.clients,
        ]
        for f in range(analytic.epochs + 1)
    ]


def summary_row(
    policy: MaskPolicy,
    analytic: UpdateCountPmf,
    empirical: UpdateCountPmf,
    trials: int,
) -> list[object]:
    return [
        policy.kind.value,
        policy.zero_prob,
        analytic.epochs,
        analytic.clients,
        trials,
        total_variation(analytic.probabilities, empirical.probabilities),
        analytic.mean,
        empirical.mean,
    ]
