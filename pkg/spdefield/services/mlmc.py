"""Monte Carlo and multilevel Monte Carlo estimation of E[Q].

Levels run fine (0) to coarse (L).  The level-l correction is
Y_l = Q_l - Q_{l+1} computed from one shared noise vector, and Y_L = Q_L.

Samples are evaluated in a thread pool and gathered in sample-index order;
statistics are reduced by pairwise merges over that order, so every number
reported here is independent of the worker count.
"""

import asyncio
import logging
import math
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol, Sequence, TypeVar

import numpy as np

from spdefield.errors import (
    AllocationDivergenceError,
    InsufficientSamplesError,
    InvalidArgumentError,
    SolverFailure,
)
from spdefield.services.rng import StreamKey

log = logging.getLogger(__name__)

COST_MODELS = ("dofs", "measured")

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class RunningStats:
    """Count, mean and sum of squared deviations (M2) of a stream of scalars."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.count == 0:
            return RunningStats(self.count, self.mean, self.m2)
        if self.count == 0:
            return RunningStats(other.count, other.mean, other.m2)
        count = self.count + other.count
        delta = other.mean - self.mean
        weight = other.count / count
        return RunningStats(
            count=count,
            mean=self.mean + delta * weight,
            m2=self.m2 + other.m2 + delta**2 * self.count * weight,
        )

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "RunningStats":
        """Pairwise (tree) reduction over `values` in order."""
        n = len(values)
        if n == 0:
            return cls()
        if n == 1:
            return cls(1, float(values[0]), 0.0)
        pivot = n // 2
        return cls.from_values(values[:pivot]).merge(cls.from_values(values[pivot:]))

    @property
    def variance(self) -> float:
        """Unbiased sample variance; needs two samples."""
        if self.count < 2:
            raise InsufficientSamplesError(f"variance needs at least 2 samples, have {self.count}")
        return max(self.m2 / (self.count - 1), 0.0)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.count)


@dataclass
class QoiSample:
    q_fine: float
    q_coarse: float | None
    cost_sec: float

    @property
    def y(self) -> float:
        return self.q_fine if self.q_coarse is None else self.q_fine - self.q_coarse


@dataclass
class SampleResult:
    index: int
    success: bool
    sample: QoiSample | None = None
    error: str | None = None


class QoiPipeline(Protocol):
    """Maps a keyed noise stream at a level to Q on that level (and the next coarser one)."""

    @property
    def num_levels(self) -> int: ...

    def dofs(self, level: int) -> int: ...

    def evaluate(self, level: int, key: StreamKey, coupled: bool) -> QoiSample: ...


@dataclass
class LevelStats:
    level: int
    dofs: int
    coupled: bool
    y: RunningStats = field(default_factory=RunningStats)
    q: RunningStats = field(default_factory=RunningStats)
    seconds: RunningStats = field(default_factory=RunningStats)
    work_units: float = 0.0
    failures: int = 0
    next_index: int = 0
    records: list[tuple[int, float, float | None]] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.y.count

    def cost(self, model: str) -> float:
        """Cost per sample: work units from dofs, or mean wall seconds."""
        if model == "dofs":
            return self.work_units
        if model == "measured":
            return max(self.seconds.mean, 1e-12)
        raise InvalidArgumentError(f"unknown cost model {model!r}")


@dataclass(frozen=True)
class MlmcConfig:
    target_mse: float
    split: float = 0.5
    pilot_samples: int = 20
    min_samples: int = 2
    max_samples_per_level: int = 1_000_000
    max_rounds: int = 20
    failure_budget: int = 0
    cost_model: str = "dofs"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.target_mse > 0:
            raise InvalidArgumentError(f"target MSE must be positive, got {self.target_mse}")
        if not 0 < self.split < 1:
            raise InvalidArgumentError(f"MSE split must lie in (0, 1), got {self.split}")
        if self.pilot_samples < 2:
            raise InvalidArgumentError("pilot needs at least 2 samples per level")
        if self.min_samples < 2:
            raise InvalidArgumentError("sample floor must be at least 2")
        if self.cost_model not in COST_MODELS:
            raise InvalidArgumentError(f"cost model must be one of {COST_MODELS}, got {self.cost_model!r}")
        if self.threads < 1:
            raise InvalidArgumentError(f"threads must be >= 1, got {self.threads}")

    @property
    def epsilon(self) -> float:
        return math.sqrt(self.target_mse)


@dataclass
class McEstimate:
    level: int
    stats: RunningStats
    cost_sec: float

    @property
    def mean(self) -> float:
        return self.stats.mean

    @property
    def variance(self) -> float:
        return self.stats.variance


@dataclass
class MlmcResult:
    estimate: float
    levels: list[LevelStats]
    variance_bound: float
    total_cost: float
    total_seconds: float
    bias_proxy: float
    target_mse: float
    split: float
    cost_model: str
    rounds: int

    @property
    def variance_ok(self) -> bool:
        return self.variance_bound <= self.split * self.target_mse

    @property
    def bias_ok(self) -> bool:
        return self.bias_proxy**2 <= (1.0 - self.split) * self.target_mse

    @property
    def total_samples(self) -> int:
        return sum(s.n for s in self.levels)


def _evaluate_one(pipeline: QoiPipeline, level: int, key: StreamKey, coupled: bool) -> SampleResult:
    try:
        sample = pipeline.evaluate(level, key, coupled)
    except SolverFailure as e:
        return SampleResult(index=key.sample, success=False, error=str(e.at_level(level)))
    return SampleResult(index=key.sample, success=True, sample=sample)


async def gather_in_pool(fn: Callable[[T], R], items: Iterable[T], executor: Executor | None = None) -> list[R]:
    """fn over items in the executor; results in the order of `items`."""
    loop = asyncio.get_running_loop()
    futures = [loop.run_in_executor(executor, fn, item) for item in items]
    return list(await asyncio.gather(*futures))


async def evaluate_samples(
    pipeline: QoiPipeline,
    level: int,
    indices: Sequence[int],
    seed: int,
    coupled: bool,
    executor: Executor | None = None,
) -> list[SampleResult]:
    """Evaluate samples concurrently; results come back in the order of `indices`."""
    return await gather_in_pool(
        lambda i: _evaluate_one(pipeline, level, StreamKey(seed, i, level), coupled), indices, executor
    )


def _collect(results: list[SampleResult], stats: LevelStats | None, budget: int) -> list[SampleResult]:
    good = []
    failures = 0 if stats is None else stats.failures
    for r in results:
        if r.success:
            good.append(r)
            continue
        failures += 1
        if failures > budget:
            raise SolverFailure(f"sample {r.index} failed past the failure budget ({budget}): {r.error}")
        log.warning("sample %d failed, skipped (%d/%d): %s", r.index, failures, budget, r.error)
    if stats is not None:
        stats.failures = failures
    return good


def _work_units(pipeline: QoiPipeline, level: int, coupled: bool) -> float:
    units = float(pipeline.dofs(level))
    if coupled:
        units += pipeline.dofs(level + 1)
    return units


async def mc_estimate(
    level: int,
    n: int,
    pipeline: QoiPipeline,
    seed: int,
    executor: Executor | None = None,
    failure_budget: int = 0,
) -> McEstimate:
    """Plain Monte Carlo estimate of E[Q_level] from n independent samples."""
    if n < 2:
        raise InsufficientSamplesError(f"Monte Carlo estimate needs N >= 2, got {n}")
    start = time.perf_counter()
    results = await evaluate_samples(pipeline, level, range(n), seed, coupled=False, executor=executor)
    good = [r.sample for r in _collect(results, None, failure_budget)]
    stats = RunningStats.from_values([s.q_fine for s in good])
    if stats.count < 2:
        raise InsufficientSamplesError(f"only {stats.count} samples succeeded at level {level}")
    elapsed = time.perf_counter() - start
    log.info("MC level %d: N=%d mean=%.6g var=%.3e", level, stats.count, stats.mean, stats.variance)
    return McEstimate(level=level, stats=stats, cost_sec=elapsed / n)


async def estimate_Y(
    stats: LevelStats,
    n_new: int,
    pipeline: QoiPipeline,
    seed: int,
    executor: Executor | None = None,
    failure_budget: int = 0,
) -> LevelStats:
    """Add n_new fresh samples of Y_level to `stats`; indices continue where the last batch stopped."""
    if n_new <= 0:
        return stats
    indices = range(stats.next_index, stats.next_index + n_new)
    results = await evaluate_samples(pipeline, stats.level, indices, seed, stats.coupled, executor)
    stats.next_index += n_new
    kept = _collect(results, stats, failure_budget)
    stats.records.extend((r.index, r.sample.q_fine, r.sample.q_coarse) for r in kept)
    good = [r.sample for r in kept]
    stats.y = stats.y.merge(RunningStats.from_values([s.y for s in good]))
    stats.q = stats.q.merge(RunningStats.from_values([s.q_fine for s in good]))
    stats.seconds = stats.seconds.merge(RunningStats.from_values([s.cost_sec for s in good]))
    log.debug("level %d: +%d samples, N=%d", stats.level, len(good), stats.n)
    return stats


def allocate_samples(
    variances: Sequence[float],
    costs: Sequence[float],
    target_mse: float,
    split: float = 0.5,
    min_samples: int = 2,
) -> list[int]:
    """N_l = ceil(sqrt(V_l / C_l) * sum_j sqrt(V_j C_j) / (split * eps^2)), floored at min_samples."""
    V = np.asarray(variances, dtype=float)
    C = np.asarray(costs, dtype=float)
    if V.shape != C.shape:
        raise InvalidArgumentError("need one variance and one cost per level")
    if np.any(V < 0):
        raise InvalidArgumentError("variances must be non-negative")
    if np.any(C <= 0):
        raise InvalidArgumentError("costs must be positive")
    if not target_mse > 0 or not 0 < split < 1:
        raise InvalidArgumentError("target MSE must be positive and split in (0, 1)")
    total = float(np.sum(np.sqrt(V * C)))
    raw = np.sqrt(V / C) * total / (split * target_mse)
    return [max(min_samples, math.ceil(x)) for x in raw]


def _new_levels(pipeline: QoiPipeline) -> list[LevelStats]:
    L = pipeline.num_levels - 1
    levels = []
    for level in range(pipeline.num_levels):
        coupled = level < L
        levels.append(
            LevelStats(
                level=level,
                dofs=pipeline.dofs(level),
                coupled=coupled,
                work_units=_work_units(pipeline, level, coupled),
            )
        )
    return levels


def _variances(levels: list[LevelStats]) -> list[float]:
    return [s.y.variance for s in levels]


async def _run_levels(
    config: MlmcConfig,
    pipeline: QoiPipeline,
    levels: list[LevelStats],
    extra: Sequence[int],
    executor: Executor,
) -> None:
    for stats, n_new in zip(levels, extra):
        await estimate_Y(stats, n_new, pipeline, config.seed, executor, config.failure_budget)


async def mlmc_run(config: MlmcConfig, pipeline: QoiPipeline) -> MlmcResult:
    """Pilot, allocate, top up until sum V_l / N_l <= split * eps^2."""
    if pipeline.num_levels < 2:
        raise InvalidArgumentError("MLMC needs a hierarchy with at least 2 levels")
    start = time.perf_counter()
    levels = _new_levels(pipeline)
    log.info(
        "MLMC: %d levels, eps^2=%.3e, pilot N=%d, cost model %s",
        len(levels), config.target_mse, config.pilot_samples, config.cost_model,
    )

    rounds = 0
    with ThreadPoolExecutor(max_workers=config.threads) as executor:
        await _run_levels(config, pipeline, levels, [config.pilot_samples] * len(levels), executor)
        while True:
            targets = allocate_samples(
                _variances(levels),
                [s.cost(config.cost_model) for s in levels],
                config.target_mse, config.split, config.min_samples,
            )
            if max(targets) > config.max_samples_per_level:
                raise AllocationDivergenceError(
                    f"allocation asks for {targets} samples, cap is {config.max_samples_per_level} per level; "
                    f"variances {[f'{v:.3e}' for v in _variances(levels)]}"
                )
            extra = [max(0, t - s.n) for t, s in zip(targets, levels)]
            if not any(extra):
                break
            rounds += 1
            if rounds > config.max_rounds:
                raise AllocationDivergenceError(
                    f"allocation still growing after {config.max_rounds} rounds: targets {targets}"
                )
            log.info("round %d: topping up %s", rounds, extra)
            await _run_levels(config, pipeline, levels, extra, executor)

    variance_bound = sum(v / s.n for v, s in zip(_variances(levels), levels))
    result = MlmcResult(
        estimate=sum(s.y.mean for s in levels),
        levels=levels,
        variance_bound=variance_bound,
        total_cost=sum(s.n * s.cost(config.cost_model) for s in levels),
        total_seconds=time.perf_counter() - start,
        bias_proxy=abs(levels[0].y.mean),
        target_mse=config.target_mse,
        split=config.split,
        cost_model=config.cost_model,
        rounds=rounds,
    )
    log.info(
        "MLMC done: E[Q]=%.6g, variance bound %.3e, N=%s",
        result.estimate, variance_bound, [s.n for s in levels],
    )
    if not result.bias_ok:
        log.warning(
            "bias proxy |E[Y_0]|=%.3e exceeds the bias budget sqrt(%.3e)",
            result.bias_proxy, (1.0 - config.split) * config.target_mse,
        )
    return result


async def mlmc_sweep(config: MlmcConfig, pipeline: QoiPipeline, target_mses: Sequence[float]) -> list[MlmcResult]:
    """One independent MLMC run per target MSE, same seed and pipeline."""
    results = []
    for mse in target_mses:
        run_config = replace(config, target_mse=mse)
        results.append(await mlmc_run(run_config, pipeline))
    return results
