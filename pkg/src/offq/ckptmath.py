"""Closed-form completion-time math for fault-prone execution with checkpoints.

Model: faults hit a running node as a Poisson process with rate mu (faults
per second of execution). Without checkpoints a fault forces a restart from
scratch; with checkpoints only the current segment is repeated. Checkpoint
cost is deterministic. Detection and restore delays are zero here; the
simulation lab layers those on top.

Monte Carlo estimators use numpy's PCG64 generator, the single PRNG used
across the repo (see README, Reproducibility).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this value of mu*duration the exact expressions lose all precision
# to cancellation, so second-order series expansions take over.
SERIES_THRESHOLD = 1e-12

# The truncated fault mean cancels much earlier (it subtracts two terms that
# agree to O(x^2)), so its series branch starts where closed form and series
# both carry ~1e-12 relative error.
TRUNCATED_MEAN_SERIES_THRESHOLD = 1e-4

# Search cap for optimal_segments when the expected time keeps improving
# (only reachable when checkpoints are free).
MAX_SEGMENTS = 10**6


def _check_rate(mu: float) -> None:
    if not math.isfinite(mu) or mu < 0.0:
        raise ValueError(f"fault rate must be finite and >= 0, got {mu}")


def _check_duration(value: float, name: str) -> None:
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be finite and > 0, got {value}")


def fault_pdf(mu: float, t: float) -> float:
    """Density of the first fault at time t: mu * exp(-mu * t)."""
    _check_rate(mu)
    if t < 0.0:
        raise ValueError(f"t must be >= 0, got {t}")
    return mu * math.exp(-mu * t)


def p_fault_before(mu: float, horizon_s: float) -> float:
    """Probability that at least one fault occurs within horizon_s seconds."""
    _check_rate(mu)
    if horizon_s < 0.0:
        raise ValueError(f"horizon_s must be >= 0, got {horizon_s}")
    # -expm1 keeps precision for small mu*horizon; exact at mu == 0.
    return -math.expm1(-mu * horizon_s)


def expected_fault_time(mu: float, horizon_s: float) -> float:
    """Mean time of a fault given that one occurs before horizon_s.

    Conditional mean of an exponential truncated to [0, horizon_s]. Tends to
    horizon_s / 2 as mu -> 0 (faults become uniform over the window).
    """
    _check_rate(mu)
    _check_duration(horizon_s, "horizon_s")
    x = mu * horizon_s
    if x < TRUNCATED_MEAN_SERIES_THRESHOLD:
        return horizon_s * (0.5 - x / 12.0)
    # Stable rearrangement of (1/mu - h*e^-x - e^-x/mu) / (1 - e^-x).
    growth = math.expm1(x)
    return horizon_s * (growth - x) / (x * growth)


def expected_exec_time(mu: float, work_s: float) -> float:
    """Expected completion time of work_s seconds of work, restart from scratch.

    Every fault throws away all progress, so the mean completion time is
    (exp(mu * work_s) - 1) / mu, which tends to work_s as mu -> 0. Returns
    inf when the exponent overflows a float.
    """
    _check_rate(mu)
    _check_duration(work_s, "work_s")
    x = mu * work_s
    if x < SERIES_THRESHOLD:
        return work_s * (1.0 + x / 2.0 + x * x / 6.0)
    try:
        return math.expm1(x) / mu
    except OverflowError:
        return math.inf


def expected_with_checkpoints(
    mu: float, work_s: float, segments: int, ckpt_cost_s: float
) -> float:
    """Expected completion time with work_s split into equal segments.

    Each of the `segments` pieces restarts independently on faults, and each
    boundary between pieces pays ckpt_cost_s once, so the mean is
    segments * expected_exec_time(mu, work_s / segments)
    + (segments - 1) * ckpt_cost_s.
    """
    if not isinstance(segments, int) or segments < 1:
        raise ValueError(f"segments must be an int >= 1, got {segments!r}")
    if ckpt_cost_s < 0.0:
        raise ValueError(f"ckpt_cost_s must be >= 0, got {ckpt_cost_s}")
    _check_rate(mu)
    _check_duration(work_s, "work_s")
    return segments * expected_exec_time(mu, work_s / segments) + (segments - 1) * ckpt_cost_s


def completion_second_derivative(mu: float, work_s: float, segments: int) -> float:
    """Second derivative of the segmented expected time w.r.t. segment count.

    Equals mu * work_s**2 / segments**3 * exp(mu * work_s / segments), which
    is > 0 for mu > 0: the expected time is convex in the segment count, so
    a local minimum over the integers is the global one.
    """
    if not isinstance(segments, int) or segments < 1:
        raise ValueError(f"segments must be an int >= 1, got {segments!r}")
    _check_rate(mu)
    _check_duration(work_s, "work_s")
    return mu * work_s**2 / segments**3 * math.exp(mu * work_s / segments)


@dataclass(frozen=True)
class SegmentPlan:
    """How to split a job: segment count, checkpoints between them, spacing."""

    segments: int
    checkpoints: int
    interval_s: float
    expected_completion_s: float
    # True when the search hit MAX_SEGMENTS without the expected time turning
    # upward (free checkpoints make more segments always better).
    capped: bool = False


def optimal_segments(mu: float, work_s: float, ckpt_cost_s: float) -> SegmentPlan:
    """Segment count minimizing the expected completion time.

    Walks N = 1, 2, ... while the expected time strictly improves and stops
    at the first non-improvement; convexity (see
    completion_second_derivative) makes that the global integer minimum.
    Ties break toward fewer segments. With zero-cost checkpoints and mu > 0
    the walk would never turn, so it stops at MAX_SEGMENTS with capped=True.
    """
    if ckpt_cost_s < 0.0:
        raise ValueError(f"ckpt_cost_s must be >= 0, got {ckpt_cost_s}")
    _check_rate(mu)
    _check_duration(work_s, "work_s")

    best_n = 1
    best = expected_with_checkpoints(mu, work_s, 1, ckpt_cost_s)
    n = 2
    while n <= MAX_SEGMENTS:
        value = expected_with_checkpoints(mu, work_s, n, ckpt_cost_s)
        if value >= best:
            return SegmentPlan(best_n, best_n - 1, work_s / best_n, best)
        best_n, best = n, value
        n += 1
    return SegmentPlan(best_n, best_n - 1, work_s / best_n, best, capped=True)


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo estimate: sample mean, standard error, trial count."""

    mean: float
    stderr: float
    trials: int


def _simulate_restarts(
    rng: np.random.Generator, mu: float, work_s: float, totals: np.ndarray
) -> None:
    """Add the completion time of one restart-from-scratch stretch to totals.

    Draws exponential fault times; a draw past work_s means the stretch
    finishes, otherwise the elapsed fault time is wasted and the stretch
    restarts. Vectorized over trials; draw order is fixed by the shrinking
    active set, so results are reproducible per generator state.
    """
    active = np.arange(totals.shape[0])
    while active.size:
        draws = rng.exponential(1.0 / mu, size=active.size)
        finished = draws >= work_s
        totals[active[finished]] += work_s
        survivors = ~finished
        totals[active[survivors]] += draws[survivors]
        active = active[survivors]


def monte_carlo_exec_time(mu: float, work_s: float, trials: int, seed: int) -> McEstimate:
    """Monte Carlo check of expected_exec_time (restart from scratch)."""
    _check_rate(mu)
    _check_duration(work_s, "work_s")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if mu == 0.0:
        return McEstimate(work_s, 0.0, trials)
    rng = np.random.Generator(np.random.PCG64(seed))
    totals = np.zeros(trials)
    _simulate_restarts(rng, mu, work_s, totals)
    stderr = 0.0 if trials == 1 else float(totals.std(ddof=1) / math.sqrt(trials))
    return McEstimate(float(totals.mean()), stderr, trials)


def monte_carlo_checkpointed_time(
    mu: float, work_s: float, segments: int, ckpt_cost_s: float, trials: int, seed: int
) -> McEstimate:
    """Monte Carlo check of expected_with_checkpoints.

    Runs the restart process once per segment and adds the deterministic
    checkpoint cost. With segments == 1 the draw sequence is identical to
    monte_carlo_exec_time for the same seed.
    """
    if not isinstance(segments, int) or segments < 1:
        raise ValueError(f"segments must be an int >= 1, got {segments!r}")
    if ckpt_cost_s < 0.0:
        raise ValueError(f"ckpt_cost_s must be >= 0, got {ckpt_cost_s}")
    _check_rate(mu)
    _check_duration(work_s, "work_s")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    overhead = (segments - 1) * ckpt_cost_s
    if mu == 0.0:
        return McEstimate(work_s + overhead, 0.0, trials)
    rng = np.random.Generator(np.random.PCG64(seed))
    totals = np.zeros(trials)
    for _ in range(segments):
        _simulate_restarts(rng, mu, work_s / segments, totals)
    totals += overhead
    stderr = 0.0 if trials == 1 else float(totals.std(ddof=1) / math.sqrt(trials))
    return McEstimate(float(totals.mean()), stderr, trials)
