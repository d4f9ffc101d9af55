"""Lossless online rounding of fractional decision streams.

The rounder tracks the index ``kappa`` of the next unit to allocate and the
cumulative fractional utilization ``z``.  Each step converts a fractional
decision into an accept/reject draw whose branch probabilities make the
expected integral value equal the fractional value at every prefix; the
structural invariant is that unit ``ceil(z)`` remains available with
probability ``ceil(z) - z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import TOL


class RoundingError(ValueError):
    """Budget precondition or internal probability invariant violated."""


def accept_probability(kappa: int, z_prev: float, x_frac: float) -> float:
    """Acceptance probability for one rounding step.

    ``kappa`` is the next unit index, ``z_prev`` the utilization before the
    step, ``x_frac`` the fractional decision in (0, 1].
    """
    z_next = z_prev + x_frac
    c_prev = math.ceil(z_prev)
    c_next = math.ceil(z_next)
    if c_next == c_prev:
        p = x_frac / (c_prev - z_prev) if kappa == c_prev else 0.0
    elif kappa == c_prev:
        p = 1.0
    elif kappa == c_next:
        p = (z_next - c_prev) / ((1.0 - c_prev + z_prev) * (c_next - c_prev))
    else:
        # the tracked unit was already sold and the fresh unit is not kappa's
        p = 0.0
    if p < -1e-12 or p > 1.0 + 1e-12:
        raise RoundingError(
            f"branch probability {p} outside [0,1] at kappa={kappa}, "
            f"z={z_prev}, x={x_frac}"
        )
    return min(max(p, 0.0), 1.0)


@dataclass
class LosslessRounder:
    """Single-threaded rounding state machine for one policy run.

    Consumes exactly one uniform draw per step with a positive fractional
    decision; zero steps consume no randomness, keeping seeds aligned across
    policy variants.
    """

    budget: int
    rng: np.random.Generator
    kappa: int = 1
    z: float = 0.0

    def step(self, x_frac: float) -> int:
        if x_frac == 0.0:
            return 0
        if not (0.0 <= x_frac <= 1.0 + 1e-12):
            raise RoundingError(f"fractional decision {x_frac} outside [0, 1]")
        x_frac = min(x_frac, 1.0)
        if self.z + x_frac > self.budget + TOL:
            raise RoundingError(
                f"fractional utilization {self.z + x_frac} exceeds budget {self.budget}"
            )
        p = accept_probability(self.kappa, self.z, x_frac)
        draw = self.rng.random()
        accept = 1 if (draw < p and self.kappa <= self.budget) else 0
        self.kappa += accept
        self.z += x_frac
        return accept


def expected_acceptances(fracs, budget: int) -> list[float]:
    """Exact per-step acceptance expectations of the rounding scheme.

    Propagates the distribution of ``kappa`` (the only random state) forward,
    so the result is exact, not sampled.  Used as the enumeration oracle for
    the lossless property: E[x_t] must equal the fractional decision x~_t.
    """
    dist: dict[int, float] = {1: 1.0}
    z = 0.0
    out = []
    for x in fracs:
        if x == 0.0:
            out.append(0.0)
            continue
        step_mean = 0.0
        new_dist: dict[int, float] = {}
        for kappa, prob in dist.items():
            p = accept_probability(kappa, z, x) if kappa <= budget else 0.0
            if p > 0.0:
                step_mean += prob * p
                new_dist[kappa + 1] = new_dist.get(kappa + 1, 0.0) + prob * p
            if p < 1.0:
                new_dist[kappa] = new_dist.get(kappa, 0.0) + prob * (1.0 - p)
        dist = new_dist
        z += x
        out.append(step_mean)
    return out


@dataclass(frozen=True)
class FracStream:
    """A fractional decision stream with the data needed to validate rounding."""

    values: tuple[float, ...]
    fracs: tuple[float, ...]
    budget: int
    num_classes: int = 0
    labels: tuple[frozenset[int], ...] | None = None

    def __post_init__(self):
        if len(self.values) != len(self.fracs):
            raise ValueError("values and fracs must have equal length")
        if self.labels is not None and len(self.labels) != len(self.fracs):
            raise ValueError("labels must align with fracs")

    def class_masks(self) -> np.ndarray | None:
        if self.labels is None or self.num_classes == 0:
            return None
        masks = np.zeros((self.num_classes, len(self.fracs)), dtype=bool)
        for t, labs in enumerate(self.labels):
            for j in labs:
                masks[j - 1, t] = True
        return masks


@dataclass(frozen=True)
class StreamCheck:
    """Validation outcome for one stream."""

    max_total_dev_sigma: float
    max_class_dev_sigma: float
    max_avail_dev_sigma: float
    passed: bool


@dataclass(frozen=True)
class LosslessReport:
    """Aggregate Monte Carlo validation report for a set of streams."""

    checks: tuple[StreamCheck, ...]
    trials: int
    passed: bool


def _standardized(dev: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    out = np.zeros_like(dev)
    pos = sigma > 0
    out[pos] = dev[pos] / sigma[pos]
    out[~pos] = np.where(dev[~pos] <= 1e-9, 0.0, np.inf)
    return out


def simulate_stream_mc(
    stream: FracStream, trials: int, seed: int, checkpoints: int = 20
) -> StreamCheck:
    """Vectorized Monte Carlo of the rounding scheme over one stream.

    Compares, at every prefix, the sample mean of the integral value (total
    and per class) against the fractional value, and checks the availability
    frequency of unit ``ceil(z)`` against ``ceil(z) - z`` at sampled steps.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
    t_count = len(stream.fracs)
    values = np.asarray(stream.values)
    fracs = np.asarray(stream.fracs)
    z_path = np.cumsum(fracs)
    masks = stream.class_masks()
    k = stream.num_classes if masks is not None else 0

    kappa = np.ones(trials, dtype=np.int64)
    cum = np.zeros(trials)
    cum_class = np.zeros((k, trials)) if k else None

    dev_sigmas_total = np.zeros(t_count)
    dev_sigmas_class = np.zeros((t_count, k)) if k else None
    check_steps = set(
        int(i) for i in np.linspace(0, t_count - 1, min(checkpoints, t_count))
    )
    avail_devs = []

    frac_cum_value = np.cumsum(values * fracs)
    frac_cum_class = (
        np.cumsum(values * fracs * masks, axis=1) if k else None
    )

    z_prev = 0.0
    for t in range(t_count):
        x = float(fracs[t])
        z_next = float(z_path[t])
        if x > 0.0:
            c_prev = math.ceil(z_prev)
            c_next = math.ceil(z_next)
            if c_next == c_prev:
                base = x / (c_prev - z_prev)
                p = np.where(kappa == c_prev, base, 0.0)
            else:
                q = (z_next - c_prev) / ((1.0 - c_prev + z_prev) * (c_next - c_prev))
                p = np.where(
                    kappa == c_prev, 1.0, np.where(kappa == c_next, q, 0.0)
                )
            if p.min() < -1e-12 or p.max() > 1.0 + 1e-12:
                raise RoundingError("branch probability outside [0,1]")
            draws = rng.random(trials)
            acc = (draws < p) & (kappa <= stream.budget)
            kappa = kappa + acc
            gain = values[t] * acc
            cum = cum + gain
            if k:
                cum_class = cum_class + gain[None, :] * masks[:, t][:, None]
        dev = abs(float(cum.mean()) - frac_cum_value[t])
        sig = float(cum.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
        dev_sigmas_total[t] = dev / sig if sig > 0 else (0.0 if dev <= 1e-9 else np.inf)
        if k:
            devs = np.abs(cum_class.mean(axis=1) - frac_cum_class[:, t])
            sigs = cum_class.std(axis=1, ddof=1) / math.sqrt(trials)
            dev_sigmas_class[t] = _standardized(devs, sigs)
        if t in check_steps:
            p_avail = math.ceil(z_next) - z_next
            freq = float(np.mean(kappa == math.ceil(z_next)))
            sig = math.sqrt(max(p_avail * (1 - p_avail), 0.0) / trials)
            dev = abs(freq - p_avail)
            avail_devs.append(dev / sig if sig > 0 else (0.0 if dev <= 1e-9 else np.inf))
        z_prev = z_next

    max_total = float(dev_sigmas_total.max()) if t_count else 0.0
    max_class = float(dev_sigmas_class.max()) if k and t_count else 0.0
    max_avail = max(avail_devs) if avail_devs else 0.0
    passed = max_total <= 4.0 and max_class <= 4.0 and max_avail <= 4.0
    return StreamCheck(max_total, max_class, max_avail, passed)


def validate_lossless(
    streams, trials: int, seed: int, checkpoints: int = 20
) -> LosslessReport:
    """Run the Monte Carlo losslessness check over an iterable of streams."""
    checks = []
    for i, stream in enumerate(streams):
        checks.append(simulate_stream_mc(stream, trials, seed + i, checkpoints))
    return LosslessReport(
        checks=tuple(checks),
        trials=trials,
        passed=all(c.passed for c in checks),
    )
