"""Offline oracles and Monte Carlo estimation used as ground truth in tests.

``offline_opt`` is the unconstrained top-B selection; ``offline_opt_quota``
and ``worst_feasible_quota`` solve the quota-constrained variants exactly at
desk scale (exhaustive search up to T=20, an exact deficit-vector dynamic
program beyond).  ``mc_expectation`` estimates a randomized policy's mean
performance with reproducible per-trial sub-seeding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import (
    Allocation,
    InfeasibleQuotaError,
    Instance,
    QuotaSpec,
    class_utilities,
)

#: a policy maps (instance, rng) to an allocation; deterministic ones ignore rng
Policy = Callable[[Instance, np.random.Generator], Allocation]

EXHAUSTIVE_LIMIT = 20


class OracleSizeError(ValueError):
    """The exact quota oracle's state space exceeds its desk-scale limit."""


def offline_opt(instance: Instance) -> tuple[float, Allocation]:
    """Offline optimum without fairness constraints: the B largest valuations.

    Ties are broken toward earlier arrivals.
    """
    t_count = len(instance)
    budget = instance.params.budget
    order = sorted(range(t_count), key=lambda t: (-instance.agents[t].value, t))
    chosen = sorted(order[: min(budget, t_count)])
    decisions = [0.0] * t_count
    value = 0.0
    for t in chosen:
        decisions[t] = 1.0
        value += instance.agents[t].value
    return value, Allocation(tuple(decisions), integral=True)


def _check_class_coverage(instance: Instance, spec: QuotaSpec):
    counts = [0] * instance.params.num_classes
    for agent in instance.agents:
        for j in agent.labels:
            counts[j - 1] += 1
    for j, (have, need) in enumerate(zip(counts, spec.quotas), start=1):
        if have < need:
            raise InfeasibleQuotaError(
                f"class {j} has {have} arrivals but quota {need}", deficient_class=j
            )


def _label_lists(instance: Instance) -> list[tuple[int, ...]]:
    return [tuple(sorted(a.labels)) for a in instance.agents]


def _exhaustive_quota_search(
    instance: Instance, spec: QuotaSpec, minimize: bool
) -> tuple[float, list[float]] | None:
    """Enumerate all budget-feasible allocations meeting the quotas."""
    agents = instance.agents
    t_count = len(agents)
    budget = instance.params.budget
    labels = _label_lists(instance)
    values = [a.value for a in agents]
    suffix_value = [0.0] * (t_count + 1)
    suffix_counts = [
        [0] * instance.params.num_classes for _ in range(t_count + 1)
    ]
    for t in range(t_count - 1, -1, -1):
        suffix_value[t] = suffix_value[t + 1] + values[t]
        suffix_counts[t] = list(suffix_counts[t + 1])
        for j in labels[t]:
            suffix_counts[t][j - 1] += 1

    best_value: float | None = None
    best_dec: list[int] | None = None
    decisions = [0] * t_count
    sign = 1.0 if minimize else -1.0

    def rec(t: int, used: int, deficits: tuple[int, ...], value: float):
        nonlocal best_value, best_dec
        for j, d in enumerate(deficits):
            if d > suffix_counts[t][j]:
                return
        if best_value is not None:
            if minimize and value >= best_value:
                return
            if not minimize and value + suffix_value[t] <= best_value:
                return
        if t == t_count:
            if all(d == 0 for d in deficits):
                if best_value is None or sign * value < sign * best_value:
                    best_value = value
                    best_dec = decisions.copy()
            return
        branches = (1, 0) if not minimize else (0, 1)
        for x in branches:
            if x == 1 and used == budget:
                continue
            decisions[t] = x
            if x == 1:
                new_def = tuple(
                    max(d - 1, 0) if (j + 1) in labels[t] else d
                    for j, d in enumerate(deficits)
                )
                rec(t + 1, used + 1, new_def, value + values[t])
            else:
                rec(t + 1, used, deficits, value)
            decisions[t] = 0

    rec(0, 0, tuple(spec.quotas), 0.0)
    if best_value is None:
        return None
    return best_value, [float(x) for x in best_dec]


@dataclass
class _DeficitSpace:
    """Mixed-radix encoding of per-class quota deficits."""

    quotas: tuple[int, ...]
    strides: tuple[int, ...]
    size: int

    @classmethod
    def build(cls, spec: QuotaSpec) -> "_DeficitSpace":
        strides = []
        size = 1
        for m in spec.quotas:
            strides.append(size if m > 0 else 0)
            if m > 0:
                size *= m + 1
        return cls(tuple(spec.quotas), tuple(strides), size)

    def start_index(self) -> int:
        return sum(m * s for m, s in zip(self.quotas, self.strides))

    def shift_map(self, labels: tuple[int, ...]) -> np.ndarray:
        """Index map applying one acceptance with the given labels."""
        out = np.arange(self.size, dtype=np.int64)
        for j in labels:
            m = self.quotas[j - 1]
            if m == 0:
                continue
            stride = self.strides[j - 1]
            digits = (out // stride) % (m + 1)
            out = out - np.minimum(digits, 1) * stride
        return out


def _dp_quota_search(
    instance: Instance, spec: QuotaSpec, minimize: bool
) -> tuple[float, list[float]] | None:
    """Exact dynamic program over (accept count, quota deficit vector).

    States: (units used, clamped per-class deficits); one layer per agent.
    Memory is kept at O(sqrt(T)) layers via block checkpointing during the
    backward pass.  Raises :class:`OracleSizeError` beyond desk scale.
    """
    agents = instance.agents
    t_count = len(agents)
    budget = instance.params.budget
    space = _DeficitSpace.build(spec)
    if (budget + 1) * space.size > 4_000_000:
        raise OracleSizeError(
            f"state space (B+1)*D = {(budget + 1) * space.size} too large"
        )
    if t_count * (budget + 1) * space.size > 400_000_000:
        raise OracleSizeError("instance too large for the exact quota oracle")

    sign = -1.0 if minimize else 1.0
    neg = -math.inf
    shift_maps: dict[tuple[int, ...], np.ndarray] = {}
    labels = _label_lists(instance)
    for lab in labels:
        if lab not in shift_maps:
            shift_maps[lab] = space.shift_map(lab)

    def forward_step(layer: np.ndarray, t: int) -> np.ndarray:
        new = layer.copy()
        smap = shift_maps[labels[t]]
        cand = layer[:-1, :] + sign * agents[t].value
        rows = np.repeat(np.arange(budget, dtype=np.int64), space.size)
        cols = np.tile(smap, budget)
        np.maximum.at(new[1:, :], (rows, cols), cand.ravel())
        return new

    block = max(1, int(math.isqrt(t_count)) + 1)
    checkpoints: dict[int, np.ndarray] = {}
    layer = np.full((budget + 1, space.size), neg)
    layer[0, space.start_index()] = 0.0
    checkpoints[0] = layer.copy()
    for t in range(t_count):
        layer = forward_step(layer, t)
        if (t + 1) % block == 0:
            checkpoints[t + 1] = layer.copy()

    final = layer[:, 0]
    if not np.any(final > neg):
        return None
    best_used = int(np.argmax(sign * final))
    best_value = sign * final[best_used]

    # backward pass: replay each block from its checkpoint to recover choices
    decisions = [0.0] * t_count
    state_u, state_d = best_used, 0
    t = t_count
    while t > 0:
        start = (t - 1) // block * block
        layers = [checkpoints[start]]
        for tt in range(start, t - 1):
            layers.append(forward_step(layers[-1], tt))
        for tt in range(t - 1, start - 1, -1):
            prev = layers[tt - start]
            # recover the branch taken into (state_u, state_d) at step tt
            reject_val = prev[state_u, state_d]
            accept_val = neg
            accept_src = None
            if state_u >= 1:
                smap = shift_maps[labels[tt]]
                srcs = np.nonzero(smap == state_d)[0]
                if srcs.size:
                    vals = prev[state_u - 1, srcs] + sign * agents[tt].value
                    k = int(np.argmax(vals))
                    accept_val = vals[k]
                    accept_src = int(srcs[k])
            if reject_val >= accept_val:
                decisions[tt] = 0.0
            else:
                decisions[tt] = 1.0
                state_u -= 1
                state_d = accept_src
        t = start

    return float(best_value), decisions


def _quota_search(
    instance: Instance, spec: QuotaSpec, minimize: bool
) -> tuple[float, Allocation]:
    spec.validate_for(instance.params)
    _check_class_coverage(instance, spec)
    if len(instance) <= EXHAUSTIVE_LIMIT:
        result = _exhaustive_quota_search(instance, spec, minimize)
    else:
        result = _dp_quota_search(instance, spec, minimize)
    if result is None:
        raise InfeasibleQuotaError(
            f"budget {instance.params.budget} cannot cover all quotas jointly"
        )
    value, decisions = result
    return value, Allocation(tuple(decisions), integral=True)


def offline_opt_quota(
    instance: Instance, spec: QuotaSpec
) -> tuple[float, Allocation]:
    """Maximum total value subject to the budget and all class quotas."""
    return _quota_search(instance, spec, minimize=False)


def worst_feasible_quota(instance: Instance, spec: QuotaSpec) -> Allocation:
    """A quota-feasible integral allocation of minimum total value.

    Exhaustive up to T=20; greedy cheapest-cover beyond (validated against the
    exhaustive search on small instances in the test suite).
    """
    spec.validate_for(instance.params)
    _check_class_coverage(instance, spec)
    if len(instance) <= EXHAUSTIVE_LIMIT:
        result = _exhaustive_quota_search(instance, spec, minimize=True)
        if result is None:
            raise InfeasibleQuotaError(
                f"budget {instance.params.budget} cannot cover all quotas jointly"
            )
        return Allocation(tuple(result[1]), integral=True)
    order = sorted(
        range(len(instance)), key=lambda t: (instance.agents[t].value, t)
    )
    deficits = list(spec.quotas)
    decisions = [0.0] * len(instance)
    used = 0
    for t in order:
        if all(d == 0 for d in deficits):
            break
        helpful = [j for j in instance.agents[t].labels if deficits[j - 1] > 0]
        if not helpful:
            continue
        decisions[t] = 1.0
        used += 1
        if used > instance.params.budget:
            raise InfeasibleQuotaError(
                "greedy cover exceeded the budget; quotas too tight for greedy"
            )
        for j in helpful:
            deficits[j - 1] -= 1
    if any(d > 0 for d in deficits):
        raise InfeasibleQuotaError("arrivals cannot cover all quotas")
    return Allocation(tuple(decisions), integral=True)


def worst_allocation(instance: Instance) -> Allocation:
    """The objective-minimizing allocation without constraints: all zeros."""
    return Allocation(tuple(0.0 for _ in instance.agents), integral=True)


@dataclass(frozen=True)
class McResult:
    """Sample means and standard errors over independent policy runs."""

    trials: int
    mean_value: float
    se_value: float
    mean_class_utilities: tuple[float, ...]
    se_class_utilities: tuple[float, ...]


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent per-trial stream: trial i uses SeedSequence((seed, i))."""
    return np.random.default_rng(np.random.SeedSequence((seed, trial)))


def mc_expectation(
    policy: Policy, instance: Instance, trials: int, seed: int
) -> McResult:
    """Estimate a policy's expected value and per-class utilities.

    Deterministic given (seed, trials, policy): trial i draws from the stream
    seeded by SeedSequence((seed, i)) and results accumulate in trial order.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k = instance.params.num_classes
    mean = np.zeros(k + 1)
    m2 = np.zeros(k + 1)
    for i in range(trials):
        alloc = policy(instance, trial_rng(seed, i))
        sample = np.empty(k + 1)
        sample[0] = alloc.value(instance)
        sample[1:] = class_utilities(instance, alloc)
        delta = sample - mean
        mean += delta / (i + 1)
        m2 += delta * (sample - mean)
    if trials > 1:
        se = np.sqrt(m2 / (trials - 1) / trials)
    else:
        se = np.zeros(k + 1)
    return McResult(
        trials=trials,
        mean_value=float(mean[0]),
        se_value=float(se[0]),
        mean_class_utilities=tuple(float(x) for x in mean[1:]),
        se_class_utilities=tuple(float(x) for x in se[1:]),
    )
