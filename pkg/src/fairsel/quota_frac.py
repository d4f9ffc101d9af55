"""Optimal fractional policy for quota-constrained selection, plus rounding.

A single piecewise-exponential threshold prices the ``B - M`` unreserved
units.  Its shape depends on how large the reserve is: with a small reserve
the curve starts flat at 1; with a large reserve it starts strictly above 1
at ``v_start`` and the competitive ratio involves the Lambert W function.
Feeding the fractional decisions through the lossless rounder yields the
randomized integral policy with the same expected value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .curves import Piece, PiecewiseExpCurve, lambert_w
from .model import Allocation, Instance, ProblemParams, QuotaSpec
from .quota_det import ThresholdConstants
from .rounding import LosslessRounder

BUILD_TOL = 1e-9


class ThresholdStructureError(RuntimeError):
    """The reserve size matched no regime bracket."""


@dataclass(frozen=True)
class FractionalThreshold:
    """Solved threshold curve with its regime and competitive ratio."""

    regime: str
    alpha: float
    curve: PiecewiseExpCurve | None
    v_start: float | None
    breakpoints: tuple[float, ...]
    budget: int
    reserve: int

    @property
    def units(self) -> int:
        return self.budget - self.reserve

    def value(self, u: float) -> float:
        if self.curve is None:
            raise ValueError("reserved-only threshold has no curve")
        return self.curve.value(u)

    def inverse(self, v: float) -> float:
        if self.curve is None:
            raise ValueError("reserved-only threshold has no curve")
        return self.curve.inverse(v)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "alpha": self.alpha,
            "v_start": self.v_start,
            "breakpoints": list(self.breakpoints),
            "budget": self.budget,
            "reserve": self.reserve,
            "curve": self.curve.to_dict() if self.curve else None,
        }


def low_reserve_ratio(params: ProblemParams, constants: ThresholdConstants) -> float:
    """Ratio of the flat-start regime: 1 + ln theta_K minus the quota rebates."""
    k = params.num_classes
    theta = params.theta
    alpha = 1.0 + math.log(theta[-1])
    for j in range(k - 1):
        alpha -= (
            (constants.c[j] - constants.c[j + 1])
            / params.budget
            * math.log(theta[-1] / theta[j])
        )
    return alpha


def build_fractional_threshold(
    params: ProblemParams, spec: QuotaSpec
) -> FractionalThreshold:
    """Construct the threshold curve for the given problem and quotas."""
    spec.validate_for(params)
    constants = ThresholdConstants.from_problem(params, spec)
    k = params.num_classes
    theta = params.theta
    budget = params.budget
    reserve = spec.total
    units = budget - reserve

    if units == 0:
        alpha = (constants.c[-1] * theta[-1] + constants.d[-1]) / reserve
        return FractionalThreshold(
            regime="reserved-only",
            alpha=alpha,
            curve=None,
            v_start=None,
            breakpoints=(),
            budget=budget,
            reserve=reserve,
        )

    alpha0 = low_reserve_ratio(params, constants)
    if reserve <= budget / alpha0:
        return _build_low_reserve(params, constants, reserve, alpha0)
    return _build_high_reserve(params, constants, reserve)


def _build_low_reserve(
    params: ProblemParams,
    constants: ThresholdConstants,
    reserve: int,
    alpha: float,
) -> FractionalThreshold:
    k = params.num_classes
    theta = params.theta
    budget = params.budget
    # partial sums S_j = sum_{i<=j} (C_i - C_{i+1}) * ln(theta_i), S_0 = 0
    s = [0.0]
    for j in range(k - 1):
        s.append(s[-1] + (constants.c[j] - constants.c[j + 1]) * math.log(theta[j]))
    gamma = [budget / alpha - reserve]
    for j in range(1, k + 1):
        gamma.append(
            budget / alpha
            - reserve
            + (constants.c[j - 1] / alpha) * math.log(theta[j - 1])
            + s[j - 1] / alpha
        )
    units = budget - reserve
    assert abs(gamma[-1] - units) <= BUILD_TOL * max(1.0, units), (
        f"curve must end at B - M: {gamma[-1]} != {units}"
    )
    gamma[-1] = float(units)
    pieces = [Piece(0.0, gamma[0], 0.0, 0.0)]
    for j in range(1, k + 1):
        rate = alpha / constants.c[j - 1]
        offset = (alpha * reserve - budget - s[j - 1]) / constants.c[j - 1]
        pieces.append(Piece(gamma[j - 1], gamma[j], rate, offset))
    curve = PiecewiseExpCurve(pieces)
    assert abs(curve.value(units) - theta[-1]) <= BUILD_TOL * max(1.0, theta[-1])
    return FractionalThreshold(
        regime="low-reserve",
        alpha=alpha,
        curve=curve,
        v_start=1.0,
        breakpoints=tuple(gamma),
        budget=budget,
        reserve=reserve,
    )


def _build_high_reserve(
    params: ProblemParams, constants: ThresholdConstants, reserve: int
) -> FractionalThreshold:
    k = params.num_classes
    theta = params.theta
    budget = params.budget
    matches = []
    for j_star in range(1, k + 1):
        c_star = constants.c[j_star - 1]
        d_star = constants.d[j_star - 1]
        x_sum = 0.0
        for i in range(j_star, k):
            x_sum += (constants.c[i - 1] - constants.c[i]) * math.log(
                theta[-1] / theta[i - 1]
            )
        units = budget - reserve
        arg = (
            theta[-1]
            * units
            / reserve
            * math.exp(-x_sum / c_star - d_star * units / (c_star * reserve))
        )
        alpha = d_star / reserve + c_star / units * lambert_w(arg)
        v_start = (alpha * reserve - d_star) / c_star
        lo = 1.0 if j_star == 1 else theta[j_star - 2]
        if lo - 1e-9 < v_start <= theta[j_star - 1] + 1e-9:
            matches.append((j_star, alpha, v_start, x_sum))
    if not matches:
        raise ThresholdStructureError("no regime bracket matched the reserve size")
    if len(matches) > 1:
        # boundary duplicates agree numerically; otherwise the structure is wrong
        alphas = [m[1] for m in matches]
        if max(alphas) - min(alphas) > 1e-6:
            raise ThresholdStructureError(f"ambiguous regime brackets: {matches}")
    j_star, alpha, v_start, _ = matches[0]
    units = budget - reserve

    s = [0.0]  # S'_j = sum_{i=j*}^{j-1} (C_i - C_{i+1}) ln(theta_i / v_start)
    for i in range(j_star, k):
        s.append(
            s[-1]
            + (constants.c[i - 1] - constants.c[i]) * math.log(theta[i - 1] / v_start)
        )
    gamma = [0.0]
    for idx, j in enumerate(range(j_star, k + 1)):
        gamma.append(
            (constants.c[j - 1] / alpha) * math.log(theta[j - 1] / v_start)
            + s[idx] / alpha
        )
    assert abs(gamma[-1] - units) <= BUILD_TOL * max(1.0, units), (
        f"curve must end at B - M: {gamma[-1]} != {units}"
    )
    gamma[-1] = float(units)
    pieces = []
    for idx, j in enumerate(range(j_star, k + 1)):
        rate = alpha / constants.c[j - 1]
        offset = math.log(v_start) - s[idx] / constants.c[j - 1]
        pieces.append(Piece(gamma[idx], gamma[idx + 1], rate, offset))
    curve = PiecewiseExpCurve(pieces)
    assert abs(curve.value(units) - theta[-1]) <= BUILD_TOL * max(1.0, theta[-1])
    return FractionalThreshold(
        regime="high-reserve",
        alpha=alpha,
        curve=curve,
        v_start=v_start,
        breakpoints=tuple(gamma),
        budget=budget,
        reserve=reserve,
    )


class _FractionalStepper:
    """Streaming state of the fractional policy: quota progress plus utilization."""

    def __init__(self, spec: QuotaSpec, threshold: FractionalThreshold):
        self.spec = spec
        self.threshold = threshold
        self.quota_progress = [0.0] * len(spec.quotas)
        self.util = 0.0

    def step(self, agent) -> float:
        quotas = self.spec.quotas
        y = 0.0
        unmet = [
            j for j in agent.labels if self.quota_progress[j - 1] < quotas[j - 1] - 1e-12
        ]
        if unmet:
            y = min(1.0, max(quotas[j - 1] - self.quota_progress[j - 1] for j in unmet))
            for j in unmet:
                self.quota_progress[j - 1] = min(
                    quotas[j - 1], self.quota_progress[j - 1] + y
                )
        x = 0.0
        threshold = self.threshold
        if threshold.curve is not None and y < 1.0:
            room = threshold.units - self.util
            if room > 1e-12 and agent.value >= threshold.value(self.util) - 1e-12:
                x = threshold.inverse(agent.value) - self.util
                x = min(max(x, 0.0), 1.0 - y, room)
                self.util += x
        return y + x


class FractionalQuotaPolicy:
    """Fractional quota policy: quota phase first, then threshold pricing."""

    def __init__(
        self,
        params: ProblemParams,
        spec: QuotaSpec,
        threshold: FractionalThreshold | None = None,
    ):
        self.params = params
        self.spec = spec
        self.threshold = (
            threshold if threshold is not None else build_fractional_threshold(params, spec)
        )

    @property
    def alpha(self) -> float:
        return self.threshold.alpha

    def stepper(self) -> _FractionalStepper:
        return _FractionalStepper(self.spec, self.threshold)

    def run(self, instance: Instance, rng=None) -> Allocation:
        del rng
        stepper = self.stepper()
        return Allocation(
            tuple(stepper.step(agent) for agent in instance.agents), integral=False
        )

    def __call__(self, instance: Instance, rng=None) -> Allocation:
        return self.run(instance)


class _RandomizedRunner:
    """Streaming state of the rounded policy (integral decisions)."""

    def __init__(
        self, spec: QuotaSpec, threshold: FractionalThreshold, rng: np.random.Generator
    ):
        self.spec = spec
        self.threshold = threshold
        self.quota_count = [1] * len(spec.quotas)
        self.util = 0.0
        self.rounder = LosslessRounder(budget=max(threshold.units, 0), rng=rng)

    def decide(self, agent) -> tuple[int, bool]:
        """Integral decision for one arrival; flags quota-phase acceptances."""
        quotas = self.spec.quotas
        unmet = [j for j in agent.labels if self.quota_count[j - 1] <= quotas[j - 1]]
        if unmet:
            for j in agent.labels:
                self.quota_count[j - 1] += 1
            return 1, True
        threshold = self.threshold
        x_frac = 0.0
        if threshold.curve is not None:
            room = threshold.units - self.util
            if room > 1e-12 and agent.value >= threshold.value(self.util) - 1e-12:
                x_frac = threshold.inverse(agent.value) - self.util
                x_frac = min(max(x_frac, 0.0), 1.0, room)
                self.util += x_frac
        return self.rounder.step(x_frac), False


class RandomizedQuotaPolicy:
    """Relax-and-round quota policy: fractional thresholds plus lossless rounding."""

    def __init__(
        self,
        params: ProblemParams,
        spec: QuotaSpec,
        threshold: FractionalThreshold | None = None,
    ):
        self.params = params
        self.spec = spec
        self.threshold = (
            threshold if threshold is not None else build_fractional_threshold(params, spec)
        )

    @property
    def alpha(self) -> float:
        return self.threshold.alpha

    def runner(self, rng: np.random.Generator) -> _RandomizedRunner:
        return _RandomizedRunner(self.spec, self.threshold, rng)

    def run(self, instance: Instance, rng: np.random.Generator) -> Allocation:
        runner = self.runner(rng)
        return Allocation(
            tuple(float(runner.decide(agent)[0]) for agent in instance.agents),
            integral=True,
        )

    def __call__(self, instance: Instance, rng: np.random.Generator) -> Allocation:
        return self.run(instance, rng)
