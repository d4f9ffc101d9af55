"""Relax-and-round policy trading off efficiency against proportional fairness.

The budget splits into reserved tracks and a global track, steered by an
efficiency weight ``b_frac`` in [0, 1].  Each class j owns a local track and
every class pair (j, i), j <= i, owns a pair track (the device that carries
fairness through multi-labeled arrivals); each track prices its budget with a
flat-then-exponential threshold.  Per arrival, provisional track allocations
are water-filled to at most one unit, the global track takes the residual,
and the lossless rounder converts the fractional total into an accept/reject.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .curves import Piece, PiecewiseExpCurve
from .model import Allocation, Instance, ProblemParams
from .rounding import LosslessRounder

BUILD_TOL = 1e-9


def class_ratio(theta_j: float) -> float:
    """Single-class optimal ratio 1 + ln(theta_j)."""
    return 1.0 + math.log(theta_j)


def tradeoff_bounds(b_frac: float, params: ProblemParams) -> tuple[float, float]:
    """Competitive-ratio and fairness bounds as functions of the efficiency weight.

    Returns ``(alpha, beta)``: the policy is alpha-competitive in total value
    and beta-proportionally-fair.  At ``b_frac = 1`` fairness is unbounded
    (beta = +inf) and alpha collapses to the unconstrained ratio of the
    widest class.
    """
    if not 0.0 <= b_frac <= 1.0:
        raise ValueError(f"b_frac must be in [0, 1], got {b_frac}")
    k = params.num_classes
    alphas = [class_ratio(th) for th in params.theta]
    weighted = sum((k - j + 1) * alphas[j - 1] for j in range(1, k + 1))
    if b_frac == 1.0:
        return alphas[-1], math.inf
    alpha = 1.0 / ((1.0 - b_frac) / weighted + b_frac / alphas[-1])
    beta = weighted / (k * (1.0 - b_frac))
    return alpha, beta


@dataclass(frozen=True)
class FairShareConfig:
    """Solved budgets and threshold curves for one efficiency weight."""

    params: ProblemParams
    b_frac: float
    alphas: tuple[float, ...]
    pair_budgets: tuple[float, ...]
    global_budget: float
    beta_bar: float
    pair_curves: tuple[PiecewiseExpCurve | None, ...]
    global_curve: PiecewiseExpCurve | None

    @property
    def alpha_bound(self) -> float:
        return tradeoff_bounds(self.b_frac, self.params)[0]

    @property
    def beta_bound(self) -> float:
        return tradeoff_bounds(self.b_frac, self.params)[1]


def build_fair_config(params: ProblemParams, b_frac: float) -> FairShareConfig:
    """Build track budgets and threshold curves, asserting the closure identities.

    The exponential rate constant is pinned by requiring each pair curve to
    end exactly at its class cap, which forces it to equal the fairness bound
    beta(b_frac); the pair budgets then tile B*(1-b_frac) exactly.
    """
    if not 0.0 <= b_frac <= 1.0:
        raise ValueError(f"b_frac must be in [0, 1], got {b_frac}")
    k = params.num_classes
    budget = params.budget
    alphas = tuple(class_ratio(th) for th in params.theta)
    weighted = sum((k - j + 1) * alphas[j - 1] for j in range(1, k + 1))

    pair_budgets: list[float] = []
    pair_curves: list[PiecewiseExpCurve | None] = []
    beta_bar = math.inf
    if b_frac < 1.0:
        beta_bar = weighted / (k * (1.0 - b_frac))
        rate = k * beta_bar / budget
        for j in range(1, k + 1):
            b_j = budget * alphas[j - 1] * (1.0 - b_frac) / weighted
            flat_end = b_j / alphas[j - 1]
            curve = PiecewiseExpCurve(
                [Piece(0.0, flat_end, 0.0, 0.0), Piece(flat_end, b_j, rate, -1.0)]
            )
            cap = curve.value(b_j)
            assert abs(cap - params.theta[j - 1]) <= BUILD_TOL * max(1.0, cap), (
                f"pair curve {j} must end at theta_{j}: {cap}"
            )
            assert abs(curve.value(flat_end) - 1.0) <= BUILD_TOL, (
                "flat/exponential junction must be continuous at 1"
            )
            pair_budgets.append(b_j)
            pair_curves.append(curve)
        paired_total = sum(
            (k - j + 1) * pair_budgets[j - 1] for j in range(1, k + 1)
        )
        assert abs(paired_total + budget * b_frac - budget) <= BUILD_TOL * budget, (
            "track budgets must tile the full budget"
        )
    else:
        pair_budgets = [0.0] * k
        pair_curves = [None] * k

    global_curve = None
    global_budget = budget * b_frac
    if b_frac > 0.0:
        flat_end = global_budget / alphas[-1]
        global_curve = PiecewiseExpCurve(
            [
                Piece(0.0, flat_end, 0.0, 0.0),
                Piece(flat_end, global_budget, alphas[-1] / global_budget, -1.0),
            ]
        )
        cap = global_curve.value(global_budget)
        assert abs(cap - params.theta[-1]) <= BUILD_TOL * max(1.0, cap), (
            f"global curve must end at theta_K: {cap}"
        )

    return FairShareConfig(
        params=params,
        b_frac=b_frac,
        alphas=alphas,
        pair_budgets=tuple(pair_budgets),
        global_budget=global_budget,
        beta_bar=beta_bar,
        pair_curves=tuple(pair_curves),
        global_curve=global_curve,
    )


def waterfill(levels: list[float], caps: list[float], limit: float) -> list[float]:
    """Cap provisional amounts at a common fill level so they sum to the limit.

    Returns ``share_i = min(max(h - levels_i, 0), caps_i)`` with the largest
    ``h`` keeping the total <= limit; if the caps already fit, they pass
    through unchanged.
    """
    total = sum(caps)
    if total <= limit + 1e-15:
        return list(caps)
    lo = min(levels)
    hi = max(lv + cap for lv, cap in zip(levels, caps))

    def filled(h: float) -> float:
        return sum(min(max(h - lv, 0.0), cap) for lv, cap in zip(levels, caps))

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if filled(mid) <= limit:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14:
            break
    return [min(max(lo - lv, 0.0), cap) for lv, cap in zip(levels, caps)]


class PropFairRunner:
    """Streaming state of the fair-share policy for one run."""

    def __init__(self, config: FairShareConfig, rng: np.random.Generator | None):
        self.config = config
        self.pair_util: dict[tuple[int, int], float] = {}
        self.global_util = 0.0
        self.rounder = (
            LosslessRounder(budget=config.params.budget, rng=rng) if rng is not None else None
        )

    def _track_keys(self, labels) -> list[tuple[int, int]]:
        labs = sorted(labels)
        keys = [(j, j) for j in labs]
        keys.extend((a, b) for a, b in combinations(labs, 2))
        return keys

    def fractional_decision(self, agent) -> float:
        """Advance the fractional state by one arrival and return its total."""
        config = self.config
        keys = self._track_keys(agent.labels)
        shares_total = 0.0
        if config.b_frac < 1.0:
            levels, caps = [], []
            for key in keys:
                j = key[0]
                curve = config.pair_curves[j - 1]
                z = self.pair_util.get(key, 0.0)
                cap = 0.0
                if agent.value >= curve.value(z) - 1e-12:
                    cap = curve.inverse(agent.value) - z
                    cap = min(max(cap, 0.0), 1.0, config.pair_budgets[j - 1] - z)
                levels.append(z)
                caps.append(cap)
            shares = waterfill(levels, caps, 1.0)
            for key, share in zip(keys, shares):
                if share > 0.0:
                    self.pair_util[key] = self.pair_util.get(key, 0.0) + share
                    shares_total += share
        x_global = 0.0
        if config.global_curve is not None:
            remaining = 1.0 - shares_total
            z = self.global_util
            if remaining > 1e-15 and agent.value >= config.global_curve.value(z) - 1e-12:
                x_global = config.global_curve.inverse(agent.value) - z
                x_global = min(max(x_global, 0.0), remaining, config.global_budget - z)
                self.global_util += x_global
        return shares_total + x_global

    def decide(self, agent) -> tuple[int, float]:
        """Fractional step plus lossless rounding; returns (integral, fractional)."""
        x_frac = self.fractional_decision(agent)
        if self.rounder is None:
            raise ValueError("runner built without an rng cannot round")
        return self.rounder.step(x_frac), x_frac


@dataclass(frozen=True)
class PropFairTrace:
    """Fractional run output with per-track utilization for inspection."""

    allocation: Allocation
    pair_util: dict[tuple[int, int], float]
    global_util: float


class PropFairPolicy:
    """Fair-share threshold policy; fractional and rounded entry points."""

    def __init__(self, params: ProblemParams, b_frac: float):
        self.params = params
        self.config = build_fair_config(params, b_frac)

    @property
    def alpha_bound(self) -> float:
        return self.config.alpha_bound

    @property
    def beta_bound(self) -> float:
        return self.config.beta_bound

    def runner(self, rng: np.random.Generator | None = None) -> PropFairRunner:
        return PropFairRunner(self.config, rng)

    def fractional_run(self, instance: Instance) -> PropFairTrace:
        runner = self.runner(rng=None)
        decisions = tuple(runner.fractional_decision(a) for a in instance.agents)
        return PropFairTrace(
            allocation=Allocation(decisions, integral=False),
            pair_util=dict(runner.pair_util),
            global_util=runner.global_util,
        )

    def run(self, instance: Instance, rng: np.random.Generator) -> Allocation:
        runner = self.runner(rng)
        return Allocation(
            tuple(float(runner.decide(a)[0]) for a in instance.agents), integral=True
        )

    def __call__(self, instance: Instance, rng: np.random.Generator) -> Allocation:
        return self.run(instance, rng)
