"""Optimal deterministic thresholds for quota-constrained online selection.

The policy reserves one unit per outstanding quota slot and prices the
remaining ``B - M`` units with a nondecreasing threshold vector ``lambda``.
The optimal vector solves a chained equation system: each equation balances
the adversary's best stopping value (a piecewise-linear function of the last
threshold) against the value the policy has locked in so far.  The solver
runs an outer bisection on the target ratio ``alpha``; the chain's terminal
threshold is monotone in ``alpha``, which makes the root search reliable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .model import Allocation, Instance, ProblemParams, QuotaSpec

SOLVER_TOL = 1e-10
VERIFY_TOL = 1e-8


class SolverError(RuntimeError):
    """The threshold equation system could not be solved."""


@dataclass(frozen=True)
class ThresholdConstants:
    """Per-class linear coefficients of the adversary's stopping value.

    ``C[j-1] = B - max(m_1..m_{j-1})`` and ``D[j-1]`` accumulates the quota
    increments weighted by their theta caps; the map ``lam -> C_j*lam + D_j``
    (with j the bracket of lam) is continuous and strictly increasing.
    """

    budget: int
    theta: tuple[float, ...]
    c: tuple[float, ...]
    d: tuple[float, ...]

    @classmethod
    def from_problem(cls, params: ProblemParams, spec: QuotaSpec) -> "ThresholdConstants":
        spec.validate_for(params)
        run_max = 0
        c, d = [], []
        acc = 0.0
        for j in range(params.num_classes):
            c.append(float(params.budget - run_max))
            d.append(acc)
            inc = max(spec.quotas[j] - run_max, 0)
            acc += inc * params.theta[j]
            run_max = max(run_max, spec.quotas[j])
        consts = cls(params.budget, params.theta, tuple(c), tuple(d))
        # the piecewise map must agree at every bracket boundary
        for j in range(len(c) - 1):
            left = c[j] * params.theta[j] + d[j]
            right = c[j + 1] * params.theta[j] + d[j + 1]
            assert abs(left - right) <= 1e-9 * max(1.0, abs(left)), (
                "discontinuous stopping-value map"
            )
        return consts

    def bracket(self, lam: float) -> int:
        """0-based class index j with lam in [theta_{j-1}, theta_j]."""
        for j, th in enumerate(self.theta):
            if lam <= th + 1e-12:
                return j
        raise ValueError(f"lambda {lam} above theta_K = {self.theta[-1]}")

    def bound_at(self, lam: float) -> float:
        j = self.bracket(lam)
        return self.c[j] * lam + self.d[j]

    def invert_bound(self, value: float) -> float:
        """Inverse of the stopping-value map, extended linearly beyond its range."""
        lo = self.c[0] * 1.0 + self.d[0]
        if value <= lo:
            return (value - self.d[0]) / self.c[0]
        for j, th in enumerate(self.theta):
            if value <= self.c[j] * th + self.d[j]:
                return (value - self.d[j]) / self.c[j]
        top = self.c[-1] * self.theta[-1] + self.d[-1]
        return self.theta[-1] + (value - top) / self.c[-1]


def offline_bound(lam: float, constants: ThresholdConstants) -> float:
    """Adversary's stopping value when the policy's marginal threshold is lam."""
    if not (1.0 - 1e-12 <= lam <= constants.theta[-1] + 1e-12):
        raise ValueError(f"lambda {lam} outside [1, {constants.theta[-1]}]")
    return constants.bound_at(lam)


@dataclass(frozen=True)
class ThresholdTable:
    """Solved thresholds ``lambda_0..lambda_{B-M}`` with their ratio."""

    alpha: float
    tau: int | None
    lambdas: tuple[float, ...]
    case_id: str

    def to_json(self) -> str:
        return json.dumps(
            {"alpha": self.alpha, "tau": self.tau, "lambdas": list(self.lambdas)}
        )

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        obj = json.loads(text)
        tau = obj.get("tau")
        case_id = "reserved-only" if not obj["lambdas"] else (
            "low-reserve" if tau is not None else "high-reserve"
        )
        return cls(obj["alpha"], tau, tuple(obj["lambdas"]), case_id)

    def verify(self, constants: ThresholdConstants, reserve: int, tol: float = VERIFY_TOL):
        """Check every equation of the threshold system to the given tolerance."""
        if not self.lambdas:
            return
        lams = self.lambdas
        free = len(lams) - 1
        assert lams[0] >= 1.0 - tol, f"lambda_0 = {lams[0]} < 1"
        for i in range(free):
            assert lams[i] <= lams[i + 1] + tol, "thresholds must be nondecreasing"
        assert abs(lams[-1] - constants.theta[-1]) <= tol, (
            f"terminal threshold {lams[-1]} != theta_K {constants.theta[-1]}"
        )
        deltas = [constants.bound_at(l) for l in lams]
        if self.case_id == "low-reserve":
            tau = self.tau
            assert tau is not None
            for i in range(tau + 1):
                assert abs(lams[i] - 1.0) <= tol
            if tau + 1 <= free:
                seed = deltas[tau + 1] / (reserve + tau + 1)
                assert abs(seed - self.alpha) <= tol, f"seed equation residual {seed - self.alpha}"
                start = tau + 1
            else:
                start = free
        else:
            seed = deltas[0] / reserve
            assert abs(seed - self.alpha) <= tol, f"seed equation residual {seed - self.alpha}"
            start = 0
        for i in range(start, free):
            ratio = (deltas[i + 1] - deltas[i]) / lams[i]
            assert abs(ratio - self.alpha) <= tol, (
                f"chain equation {i} residual {ratio - self.alpha}"
            )


def _chain(
    alpha: float, constants: ThresholdConstants, reserve: int, units: int
) -> tuple[list[float], int | None, str]:
    """Build the threshold chain for a candidate ratio; returns (lambdas, tau, case)."""
    budget = constants.budget
    if reserve == 0 or budget / alpha >= reserve:
        gap = budget / alpha - reserve
        tau = max(0, math.ceil(gap - 1e-12) - 1)
        tau = min(tau, units - 1)
        lams = [1.0] * (tau + 1)
        delta = alpha * (reserve + tau + 1)
        for i in range(tau + 1, units + 1):
            lam = constants.invert_bound(delta)
            lams.append(lam)
            if i < units:
                delta += alpha * lam
        return lams, tau, "low-reserve"
    delta = alpha * reserve
    lams = []
    for i in range(units + 1):
        lam = constants.invert_bound(delta)
        lams.append(lam)
        if i < units:
            delta += alpha * lam
    return lams, None, "high-reserve"


def solve_thresholds(params: ProblemParams, spec: QuotaSpec) -> ThresholdTable:
    """Solve the threshold system by bisection on the competitive ratio.

    The terminal threshold of the chain increases monotonically with alpha;
    the root pins it to theta_K.  With all units reserved (M = B) the table is
    empty and alpha is the quota-only ratio (C_K*theta_K + D_K)/M.
    """
    constants = ThresholdConstants.from_problem(params, spec)
    reserve = spec.total
    units = params.budget - reserve
    theta_top = params.theta[-1]
    if units == 0:
        alpha = (constants.c[-1] * theta_top + constants.d[-1]) / reserve
        return ThresholdTable(alpha=alpha, tau=None, lambdas=(), case_id="reserved-only")

    def residual(alpha: float) -> float:
        lams, _, _ = _chain(alpha, constants, reserve, units)
        return lams[-1] - theta_top

    lo, res_lo = 1.0, residual(1.0)
    if res_lo >= -SOLVER_TOL:
        alpha_star = 1.0
    else:
        hi = 2.0
        res_hi = residual(hi)
        doublings = 0
        while res_hi < 0.0:
            hi *= 2.0
            res_hi = residual(hi)
            doublings += 1
            if doublings > 60:
                raise SolverError("no upper bracket for alpha found")
        alpha_star = None
        for step in range(200):
            mid = 0.5 * (lo + hi)
            res_mid = residual(mid)
            if not (
                min(res_lo, res_hi) - 1e-9 <= res_mid <= max(res_lo, res_hi) + 1e-9
            ):
                raise SolverError(
                    f"residual not monotone in alpha at step {step}: "
                    f"{res_lo}, {res_mid}, {res_hi}"
                )
            if abs(res_mid) <= SOLVER_TOL:
                alpha_star = mid
                break
            if res_mid < 0.0:
                lo, res_lo = mid, res_mid
            else:
                hi, res_hi = mid, res_mid
        if alpha_star is None:
            raise SolverError(
                f"bisection did not converge: interval [{lo}, {hi}], "
                f"residuals [{res_lo}, {res_hi}]"
            )

    lams, tau, case_id = _chain(alpha_star, constants, reserve, units)
    lams[-1] = theta_top  # pin the terminal value exactly
    table = ThresholdTable(
        alpha=alpha_star, tau=tau, lambdas=tuple(lams), case_id=case_id
    )
    table.verify(constants, reserve)
    return table


class DeterministicQuotaPolicy:
    """Streaming deterministic policy: quota phase first, then thresholds.

    While any labeled class has an unmet quota the agent is accepted
    unconditionally and every labeled counter advances; afterwards the agent
    is accepted iff a priced unit remains and its value meets the current
    threshold (ties accept).
    """

    def __init__(
        self,
        params: ProblemParams,
        spec: QuotaSpec,
        table: ThresholdTable | None = None,
    ):
        spec.validate_for(params)
        self.params = params
        self.spec = spec
        self.table = table if table is not None else solve_thresholds(params, spec)

    def run(self, instance: Instance, rng=None) -> Allocation:
        del rng  # deterministic policy
        units = self.params.budget - self.spec.total
        quota_count = [1] * self.params.num_classes
        unit_index = 1
        decisions = []
        for agent in instance.agents:
            unmet = [j for j in agent.labels if quota_count[j - 1] <= self.spec.quotas[j - 1]]
            if unmet:
                decisions.append(1.0)
                for j in agent.labels:
                    quota_count[j - 1] += 1
                continue
            accept = (
                unit_index <= units
                and agent.value >= self.table.lambdas[unit_index - 1] - 1e-12
            )
            if accept:
                decisions.append(1.0)
                unit_index += 1
            else:
                decisions.append(0.0)
        return Allocation(tuple(decisions), integral=True)

    def __call__(self, instance: Instance, rng=None) -> Allocation:
        return self.run(instance, rng)
