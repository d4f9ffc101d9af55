"""Domain types, fairness metrics, and instance serialization.

An arrival stream consists of agents, each requesting one unit of a budget of
``B`` identical units.  Every agent carries a valuation and a nonempty set of
class labels drawn from ``1..K``; class ``j`` valuations live in
``[1, theta_j]`` and multi-labeled agents are capped by the smallest theta
among their labels.  All values here are immutable after construction and the
metric functions are pure.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

#: absolute tolerance for real comparisons throughout the package
TOL = 1e-9


class InstanceError(ValueError):
    """An instance record violates the model invariants."""


class AlignmentError(ValueError):
    """An allocation's length does not match its instance."""


class InfeasibleQuotaError(ValueError):
    """A quota spec cannot be met on the given instance."""

    def __init__(self, message: str, deficient_class: int | None = None):
        super().__init__(message)
        self.deficient_class = deficient_class


@dataclass(frozen=True)
class ProblemParams:
    """Problem-level constants: budget, class count, and fluctuation ratios."""

    budget: int
    num_classes: int
    theta: tuple[float, ...]

    def __post_init__(self):
        if self.budget < 1 or self.budget != int(self.budget):
            raise InstanceError(f"budget must be a positive integer, got {self.budget}")
        if self.num_classes < 1:
            raise InstanceError(f"num_classes must be >= 1, got {self.num_classes}")
        object.__setattr__(self, "theta", tuple(float(x) for x in self.theta))
        if len(self.theta) != self.num_classes:
            raise InstanceError(
                f"theta has {len(self.theta)} entries for {self.num_classes} classes"
            )
        for j, th in enumerate(self.theta, start=1):
            if th < 1.0:
                raise InstanceError(f"theta_{j} = {th} < 1")
        for j in range(1, self.num_classes):
            if self.theta[j] < self.theta[j - 1]:
                raise InstanceError("theta must be nondecreasing")

    def value_cap(self, labels: Iterable[int]) -> float:
        return min(self.theta[j - 1] for j in labels)


@dataclass(frozen=True)
class Agent:
    """One arrival: a valuation plus the set of class labels it belongs to."""

    value: float
    labels: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "labels", frozenset(int(j) for j in self.labels))
        if not self.labels:
            raise InstanceError("agent label set is empty")
        if any(j < 1 for j in self.labels):
            raise InstanceError(f"agent labels must be >= 1, got {sorted(self.labels)}")

    def sorted_labels(self) -> list[int]:
        return sorted(self.labels)


@dataclass(frozen=True)
class QuotaSpec:
    """Per-class minimum acceptance counts (quantity fairness requirement)."""

    quotas: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "quotas", tuple(int(m) for m in self.quotas))
        if any(m < 0 for m in self.quotas):
            raise InstanceError("quotas must be nonnegative")

    @property
    def total(self) -> int:
        return sum(self.quotas)

    def validate_for(self, params: ProblemParams):
        if len(self.quotas) != params.num_classes:
            raise InstanceError(
                f"{len(self.quotas)} quotas given for {params.num_classes} classes"
            )
        if self.total > params.budget:
            raise InfeasibleQuotaError(
                f"total quota {self.total} exceeds budget {params.budget}"
            )


@dataclass(frozen=True)
class Instance:
    """An ordered arrival sequence together with its problem parameters."""

    params: ProblemParams
    agents: tuple[Agent, ...]

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        for t, agent in enumerate(self.agents, start=1):
            bad = [j for j in agent.labels if j > self.params.num_classes]
            if bad:
                raise InstanceError(f"agent {t}: unknown class index {bad[0]}")
            cap = self.params.value_cap(agent.labels)
            if not (1.0 - TOL <= agent.value <= cap + TOL):
                raise InstanceError(
                    f"agent {t}: value {agent.value} outside [1, {cap}]"
                )

    def __len__(self) -> int:
        return len(self.agents)

    def values(self) -> list[float]:
        return [a.value for a in self.agents]

    def prefix(self, length: int) -> "Instance":
        return Instance(self.params, self.agents[:length])


@dataclass(frozen=True)
class Allocation:
    """Per-agent decisions, fractional in [0,1] or integral in {0,1}."""

    decisions: tuple[float, ...]
    integral: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decisions", tuple(float(x) for x in self.decisions))
        for t, x in enumerate(self.decisions, start=1):
            if not (-TOL <= x <= 1.0 + TOL):
                raise InstanceError(f"decision {t} = {x} outside [0, 1]")
            if self.integral and x not in (0.0, 1.0):
                raise InstanceError(f"decision {t} = {x} not integral")

    def __len__(self) -> int:
        return len(self.decisions)

    def total(self) -> float:
        return sum(self.decisions)

    def validate_for(self, instance: Instance):
        _check_aligned(instance, self)
        budget = instance.params.budget
        total = self.total()
        if self.integral:
            if total > budget:
                raise InstanceError(f"integral allocation uses {total} > budget {budget}")
        elif total > budget + TOL:
            raise InstanceError(f"allocation total {total} exceeds budget {budget}")

    def value(self, instance: Instance) -> float:
        _check_aligned(instance, self)
        return sum(a.value * x for a, x in zip(instance.agents, self.decisions))


def _check_aligned(instance: Instance, alloc: Allocation):
    if len(alloc.decisions) != len(instance.agents):
        raise AlignmentError(
            f"allocation has {len(alloc.decisions)} decisions for "
            f"{len(instance.agents)} agents"
        )


def class_utilities(instance: Instance, alloc: Allocation) -> list[float]:
    """Per-class accumulated value: U_j = sum_t v_t * x_t over agents labeled j."""
    _check_aligned(instance, alloc)
    utils = [0.0] * instance.params.num_classes
    for agent, x in zip(instance.agents, alloc.decisions):
        if x == 0.0:
            continue
        gain = agent.value * x
        for j in agent.labels:
            utils[j - 1] += gain
    return utils


def class_counts(instance: Instance, alloc: Allocation) -> list[float]:
    """Per-class accepted mass: sum_t x_t over agents labeled j."""
    _check_aligned(instance, alloc)
    counts = [0.0] * instance.params.num_classes
    for agent, x in zip(instance.agents, alloc.decisions):
        if x == 0.0:
            continue
        for j in agent.labels:
            counts[j - 1] += x
    return counts


def quotas_satisfied(instance: Instance, alloc: Allocation, spec: QuotaSpec) -> bool:
    """True iff every class received at least its quota (within tolerance)."""
    counts = class_counts(instance, alloc)
    return all(c >= m - TOL for c, m in zip(counts, spec.quotas))


def fairness_ratio(instance: Instance, alloc: Allocation) -> float:
    """Best alternative allocation's average per-class utility ratio.

    Returns ``max_w (1/K) sum_j U_j(w) / U_j(alloc)`` over all fractional
    allocations ``w`` with ``w_t in [0,1]`` and ``sum w_t <= B``.  An
    allocation is beta-proportionally-fair exactly when this is <= beta.

    A zero ratio term 0/0 counts as 0; a class with zero utility that some
    arrival could serve makes the ratio +inf.  The maximizer is the sum of the
    ``B`` largest per-agent coefficients ``v_t * sum_{j in labels_t} 1/U_j``,
    which is integral here because the objective is linear in ``w``.
    """
    _check_aligned(instance, alloc)
    k = instance.params.num_classes
    utils = class_utilities(instance, alloc)
    reachable = [False] * k
    for agent in instance.agents:
        for j in agent.labels:
            reachable[j - 1] = True
    for j in range(k):
        if utils[j] == 0.0 and reachable[j]:
            return math.inf
    inv = [1.0 / u if u > 0.0 else 0.0 for u in utils]
    coef = sorted(
        (agent.value * sum(inv[j - 1] for j in agent.labels) for agent in instance.agents),
        reverse=True,
    )
    take = min(instance.params.budget, len(coef))
    return sum(coef[:take]) / k


def _parse_header(obj: dict, line_no: int) -> tuple[ProblemParams, QuotaSpec | None]:
    try:
        params = ProblemParams(
            budget=obj["B"], num_classes=obj["K"], theta=tuple(obj["theta"])
        )
    except KeyError as exc:
        raise InstanceError(f"line {line_no}: header missing key {exc}") from exc
    quotas = None
    if "quotas" in obj and obj["quotas"] is not None:
        quotas = QuotaSpec(tuple(obj["quotas"]))
        quotas.validate_for(params)
    return params, quotas


def read_instance(source: str | Path | IO[str]) -> tuple[Instance, QuotaSpec | None]:
    """Read a JSON-lines instance file: one header line, then one agent per line.

    Header: ``{"B": int, "K": int, "theta": [...], "quotas": [...](optional)}``.
    Agents: ``{"v": real, "labels": [ints]}`` in arrival order.
    """
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = Path(source).read_text().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise InstanceError("empty instance file: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise InstanceError(f"line 1: invalid JSON header: {exc}") from exc
    params, quotas = _parse_header(header, 1)
    agents = []
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InstanceError(f"line {line_no}: invalid JSON: {exc}") from exc
        if "v" not in obj or "labels" not in obj:
            raise InstanceError(f"line {line_no}: agent record needs 'v' and 'labels'")
        try:
            agents.append(Agent(value=obj["v"], labels=frozenset(obj["labels"])))
        except InstanceError as exc:
            raise InstanceError(f"line {line_no}: {exc}") from exc
    try:
        instance = Instance(params, tuple(agents))
    except InstanceError as exc:
        raise InstanceError(f"{exc} (record index is 1-based over agents)") from exc
    return instance, quotas


def write_instance(
    instance: Instance,
    dest: str | Path | IO[str],
    quotas: QuotaSpec | None = None,
):
    """Write an instance (and optional quota spec) in the JSON-lines format."""
    header: dict = {
        "B": instance.params.budget,
        "K": instance.params.num_classes,
        "theta": list(instance.params.theta),
    }
    if quotas is not None:
        header["quotas"] = list(quotas.quotas)
    lines = [json.dumps(header)]
    for agent in instance.agents:
        lines.append(json.dumps({"v": agent.value, "labels": agent.sorted_labels()}))
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text)


def allocation_from_decisions(decisions: Sequence[float], integral: bool) -> Allocation:
    return Allocation(tuple(decisions), integral=integral)
