"""Piecewise-exponential threshold curves and the Lambert W function.

Every threshold function used by the fractional policies has the same shape:
a chain of pieces ``phi(u) = exp(rate*u + offset)`` (a flat piece is rate 0,
offset 0).  The curve supports exact evaluation, a right-most inverse (so
allocation amounts break ties toward larger values), and closed-form
integrals for pseudo-revenue maximization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

_INV_E = math.exp(-1.0)


def lambert_w(x: float) -> float:
    """Principal-branch Lambert W via Halley iteration.

    Defined for ``x >= -1/e``; the result w satisfies ``w * exp(w) = x`` to
    a relative residual of 1e-12.  Initial guess: the branch-point series
    near -1/e, w ~ x for small x, and log(x) - log(log(x)) for large x.
    """
    if x < -_INV_E - 1e-14:
        raise ValueError(f"lambert_w defined for x >= -1/e, got {x}")
    if abs(x + _INV_E) <= 1e-14:
        return -1.0
    if x == 0.0:
        return 0.0
    if x < -0.25:
        p = math.sqrt(2.0 * (math.e * x + 1.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 * p ** 3 / 72.0
    elif x < math.e:
        w = x / (1.0 + x)
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= 1e-13 * max(1.0, abs(x)):
            break
        denom = ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0)
        w -= f / denom
    residual = abs(w * math.exp(w) - x)
    if residual > 1e-12 * max(1.0, abs(x)):
        raise ArithmeticError(f"lambert_w failed to converge at x={x}")
    return w


@dataclass(frozen=True)
class Piece:
    lo: float
    hi: float
    rate: float
    offset: float

    def value(self, u: float) -> float:
        return math.exp(self.rate * u + self.offset)


class PiecewiseExpCurve:
    """Nondecreasing continuous curve built from exponential pieces on [0, end]."""

    def __init__(self, pieces: list[Piece], tol: float = 1e-9):
        self.pieces = [p for p in pieces if p.hi - p.lo > 1e-15]
        if not self.pieces:
            raise ValueError("curve needs at least one nonempty piece")
        self.start = self.pieces[0].lo
        self.end = self.pieces[-1].hi
        for piece in self.pieces:
            if piece.rate < 0:
                raise ValueError("curve pieces must be nondecreasing")
        for left, right in zip(self.pieces, self.pieces[1:]):
            if abs(left.hi - right.lo) > 1e-9:
                raise ValueError("curve pieces must tile the domain")
            gap = abs(left.value(left.hi) - right.value(right.lo))
            if gap > tol * max(1.0, left.value(left.hi)):
                raise ValueError(f"curve discontinuous at u={left.hi}: gap {gap}")

    def value(self, u: float) -> float:
        if u < self.start - 1e-9 or u > self.end + 1e-9:
            raise ValueError(f"u={u} outside curve domain [{self.start}, {self.end}]")
        u = min(max(u, self.start), self.end)
        for piece in self.pieces:
            if u <= piece.hi + 1e-15:
                return piece.value(u)
        return self.pieces[-1].value(self.end)

    def inverse(self, v: float) -> float:
        """Largest u in the domain with phi(u) <= v (right-most inverse)."""
        for piece in reversed(self.pieces):
            v_lo = piece.value(piece.lo)
            if v >= piece.value(piece.hi) * (1.0 - 1e-13):
                return piece.hi
            if v >= v_lo * (1.0 - 1e-13):
                if piece.rate == 0.0:
                    return piece.hi
                u = (math.log(v) - piece.offset) / piece.rate
                return min(max(u, piece.lo), piece.hi)
        return self.start

    def integral(self, u0: float, u1: float) -> float:
        """Closed-form integral of the curve between u0 <= u1."""
        if u1 < u0 - 1e-12:
            raise ValueError("integral bounds out of order")
        u0 = min(max(u0, self.start), self.end)
        u1 = min(max(u1, self.start), self.end)
        total = 0.0
        for piece in self.pieces:
            lo = max(u0, piece.lo)
            hi = min(u1, piece.hi)
            if hi <= lo:
                continue
            if piece.rate == 0.0:
                total += (hi - lo) * math.exp(piece.offset)
            else:
                total += (
                    math.exp(piece.rate * hi + piece.offset)
                    - math.exp(piece.rate * lo + piece.offset)
                ) / piece.rate
        return total

    def breakpoints(self) -> list[float]:
        return [self.pieces[0].lo] + [p.hi for p in self.pieces]

    def to_dict(self) -> dict:
        return {
            "pieces": [
                {"lo": p.lo, "hi": p.hi, "rate": p.rate, "offset": p.offset}
                for p in self.pieces
            ]
        }
