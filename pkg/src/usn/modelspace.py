"""Model-space combinatorics for sparse and uniform sparse layers.

All counts are astronomically large for realistic layers (``10**33877`` for a
1000x250 layer at density 0.1), so everything here lives in the log10 domain.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

_LN10 = math.log(10.0)

MAX_ENUMERATION_SLOTS = 24


@dataclass(frozen=True, order=True)
class LogCount:
    """A nonnegative count stored as its base-10 logarithm.

    A count of zero is represented by ``-inf``; a count of one by ``0.0``.
    Multiplying counts adds their ``log10_value``.
    """

    log10_value: float

    @classmethod
    def from_count(cls, n: int) -> "LogCount":
        if n < 0:
            raise ValueError("counts are nonnegative")
        if n == 0:
            return cls(-math.inf)
        return cls(math.log10(n))

    def __mul__(self, other: "LogCount") -> "LogCount":
        return LogCount(self.log10_value + other.log10_value)

    def __truediv__(self, other: "LogCount") -> "LogCount":
        return LogCount(self.log10_value - other.log10_value)

    def __float__(self) -> float:
        return self.log10_value


@dataclass(frozen=True)
class SpaceParams:
    """Layer shape and connection density; density is clamped to [0, 1]."""

    n_in: int
    n_out: int
    density: float

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"layer sizes must be positive, got {self.n_in}x{self.n_out}")
        object.__setattr__(self, "density", min(1.0, max(0.0, float(self.density))))

    @property
    def slots(self) -> int:
        return self.n_in * self.n_out

    @property
    def total_edges(self) -> int:
        return round_half_up(self.density * self.slots)


@dataclass(frozen=True)
class UsnSpace:
    """Intermediate quantities of the uniform model-space count, all log10."""

    log10_n: float
    log10_n1: float
    log10_n2: float
    log10_p1: float
    log10_p2: float
    log10_p: float
    log10_nu: float

    @property
    def nu(self) -> LogCount:
        return LogCount(self.log10_nu)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


_HALF_LN_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_tail(x: int) -> float:
    """ln(x!) minus its Stirling approximation (x + 1/2) ln x - x + ln(2 pi)/2."""
    if x < 16:
        return math.lgamma(x + 1) - ((x + 0.5) * math.log(x) - x + _HALF_LN_2PI)
    r = 1.0 / x
    r2 = r * r
    return r * (1 / 12 - r2 * (1 / 360 - r2 * (1 / 1260 - r2 / 1680)))


def log10_binomial(n: int, k: int) -> LogCount:
    """log10 of C(n, k) via the Stirling series.

    The leading terms are arranged as ``k ln(n/k) + m ln(n/m)`` with
    ``m = n - k`` so that no large log-gamma values cancel; this keeps
    roughly 14 significant digits for n up to 10**7 and beyond.
    """
    if n < 0 or k < 0:
        raise ValueError(f"binomial arguments must be nonnegative, got ({n}, {k})")
    if k > n:
        raise ValueError(f"binomial C({n}, {k}) requires k <= n")
    k = min(k, n - k)
    if k == 0:
        return LogCount(0.0)
    m = n - k
    ln = (
        k * math.log(n / k)
        - m * math.log1p(-k / n)
        + 0.5 * math.log(n / (k * m))
        - _HALF_LN_2PI
        + _stirling_tail(n)
        - _stirling_tail(k)
        - _stirling_tail(m)
    )
    return LogCount(ln / _LN10)


def _lb(n: int, k: int) -> float:
    return log10_binomial(n, k).log10_value


def sparse_space(params: SpaceParams) -> LogCount:
    """Number of ways to place E edges on the n_in x n_out slot grid."""
    return log10_binomial(params.slots, params.total_edges)


def _degree_log(n_pop: int, n_targets: int, edges: int, rounding: str) -> float:
    """Sum over a population of log10 C(n_targets, d_i) for its neuron degrees.

    ``nearest`` gives every neuron the mean degree ``edges / n_pop`` rounded
    half-up; ``split`` uses the actual integer degrees of a uniform pattern
    (``base`` for most neurons, ``base + 1`` for the remainder).
    """
    base, rem = divmod(edges, n_pop)
    if rounding == "nearest":
        d = base + (1 if 2 * rem >= n_pop else 0)
        return n_pop * _lb(n_targets, min(d, n_targets))
    if rounding == "split":
        total = (n_pop - rem) * _lb(n_targets, base)
        if rem:
            total += rem * _lb(n_targets, base + 1)
        return total
    raise ValueError(f"unknown degree rounding {rounding!r}")


def usn_space_detail(params: SpaceParams, rounding: str = "nearest") -> UsnSpace:
    """Asymptotic uniform model-space size with all intermediate terms.

    The input side contributes C(n_out, d_out) per input neuron and the
    output side C(n_in, d_in) per output neuron; see :func:`_degree_log` for
    how fractional mean degrees become integers.
    """
    e = params.total_edges
    log_n = _lb(params.slots, e)
    log_n1 = _degree_log(params.n_in, params.n_out, e, rounding)
    log_n2 = _degree_log(params.n_out, params.n_in, e, rounding)
    log_p1 = log_n1 - log_n
    log_p2 = log_n2 - log_n
    log_p = log_p1 + log_p2
    return UsnSpace(
        log10_n=log_n,
        log10_n1=log_n1,
        log10_n2=log_n2,
        log10_p1=log_p1,
        log10_p2=log_p2,
        log10_p=log_p,
        log10_nu=log_p + log_n,
    )


def usn_space(params: SpaceParams, rounding: str = "nearest") -> LogCount:
    return usn_space_detail(params, rounding).nu


def expected_variation(density: float) -> float:
    """Expected fraction of edges differing between two independent patterns."""
    return 1.0 - density


def enumerate_usn_exact(params: SpaceParams, max_slots: int = MAX_ENUMERATION_SLOTS) -> int:
    """Exact number of uniform masks for tiny layers.

    Counts binary n_in x n_out masks with exactly E ones whose row sums differ
    by at most one and whose column sums differ by at most one. Rows are
    enumerated one at a time over all admissible column subsets, memoized on
    the running column sums.
    """
    if params.slots > max_slots:
        raise ValueError(
            f"exact enumeration limited to {max_slots} slots, got {params.n_in}x{params.n_out}"
        )
    n_in, n_out = params.n_in, params.n_out
    e = params.total_edges
    q_out, r_out = divmod(e, n_in)
    q_in, r_in = divmod(e, n_out)
    cap = q_in + (1 if r_in else 0)
    row_choices = {
        d: [frozenset(c) for c in itertools.combinations(range(n_out), d)]
        for d in {q_out, q_out + 1}
        if d <= n_out
    }

    @lru_cache(maxsize=None)
    def count(row: int, plus_left: int, col_sums: tuple) -> int:
        if row == n_in:
            return int(plus_left == 0 and all(q_in <= s <= cap for s in col_sums))
        total = 0
        for d, bonus in ((q_out, 0), (q_out + 1, 1)):
            if bonus > plus_left or d not in row_choices:
                continue
            if bonus == 0 and n_in - row - 1 < plus_left:
                continue
            for cols in row_choices[d]:
                sums = tuple(s + (j in cols) for j, s in enumerate(col_sums))
                if max(sums, default=0) > cap:
                    continue
                total += count(row + 1, plus_left - bonus, sums)
        return total

    return count(0, r_out, (0,) * n_out)
