"""Exact combinatorial and statistical bounds used by certification.

Everything here is a pure function. Probabilities that feed the radius
search are kept as :class:`fractions.Fraction` so that comparisons against
the sampling shift are exact.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Iterable, Mapping

import numpy as np

ENUMERATION_LIMIT = 20


@dataclass(frozen=True)
class ShiftParams:
    n: int
    s: int
    d: int

    def __post_init__(self) -> None:
        for name in ("n", "s", "d"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.n < 1:
            raise ValueError("sentence length n must be positive")
        if self.s > self.n:
            raise ValueError(f"retained count s={self.s} exceeds length n={self.n}")


@dataclass(frozen=True)
class ConfidenceBound:
    lower: float
    upper: float
    successes: int
    trials: int
    alpha: float

    @property
    def rate(self) -> float:
        return self.successes / self.trials


@dataclass(frozen=True)
class RadiusOutcome:
    """Either ``Certified(radius)`` or ``Abstain``.

    ``gap`` is the lower bound of the top class minus the largest upper
    bound among the others; ``warning`` is set for degenerate inputs such
    as ``gamma == 0``.
    """

    certified: bool
    radius: int | None
    gap: float
    gamma: float
    warning: str | None = None

    @classmethod
    def abstain(cls, gap: float, gamma: float, warning: str | None = None) -> "RadiusOutcome":
        return cls(False, None, gap, gamma, warning)

    @property
    def kind(self) -> str:
        return "certified" if self.certified else "abstain"


def _params(n: int, s: int, d: int) -> ShiftParams:
    return ShiftParams(int(n), int(s), int(d))


def delta_shift(n: int, s: int, d: int) -> Fraction:
    """Exact sampling shift ``1 - C(n-d, s) / C(n, s)``.

    Uses the telescoping product ``prod_{i<d} (n-s-i)/(n-i)`` so no large
    binomial is ever formed. A budget ``d > n`` is clamped to ``n``.
    """
    p = _params(n, s, d)
    d = min(p.d, p.n)
    kept = Fraction(1)
    for i in range(d):
        num = p.n - p.s - i
        if num <= 0:
            return Fraction(1)
        kept *= Fraction(num, p.n - i)
    return 1 - kept


def delta_shift_asymptotic(n: int, s: int, d: int) -> float:
    """First-order approximation ``s*d / (n - s/2)``, valid for small ``d``."""
    p = _params(n, s, d)
    denom = p.n - p.s / 2
    if denom <= 0:
        raise ValueError("degenerate input: n - s/2 must be positive")
    return p.s * p.d / denom


def brute_force_delta(n: int, s: int, differing: Iterable[int]) -> Fraction:
    """Fraction of size-``s`` retention sets that touch a differing position.

    Enumerates every subset of ``{1..n}``; guarded to ``n <= 20``.
    """
    differing = frozenset(int(i) for i in differing)
    p = _params(n, s, len(differing))
    if p.n > ENUMERATION_LIMIT:
        raise ValueError(f"enumeration guard: n={p.n} > {ENUMERATION_LIMIT}")
    if any(i < 1 or i > p.n for i in differing):
        raise ValueError(f"differing positions must lie in 1..{p.n}")
    hit = total = 0
    for subset in itertools.combinations(range(1, p.n + 1), p.s):
        total += 1
        if differing.intersection(subset):
            hit += 1
    return Fraction(hit, total)


# -- binomial tails ---------------------------------------------------------


def _log_comb_row(trials: int) -> np.ndarray:
    k = np.arange(1, trials + 1, dtype=np.float64)
    steps = np.log(trials - k + 1) - np.log(k)
    return np.concatenate(([0.0], np.cumsum(steps)))


def _upper_tail(log_comb: np.ndarray, k: int, p: float) -> float:
    """P[X >= k] for X ~ Bin(len(log_comb) - 1, p)."""
    trials = len(log_comb) - 1
    if k <= 0:
        return 1.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    j = np.arange(k, trials + 1)
    logs = log_comb[k:] + j * math.log(p) + (trials - j) * math.log1p(-p)
    top = logs.max()
    return float(math.exp(top) * np.exp(logs - top).sum())


def _bisect(f, target: float, increasing: bool, tol: float) -> tuple[float, float]:
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        above = f(mid) > target
        if above == increasing:
            hi = mid
        else:
            lo = mid
    return lo, hi


def clopper_pearson(successes: int, trials: int, alpha: float, tol: float = 1e-10) -> ConfidenceBound:
    """Exact two-sided ``(1 - alpha)`` Clopper-Pearson interval.

    Each endpoint is found by bisection on binomial tail sums and the
    returned value is the conservative end of the final bracket.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not 0 <= successes <= trials:
        raise ValueError(f"successes={successes} outside 0..{trials}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    half = alpha / 2
    log_comb = _log_comb_row(trials)

    if successes == 0:
        lower = 0.0
    else:
        lower, _ = _bisect(lambda p: _upper_tail(log_comb, successes, p), half, True, tol)
    if successes == trials:
        upper = 1.0
    else:
        # P[X <= k; p] = 1 - P[X >= k+1; p], decreasing in p
        _, upper = _bisect(
            lambda p: 1.0 - _upper_tail(log_comb, successes + 1, p), half, False, tol
        )
    return ConfidenceBound(lower, upper, successes, trials, alpha)


def binom_p_value(count_a: int, total: int, p0: float = 0.5) -> float:
    """Two-sided exact binomial test p-value, capped at 1.

    Sums the probability of every outcome no more likely than the observed
    one. Arithmetic is exact: ``p0`` is taken as the rational value of the
    float.
    """
    if total < 1:
        raise ValueError("total must be at least 1")
    if not 0 <= count_a <= total:
        raise ValueError(f"count_a={count_a} outside 0..{total}")
    if not 0 <= p0 <= 1:
        raise ValueError(f"p0 must lie in [0, 1], got {p0}")
    q = Fraction(p0)
    a, b = q.numerator, q.denominator
    # unnormalised pmf: C(n, i) a^i (b-a)^(n-i); common factor b^n cancels
    weights = [math.comb(total, i) * a**i * (b - a) ** (total - i) for i in range(total + 1)]
    observed = weights[count_a]
    tail = sum(w for w in weights if w <= observed)
    return min(1.0, float(Fraction(tail, b**total)))


# -- radius search ----------------------------------------------------------


def certification_gap(bounds: Mapping[Hashable, ConfidenceBound], top_label: Hashable) -> float:
    if not bounds:
        raise ValueError("empty bounds map")
    if top_label not in bounds:
        raise KeyError(f"top label {top_label!r} missing from bounds")
    runner_up = max((b.upper for label, b in bounds.items() if label != top_label), default=0.0)
    return bounds[top_label].lower - runner_up


def radius_from_gap(gap: float | Fraction, gamma: float, n: int, s: int) -> RadiusOutcome:
    """Largest ``t`` in ``[0, n]`` with ``gap > 2 * gamma * delta_t``.

    ``gap`` may be a float or an exact :class:`~fractions.Fraction`.
    """
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    _params(n, s, 0)
    exact_gap = Fraction(gap)
    gap = float(gap)
    if exact_gap <= 0:
        return RadiusOutcome.abstain(gap, gamma)
    if gamma == 0:
        return RadiusOutcome(True, n, gap, gamma, "gamma=0: radius capped at sentence length")
    scale = 2 * Fraction(gamma)

    def ok(t: int) -> bool:
        return exact_gap > scale * delta_shift(n, s, t)

    lo, hi = 0, n  # ok(lo) holds since delta_0 == 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid - 1
    return RadiusOutcome(True, lo, gap, gamma)


def certified_radius(
    bounds: Mapping[Hashable, ConfidenceBound],
    top_label: Hashable,
    gamma: float,
    n: int,
    s: int,
) -> RadiusOutcome:
    return radius_from_gap(certification_gap(bounds, top_label), gamma, n, s)


def predict_improved_radius(
    r_star: int, slack_delta: float, epsilon: float, gamma: float, n: int, s: int
) -> int:
    """Closed-form radius after a clustering-induced probability shift.

    ``r_star + floor((n - s/2)(slack + 2 eps) / (2 gamma s))``, evaluated in
    exact rationals so the floor is not disturbed by rounding.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if s < 1:
        raise ValueError("s must be at least 1")
    if epsilon < 0 or slack_delta < 0:
        raise ValueError("epsilon and slack must be non-negative")
    if r_star < 0:
        raise ValueError("r_star must be non-negative")
    numer = (Fraction(n) - Fraction(s, 2)) * (Fraction(slack_delta) + 2 * Fraction(epsilon))
    return r_star + math.floor(numer / (2 * Fraction(gamma) * s))
