"""Adaptive difficulty posterior.

The testing loop rates every dialogue with a judge score s in [1, 10] and
keeps, per weakness, the ordered history of (difficulty, score) pairs. The
next difficulty is a reliability-weighted mean of per-test stepped
difficulties:

    step(d, s) = clip(d + eta * (2*sigmoid((s - anchor)/2) - 1), 1, 10)
    weight(s)  = exp(-|s - anchor| / weight_scale)
    posterior  = sum_i weight(s_i) * step(d_i, s_i) / sum_j weight(s_j)

With the defaults (eta=3, anchor=5.5, weight_scale=3) a perfect 10/10 bumps
difficulty by ~2.43, about one band of the 1-10 scale, while tests scoring
far from the anchor count less in the mean because extreme evaluations are
the least reliable. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import DomainError, EmptyHistoryError, InsufficientHistoryError

SCALE_LO = 1.0
SCALE_HI = 10.0

#: First test of every weakness starts mid-scale.
INITIAL_DIFFICULTY = 5.5

#: Default convergence threshold for successive posteriors.
DEFAULT_EPSILON = 0.25


@dataclass(frozen=True)
class DifficultyParams:
    """Constants of the update rule; override via run configuration."""

    eta: float = 3.0
    anchor: float = 5.5
    weight_scale: float = 3.0
    clip_lo: float = SCALE_LO
    clip_hi: float = SCALE_HI

    def __post_init__(self):
        if self.eta <= 0:
            raise DomainError(f"eta must be positive, got {self.eta}")
        if self.weight_scale <= 0:
            raise DomainError(f"weight_scale must be positive, got {self.weight_scale}")


DEFAULT_PARAMS = DifficultyParams()


@dataclass(frozen=True)
class DifficultyHistory:
    """Append-only (difficulty, score) pairs for one weakness thread."""

    entries: tuple[tuple[float, float], ...] = ()
    params: DifficultyParams = field(default_factory=DifficultyParams)

    def append(self, d: float, s: float) -> "DifficultyHistory":
        _check_domain("d", d)
        _check_domain("s", s)
        return replace(self, entries=self.entries + ((d, s),))

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[list[float]]:
        return [[d, s] for d, s in self.entries]

    @classmethod
    def from_pairs(
        cls, pairs, params: DifficultyParams = DEFAULT_PARAMS
    ) -> "DifficultyHistory":
        h = cls(params=params)
        for d, s in pairs:
            h = h.append(d, s)
        return h


@dataclass(frozen=True)
class DifficultyBand:
    name: str
    lo: float
    hi: float


#: Bands partition [1, 10]; boundary values 4 and 7 belong to the higher band.
BANDS = (
    DifficultyBand("easy", 1.0, 4.0),
    DifficultyBand("medium", 4.0, 7.0),
    DifficultyBand("hard", 7.0, 10.0),
)


def _check_domain(name: str, value: float) -> None:
    if not (SCALE_LO <= value <= SCALE_HI) or math.isnan(value):
        raise DomainError(f"{name}={value!r} outside [{SCALE_LO}, {SCALE_HI}]")


def _sigmoid(x: float) -> float:
    # Split to avoid overflow in exp for large |x|.
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def clip(value: float, lo: float = SCALE_LO, hi: float = SCALE_HI) -> float:
    return min(max(value, lo), hi)


def step(d: float, s: float, params: DifficultyParams = DEFAULT_PARAMS) -> float:
    """Stepped difficulty q(d, s) for a single test.

    Monotone nondecreasing in s; step(d, anchor) == d exactly.
    """
    _check_domain("d", d)
    _check_domain("s", s)
    raw = d + params.eta * (2.0 * _sigmoid((s - params.anchor) / 2.0) - 1.0)
    return clip(raw, params.clip_lo, params.clip_hi)


def weight(s: float, params: DifficultyParams = DEFAULT_PARAMS) -> float:
    """Reliability weight w(s), 1 at the anchor and symmetric around it."""
    _check_domain("s", s)
    return math.exp(-abs(s - params.anchor) / params.weight_scale)


def posterior(history: DifficultyHistory) -> float:
    """Weighted mean of stepped difficulties over the full history."""
    if len(history) == 0:
        raise EmptyHistoryError("posterior of an empty history")
    p = history.params
    num = 0.0
    den = 0.0
    for d, s in history.entries:
        w = weight(s, p)
        num += w * step(d, s, p)
        den += w
    return num / den


def converged(history: DifficultyHistory, epsilon: float = DEFAULT_EPSILON) -> bool:
    """True when the last entry moved the posterior by less than epsilon."""
    if len(history) < 2:
        raise InsufficientHistoryError(
            f"convergence check needs >=2 entries, got {len(history)}"
        )
    prev = replace(history, entries=history.entries[:-1])
    return abs(posterior(history) - posterior(prev)) < epsilon


def band_of(d: float) -> DifficultyBand:
    """Band for a difficulty; ties at 4 and 7 go to the higher band."""
    _check_domain("d", d)
    if d < 4.0:
        return BANDS[0]
    if d < 7.0:
        return BANDS[1]
    return BANDS[2]
