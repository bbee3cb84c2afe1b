"""Result distances, result-set diameter and trustworthy-subset selection."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence


class Metric(enum.IntEnum):
    EUCLIDEAN = 0
    MAX_MINUS_MIN = 1
    CHEBYSHEV = 2


_METRIC_NAMES = {
    "euclidean": Metric.EUCLIDEAN,
    "max_minus_min": Metric.MAX_MINUS_MIN,
    "chebyshev": Metric.CHEBYSHEV,
}


@dataclass(frozen=True)
class DistanceDescriptor:
    """A registered metric plus the default agreement threshold.

    The selection rule is fixed: the largest subset within epsilon.
    """

    metric: Metric
    default_epsilon: float

    def __post_init__(self):
        if not isinstance(self.metric, Metric):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.default_epsilon >= 0:
            raise ValueError("default_epsilon must be nonnegative")

    def __str__(self) -> str:
        return f"{self.metric.name.lower()}:{self.default_epsilon!r}"

    @classmethod
    def parse(cls, text: str) -> "DistanceDescriptor":
        """Parse the ``metric:epsilon`` form, e.g. ``max_minus_min:0.2``."""
        name, sep, eps = text.partition(":")
        if not sep:
            raise ValueError(f"expected 'metric:epsilon', got {text!r}")
        try:
            metric = _METRIC_NAMES[name.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown metric {name!r}; known: {sorted(_METRIC_NAMES)}") from None
        return cls(metric, float(eps))


def delta(metric: Metric, x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if metric == Metric.EUCLIDEAN:
        # fsum rounds the sum once, so the value does not depend on summation order
        return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(x, y)))
    if metric == Metric.CHEBYSHEV:
        return max((abs(a - b) for a, b in zip(x, y)), default=0.0)
    if metric == Metric.MAX_MINUS_MIN:
        # scalar results: the spread of a pair is |x0 - y0|
        if not x:
            return 0.0
        return abs(x[0] - y[0])
    raise ValueError(f"unknown metric {metric!r}")


def diameter(metric: Metric, results: Sequence[Sequence[float]]) -> float:
    if not results:
        raise ValueError("diameter of an empty result set")
    return max((delta(metric, a, b) for a, b in combinations(results, 2)), default=0.0)


@dataclass(frozen=True)
class AgreementOutcome:
    selected: tuple[int, ...]
    diameter: float
    satisfied: bool


class InsufficientResults(ValueError):
    """Fewer than N - f results were supplied; distinct from an unsatisfied quorum."""


def select_quorum(
    results: Mapping[int, Sequence[float]],
    n: int,
    f: int,
    metric: Metric,
    epsilon: float,
) -> AgreementOutcome:
    """Largest subset of at least ``n - f`` results whose diameter is within ``epsilon``.

    Ties between equally large subsets go to the smaller diameter, then to the
    lexicographically smallest sorted index tuple, so every honest node picks
    the same subset from the same inputs.
    """
    need = n - f
    if len(results) < need:
        raise InsufficientResults(f"{len(results)} results present, {need} required")
    nodes = sorted(results)
    m = len(nodes)
    # pairwise distances once; subsets then only look them up
    dist = [[0.0] * m for _ in range(m)]
    for a in range(m):
        for b in range(a + 1, m):
            d = delta(metric, results[nodes[a]], results[nodes[b]])
            if d != d:
                d = math.inf
            dist[a][b] = dist[b][a] = d
    # within one size, combinations() yields lexicographic order, so keeping
    # the first strict minimum gives the documented tie-break
    for size in range(m, need - 1, -1):
        best = None
        best_diam = math.inf
        for combo in combinations(range(m), size):
            diam = 0.0
            for i, a in enumerate(combo):
                row = dist[a]
                for b in combo[i + 1:]:
                    if row[b] > diam:
                        diam = row[b]
                if diam > epsilon:
                    break
            if diam <= epsilon and diam < best_diam:
                best, best_diam = combo, diam
        if best is not None:
            return AgreementOutcome(tuple(nodes[i] for i in best), best_diam, True)
    return AgreementOutcome((), 0.0, False)
