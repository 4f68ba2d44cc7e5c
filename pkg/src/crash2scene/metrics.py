"""Evaluation metrics for layout recovery and scenario realization.

Layout metrics compare predicted per-road lane counts against ground truth.
Roads are matched by approach angle (nearest neighbor, gated at 30 degrees);
single-road samples match by order. On matched roads:

- ``acc``: both sides exactly right.
- ``err_lane``: lane-count error on the road's wider side (the side whose
  true count is max(left, right); ties go to the left side).
- ``err_lane1``: err_lane with one miscounted lane forgiven.
- ``err_abs``: |dleft| + |dright|.
- ``err_sum``: |d(left + right)|, so opposite-side errors may cancel.
- ``err_road``: |predicted road count - true road count| per sample.

Unmatched true roads count as misses for ``acc`` and feed ``err_road`` but
contribute no lane errors. By construction err_lane1 <= err_lane <= err_abs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import MetricsInputError
from .roads import wrap_pm

ANGLE_GATE_RAD = math.radians(30.0)

Road = tuple[float | None, int, int]   # (angle or None, left, right)


@dataclass
class LaneSample:
    predicted: list[Road]
    truth: list[Road]


@dataclass
class MetricReport:
    acc: float
    err_lane: float
    err_lane1: float
    err_road: float
    err_abs: float
    err_sum: float
    samples: int
    matched_roads: int
    truth_roads: int

    def as_dict(self) -> dict:
        return {
            "acc": self.acc, "err_lane": self.err_lane,
            "err_lane1": self.err_lane1, "err_road": self.err_road,
            "err_abs": self.err_abs, "err_sum": self.err_sum,
            "samples": self.samples, "matched_roads": self.matched_roads,
            "truth_roads": self.truth_roads,
        }


def _match(predicted: list[Road], truth: list[Road]) -> list[tuple[Road, Road | None]]:
    if all(t[0] is None for t in truth) or all(p[0] is None for p in predicted):
        pairs: list[tuple[Road, Road | None]] = []
        for i, t in enumerate(truth):
            pairs.append((t, predicted[i] if i < len(predicted) else None))
        return pairs
    taken: set[int] = set()
    pairs = []
    for t in truth:
        best = None
        for i, p in enumerate(predicted):
            if i in taken or p[0] is None or t[0] is None:
                continue
            gap = abs(wrap_pm(p[0] - t[0]))
            if best is None or gap < best[0]:
                best = (gap, i)
        if best is not None and best[0] <= ANGLE_GATE_RAD:
            taken.add(best[1])
            pairs.append((t, predicted[best[1]]))
        else:
            pairs.append((t, None))
    return pairs


def lane_metrics(samples: list[LaneSample]) -> MetricReport:
    if not samples:
        raise MetricsInputError("no samples to score")
    hits = 0
    total_roads = 0
    matched = 0
    e_lane = e_lane1 = e_abs = e_sum = 0.0
    e_road = 0.0
    for sample in samples:
        e_road += abs(len(sample.predicted) - len(sample.truth))
        for truth, pred in _match(sample.predicted, sample.truth):
            total_roads += 1
            if pred is None:
                continue
            matched += 1
            _, tl, tr = truth
            _, pl, pr = pred
            if pl == tl and pr == tr:
                hits += 1
            wide_err = abs(pl - tl) if tl >= tr else abs(pr - tr)
            e_lane += wide_err
            e_lane1 += max(0, wide_err - 1)
            e_abs += abs(pl - tl) + abs(pr - tr)
            e_sum += abs((pl + pr) - (tl + tr))
    if total_roads == 0:
        raise MetricsInputError("samples contain no roads")
    denom = max(matched, 1)
    return MetricReport(
        acc=hits / total_roads,
        err_lane=e_lane / denom,
        err_lane1=e_lane1 / denom,
        err_road=e_road / len(samples),
        err_abs=e_abs / denom,
        err_sum=e_sum / denom,
        samples=len(samples),
        matched_roads=matched,
        truth_roads=total_roads,
    )


# --- scenario-level metrics ---------------------------------------------------


@dataclass
class ScenarioOutcome:
    """What one optimized scenario actually did in simulation."""
    scenario_id: str
    crash_pairs: list[tuple[str, str]]
    collided_pairs: list[tuple[str, str]]
    safety_term: float = 0.0
    expected_users: list[str] = field(default_factory=list)
    realized_users: list[str] = field(default_factory=list)
    expected_queues: list[list[str]] = field(default_factory=list)
    initial_order: list[list[str]] = field(default_factory=list)


def _norm_pair(pair: tuple[str, str]) -> tuple[str, str]:
    return tuple(sorted(pair))


def collision_rate(outcomes: list[ScenarioOutcome]) -> float:
    """Fraction of scenarios whose required crash pairs all collided."""
    if not outcomes:
        raise MetricsInputError("no outcomes to score")
    ok = 0
    for out in outcomes:
        need = {_norm_pair(p) for p in out.crash_pairs}
        got = {_norm_pair(p) for p in out.collided_pairs}
        if need <= got:
            ok += 1
    return ok / len(outcomes)


def acc_road_user(outcomes: list[ScenarioOutcome]) -> float:
    """Fraction of expected road users that made it into the scenario."""
    expected = 0
    present = 0
    for out in outcomes:
        for user in out.expected_users:
            expected += 1
            if user in out.realized_users:
                present += 1
    if expected == 0:
        raise MetricsInputError("no expected users recorded")
    return present / expected


def acc_init_rel_pos(outcomes: list[ScenarioOutcome]) -> float:
    """Fraction of queue constraints realized front-to-back at t = 0."""
    total = 0
    ok = 0
    for out in outcomes:
        for queue, order in zip(out.expected_queues, out.initial_order):
            total += 1
            if list(queue) == list(order):
                ok += 1
    if total == 0:
        raise MetricsInputError("no queue constraints recorded")
    return ok / total
