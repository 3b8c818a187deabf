"""Ground-truth solvers for the offline constrained bidding problem.

Given a fixed set of impressions with known values, predicted CTRs and
costs-if-won, pick the subset maximizing total value subject to the budget
and (optionally) the CPC ratio cap. Brute force certifies optimality on
small instances; the greedy value/cost threshold realizes the LP-relaxation
structure that a single scalar bid coefficient can express, and
``certify_closed_form`` checks that a threshold rule reproduces the
brute-force optimum up to the one boundary item of the integrality gap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

BRUTE_FORCE_LIMIT = 24


@dataclass
class BiddingInstance:
    """Offline instance: per-impression (value, pctr, cost), budget, CPC cap."""

    impressions: list[tuple[float, float, float]]  # (v_i, p_i, c_i)
    budget: float
    cpc_limit: float | None = None

    def __post_init__(self):
        for v, p, c in self.impressions:
            if v < 0 or c < 0:
                raise ValueError("values and costs must be nonnegative")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.impressions)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        arr = np.asarray(self.impressions, dtype=np.float64).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def to_dict(self) -> dict:
        return {"impressions": [list(i) for i in self.impressions],
                "budget": self.budget, "cpc_limit": self.cpc_limit}

    @classmethod
    def from_dict(cls, d: dict) -> "BiddingInstance":
        return cls([tuple(i) for i in d["impressions"]], d["budget"],
                   d.get("cpc_limit"))


@dataclass
class OracleSolution:
    selection: np.ndarray  # boolean [I]
    total_value: float
    total_cost: float
    dual_coefficients: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "selection": [bool(x) for x in self.selection],
            "total_value": self.total_value,
            "total_cost": self.total_cost,
            "dual_coefficients": list(self.dual_coefficients)
            if self.dual_coefficients else None,
        }


def _subset_sums(x: np.ndarray) -> np.ndarray:
    """sums[mask] = sum of x[i] over set bits of mask, for all 2^I masks."""
    n = x.size
    sums = np.zeros(1 << n)
    for i in range(n):
        lo = 1 << i
        sums[lo:2 * lo] = sums[:lo] + x[i]
    return sums


def solve_bruteforce(instance: BiddingInstance) -> OracleSolution:
    """Exhaustive optimum over all selections.

    Ties go to lower total cost, then to the lexicographically smallest
    selection (the mask with item i on bit i, i.e. earlier items preferred).
    """
    n = instance.size
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"instance too large for brute force: {n} > {BRUTE_FORCE_LIMIT}")
    v, p, c = instance.arrays()
    value_sums = _subset_sums(v)
    cost_sums = _subset_sums(c)
    feasible = cost_sums <= instance.budget
    if instance.cpc_limit is not None:
        pctr_sums = _subset_sums(p)
        # the CPC ratio constraint applies only when the selection has
        # positive predicted clicks
        feasible &= (pctr_sums == 0.0) | (cost_sums <= instance.cpc_limit * pctr_sums)

    masks = np.flatnonzero(feasible)
    order = np.lexsort((masks, cost_sums[masks], -value_sums[masks]))
    best = int(masks[order[0]])
    selection = np.array([(best >> i) & 1 for i in range(n)], dtype=bool)
    return OracleSolution(selection, float(value_sums[best]),
                          float(cost_sums[best]))


def _ratio_order(v: np.ndarray, c: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(c > 0, v / np.where(c > 0, c, 1.0), np.inf)
    ratios = np.where((c == 0) & (v == 0), 0.0, ratios)
    return np.lexsort((np.arange(v.size), -ratios))


def solve_threshold(instance: BiddingInstance) -> OracleSolution:
    """Greedy value/cost-ratio selection for budget-only instances.

    Items are scanned in decreasing ratio order (index breaks ties); an
    item is taken whenever its cost still fits the remaining budget.
    Zero-cost items with positive value sort first and are always taken.
    The inverse of the smallest taken ratio is reported as the candidate
    threshold coefficient: "select iff lambda * v > c".
    """
    if instance.cpc_limit is not None:
        raise ValueError("solve_threshold handles budget-only instances")
    v, _, c = instance.arrays()
    n = instance.size
    selection = np.zeros(n, dtype=bool)
    remaining = instance.budget
    min_taken_ratio = np.inf
    for i in _ratio_order(v, c):
        if c[i] <= remaining:
            selection[i] = True
            remaining -= c[i]
            if c[i] > 0:
                min_taken_ratio = min(min_taken_ratio, v[i] / c[i])
    lam = np.inf if min_taken_ratio == 0 else (
        0.0 if np.isinf(min_taken_ratio) else 1.0 / min_taken_ratio)
    return OracleSolution(selection, float(v[selection].sum()),
                          float(c[selection].sum()),
                          dual_coefficients=(lam, 0.0))


def lp_upper_bound(impressions: Sequence[tuple[float, float, float]],
                   budget: float) -> float:
    """Fractional-relaxation optimum of the budget-only problem.

    Greedy prefix in ratio order plus the fractional piece of the breaking
    item. Upper-bounds every integral selection, hence every policy's
    total value on the same impressions.
    """
    arr = np.asarray(impressions, dtype=np.float64).reshape(-1, 3)
    v, c = arr[:, 0], arr[:, 2]
    total = 0.0
    remaining = budget
    for i in _ratio_order(v, c):
        if c[i] <= remaining:
            total += v[i]
            remaining -= c[i]
        elif c[i] > 0:
            total += v[i] * remaining / c[i]
            break
    return float(total)


def certify_closed_form(instance: BiddingInstance,
                        solution: OracleSolution) -> bool:
    """Does some scalar threshold rule reproduce ``solution``?

    True iff there is a lambda such that selecting exactly the impressions
    with lambda * v_i > c_i matches the given selection up to at most one
    item (the LP integrality gap). Candidate thresholds are swept between
    consecutive distinct value/cost ratios.
    """
    v, _, c = instance.arrays()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(c > 0, v / np.where(c > 0, c, 1.0), np.inf)
    ratios = np.where((c == 0) & (v == 0), 0.0, ratios)
    finite = np.unique(ratios[np.isfinite(ratios)])
    # thresholds strictly between ratio levels, plus one below all and one above all
    candidates = [-1.0]
    if finite.size:
        candidates.extend(0.5 * (finite[:-1] + finite[1:]))
        candidates.append(finite[-1] + 1.0)
        candidates.append(finite[0] - 0.5 * abs(finite[0]) - 0.1)
    target = solution.selection.astype(bool)
    for theta in candidates:
        chosen = ratios > theta
        if np.count_nonzero(chosen != target) <= 1:
            return True
    return False
