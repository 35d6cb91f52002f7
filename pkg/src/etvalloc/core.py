"""Domain types and validation for exact-demand fund allocation.

The problem instance is a roster of N users and K fund segments. Each user
carries a risk tolerance level and a feature vector; each fund carries a risk
level, an exact demand (how many users it must receive), and its own feature
vector. A valid plan sends every user to exactly one fund, hits every fund's
demand exactly, and never places a user on a fund whose risk level exceeds
the user's tolerance (eligibility: t_i >= r_j).

Validation functions return lists of :class:`Violation` records instead of
raising, so callers can report every broken invariant at once. Feasibility of
an instance is decided by a bipartite eligibility max-flow with users
condensed by tolerance level (users sharing a level are interchangeable).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np


class EtvAllocError(Exception):
    """Base class for all library errors."""


class ShapeError(EtvAllocError):
    """Array or record dimensions are inconsistent."""


class ConfigError(EtvAllocError):
    """A configuration value is out of its documented range."""


class InfeasibleError(EtvAllocError):
    """No assignment can satisfy the demand and eligibility constraints."""


class NonFiniteLossError(EtvAllocError):
    """A loss evaluation overflowed to inf or nan."""


class DivergedError(EtvAllocError):
    """Training validation loss became non-finite or blew past the divergence cap."""


class EmptyDataError(EtvAllocError):
    """An operation that needs samples received none."""


class EmptyDeliveriesError(EtvAllocError):
    """Delivery-normalized metrics are undefined without deliveries."""


class DataFormatError(EtvAllocError):
    """A file being read does not match its documented format."""


class Violation(NamedTuple):
    code: str     # stable kind: DemandMismatch, Infeasible, ShapeError, DemandViolation, RiskViolation
    message: str  # human-readable, names the binding constraint


@dataclass(frozen=True)
class UserRecord:
    user_id: int
    tolerance: int        # risk tolerance level t_i, non-negative int
    features: np.ndarray  # shape (d,)


@dataclass(frozen=True)
class FundType:
    fund_id: int
    risk_level: int       # r_j; user i is eligible iff t_i >= r_j
    demand: int           # exact number of users the fund must receive, >= 1
    features: np.ndarray  # shape (m,)


@dataclass(frozen=True)
class Instance:
    """Immutable problem instance; array views are cached and read-only."""

    users: list[UserRecord]
    funds: list[FundType]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_funds(self) -> int:
        return len(self.funds)

    @property
    def feature_dim(self) -> int:
        return len(self.users[0].features) if self.users else 0

    @property
    def fund_feature_dim(self) -> int:
        return len(self.funds[0].features) if self.funds else 0

    @cached_property
    def user_features(self) -> np.ndarray:
        arr = np.array([u.features for u in self.users], dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def tolerances(self) -> np.ndarray:
        arr = np.array([u.tolerance for u in self.users], dtype=np.int64)
        arr.flags.writeable = False
        return arr

    @cached_property
    def fund_features(self) -> np.ndarray:
        arr = np.array([f.features for f in self.funds], dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def risk_levels(self) -> np.ndarray:
        arr = np.array([f.risk_level for f in self.funds], dtype=np.int64)
        arr.flags.writeable = False
        return arr

    @cached_property
    def demands(self) -> np.ndarray:
        arr = np.array([f.demand for f in self.funds], dtype=np.int64)
        arr.flags.writeable = False
        return arr

    @cached_property
    def eligibility(self) -> np.ndarray:
        """Boolean (N, K): eligibility[i, j] iff tolerance_i >= risk_level_j."""
        arr = self.tolerances[:, None] >= self.risk_levels[None, :]
        arr.flags.writeable = False
        return arr


@dataclass(frozen=True)
class EtvMatrix:
    """Per-(user, fund) expected transaction values, shape (N, K)."""

    values: np.ndarray


@dataclass(frozen=True)
class AllocationPlan:
    """assignment[i] is the fund id user i is sent to."""

    assignment: np.ndarray


def make_instance(user_features, tolerances, fund_features, risk_levels, demands) -> Instance:
    """Build an Instance from plain arrays; ids are assigned densely in order."""
    user_features = np.asarray(user_features, dtype=float)
    fund_features = np.asarray(fund_features, dtype=float)
    users = [
        UserRecord(i, int(t), user_features[i])
        for i, t in enumerate(np.asarray(tolerances, dtype=np.int64))
    ]
    funds = [
        FundType(j, int(r), int(d), fund_features[j])
        for j, (r, d) in enumerate(zip(np.asarray(risk_levels), np.asarray(demands)))
    ]
    return Instance(users=users, funds=funds)


def _etv_values(etv) -> np.ndarray:
    values = etv.values if isinstance(etv, EtvMatrix) else np.asarray(etv, dtype=float)
    if values.ndim != 2:
        raise ShapeError(f"ETV matrix must be 2-dimensional, got shape {values.shape}")
    return values


def _plan_array(plan) -> np.ndarray:
    arr = plan.assignment if isinstance(plan, AllocationPlan) else np.asarray(plan)
    return np.asarray(arr, dtype=np.int64)


def objective(etv, plan) -> float:
    """Total expected value collected by a plan: sum_i etv[i, plan[i]]."""
    values = _etv_values(etv)
    assignment = _plan_array(plan)
    if assignment.shape != (values.shape[0],):
        raise ShapeError(
            f"plan length {assignment.shape} does not match {values.shape[0]} users"
        )
    if assignment.size and (assignment.min() < 0 or assignment.max() >= values.shape[1]):
        raise ShapeError("plan references fund ids outside the ETV matrix")
    return float(values[np.arange(len(assignment)), assignment].sum())


def demand_coverage(tolerances, risk_levels, demands) -> int:
    """Maximum total demand fillable under eligibility, via bipartite max flow.

    Users are condensed by tolerance level (they are interchangeable within a
    level), so the network stays tiny regardless of N: source -> level groups
    -> funds -> sink, with Edmonds-Karp style BFS augmentation.
    """
    tolerances = np.asarray(tolerances)
    risk_levels = np.asarray(risk_levels)
    demands = np.asarray(demands)
    levels, counts = np.unique(tolerances, return_counts=True)
    n_lv, n_fd = len(levels), len(risk_levels)
    n = n_lv + n_fd + 2  # 0 = source, 1..n_lv = levels, then funds, last = sink
    cap = np.zeros((n, n), dtype=np.int64)
    for a, c in enumerate(counts):
        cap[0, 1 + a] = c
    big = int(counts.sum()) + 1
    for a, lev in enumerate(levels):
        for j, r in enumerate(risk_levels):
            if lev >= r:
                cap[1 + a, 1 + n_lv + j] = big
    for j, d in enumerate(demands):
        cap[1 + n_lv + j, n - 1] = max(int(d), 0)

    flow = 0
    sink = n - 1
    while True:
        parent = np.full(n, -1, dtype=np.int64)
        parent[0] = 0
        queue = [0]
        for u in queue:
            for w in np.nonzero(cap[u] > 0)[0]:
                if parent[w] < 0:
                    parent[w] = u
                    queue.append(int(w))
        if parent[sink] < 0:
            return flow
        path = []
        u = sink
        while u != 0:
            path.append((int(parent[u]), u))
            u = int(parent[u])
        aug = min(int(cap[a, b]) for a, b in path)
        for a, b in path:
            cap[a, b] -= aug
            cap[b, a] += aug
        flow += aug


def validate_instance(instance: Instance) -> list[Violation]:
    """Check structural invariants and feasibility; empty list means valid."""
    out: list[Violation] = []
    n, k = instance.n_users, instance.n_funds
    if n == 0 or k == 0:
        out.append(Violation("ShapeError", "instance needs at least one user and one fund"))
        return out
    for i, u in enumerate(instance.users):
        if u.user_id != i:
            out.append(Violation("ShapeError", f"user ids must be dense 0..N-1, got {u.user_id} at row {i}"))
            break
    for j, f in enumerate(instance.funds):
        if f.fund_id != j:
            out.append(Violation("ShapeError", f"fund ids must be dense 0..K-1, got {f.fund_id} at row {j}"))
            break
    d = instance.feature_dim
    if any(len(u.features) != d for u in instance.users):
        out.append(Violation("ShapeError", "user feature vectors have mixed lengths"))
    m = instance.fund_feature_dim
    if any(len(f.features) != m for f in instance.funds):
        out.append(Violation("ShapeError", "fund feature vectors have mixed lengths"))
    if any(u.tolerance < 0 for u in instance.users):
        out.append(Violation("ShapeError", "tolerance levels must be non-negative"))
    if any(f.risk_level < 0 for f in instance.funds):
        out.append(Violation("ShapeError", "risk levels must be non-negative"))
    bad_demand = [f.fund_id for f in instance.funds if f.demand < 1]
    if bad_demand:
        out.append(Violation("ShapeError", f"fund demands must be >= 1, violated by funds {bad_demand}"))
    if out:
        return out

    total = int(instance.demands.sum())
    if total != n:
        out.append(Violation(
            "DemandMismatch",
            f"fund demands sum to {total} but there are {n} users; they must match exactly",
        ))
        return out

    covered = demand_coverage(instance.tolerances, instance.risk_levels, instance.demands)
    if covered != total:
        # name the tightest threshold so the error is actionable
        worst = None
        for rho in np.unique(instance.risk_levels):
            need = int(instance.demands[instance.risk_levels >= rho].sum())
            have = int((instance.tolerances >= rho).sum())
            if need > have and (worst is None or need - have > worst[1] - worst[2]):
                worst = (int(rho), need, have)
        if worst is not None:
            rho, need, have = worst
            msg = (f"funds at risk level >= {rho} demand {need} users but only "
                   f"{have} users tolerate that level")
        else:
            msg = f"eligibility max-flow covers {covered} of {total} demanded slots"
        out.append(Violation("Infeasible", msg))
    return out


def validate_plan(instance: Instance, plan) -> list[Violation]:
    """Check a plan against the instance; empty list means the plan is valid."""
    out: list[Violation] = []
    assignment = _plan_array(plan)
    n, k = instance.n_users, instance.n_funds
    if assignment.shape != (n,):
        out.append(Violation("ShapeError", f"plan has {assignment.shape[0] if assignment.ndim == 1 else '?'} entries for {n} users"))
        return out
    if assignment.size and (assignment.min() < 0 or assignment.max() >= k):
        out.append(Violation("ShapeError", "plan references fund ids outside 0..K-1"))
        return out
    counts = np.bincount(assignment, minlength=k)
    for j in range(k):
        if counts[j] != instance.demands[j]:
            out.append(Violation(
                "DemandViolation",
                f"fund {j} received {int(counts[j])} users, demand is {int(instance.demands[j])}",
            ))
    ineligible = ~instance.eligibility[np.arange(n), assignment]
    if ineligible.any():
        offenders = np.nonzero(ineligible)[0]
        first = int(offenders[0])
        out.append(Violation(
            "RiskViolation",
            f"{len(offenders)} users placed on funds above their tolerance, "
            f"first is user {first} (tolerance {int(instance.tolerances[first])}) "
            f"on fund {int(assignment[first])} (risk {int(instance.risk_levels[assignment[first]])})",
        ))
    return out
