"""Allocation strategies for the exact-demand assignment problem.

Four strategies build plans over the same (instance, ETV matrix) inputs:

* ``allocate_ha``     -- fast heuristic; ranks users by an opportunity-cost
  score h and fills funds greedily, rescoring whenever a fund saturates.
* ``allocate_exact``  -- optimal transportation solve via successive shortest
  paths; users enter one at a time and each insertion augments along the
  cheapest chain of reassignments between funds.
* ``allocate_greedy`` -- users in id order, each to its best eligible open
  fund.
* ``allocate_manual`` -- funds claim users in a caller-supplied priority
  order, mirroring a hand-run campaign.

All strategies are deterministic: score ties break by ascending user id and
fund-preference ties by ascending fund id. ``allocate_ha`` and
``allocate_greedy`` can strand a user (every eligible fund already full);
a repair pass then swaps already-assigned users along an eviction chain
between funds, which always succeeds on feasible instances. The chain and
the moved users are chosen to lose the least total value among hop-shortest
chains; consecutive stranded users sharing a tolerance are repaired in
batches along one chain.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .core import (
    AllocationPlan,
    ConfigError,
    EtvMatrix,
    InfeasibleError,
    Instance,
    ShapeError,
    _etv_values,
    validate_instance,
)


@dataclass
class HaState:
    """Working state of the heuristic at the start of a scoring round."""

    remaining_users: np.ndarray   # unassigned user ids, ascending
    remaining_demand: np.ndarray  # per-fund open slots
    masked_etv: np.ndarray        # ETV with ineligible and saturated entries zeroed
    alpha: np.ndarray             # per-fund mean masked value per open slot, 0 when saturated
    h: np.ndarray                 # per-user score, aligned with remaining_users


def _check_inputs(instance: Instance, etv) -> np.ndarray:
    violations = validate_instance(instance)
    infeasible = [v for v in violations if v.code == "Infeasible"]
    if infeasible:
        raise InfeasibleError(infeasible[0].message)
    if violations:
        raise ShapeError(violations[0].message)
    values = _etv_values(etv)
    if values.shape != (instance.n_users, instance.n_funds):
        raise ShapeError(
            f"ETV shape {values.shape} does not match instance "
            f"({instance.n_users} users, {instance.n_funds} funds)"
        )
    if not np.isfinite(values).all():
        raise ShapeError("ETV matrix contains non-finite entries")
    return values


# ---------------------------------------------------------------------------
# heuristic scoring
# ---------------------------------------------------------------------------

def _round_scores(masked, uids, act, remaining):
    """Fund attractiveness alpha and user scores h for one round.

    alpha_j is the summed masked value a fund would spread over its open
    slots. h_i weighs the user's margin between its best fund and the next
    two; missing runners-up (fewer than 3 open funds) contribute value 0 and
    the best fund's alpha stands in for the missing second alpha.
    """
    sub = masked[np.ix_(uids, act)]
    alpha_act = sub.sum(axis=0) / remaining[act]
    n = len(uids)
    rows = np.arange(n)
    order = np.argsort(-sub, axis=1, kind="stable")
    top_a = order[:, 0]
    etv_a = sub[rows, top_a]
    alpha_a = alpha_act[top_a]
    if len(act) >= 2:
        top_b = order[:, 1]
        etv_b = sub[rows, top_b]
        alpha_b = alpha_act[top_b]
    else:
        etv_b = np.zeros(n)
        alpha_b = alpha_a
    if len(act) >= 3:
        etv_c = sub[rows, order[:, 2]]
    else:
        etv_c = np.zeros(n)
    h = 0.5 * (alpha_a + alpha_b) * (2.0 * etv_a - etv_b - etv_c)
    alpha = np.zeros(masked.shape[1])
    alpha[act] = alpha_act
    return alpha, h


def ha_initial_state(instance: Instance, etv) -> HaState:
    """First-round scores of the heuristic, before any assignment."""
    values = _check_inputs(instance, etv)
    masked = np.where(instance.eligibility, values, 0.0)
    uids = np.arange(instance.n_users)
    act = np.arange(instance.n_funds)
    remaining = instance.demands.astype(np.int64).copy()
    alpha, h = _round_scores(masked, uids, act, remaining)
    return HaState(
        remaining_users=uids,
        remaining_demand=remaining,
        masked_etv=masked,
        alpha=alpha,
        h=h,
    )


# ---------------------------------------------------------------------------
# repair machinery (shared by ha and greedy)
# ---------------------------------------------------------------------------

# widest batch repaired along a single chain; longer stranded runs re-search,
# trading a little speed for chains that adapt to the shifting assignment
_REPAIR_WIDTH_CAP = 16


class _RepairContext:
    """Fund membership and cheapest reassignment losses, kept fresh.

    cost[a, b] is the smallest values[u, a] - values[u, b] over users u
    currently in fund a whose tolerance admits fund b (inf when no member of
    a may move to b), and witness[a, b] is the user attaining it. Rebuilding
    that from scratch on every stranded batch costs O(N*K), so the walk
    streams changes in instead: arrivals can only lower a row's minima, and
    a departure invalidates exactly the entries it witnessed.
    """

    def __init__(self, values, tolerances, risk_levels):
        self.values = values
        self.tolerances = tolerances
        self.risk_levels = risk_levels
        self.k = len(risk_levels)
        self.members = None
        self.cost = None
        self.witness = None

    def _entry(self, ja, jb):
        members = self.members[ja]
        cand = members[self.tolerances[members] >= self.risk_levels[jb]]
        if jb == ja or len(cand) == 0:
            self.cost[ja, jb] = np.inf
            self.witness[ja, jb] = -1
            return
        losses = self.values[cand, ja] - self.values[cand, jb]
        i = int(np.argmin(losses))
        self.cost[ja, jb] = losses[i]
        self.witness[ja, jb] = cand[i]

    def build(self, assignment):
        if self.members is not None:
            return
        self.members = [np.nonzero(assignment == j)[0] for j in range(self.k)]
        self.cost = np.full((self.k, self.k), np.inf)
        self.witness = np.full((self.k, self.k), -1, dtype=np.int64)
        for ja in range(self.k):
            for jb in range(self.k):
                self._entry(ja, jb)

    def _lower(self, f, users):
        """Arrivals at fund f: minima can only improve."""
        loss = self.values[users, f][:, None] - self.values[users]
        ok = self.tolerances[users][:, None] >= self.risk_levels[None, :]
        loss = np.where(ok, loss, np.inf)
        idx = np.argmin(loss, axis=0)
        low = loss[idx, np.arange(self.k)]
        better = low < self.cost[f]
        better[f] = False
        self.cost[f][better] = low[better]
        self.witness[f][better] = users[idx[better]]

    def note_assign(self, users, funds):
        if self.members is None:
            return
        for f in np.unique(funds):
            us = users[funds == f]
            self.members[f] = np.concatenate([self.members[f], us])
            self._lower(f, us)

    def apply_chain(self, moved, arrivals):
        for ja, us in moved:
            keep = ~np.isin(self.members[ja], us, assume_unique=True)
            self.members[ja] = self.members[ja][keep]
        for ja, us in moved:
            for jb in np.nonzero(np.isin(self.witness[ja], us))[0]:
                self._entry(ja, int(jb))
        # arrivals last, so they win back any entry the recompute raised
        for f, us in arrivals:
            self.members[f] = np.concatenate([self.members[f], us])
            self._lower(f, us)


def _repair_batch(users, values, assignment, remaining, tolerances, risk_levels,
                  eligibility, ctx):
    """Place a same-tolerance batch of stranded users via one eviction chain.

    Chains run fund to fund, from the batch's eligible funds (all saturated)
    to any fund with open slots; each hop bumps an already-assigned user to
    the next fund. Among hop-shortest chains the search keeps, per fund, the
    one losing the least total value, counting the batch's own gain at the
    chain head; layering keeps chains cycle-free even when the interim
    assignment has profitable swaps. Returns the number of users placed
    (>= 1) and the fund whose open slots absorbed the chain.
    """
    lead = int(users[0])
    k = len(risk_levels)
    ctx.build(assignment)
    cost = ctx.cost
    users = users[:_REPAIR_WIDTH_CAP]
    dist = np.full(k, np.inf)
    parent = np.full(k, -1, dtype=np.int64)
    settled = np.zeros(k, dtype=bool)
    elig = np.nonzero(eligibility[lead])[0]
    dist[elig] = -values[lead, elig]
    settled[elig] = True
    frontier = elig
    for _ in range(k - 1):
        todo = np.nonzero(~settled)[0]
        if len(todo) == 0 or len(frontier) == 0:
            break
        reach = dist[frontier][:, None] + cost[np.ix_(frontier, todo)]
        src = np.argmin(reach, axis=0)
        best = reach[src, np.arange(len(todo))]
        hit = np.isfinite(best)
        nxt = todo[hit]
        dist[nxt] = best[hit]
        parent[nxt] = frontier[src[hit]]
        settled[nxt] = True
        frontier = nxt
    open_funds = np.nonzero((remaining > 0) & np.isfinite(dist))[0]
    if len(open_funds) == 0:
        raise InfeasibleError(
            f"user {lead} (tolerance {int(tolerances[lead])}) is stranded and "
            f"no eviction chain can free an eligible slot"
        )
    tail = int(open_funds[np.argmin(dist[open_funds])])
    chain = [tail]
    while parent[chain[-1]] >= 0:
        chain.append(int(parent[chain[-1]]))
    chain.reverse()
    arcs = list(zip(chain[:-1], chain[1:]))
    width = min(len(users), int(remaining[tail]))
    movers = []
    for ja, jb in arcs:
        members = ctx.members[ja]
        cand = members[tolerances[members] >= risk_levels[jb]]
        losses = values[cand, ja] - values[cand, jb]
        if len(cand) > width:
            idx = np.argpartition(losses, width - 1)[:width]
        else:
            idx = np.arange(len(cand))
        sel = cand[idx[np.argsort(losses[idx], kind="stable")]]
        movers.append(sel)
        width = min(width, len(sel))
    # movers are picked from the pre-repair assignment, so one hop's
    # arrivals are never re-bumped by the next hop
    moved, arrivals = [], []
    for (ja, jb), sel in zip(arcs, movers):
        us = sel[:width]
        assignment[us] = jb
        moved.append((ja, us))
        arrivals.append((jb, us))
    batch = users[:width]
    assignment[batch] = chain[0]
    remaining[tail] -= width
    arrivals.append((chain[0], batch))
    ctx.apply_chain(moved, arrivals)
    return width, tail


# ---------------------------------------------------------------------------
# shared assignment walk
# ---------------------------------------------------------------------------

def _walk(instance, values, masked, remaining, order_users):
    """Assign users in rounds until everyone is placed.

    ``order_users(uids, act)`` returns the processing order for one round;
    the heuristic sorts by h, greedy keeps id order. A round ends when a fund
    saturates (its column is zeroed and the order is recomputed) or when the
    queue empties. Stranded users are repaired in place; repair losses are
    charged against the unmasked ``values``.
    """
    n, k = masked.shape
    tolerances = instance.tolerances
    risk_levels = instance.risk_levels
    eligibility = instance.eligibility
    assignment = np.full(n, -1, dtype=np.int64)
    unassigned = np.ones(n, dtype=bool)
    active = remaining > 0
    ctx = _RepairContext(values, tolerances, risk_levels)

    def commit(users, funds):
        assignment[users] = funds
        unassigned[users] = False
        np.subtract.at(remaining, funds, 1)
        ctx.note_assign(users, funds)

    def saturate(j):
        active[j] = False
        masked[:, j] = 0.0

    while unassigned.any():
        uids = np.nonzero(unassigned)[0]
        act = np.nonzero(active)[0]
        order = order_users(uids, act)
        # best open eligible fund per user; -1 marks a stranded user
        cand = eligibility[order][:, act] if len(act) else np.zeros((len(order), 0), bool)
        scores = np.where(cand, masked[np.ix_(order, act)], -1.0)
        if scores.shape[1]:
            best_local = np.argmax(scores, axis=1)
            best = act[best_local]
            best[scores[np.arange(len(order)), best_local] < 0] = -1
        else:
            best = np.full(len(order), -1, dtype=np.int64)

        pos = 0
        resort = False
        while pos < len(order):
            choice = best[pos:]
            strand_rel = np.nonzero(choice < 0)[0]
            first_strand = int(strand_rel[0]) if len(strand_rel) else len(choice)
            sat_rel = len(choice)
            sat_fund = -1
            for j in act:
                if not active[j]:
                    continue
                hits = np.nonzero(choice == j)[0]
                if len(hits) >= remaining[j]:
                    p = int(hits[remaining[j] - 1])
                    if p < sat_rel:
                        sat_rel = p
                        sat_fund = j

            if sat_fund >= 0 and sat_rel < first_strand:
                seg = slice(pos, pos + sat_rel + 1)
                commit(order[seg], best[seg])
                saturate(sat_fund)
                resort = True
                break
            # assign the clean prefix before the first stranded user
            seg = slice(pos, pos + first_strand)
            if first_strand:
                commit(order[seg], best[seg])
            pos += first_strand
            if pos >= len(order):
                break
            # batch consecutive stranded users sharing a tolerance level
            run_end = pos
            lead_tol = tolerances[order[pos]]
            while (run_end < len(order) and best[run_end] < 0
                   and tolerances[order[run_end]] == lead_tol):
                run_end += 1
            placed, tail_fund = _repair_batch(
                order[pos:run_end], values, assignment, remaining,
                tolerances, risk_levels, eligibility, ctx,
            )
            unassigned[order[pos:pos + placed]] = False
            pos += placed
            if remaining[tail_fund] == 0:
                saturate(tail_fund)
                resort = True
                break
        if resort:
            continue
    return assignment


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

def allocate_ha(instance: Instance, etv) -> AllocationPlan:
    """Heuristic allocation: score users by opportunity cost, fill greedily.

    Per round: alpha_j averages each open fund's masked value over its open
    slots; each user's h weighs its top-fund margin by the mean alpha of its
    two best funds; users assign in descending h. A saturated fund zeroes its
    column and triggers a fresh round over the remaining users.
    """
    values = _check_inputs(instance, etv)
    masked = np.where(instance.eligibility, values, 0.0)
    remaining = instance.demands.astype(np.int64).copy()

    def order_users(uids, act):
        if len(act) == 0:
            return uids
        _, h = _round_scores(masked, uids, act, remaining)
        return uids[np.argsort(-h, kind="stable")]

    assignment = _walk(instance, values, masked, remaining, order_users)
    return AllocationPlan(assignment=assignment)


def allocate_greedy(instance: Instance, etv) -> AllocationPlan:
    """Users in id order, each to its best eligible fund with open slots."""
    values = _check_inputs(instance, etv)
    masked = np.where(instance.eligibility, values, 0.0)
    remaining = instance.demands.astype(np.int64).copy()

    def order_users(uids, act):
        return uids

    assignment = _walk(instance, values, masked, remaining, order_users)
    return AllocationPlan(assignment=assignment)


def allocate_manual(instance: Instance, etv, priority: list[int]) -> AllocationPlan:
    """Funds claim their top eligible users in the given priority order.

    Mirrors a hand-run campaign: the first fund takes its d best eligible
    users by ETV, the next fund picks from who is left, and so on. No repair
    pass; raises InfeasibleError when a fund cannot fill its demand from the
    remaining eligible users (possible even on feasible instances).
    """
    values = _check_inputs(instance, etv)
    k = instance.n_funds
    if sorted(int(j) for j in priority) != list(range(k)):
        raise ConfigError(f"priority must be a permutation of fund ids 0..{k - 1}")
    assignment = np.full(instance.n_users, -1, dtype=np.int64)
    taken = np.zeros(instance.n_users, dtype=bool)
    for j in priority:
        j = int(j)
        need = int(instance.demands[j])
        cand = np.nonzero(instance.eligibility[:, j] & ~taken)[0]
        if len(cand) < need:
            raise InfeasibleError(
                f"fund {j} needs {need} users but only {len(cand)} eligible users remain"
            )
        pick = cand[np.argsort(-values[cand, j], kind="stable")[:need]]
        assignment[pick] = j
        taken[pick] = True
    return AllocationPlan(assignment=assignment)


def allocate_exact(instance: Instance, etv) -> AllocationPlan:
    """Optimal plan via successive shortest paths on the transportation network.

    Users enter one at a time. Inserting user i augments along the cheapest
    residual path: i lands on some fund, which may bounce one of its members
    to another fund, and so on until a fund with an open slot absorbs the
    chain. Arc costs between funds are maintained in lazy min-heaps of
    member reassignment deltas; shortest paths over the <= K fund nodes are
    found by Bellman-Ford (arcs can be negative, cycles cannot, so the flow
    stays optimal after every insertion). Integrality of the transportation
    polytope makes the result exact for the binary problem.
    """
    values = _check_inputs(instance, etv)
    n, k = values.shape
    eligibility = instance.eligibility
    remaining = instance.demands.astype(np.int64).copy()
    assignment = np.full(n, -1, dtype=np.int64)
    heaps = [[[] for _ in range(k)] for _ in range(k)]
    INF = float("inf")
    eps = 1e-12  # strict-improvement guard against float tie cycles

    def arc_min(j, j2):
        h = heaps[j][j2]
        while h:
            w, u = h[0]
            if assignment[u] == j:
                return w, u
            heapq.heappop(h)
        return INF, -1

    def admit(u, j):
        assignment[u] = j
        row = values[u]
        for j2 in np.nonzero(eligibility[u])[0]:
            if j2 != j:
                heapq.heappush(heaps[j][j2], (row[j] - row[j2], u))

    for i in range(n):
        dist = np.full(k, INF)
        parent = np.full(k, -1, dtype=np.int64)
        witness = np.full(k, -1, dtype=np.int64)
        row = values[i]
        elig = np.nonzero(eligibility[i])[0]
        dist[elig] = -row[elig]
        for _ in range(k - 1):
            changed = False
            for j in range(k):
                dj = dist[j]
                if dj == INF:
                    continue
                for j2 in range(k):
                    if j2 == j:
                        continue
                    w, u = arc_min(j, j2)
                    if u >= 0 and dj + w < dist[j2] - eps:
                        dist[j2] = dj + w
                        parent[j2] = j
                        witness[j2] = u
                        changed = True
            if not changed:
                break
        open_funds = np.nonzero(remaining > 0)[0]
        if len(open_funds) == 0 or not np.isfinite(dist[open_funds]).any():
            raise InfeasibleError(f"no augmenting path admits user {i}")
        end = int(open_funds[np.argmin(dist[open_funds])])
        remaining[end] -= 1
        # unwind the chain; each hop moves that arc's witness user
        j = end
        hops = []
        while parent[j] >= 0:
            hops.append((int(witness[j]), int(parent[j]), j))
            j = int(parent[j])
            if len(hops) > k:
                raise RuntimeError("reassignment chain longer than fund count")
        for u, src, dst in hops:
            assert assignment[u] == src
            admit(u, dst)
        admit(i, j)
    return AllocationPlan(assignment=assignment)


STRATEGIES = {
    "ha": allocate_ha,
    "exact": allocate_exact,
    "greedy": allocate_greedy,
    "manual": allocate_manual,
}


def run_strategy(name: str, instance: Instance, etv, priority=None) -> AllocationPlan:
    """Dispatch by strategy name; manual requires a priority list."""
    if name not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}, expected one of {sorted(STRATEGIES)}")
    if name == "manual":
        if priority is None:
            raise ConfigError("manual strategy requires a fund priority list")
        return allocate_manual(instance, etv, priority)
    return STRATEGIES[name](instance, etv)
