"""Shared fixtures and independent oracles for the test suite.

The brute-force helpers here re-solve the assignment problem by exhaustive
enumeration and re-check feasibility by existence search, so solver tests
compare against code that shares nothing with the implementations under
test.
"""

import itertools

import numpy as np

from etvalloc import make_instance, validate_instance

# one pass/fail line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def enumerate_feasible(instance):
    """All assignments meeting demands and eligibility, as an (m, N) array."""
    n, k = instance.n_users, instance.n_funds
    grid = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64)
    ok = instance.eligibility[np.arange(n)[None, :], grid].all(axis=1)
    for j in range(k):
        ok &= (grid == j).sum(axis=1) == instance.demands[j]
    return grid[ok]


def brute_force_best(instance, values):
    """Best objective over every feasible assignment; None when infeasible."""
    feas = enumerate_feasible(instance)
    if len(feas) == 0:
        return None
    objs = values[np.arange(values.shape[0])[None, :], feas].sum(axis=1)
    return float(objs.max())


def random_small_problem(rng):
    """Random (instance, values) with N <= 8, K <= 3; None when infeasible.

    Demand always sums to N and every fund demands at least one user, so the
    only way a draw dies is the eligibility structure, which is exactly what
    the feasibility tests want a mix of.
    """
    n = int(rng.integers(2, 9))
    k = int(rng.integers(1, min(3, n) + 1))
    tolerances = rng.integers(0, 3, size=n)
    risk_levels = rng.integers(0, 3, size=k)
    demands = np.ones(k, dtype=np.int64)
    for _ in range(n - k):
        demands[int(rng.integers(k))] += 1
    instance = make_instance(
        rng.normal(size=(n, 2)), tolerances, rng.normal(size=(k, 2)),
        risk_levels, demands,
    )
    values = rng.uniform(0.0, 10.0, size=(n, k))
    if validate_instance(instance):
        return None
    return instance, values


def collect_small_problems(seed, count):
    """First `count` feasible small problems from a seeded stream."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        drawn = random_small_problem(rng)
        if drawn is not None:
            out.append(drawn)
    return out
