"""Domain types, validation, and the objective."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etvalloc import (
    AllocationPlan,
    EtvMatrix,
    ShapeError,
    demand_coverage,
    make_instance,
    objective,
    validate_instance,
    validate_plan,
)
from conftest import collect_small_problems, enumerate_feasible, random_small_problem


def inst(tolerances, risk_levels, demands):
    n, k = len(tolerances), len(risk_levels)
    rng = np.random.default_rng(0)
    return make_instance(rng.normal(size=(n, 2)), tolerances,
                         rng.normal(size=(k, 2)), risk_levels, demands)


# -- validate_instance --------------------------------------------------------

def test_validate_instance_ok():
    assert validate_instance(inst([1, 1, 1], [0, 1], [1, 2])) == []


def test_validate_instance_demand_mismatch():
    problems = validate_instance(inst([1, 1, 1], [0, 1], [1, 1]))
    assert [p.code for p in problems] == ["DemandMismatch"]


def test_validate_instance_infeasible():
    # three tolerance-0 users, but the risk-1 fund demands two of them
    problems = validate_instance(inst([0, 0, 0], [1, 0], [2, 1]))
    assert any(p.code == "Infeasible" for p in problems)
    msg = next(p.message for p in problems if p.code == "Infeasible")
    assert "risk level" in msg


def test_validate_instance_rejects_zero_demand():
    problems = validate_instance(inst([1, 1], [0, 1], [2, 0]))
    assert any(p.code == "ShapeError" for p in problems)


def test_validate_instance_rejects_negative_levels():
    problems = validate_instance(inst([-1, 1], [0, 1], [1, 1]))
    assert any("tolerance" in p.message for p in problems)


def test_instance_arrays_are_read_only():
    instance = inst([1, 1], [0, 1], [1, 1])
    with pytest.raises(ValueError):
        instance.eligibility[0, 0] = False
    with pytest.raises(ValueError):
        instance.user_features[0, 0] = 5.0


# -- validate_plan ------------------------------------------------------------

def test_validate_plan_ok():
    instance = inst([1, 1, 1], [0, 1], [1, 2])
    assert validate_plan(instance, AllocationPlan(np.array([0, 1, 1]))) == []


def test_validate_plan_risk_violation():
    instance = inst([0, 1], [0, 1], [1, 1])
    problems = validate_plan(instance, np.array([1, 0]))
    assert [p.code for p in problems] == ["RiskViolation"]
    assert "user 0" in problems[0].message


def test_validate_plan_demand_violation():
    instance = inst([1, 1], [0, 1], [1, 1])
    problems = validate_plan(instance, np.array([0, 0]))
    codes = [p.code for p in problems]
    assert codes.count("DemandViolation") == 2  # fund 0 over, fund 1 under


def test_validate_plan_shape_errors():
    instance = inst([1, 1], [0, 1], [1, 1])
    assert validate_plan(instance, np.array([0]))[0].code == "ShapeError"
    assert validate_plan(instance, np.array([0, 5]))[0].code == "ShapeError"


# -- objective ----------------------------------------------------------------

ETV_3x2 = np.array([[5.0, 1.0], [4.0, 3.0], [2.0, 2.0]])


def test_objective_values():
    assert objective(ETV_3x2, [0, 1, 1]) == 10.0
    assert objective(ETV_3x2, [1, 0, 1]) == 7.0
    assert objective(np.zeros((3, 2)), [1, 0, 1]) == 0.0


def test_objective_ten_is_the_enumerated_optimum():
    instance = inst([1, 1, 1], [0, 1], [1, 2])
    feas = enumerate_feasible(instance)
    best = max(objective(ETV_3x2, a) for a in feas)
    assert best == 10.0


def test_objective_accepts_matrix_wrapper_and_plan():
    assert objective(EtvMatrix(ETV_3x2), AllocationPlan(np.array([0, 1, 1]))) == 10.0


def test_objective_shape_errors():
    with pytest.raises(ShapeError):
        objective(ETV_3x2, [0, 1])
    with pytest.raises(ShapeError):
        objective(ETV_3x2, [0, 1, 2])
    with pytest.raises(ShapeError):
        objective(np.zeros(3), [0, 1, 2])


@settings(deadline=None, max_examples=60)
@given(st.integers(0, 2 ** 32 - 1))
def test_objective_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 12)), int(rng.integers(1, 5))
    values = rng.normal(size=(n, k))
    assignment = rng.integers(0, k, size=n)
    perm = rng.permutation(n)
    assert objective(values, assignment) == pytest.approx(
        objective(values[perm], assignment[perm]), rel=1e-12, abs=1e-12
    )


# -- feasibility vs brute force ----------------------------------------------

def test_feasibility_check_matches_existence_search():
    rng = np.random.default_rng(11)
    feasible_seen = infeasible_seen = 0
    for _ in range(300):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        tolerances = rng.integers(0, 3, size=n)
        risk_levels = rng.integers(0, 3, size=k)
        demands = np.ones(k, dtype=np.int64)
        for _ in range(n - k):
            demands[int(rng.integers(k))] += 1
        instance = make_instance(rng.normal(size=(n, 2)), tolerances,
                                 rng.normal(size=(k, 2)), risk_levels, demands)
        exists = len(enumerate_feasible(instance)) > 0
        verdict = not any(p.code == "Infeasible" for p in validate_instance(instance))
        assert verdict == exists
        feasible_seen += exists
        infeasible_seen += not exists
    assert feasible_seen > 30 and infeasible_seen > 30  # the mix exercised both


def test_demand_coverage_direct():
    # two tolerance-0 users can only fill the risk-0 fund
    assert demand_coverage([0, 0, 1], [0, 1], [2, 1]) == 3
    assert demand_coverage([0, 0, 0], [0, 1], [2, 1]) == 2
    assert demand_coverage([2, 2], [1, 3], [1, 1]) == 1


# -- injected violations are always caught -------------------------------------

@settings(deadline=None, max_examples=60)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["demand", "risk", "shape"]))
def test_injected_violation_is_rejected(seed, kind):
    rng = np.random.default_rng(seed)
    drawn = None
    while drawn is None:
        drawn = random_small_problem(rng)
    instance, _ = drawn
    feas = enumerate_feasible(instance)
    plan = feas[int(rng.integers(len(feas)))].copy()
    n, k = instance.n_users, instance.n_funds

    if kind == "shape":
        bad = plan[:-1]
        codes = {p.code for p in validate_plan(instance, bad)}
        assert codes == {"ShapeError"}
        return
    if kind == "demand" and k >= 2:
        i = int(rng.integers(n))
        plan[i] = (plan[i] + 1) % k  # demand counts break on both funds
        codes = {p.code for p in validate_plan(instance, plan)}
        assert "DemandViolation" in codes
        return
    # risk: point some user at an ineligible fund when one exists
    ineligible = np.argwhere(~instance.eligibility)
    if len(ineligible) == 0:
        return
    i, j = ineligible[int(rng.integers(len(ineligible)))]
    plan[i] = j
    codes = {p.code for p in validate_plan(instance, plan)}
    assert "RiskViolation" in codes


def test_every_enumerated_plan_passes_validation():
    for instance, _ in collect_small_problems(seed=23, count=10):
        for a in enumerate_feasible(instance)[:50]:
            assert validate_plan(instance, a) == []
