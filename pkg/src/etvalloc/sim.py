"""Synthetic market simulator, offline metrics, and the experiment runner.

The generator plays the role of a production log: it draws user and fund
features, a ground-truth conversion/amount model, risk levels, and demands,
then realizes observations. The ground truth is a zero-inflated lognormal
per (user, fund) pair:

    p*_ij  = logistic(w_p[j] . concat(x_i, g_j) + b_p[j])
    v_ij   = Normal(w_mu[j] . concat(x_i, g_j) + b_mu[j], sigma_j), floored
             at 0.01 when converted (a converted purchase is never zero)
    amount = exp(v) - 1 when converted, else 0

Weight vectors are per fund so users rank funds differently; a single shared
vector would make every user prefer the same fund order and the allocation
problem degenerate.

Counterfactual evaluation outcomes are realized for every pair with shared
random numbers per user (one conversion uniform and one amount normal reused
across funds), so plan metrics compare strategies on identical draws.
Training observations use independent draws per pair.

All randomness flows from one root seed through numpy SeedSequence spawn
keys, one per stage:

    0  instance (features, levels, demand weights)
    1  ground-truth model parameters
    2  training observations
    3  model training (init and shuffling)
    4  evaluation outcomes
    5  bench cells (key (5, n_users))

The CLI uses the same table, so a staged file pipeline reproduces
``run_experiment`` exactly.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .alloc import run_strategy
from .core import (
    ConfigError,
    EmptyDeliveriesError,
    EtvMatrix,
    Instance,
    ShapeError,
    make_instance,
    objective,
    validate_instance,
)
from .etvmodel import TrainConfig, etv_from_params, predict_etv, train


def stage_seed(root_seed: int, stage: int, extra: tuple[int, ...] = ()) -> np.random.Generator:
    """Child generator for one pipeline stage of a root seed."""
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=(stage, *extra)))


def stage_seed_int(root_seed: int, stage: int, extra: tuple[int, ...] = ()) -> int:
    """Stable integer seed for stages that take an int (e.g. TrainConfig.seed)."""
    return int(np.random.SeedSequence(root_seed, spawn_key=(stage, *extra)).generate_state(1)[0])


@dataclass
class TrueModel:
    """Per-fund linear ground truth over concat(user, fund) features."""

    w_p: np.ndarray      # (K, d + m)
    b_p: np.ndarray      # (K,)
    w_mu: np.ndarray     # (K, d + m)
    b_mu: np.ndarray     # (K,)
    sigma: np.ndarray    # (K,)


@dataclass
class GeneratorConfig:
    n_users: int = 2000
    n_funds: int = 8
    feature_dim: int = 8          # user feature dimension d
    fund_feature_dim: int = 4     # fund feature dimension m
    seed: int = 0
    max_level: int = 3
    tolerance_probs: tuple = (0.25, 0.25, 0.25, 0.25)  # P(t_i = level)
    risk_probs: tuple = (0.4, 0.3, 0.2, 0.1)           # P(r_j = level)
    demand_concentration: float = 3.0  # Dirichlet concentration of popularity weights
    p_weight_scale: float = 1.0        # std of the conversion logit from features
    p_bias_mean: float = -2.2
    p_bias_std: float = 0.4
    mu_weight_scale: float = 0.7       # std of the log-amount location from features
    mu_bias_mean: float = 2.3
    mu_bias_std: float = 0.4
    sigma_range: tuple = (0.3, 0.6)    # per-fund amount noise, uniform draw
    obs_coverage: str = "grid"         # "grid" or "delivery", see _realize_delivery
    obs_rounds: int = 1                # delivery draws per user (ignored by "grid")
    obs_focus: float = 1.0             # delivery exposure sharpness (ignored by "grid")
    true_model: Optional[TrueModel] = None  # supply to pin the ground truth

    def validated(self) -> "GeneratorConfig":
        if self.n_users < 2 or self.n_funds < 1:
            raise ConfigError("need at least 2 users and 1 fund")
        if self.feature_dim < 1 or self.fund_feature_dim < 1:
            raise ConfigError("feature dimensions must be >= 1")
        if len(self.tolerance_probs) != self.max_level + 1 or len(self.risk_probs) != self.max_level + 1:
            raise ConfigError("level probability vectors must have max_level + 1 entries")
        for probs, name in ((self.tolerance_probs, "tolerance_probs"), (self.risk_probs, "risk_probs")):
            arr = np.asarray(probs, dtype=float)
            if (arr < 0).any() or not np.isclose(arr.sum(), 1.0):
                raise ConfigError(f"{name} must be non-negative and sum to 1")
        if self.sigma_range[0] <= 0 or self.sigma_range[1] < self.sigma_range[0]:
            raise ConfigError("sigma_range must be positive and ordered")
        if self.obs_coverage not in ("grid", "delivery"):
            raise ConfigError("obs_coverage must be 'grid' or 'delivery'")
        if self.obs_rounds < 1:
            raise ConfigError("obs_rounds must be >= 1")
        if self.obs_focus < 0:
            raise ConfigError("obs_focus must be >= 0")
        return self


@dataclass
class ObservationSet:
    """Bulk observations; features are joined from the Instance on demand."""

    user_ids: np.ndarray
    fund_ids: np.ndarray
    converted: np.ndarray  # 0/1
    amounts: np.ndarray    # 0 when not converted

    def __len__(self) -> int:
        return len(self.user_ids)


@dataclass(frozen=True)
class Observation:
    """One labeled pair; v = log(amount + 1) is 0 exactly when unconverted."""

    user_id: int
    fund_id: int
    converted: int
    amount: float

    def __post_init__(self):
        if (self.converted == 1) != (self.amount > 0):
            raise ShapeError(
                f"observation ({self.user_id},{self.fund_id}) breaks converted <=> amount > 0"
            )

    @property
    def log_label(self) -> float:
        return float(np.log1p(self.amount))


@dataclass
class TruthTable:
    """Ground-truth parameters per pair, used for counterfactual outcomes."""

    p: np.ndarray        # (N, K) true conversion probability
    mu: np.ndarray       # (N, K) true log-amount location
    sigma: np.ndarray    # (K,) true log-amount scale
    etv: np.ndarray      # (N, K) true expected transaction value


@dataclass
class SimData:
    instance: Instance
    observations: ObservationSet
    truth: TruthTable


def _draw_demands(rng, n_users, n_funds, concentration, tolerances, risk_levels):
    """Popularity-weighted demands, largest-remainder rounded to sum N, then
    rebalanced so every risk threshold can be covered by eligible users."""
    weights = rng.dirichlet(np.full(n_funds, concentration))
    raw = weights * n_users
    base = np.maximum(np.floor(raw).astype(np.int64), 1)
    shortfall = n_users - int(base.sum())
    if shortfall < 0:
        order = np.argsort(-base, kind="stable")
        for j in order:
            give = min(int(base[j]) - 1, -shortfall)
            base[j] -= give
            shortfall += give
            if shortfall == 0:
                break
    elif shortfall > 0:
        frac_order = np.argsort(-(raw - np.floor(raw)), kind="stable")
        for step in range(shortfall):
            base[frac_order[step % n_funds]] += 1
    # push demand that exceeds a tolerance threshold down to the safest fund
    lowest = int(np.argmin(risk_levels))
    for rho in range(int(risk_levels.max()), 0, -1):
        hi = np.nonzero(risk_levels >= rho)[0]
        excess = int(base[hi].sum()) - int((tolerances >= rho).sum())
        if excess <= 0:
            continue
        if risk_levels[lowest] >= rho:
            raise ConfigError(
                f"every fund sits at risk level >= {rho}; demands cannot be made feasible"
            )
        for j in hi[np.argsort(-risk_levels[hi], kind="stable")]:
            give = min(int(base[j]) - 1, excess)
            base[j] -= give
            base[lowest] += give
            excess -= give
            if excess == 0:
                break
        if excess > 0:
            raise ConfigError(
                f"cannot cover demand at risk level >= {rho}: "
                f"{excess} slots above the eligible user count"
            )
    return base


def _draw_true_model(rng, cfg: GeneratorConfig) -> TrueModel:
    k = cfg.n_funds
    dim = cfg.feature_dim + cfg.fund_feature_dim
    return TrueModel(
        w_p=rng.normal(0.0, cfg.p_weight_scale / np.sqrt(dim), size=(k, dim)),
        b_p=rng.normal(cfg.p_bias_mean, cfg.p_bias_std, size=k),
        w_mu=rng.normal(0.0, cfg.mu_weight_scale / np.sqrt(dim), size=(k, dim)),
        b_mu=rng.normal(cfg.mu_bias_mean, cfg.mu_bias_std, size=k),
        sigma=rng.uniform(cfg.sigma_range[0], cfg.sigma_range[1], size=k),
    )


def _truth_table(instance: Instance, model: TrueModel) -> TruthTable:
    n, k = instance.n_users, instance.n_funds
    p = np.empty((n, k))
    mu = np.empty((n, k))
    for j in range(k):
        concat = np.hstack([
            instance.user_features,
            np.tile(instance.fund_features[j], (n, 1)),
        ])
        logit = concat @ model.w_p[j] + model.b_p[j]
        p[:, j] = 1.0 / (1.0 + np.exp(-logit))
        mu[:, j] = concat @ model.w_mu[j] + model.b_mu[j]
    # untruncated lognormal mean; the 0.01 floor on v moves it by < 1e-6
    # at the documented scales
    etv = etv_from_params(p, mu, model.sigma[None, :])
    return TruthTable(p=p, mu=mu, sigma=model.sigma.copy(), etv=etv)


def _grid_ids(n: int, k: int):
    user_ids = np.repeat(np.arange(n, dtype=np.int64), k)
    fund_ids = np.tile(np.arange(k, dtype=np.int64), n)
    return user_ids, fund_ids


def _realize(truth: TruthTable, rng, shared_per_user: bool) -> ObservationSet:
    n, k = truth.p.shape
    if shared_per_user:
        u = rng.random((n, 1))
        z = rng.standard_normal((n, 1))
    else:
        u = rng.random((n, k))
        z = rng.standard_normal((n, k))
    converted = u < truth.p
    v = np.maximum(truth.mu + truth.sigma[None, :] * z, 0.01)
    amounts = np.where(converted, np.expm1(v), 0.0)
    user_ids, fund_ids = _grid_ids(n, k)
    return ObservationSet(
        user_ids=user_ids,
        fund_ids=fund_ids,
        converted=converted.astype(np.int64).ravel(),
        amounts=amounts.ravel(),
    )


def _realize_delivery(instance: Instance, truth: TruthTable, rng,
                      rounds: int, focus: float) -> ObservationSet:
    """Observed pairs the way a delivery log covers them, one fund per user
    per round.

    Historical exposure follows perceived value: each round the observed fund
    is drawn among the funds the user's tolerance admits, weighted by the
    true expected transaction value raised to `focus`. Delivery logs come
    from a system that was already steering impressions toward value, and
    production delivery is winner-take-most, so focus > 1 concentrates a
    user's log on the few funds such a system would actually have shown
    them. Training data built this way under-covers exactly the pairs that
    entire-space scoring must still rank.
    """
    n, k = truth.p.shape
    eligible = instance.tolerances[:, None] >= instance.risk_levels[None, :]
    weights = np.where(eligible, truth.etv ** focus, 0.0)
    cum = np.cumsum(weights, axis=1)
    m = n * rounds
    user_ids = np.tile(np.arange(n, dtype=np.int64), rounds)
    # feasible instances give every user an eligible fund, so cum[:, -1] > 0
    draw = rng.random(m) * cum[user_ids, -1]
    fund_ids = np.minimum((cum[user_ids] <= draw[:, None]).sum(axis=1), k - 1)
    # rounding can land a draw on a zero-width (ineligible) bin edge
    bad = weights[user_ids, fund_ids] <= 0.0
    if bad.any():
        fund_ids[bad] = np.argmax(weights[user_ids[bad]], axis=1)
    p_sel = truth.p[user_ids, fund_ids]
    mu_sel = truth.mu[user_ids, fund_ids]
    sigma_sel = truth.sigma[fund_ids]
    converted = rng.random(m) < p_sel
    v = np.maximum(mu_sel + sigma_sel * rng.standard_normal(m), 0.01)
    amounts = np.where(converted, np.expm1(v), 0.0)
    return ObservationSet(
        user_ids=user_ids,
        fund_ids=fund_ids.astype(np.int64),
        converted=converted.astype(np.int64),
        amounts=amounts,
    )


def generate(config: GeneratorConfig) -> SimData:
    """Draw an instance, ground truth, and training observations.

    Instances are always feasible: demands are rebalanced against the
    tolerance distribution after rounding (ConfigError when impossible).
    """
    cfg = config.validated()
    rng_inst = stage_seed(cfg.seed, 0)
    user_features = rng_inst.standard_normal((cfg.n_users, cfg.feature_dim))
    fund_features = rng_inst.standard_normal((cfg.n_funds, cfg.fund_feature_dim))
    tolerances = rng_inst.choice(cfg.max_level + 1, size=cfg.n_users, p=np.asarray(cfg.tolerance_probs))
    risk_levels = rng_inst.choice(cfg.max_level + 1, size=cfg.n_funds, p=np.asarray(cfg.risk_probs))
    demands = _draw_demands(rng_inst, cfg.n_users, cfg.n_funds, cfg.demand_concentration,
                            tolerances, risk_levels)
    instance = make_instance(user_features, tolerances, fund_features, risk_levels, demands)
    problems = validate_instance(instance)
    if problems:
        raise ConfigError(f"generated instance is invalid: {problems[0].message}")

    true_model = cfg.true_model or _draw_true_model(stage_seed(cfg.seed, 1), cfg)
    truth = _truth_table(instance, true_model)
    rng_obs = stage_seed(cfg.seed, 2)
    if cfg.obs_coverage == "delivery":
        observations = _realize_delivery(instance, truth, rng_obs,
                                         cfg.obs_rounds, cfg.obs_focus)
    else:
        observations = _realize(truth, rng_obs, shared_per_user=False)
    return SimData(instance=instance, observations=observations, truth=truth)


def simulate_outcomes(truth: TruthTable, root_seed: int) -> ObservationSet:
    """Counterfactual outcomes for every pair, shared randoms per user."""
    return _realize(truth, stage_seed(root_seed, 4), shared_per_user=True)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _outcome_grids(outcomes: ObservationSet, n: int, k: int):
    if len(outcomes) != n * k:
        raise ShapeError(
            f"need outcomes for the full {n}x{k} grid, got {len(outcomes)} rows"
        )
    expect_u, expect_f = _grid_ids(n, k)
    if not (np.array_equal(outcomes.user_ids, expect_u)
            and np.array_equal(outcomes.fund_ids, expect_f)):
        raise ShapeError("outcome rows must cover the grid in user-major order")
    conv = outcomes.converted.reshape(n, k)
    amt = outcomes.amounts.reshape(n, k)
    return conv, amt


def metrics_thc_tha(etv, outcomes: ObservationSet) -> tuple[int, float]:
    """Top-handling conversions and amount: send each user to its argmax-ETV
    fund (ties to the lowest fund id, no capacity limits) and total what the
    realized outcomes say would have happened there."""
    values = etv.values if isinstance(etv, EtvMatrix) else np.asarray(etv, dtype=float)
    n, k = values.shape
    conv, amt = _outcome_grids(outcomes, n, k)
    pick = np.argmax(values, axis=1)
    rows = np.arange(n)
    return int(conv[rows, pick].sum()), float(amt[rows, pick].sum())


def metrics_delivery(plan, outcomes: ObservationSet, n_funds: int) -> tuple[float, float]:
    """Per-mille delivery metrics for a plan: conversions per thousand
    deliveries and transaction amount per thousand deliveries."""
    assignment = plan.assignment if hasattr(plan, "assignment") else np.asarray(plan)
    n = len(assignment)
    if n == 0:
        raise EmptyDeliveriesError("a plan with no users has no deliveries")
    conv, amt = _outcome_grids(outcomes, n, n_funds)
    rows = np.arange(n)
    conversions = int(conv[rows, assignment].sum())
    amount = float(amt[rows, assignment].sum())
    return conversions / n * 1000.0, amount / n * 1000.0


# ---------------------------------------------------------------------------
# experiment runner and benchmarks
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """One (loss, strategy) cell of an experiment."""

    strategy: str
    loss: str
    seed: int
    thc: int
    tha: float
    cpmd: float
    tapmd: float
    objective: float
    objective_ratio: Optional[float] = None  # vs the exact strategy, same loss
    runtime_ms: int = 0


def _env_threads() -> int:
    raw = os.environ.get("ETVALLOC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ETVALLOC_THREADS must be an integer, got {raw!r}")


def default_priority(instance: Instance) -> list[int]:
    """Descending risk level, ties by fund id: provably never strands the
    manual strategy on a feasible instance (riskier funds draw from strictly
    smaller eligible pools, so they must pick first)."""
    order = sorted(range(instance.n_funds), key=lambda j: (-int(instance.risk_levels[j]), j))
    return order


def run_experiment(config: GeneratorConfig, strategies, loss_kinds,
                   train_config: Optional[TrainConfig] = None) -> list[MetricsReport]:
    """Full offline comparison on one synthetic market.

    Generates data, trains one model per loss kind, predicts ETV, runs each
    allocation strategy on each prediction, and scores everything against
    counterfactual outcomes. Reports are bitwise-reproducible given
    (config, seed); wall times are measured but only bench writes them out.
    """
    data = generate(config)
    outcomes = simulate_outcomes(data.truth, config.seed)
    base = train_config or TrainConfig()
    threads = _env_threads()
    rows: list[MetricsReport] = []
    for kind in loss_kinds:
        tc = replace(base, loss_kind=kind, seed=stage_seed_int(config.seed, 3))
        result = train(data.instance, data.observations, tc)
        etv_hat = predict_etv(result.model, data.instance, n_threads=threads,
                              use_sigma=kind != "ce_mse")
        thc, tha = metrics_thc_tha(etv_hat, outcomes)
        kind_rows = []
        exact_obj = None
        for name in strategies:
            priority = default_priority(data.instance) if name == "manual" else None
            t0 = time.perf_counter()
            plan = run_strategy(name, data.instance, etv_hat, priority=priority)
            elapsed_ms = int(round((time.perf_counter() - t0) * 1000.0))
            cpmd, tapmd = metrics_delivery(plan, outcomes, data.instance.n_funds)
            obj = objective(etv_hat, plan)
            if name == "exact":
                exact_obj = obj
            kind_rows.append(MetricsReport(
                strategy=name, loss=kind, seed=config.seed,
                thc=thc, tha=tha, cpmd=cpmd, tapmd=tapmd,
                objective=obj, runtime_ms=elapsed_ms,
            ))
        if exact_obj is not None and exact_obj > 0:
            for row in kind_rows:
                row.objective_ratio = row.objective / exact_obj
        rows.extend(kind_rows)
    return rows


@dataclass
class BenchCell:
    n_users: int
    n_funds: int
    strategy: str
    seed: int
    objective: float
    objective_ratio: Optional[float]
    runtime_ms: float


def bench(sizes, strategies, seed: int = 0, n_funds: int = 8,
          base_config: Optional[GeneratorConfig] = None) -> list[BenchCell]:
    """Runtime and objective ladder over instance sizes.

    Each rung generates a fresh instance (child seed keyed by its size) and
    times every strategy on the ground-truth ETV matrix, so the comparison
    isolates allocation cost from model quality. Cells can run on a thread
    pool capped by ETVALLOC_THREADS; the default is sequential, which is what
    timing comparisons should use.
    """
    base = base_config or GeneratorConfig()
    cells: list[BenchCell] = []

    def run_cell(n: int) -> list[BenchCell]:
        cfg = replace(base, n_users=int(n), n_funds=n_funds,
                      seed=stage_seed_int(seed, 5, (int(n),)))
        data = generate(cfg)
        etv = EtvMatrix(values=data.truth.etv)
        out: list[BenchCell] = []
        exact_obj = None
        for name in strategies:
            priority = default_priority(data.instance) if name == "manual" else None
            t0 = time.perf_counter()
            plan = run_strategy(name, data.instance, etv, priority=priority)
            elapsed = (time.perf_counter() - t0) * 1000.0
            obj = objective(etv, plan)
            if name == "exact":
                exact_obj = obj
            out.append(BenchCell(
                n_users=int(n), n_funds=n_funds, strategy=name, seed=seed,
                objective=obj, objective_ratio=None, runtime_ms=elapsed,
            ))
        if exact_obj is not None and exact_obj > 0:
            for cell in out:
                cell.objective_ratio = cell.objective / exact_obj
        return out

    sizes = list(sizes)
    threads = min(_env_threads(), max(len(sizes), 1))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for out in pool.map(run_cell, sizes):
                cells.extend(out)
    else:
        for n in sizes:
            cells.extend(run_cell(n))
    return cells
