"""File formats for the pipeline artifacts.

Everything round-trips losslessly: floats are written with ``repr`` (shortest
string that parses back to the same double), so a write/read cycle returns
bit-identical values and repeated runs with the same seed produce
byte-identical files.

Formats:

* users.csv          id,tolerance,f0..f{d-1}
* funds.csv          id,risk_level,demand,g0..g{m-1}
* observations.csv   user_id,fund_id,converted,amount
* ETV matrix CSV     header row of fund ids; row order is user id
* plan CSV           user_id,fund_id
* model checkpoint   flat JSON: layer shapes, row-major weights, config echo, seed
* truth.json         ground-truth p/mu/sigma/etv plus the generator config echo
* training log CSV   epoch,train_loss,val_loss
* report CSV/JSON    metric rows; wall times only appear in bench reports
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import AllocationPlan, DataFormatError, EtvMatrix, Instance, make_instance
from .etvmodel import EpochStats, EsjModel, TrainConfig
from .sim import BenchCell, GeneratorConfig, MetricsReport, ObservationSet, TruthTable


def _fmt(x) -> str:
    return repr(float(x))


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"{where}: expected a number, got {text!r}")


def _parse_int(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{where}: expected an integer, got {text!r}")


# ---------------------------------------------------------------------------
# instance
# ---------------------------------------------------------------------------

def write_instance(instance: Instance, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = instance.feature_dim
    with open(directory / "users.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "tolerance"] + [f"f{a}" for a in range(d)])
        for u in instance.users:
            w.writerow([u.user_id, u.tolerance] + [_fmt(x) for x in u.features])
    m = instance.fund_feature_dim
    with open(directory / "funds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "risk_level", "demand"] + [f"g{a}" for a in range(m)])
        for f in instance.funds:
            w.writerow([f.fund_id, f.risk_level, f.demand] + [_fmt(x) for x in f.features])


def read_instance(directory) -> Instance:
    directory = Path(directory)
    users_path = directory / "users.csv"
    funds_path = directory / "funds.csv"
    for path in (users_path, funds_path):
        if not path.exists():
            raise DataFormatError(f"missing {path}")
    with open(users_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "tolerance"]:
        raise DataFormatError(f"{users_path}: header must start with id,tolerance")
    d = len(rows[0]) - 2
    tolerances, feats = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != d + 2:
            raise DataFormatError(f"{users_path}:{ln}: expected {d + 2} columns")
        if _parse_int(row[0], f"{users_path}:{ln}") != ln - 2:
            raise DataFormatError(f"{users_path}:{ln}: user ids must be dense and ordered")
        tolerances.append(_parse_int(row[1], f"{users_path}:{ln}"))
        feats.append([_parse_float(x, f"{users_path}:{ln}") for x in row[2:]])
    with open(funds_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["id", "risk_level", "demand"]:
        raise DataFormatError(f"{funds_path}: header must start with id,risk_level,demand")
    m = len(rows[0]) - 3
    risks, demands, gfeats = [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != m + 3:
            raise DataFormatError(f"{funds_path}:{ln}: expected {m + 3} columns")
        if _parse_int(row[0], f"{funds_path}:{ln}") != ln - 2:
            raise DataFormatError(f"{funds_path}:{ln}: fund ids must be dense and ordered")
        risks.append(_parse_int(row[1], f"{funds_path}:{ln}"))
        demands.append(_parse_int(row[2], f"{funds_path}:{ln}"))
        gfeats.append([_parse_float(x, f"{funds_path}:{ln}") for x in row[3:]])
    if not tolerances or not risks:
        raise DataFormatError(f"{directory}: instance files contain no rows")
    return make_instance(np.array(feats), tolerances, np.array(gfeats), risks, demands)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

def write_observations(observations: ObservationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "fund_id", "converted", "amount"])
        for u, f, c, a in zip(observations.user_ids, observations.fund_ids,
                              observations.converted, observations.amounts):
            w.writerow([int(u), int(f), int(c), _fmt(a)])


def read_observations(path) -> ObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["user_id", "fund_id", "converted", "amount"]:
        raise DataFormatError(f"{path}: header must be user_id,fund_id,converted,amount")
    n = len(rows) - 1
    user_ids = np.empty(n, dtype=np.int64)
    fund_ids = np.empty(n, dtype=np.int64)
    converted = np.empty(n, dtype=np.int64)
    amounts = np.empty(n, dtype=float)
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataFormatError(f"{path}:{ln}: expected 4 columns")
        user_ids[ln - 2] = _parse_int(row[0], f"{path}:{ln}")
        fund_ids[ln - 2] = _parse_int(row[1], f"{path}:{ln}")
        c = _parse_int(row[2], f"{path}:{ln}")
        if c not in (0, 1):
            raise DataFormatError(f"{path}:{ln}: converted must be 0 or 1")
        converted[ln - 2] = c
        amounts[ln - 2] = _parse_float(row[3], f"{path}:{ln}")
        if (c == 1) != (amounts[ln - 2] > 0):
            raise DataFormatError(f"{path}:{ln}: converted must match amount > 0")
    return ObservationSet(user_ids=user_ids, fund_ids=fund_ids,
                          converted=converted, amounts=amounts)


# ---------------------------------------------------------------------------
# ETV matrix and plans
# ---------------------------------------------------------------------------

def write_etv(etv, path) -> None:
    values = etv.values if isinstance(etv, EtvMatrix) else np.asarray(etv, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([str(j) for j in range(values.shape[1])])
        for row in values:
            w.writerow([_fmt(x) for x in row])


def read_etv(path) -> EtvMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty ETV file")
    header = rows[0]
    if header != [str(j) for j in range(len(header))]:
        raise DataFormatError(f"{path}: header must be the fund ids 0..K-1")
    k = len(header)
    values = np.empty((len(rows) - 1, k))
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != k:
            raise DataFormatError(f"{path}:{ln}: expected {k} columns")
        values[ln - 2] = [_parse_float(x, f"{path}:{ln}") for x in row]
    return EtvMatrix(values=values)


def write_plan(plan, path) -> None:
    assignment = plan.assignment if isinstance(plan, AllocationPlan) else np.asarray(plan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "fund_id"])
        for i, j in enumerate(assignment):
            w.writerow([i, int(j)])


def read_plan(path) -> AllocationPlan:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["user_id", "fund_id"]:
        raise DataFormatError(f"{path}: header must be user_id,fund_id")
    assignment = np.empty(len(rows) - 1, dtype=np.int64)
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DataFormatError(f"{path}:{ln}: expected 2 columns")
        if _parse_int(row[0], f"{path}:{ln}") != ln - 2:
            raise DataFormatError(f"{path}:{ln}: user ids must be dense and ordered")
        assignment[ln - 2] = _parse_int(row[1], f"{path}:{ln}")
    return AllocationPlan(assignment=assignment)


# ---------------------------------------------------------------------------
# model checkpoints and training logs
# ---------------------------------------------------------------------------

def save_checkpoint(model: EsjModel, config: TrainConfig, path) -> None:
    payload = model.to_dict()
    payload["config"] = {
        "loss_kind": config.loss_kind,
        "hidden_sizes": list(config.hidden_sizes),
        "activation": config.activation,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "max_epochs": config.max_epochs,
        "early_stop_patience": config.early_stop_patience,
        "momentum": config.momentum,
        "sigma_min": config.sigma_min,
        "val_fraction": config.val_fraction,
        "divergence_cap": config.divergence_cap,
    }
    payload["seed"] = int(config.seed)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[EsjModel, dict]:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON checkpoint: {exc}")
    for key in ("input_dim", "hidden_sizes", "sigma_min", "trunk", "heads"):
        if key not in payload:
            raise DataFormatError(f"{path}: checkpoint is missing {key!r}")
    return EsjModel.from_dict(payload), payload.get("config", {})


def write_training_log(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row.epoch, _fmt(row.train_loss), _fmt(row.val_loss)])


# ---------------------------------------------------------------------------
# truth tables
# ---------------------------------------------------------------------------

def write_truth(truth: TruthTable, config: GeneratorConfig, path) -> None:
    cfg = asdict(config)
    if cfg.get("true_model") is not None:
        cfg["true_model"] = {k: np.asarray(v).tolist() for k, v in cfg["true_model"].items()}
    payload = {
        "config": cfg,
        "p": truth.p.tolist(),
        "mu": truth.mu.tolist(),
        "sigma": truth.sigma.tolist(),
        "etv": truth.etv.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def read_truth(path) -> tuple[TruthTable, dict]:
    """Returns the truth table and the generator-config echo it was built
    from (the echo carries the root seed consumers need for outcomes)."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid truth file: {exc}")
    for key in ("p", "mu", "sigma", "etv"):
        if key not in payload:
            raise DataFormatError(f"{path}: truth file is missing {key!r}")
    truth = TruthTable(
        p=np.array(payload["p"], dtype=float),
        mu=np.array(payload["mu"], dtype=float),
        sigma=np.array(payload["sigma"], dtype=float),
        etv=np.array(payload["etv"], dtype=float),
    )
    return truth, payload.get("config", {})


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["strategy", "loss", "seed", "thc", "tha", "cpmd", "tapmd",
                  "objective", "objective_ratio"]


def _report_row(row: MetricsReport) -> list[str]:
    ratio = "" if row.objective_ratio is None else _fmt(row.objective_ratio)
    return [row.strategy, row.loss, str(row.seed), str(row.thc), _fmt(row.tha),
            _fmt(row.cpmd), _fmt(row.tapmd), _fmt(row.objective), ratio]


def write_report(rows: list[MetricsReport], path, append: bool = False) -> None:
    """Canonical metric report; deliberately excludes wall times so repeated
    runs with one seed are byte-identical."""
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "a" if not fresh else "w", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow(_report_row(row))


def read_report(path) -> list[MetricsReport]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise DataFormatError(f"{path}: unexpected report header")
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != len(REPORT_COLUMNS):
            raise DataFormatError(f"{path}:{ln}: expected {len(REPORT_COLUMNS)} columns")
        out.append(MetricsReport(
            strategy=row[0], loss=row[1],
            seed=_parse_int(row[2], f"{path}:{ln}"),
            thc=_parse_int(row[3], f"{path}:{ln}"),
            tha=_parse_float(row[4], f"{path}:{ln}"),
            cpmd=_parse_float(row[5], f"{path}:{ln}"),
            tapmd=_parse_float(row[6], f"{path}:{ln}"),
            objective=_parse_float(row[7], f"{path}:{ln}"),
            objective_ratio=None if row[8] == "" else _parse_float(row[8], f"{path}:{ln}"),
        ))
    return out


def write_report_json(rows: list[MetricsReport], path) -> None:
    payload = []
    for row in rows:
        d = asdict(row)
        d.pop("runtime_ms", None)  # wall times live in bench output only
        payload.append(d)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


BENCH_COLUMNS = ["n_users", "n_funds", "strategy", "seed", "objective",
                 "objective_ratio", "runtime_ms"]


def write_bench(cells: list[BenchCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for c in cells:
            ratio = "" if c.objective_ratio is None else _fmt(c.objective_ratio)
            w.writerow([c.n_users, c.n_funds, c.strategy, c.seed,
                        _fmt(c.objective), ratio, _fmt(c.runtime_ms)])
