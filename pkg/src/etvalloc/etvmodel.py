"""Probabilistic expected-transaction-value model and its training losses.

A user-fund pair is scored by a small feedforward trunk over the concatenated
feature vector, with three affine heads on the last hidden layer:

* p     -- conversion probability, logistic of the head output
* mu    -- location of the log-amount given conversion
* sigma -- scale of the log-amount, softplus of the head output plus a floor

The conditional amount model is zero-inflated lognormal: with probability p
the user converts and the transformed label v = log(amount + 1) is Gaussian
with parameters (mu, sigma); otherwise the amount is zero. The expected
transaction value of a pair is therefore p * (exp(mu + sigma^2/2) - 1).

Three training losses share the heads:

``esj_loss``     joint likelihood over the entire sample space. Converted
                 samples contribute log p plus the lognormal density of the
                 raw label; unconverted samples contribute
                 log(1 - p + p * density_at_zero), so a zero outcome can be
                 explained either by no conversion or by a conversion whose
                 amount collapses to zero.
``ziln_loss``    cross-entropy on p over all samples plus the lognormal
                 negative log-likelihood on converted samples only.
``ce_mse_loss``  cross-entropy on p plus squared error between mu and v over
                 all samples; the sigma head is unused.

Gradients are derived by hand and checked against central finite differences
(``grad_check``). Training is plain mini-batch gradient descent with an
optional momentum term, a 90/10 train/validation split, and early stopping on
validation loss. Everything is deterministic given the config seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import (
    ConfigError,
    DivergedError,
    EmptyDataError,
    EtvMatrix,
    Instance,
    NonFiniteLossError,
)

SQRT_2PI = math.sqrt(2.0 * math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

LOSS_KINDS = ("esj", "ziln", "ce_mse")


@dataclass
class TrainConfig:
    loss_kind: str = "esj"
    hidden_sizes: tuple[int, ...] = (32, 16)
    activation: str = "relu"
    learning_rate: float = 0.05
    batch_size: int = 512
    max_epochs: int = 60
    early_stop_patience: int = 5
    momentum: float = 0.0           # 0 gives plain gradient descent
    sigma_min: float = 0.05         # additive floor under the sigma head
    val_fraction: float = 0.1
    divergence_cap: float = 1e12    # validation loss above this aborts training
    seed: int = 0


class ModelOutput(NamedTuple):
    p: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    z_p: np.ndarray      # logit of p
    z_sigma: np.ndarray  # pre-softplus sigma


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.logaddexp(0.0, z)


class EsjModel:
    """Feedforward trunk (relu or tanh) with three affine heads."""

    def __init__(self, input_dim: int, hidden_sizes=(32, 16), sigma_min: float = 0.05,
                 rng: np.random.Generator | None = None, activation: str = "relu"):
        if input_dim < 1:
            raise ConfigError("model input dimension must be >= 1")
        if any(h < 1 for h in hidden_sizes):
            raise ConfigError("hidden layer sizes must be >= 1")
        if activation not in ("relu", "tanh"):
            raise ConfigError("activation must be 'relu' or 'tanh'")
        self.input_dim = int(input_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.sigma_min = float(sigma_min)
        self.activation = activation
        sizes = (self.input_dim, *self.hidden_sizes)
        if rng is None:
            rng = np.random.default_rng(0)
        gain = math.sqrt(2.0) if activation == "relu" else 1.0
        self.trunk = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))
            self.trunk.append([w, np.zeros(fan_out)])
        last = sizes[-1]
        self.heads = {}
        for name in ("p", "mu", "sigma"):
            w = rng.normal(0.0, 1.0 / math.sqrt(last), size=(last,))
            self.heads[name] = [w, 0.0]

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray):
        """Returns (ModelOutput, cache); cache feeds backward()."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ConfigError(f"expected {self.input_dim} input features, got {x.shape[1]}")
        hs = [x]
        h = x
        act = np.tanh if self.activation == "tanh" else lambda z: np.maximum(z, 0.0)
        for w, b in self.trunk:
            h = act(h @ w + b)
            hs.append(h)
        wp, bp = self.heads["p"]
        wm, bm = self.heads["mu"]
        ws, bs = self.heads["sigma"]
        z_p = h @ wp + bp
        z_sigma = h @ ws + bs
        out = ModelOutput(
            p=_sigmoid(z_p),
            mu=h @ wm + bm,
            sigma=_softplus(z_sigma) + self.sigma_min,
            z_p=z_p,
            z_sigma=z_sigma,
        )
        return out, hs

    def backward(self, hs, d_zp, d_mu, d_sigma, z_sigma):
        """Parameter gradients given per-sample upstream gradients.

        d_zp is with respect to the p logit, d_mu to mu directly, d_sigma to
        sigma after the floor (the softplus chain is applied here).
        """
        h = hs[-1]
        d_zs = d_sigma * _sigmoid(z_sigma)  # softplus'(z) = sigmoid(z)
        grads = {"heads": {}, "trunk": []}
        d_h = np.zeros_like(h)
        for name, dz in (("p", d_zp), ("mu", d_mu), ("sigma", d_zs)):
            w, _ = self.heads[name]
            grads["heads"][name] = [h.T @ dz, float(dz.sum())]
            d_h += np.outer(dz, w)
        for idx in range(len(self.trunk) - 1, -1, -1):
            w, _ = self.trunk[idx]
            a = hs[idx + 1]
            if self.activation == "tanh":
                d_pre = d_h * (1.0 - a ** 2)
            else:
                d_pre = d_h * (a > 0.0)  # relu' with 0 at the kink
            grads["trunk"].insert(0, [hs[idx].T @ d_pre, d_pre.sum(axis=0)])
            d_h = d_pre @ w.T
        return grads

    # -- parameter plumbing --------------------------------------------------

    def _param_refs(self):
        refs = []
        for layer in self.trunk:
            refs.append(layer)
        for name in ("p", "mu", "sigma"):
            refs.append(self.heads[name])
        return refs

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in self._param_refs():
            parts.append(np.ravel(w))
            parts.append(np.ravel(b))
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for ref in self._param_refs():
            w, b = ref
            ref[0] = theta[pos:pos + np.size(w)].reshape(np.shape(w)).copy()
            pos += np.size(w)
            nb = np.size(b)
            chunk = theta[pos:pos + nb]
            ref[1] = float(chunk[0]) if np.isscalar(b) or np.ndim(b) == 0 else chunk.reshape(np.shape(b)).copy()
            pos += nb
        if pos != theta.size:
            raise ConfigError("flat parameter vector has the wrong length")

    def flat_grads(self, grads) -> np.ndarray:
        parts = []
        for gw, gb in grads["trunk"]:
            parts.append(np.ravel(gw))
            parts.append(np.ravel(gb))
        for name in ("p", "mu", "sigma"):
            gw, gb = grads["heads"][name]
            parts.append(np.ravel(gw))
            parts.append(np.ravel(np.asarray(gb, dtype=float)))
        # flat order must match get_flat: trunk first, then heads
        return np.concatenate(parts)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "sigma_min": self.sigma_min,
            "activation": self.activation,
            "trunk": [
                {"w": [float(v) for v in np.ravel(w)], "b": [float(v) for v in b]}
                for w, b in self.trunk
            ],
            "heads": {
                name: {"w": [float(v) for v in w], "b": float(b)}
                for name, (w, b) in self.heads.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EsjModel":
        model = cls(int(d["input_dim"]), tuple(d["hidden_sizes"]), float(d["sigma_min"]),
                    activation=d.get("activation", "relu"))
        sizes = (model.input_dim, *model.hidden_sizes)
        for layer, (fan_in, fan_out), stored in zip(model.trunk, zip(sizes[:-1], sizes[1:]), d["trunk"]):
            layer[0] = np.array(stored["w"], dtype=float).reshape(fan_in, fan_out)
            layer[1] = np.array(stored["b"], dtype=float)
        for name in ("p", "mu", "sigma"):
            model.heads[name][0] = np.array(d["heads"][name]["w"], dtype=float)
            model.heads[name][1] = float(d["heads"][name]["b"])
        return model

    def copy(self) -> "EsjModel":
        clone = EsjModel(self.input_dim, self.hidden_sizes, self.sigma_min,
                         activation=self.activation)
        clone.set_flat(self.get_flat())
        return clone


# ---------------------------------------------------------------------------
# losses (batch means) and their per-sample gradients
# ---------------------------------------------------------------------------

def _as_arrays(p, mu, sigma, y, v):
    p, mu, sigma, y, v = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (p, mu, sigma, y, v))
    n = max(a.size for a in (p, mu, sigma, y, v))
    return (np.broadcast_to(a, (n,)).astype(float) for a in (p, mu, sigma, y, v))


def _zero_density(mu, sigma):
    # lognormal density of the raw label at amount 0, i.e. Gaussian density
    # of v at 0 (the Jacobian term exp(-v) is 1 there)
    return np.exp(-0.5 * (mu / sigma) ** 2) / (SQRT_2PI * sigma)


def esj_loss(p, mu, sigma, y, v) -> float:
    """Entire-space joint likelihood loss, averaged over the batch.

    Converted samples score the joint density p * LogNormal(amount; mu,
    sigma) of the raw label amount + 1 = exp(v); unconverted samples score
    the total mass at zero, 1 - p + p * density_at_zero.
    """
    p, mu, sigma, y, v = _as_arrays(p, mu, sigma, y, v)
    if p.size == 0:
        raise EmptyDataError("loss needs at least one sample")
    pos = y > 0.5
    ll = np.empty_like(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ll[pos] = (
            np.log(p[pos])
            - LOG_SQRT_2PI - np.log(sigma[pos]) - v[pos]
            - 0.5 * ((v[pos] - mu[pos]) / sigma[pos]) ** 2
        )
        neg = ~pos
        ll[neg] = np.log(1.0 - p[neg] + p[neg] * _zero_density(mu[neg], sigma[neg]))
    loss = float(-ll.mean())
    if not np.isfinite(loss):
        raise NonFiniteLossError("esj loss is not finite")
    return loss


def ziln_loss(p, mu, sigma, y, v) -> float:
    """Cross-entropy on p everywhere plus lognormal NLL on converted samples."""
    p, mu, sigma, y, v = _as_arrays(p, mu, sigma, y, v)
    if p.size == 0:
        raise EmptyDataError("loss needs at least one sample")
    pos = y > 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        ce = -np.where(pos, np.log(p), np.log1p(-p))
        nll = np.zeros_like(p)
        nll[pos] = (
            LOG_SQRT_2PI + np.log(sigma[pos]) + v[pos]
            + 0.5 * ((v[pos] - mu[pos]) / sigma[pos]) ** 2
        )
    loss = float((ce + nll).mean())
    if not np.isfinite(loss):
        raise NonFiniteLossError("ziln loss is not finite")
    return loss


def ce_mse_loss(p, mu, sigma, y, v) -> float:
    """Cross-entropy on p plus (mu - v)^2 over all samples; sigma unused."""
    p, mu, sigma, y, v = _as_arrays(p, mu, sigma, y, v)
    if p.size == 0:
        raise EmptyDataError("loss needs at least one sample")
    pos = y > 0.5
    with np.errstate(divide="ignore"):
        ce = -np.where(pos, np.log(p), np.log1p(-p))
    loss = float((ce + (mu - v) ** 2).mean())
    if not np.isfinite(loss):
        raise NonFiniteLossError("ce_mse loss is not finite")
    return loss


LOSS_FUNCTIONS = {"esj": esj_loss, "ziln": ziln_loss, "ce_mse": ce_mse_loss}


def _loss_backward(kind: str, out: ModelOutput, y, v):
    """Batch loss plus per-sample gradients wrt (z_p, mu, sigma).

    Gradients are already divided by the batch size, so backward() sums them.
    """
    p, mu, sigma = out.p, out.mu, out.sigma
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    m = p.size
    pos = y > 0.5
    d_zp = np.zeros(m)
    d_mu = np.zeros(m)
    d_sigma = np.zeros(m)
    if kind == "esj":
        loss = esj_loss(p, mu, sigma, y, v)
        # converted: d(-log p)/dz = -(1-p); Gaussian terms in v
        d_zp[pos] = -(1.0 - p[pos])
        d_mu[pos] = (mu[pos] - v[pos]) / sigma[pos] ** 2
        d_sigma[pos] = 1.0 / sigma[pos] - (v[pos] - mu[pos]) ** 2 / sigma[pos] ** 3
        neg = ~pos
        dens = _zero_density(mu[neg], sigma[neg])
        q = 1.0 - p[neg] + p[neg] * dens
        d_zp[neg] = -(dens - 1.0) * p[neg] * (1.0 - p[neg]) / q
        d_mu[neg] = p[neg] * dens * mu[neg] / (sigma[neg] ** 2 * q)
        d_sigma[neg] = p[neg] * dens * (1.0 / sigma[neg] - mu[neg] ** 2 / sigma[neg] ** 3) / q
    elif kind == "ziln":
        loss = ziln_loss(p, mu, sigma, y, v)
        d_zp = p - y
        d_mu[pos] = (mu[pos] - v[pos]) / sigma[pos] ** 2
        d_sigma[pos] = 1.0 / sigma[pos] - (v[pos] - mu[pos]) ** 2 / sigma[pos] ** 3
    elif kind == "ce_mse":
        loss = ce_mse_loss(p, mu, sigma, y, v)
        d_zp = p - y
        d_mu = 2.0 * (mu - v)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")
    return loss, d_zp / m, d_mu / m, d_sigma / m


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def etv_from_params(p, mu, sigma) -> np.ndarray:
    """Expected transaction value p * (exp(mu + sigma^2/2) - 1), floored at 0."""
    val = np.asarray(p, dtype=float) * np.expm1(np.asarray(mu, dtype=float)
                                                + 0.5 * np.asarray(sigma, dtype=float) ** 2)
    return np.maximum(val, 0.0)


def pair_features(instance: Instance, fund_id: int) -> np.ndarray:
    """Concatenated (user, fund) features for every user against one fund."""
    g = instance.fund_features[fund_id]
    return np.hstack([instance.user_features, np.tile(g, (instance.n_users, 1))])


def predict_etv(model: EsjModel, instance: Instance, n_threads: int = 1,
                use_sigma: bool = True) -> EtvMatrix:
    """Score every (user, fund) pair; columns are independent so they can be
    evaluated concurrently (n_threads > 1).

    use_sigma=False drops the lognormal variance correction, matching models
    whose amount head was fit as a plain regression (the CE+MSE baseline has
    no trained sigma), so their amount estimate is exp(mu) - 1.
    """
    n, k = instance.n_users, instance.n_funds
    values = np.empty((n, k))

    def fill(j):
        out, _ = model.forward(pair_features(instance, j))
        sigma = out.sigma if use_sigma else np.zeros_like(out.sigma)
        values[:, j] = etv_from_params(out.p, out.mu, sigma)

    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=min(n_threads, k)) as pool:
            list(pool.map(fill, range(k)))
    else:
        for j in range(k):
            fill(j)
    return EtvMatrix(values=values)


def predict_params(model: EsjModel, instance: Instance):
    """Per-pair head outputs as three (n_users, n_funds) arrays (p, mu, sigma)."""
    n, k = instance.n_users, instance.n_funds
    p = np.empty((n, k))
    mu = np.empty((n, k))
    sigma = np.empty((n, k))
    for j in range(k):
        out, _ = model.forward(pair_features(instance, j))
        p[:, j], mu[:, j], sigma[:, j] = out.p, out.mu, out.sigma
    return p, mu, sigma


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EsjModel
    history: list[EpochStats] = field(default_factory=list)


def _design_matrix(instance: Instance, observations):
    user_ids = np.asarray(observations.user_ids, dtype=np.int64)
    fund_ids = np.asarray(observations.fund_ids, dtype=np.int64)
    x = np.hstack([
        instance.user_features[user_ids],
        instance.fund_features[fund_ids],
    ])
    y = np.asarray(observations.converted, dtype=float)
    v = np.log1p(np.asarray(observations.amounts, dtype=float))
    return x, y, v


def train(instance: Instance, observations, config: TrainConfig) -> TrainResult:
    """Fit the three-head model by mini-batch gradient descent.

    90/10 train/validation split from the config seed, fixed learning rate,
    early stopping on validation loss with the configured patience. The
    returned model carries the best validation snapshot. Deterministic:
    the same seed yields a bitwise-identical parameter trajectory.
    """
    if config.loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {config.loss_kind!r}, expected one of {LOSS_KINDS}")
    if not (0.0 < config.val_fraction < 1.0):
        raise ConfigError("val_fraction must be in (0, 1)")
    x, y, v = _design_matrix(instance, observations)
    n = x.shape[0]
    if n == 0:
        raise EmptyDataError("no observations to train on")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = int(round(n * config.val_fraction))
    if n_val == 0 or n_val == n:
        raise EmptyDataError(f"{n} observations cannot support a {config.val_fraction:.0%} validation split")
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_val, y_val, v_val = x[val_idx], y[val_idx], v[val_idx]
    x_tr, y_tr, v_tr = x[train_idx], y[train_idx], v[train_idx]

    model = EsjModel(x.shape[1], config.hidden_sizes, config.sigma_min, rng=rng,
                     activation=config.activation)
    velocity = np.zeros_like(model.get_flat())
    best = model.copy()
    best_val = math.inf
    stale = 0
    history: list[EpochStats] = []

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(x_tr))
        seen = 0
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            out, hs = model.forward(x_tr[idx])
            loss, d_zp, d_mu, d_sigma = _loss_backward(config.loss_kind, out, y_tr[idx], v_tr[idx])
            grads = model.backward(hs, d_zp, d_mu, d_sigma, out.z_sigma)
            flat = model.flat_grads(grads)
            velocity = config.momentum * velocity - config.learning_rate * flat
            model.set_flat(model.get_flat() + velocity)
            running += loss * len(idx)
            seen += len(idx)
        train_loss = running / seen
        out_val, _ = model.forward(x_val)
        val_loss = LOSS_FUNCTIONS[config.loss_kind](out_val.p, out_val.mu, out_val.sigma, y_val, v_val)
        history.append(EpochStats(epoch=epoch, train_loss=float(train_loss), val_loss=float(val_loss)))
        if not math.isfinite(val_loss) or val_loss > config.divergence_cap:
            raise DivergedError(
                f"training diverged: validation loss {val_loss} at epoch {epoch} "
                f"breaches the cap {config.divergence_cap}"
            )
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    return TrainResult(model=best, history=history)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(model: EsjModel, x, y, v, loss_kind: str, eps: float = 1e-5) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-4) so
    parameters with near-zero gradients do not amplify finite-difference
    noise into false alarms.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError("finite-difference step must be in [1e-7, 1e-3]")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, hs = model.forward(x)
    _, d_zp, d_mu, d_sigma = _loss_backward(loss_kind, out, y, v)
    analytic = model.flat_grads(model.backward(hs, d_zp, d_mu, d_sigma, out.z_sigma))

    loss_fn = LOSS_FUNCTIONS[loss_kind]
    theta = model.get_flat()
    numeric = np.empty_like(analytic)
    probe = model.copy()

    def loss_at(vec):
        probe.set_flat(vec)
        o, _ = probe.forward(x)
        return loss_fn(o.p, o.mu, o.sigma, y, v)

    for idx in range(theta.size):
        bump = np.zeros_like(theta)
        bump[idx] = eps
        numeric[idx] = (loss_at(theta + bump) - loss_at(theta - bump)) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / denom))
