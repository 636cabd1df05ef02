"""Primal-dual constrained learning of power policies.

The policy maximizes the weighted sum of expected packet success rates while
keeping each worker's conditional expected rate and energy efficiency above
their floors.  Rates and efficiencies enter the Lagrangian in scaled units
(``rate_unit``, ``ee_unit``; both default to the bandwidth) so the multiplier
steps stay commensurate with the success-probability terms.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet, add_estimation_noise
from .metrics import SystemConstants, compute_metrics, metric_grads_wrt_p
from .numerics import AdamState, adam_step
from .policies import MlpPolicy, policy_backward, policy_forward

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "objective", "val_wpsr", "feasible", "lambda_y_norm", "lambda_r_norm", "lambda_e_norm"]


class DivergenceError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 1000
    patience: int = 100
    batch_size: int = 100
    lr_theta: float = 1e-3
    lr_y: float = 1e-4
    lr_r: float = 1e-4
    lr_e: float = 1e-4
    theta_optimizer: str = "adam"
    seed: int = 0
    freeze_duals: bool = False
    rate_unit: float | None = None
    ee_unit: float | None = None
    fit_input_scaling: bool = True


@dataclass
class PdState:
    """Primal auxiliaries, multipliers and step sizes (rates/EE in scaled units)."""

    y: np.ndarray
    r: np.ndarray
    e: np.ndarray
    lam_y: np.ndarray
    lam_r: np.ndarray
    lam_e: np.ndarray
    r_floor: np.ndarray
    e_floor: np.ndarray
    lr_theta: float = 1e-3
    lr_y: float = 1e-4
    lr_r: float = 1e-4
    lr_e: float = 1e-4

    @classmethod
    def initial(cls, consts: SystemConstants, y0, rate_unit: float, ee_unit: float, **lrs) -> "PdState":
        L = consts.num_workers
        r_floor = consts.rate_floor / rate_unit
        e_floor = consts.ee_floor / ee_unit
        return cls(
            y=np.clip(np.asarray(y0, dtype=np.float64), 0.0, 1.0),
            r=r_floor.copy(),
            e=e_floor.copy(),
            # start lambda_y at the stationary point of the y-update
            lam_y=consts.weights.copy(),
            lam_r=np.zeros(L),
            lam_e=np.zeros(L),
            r_floor=r_floor,
            e_floor=e_floor,
            **lrs,
        )


@dataclass
class ExpectationEstimates:
    psr: np.ndarray  # E[f_y]
    rate: np.ndarray  # E_c[f_r], zero where undefined
    ee: np.ndarray  # E_c[f_e], zero where undefined
    counts: np.ndarray
    batch_size: int
    record: object = field(default=None, repr=False)
    jacobians: object = field(default=None, repr=False)
    rate_unit: float = 1.0
    ee_unit: float = 1.0

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0


def estimate_expectations(
    policy, batch, consts: SystemConstants, record: bool = False, rate_unit: float = 1.0, ee_unit: float = 1.0
) -> ExpectationEstimates:
    """Batch means of PSR and transmit-conditioned means of rate and EE."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if len(batch) == 0:
        raise ValueError("empty channel batch")
    p, rec = policy_forward(policy, batch, record=record)
    if record:
        jac = metric_grads_wrt_p(p, batch, consts)
        vals = jac.values
    else:
        jac = None
        vals = compute_metrics(p, batch, consts)
    mask = vals.active.astype(np.float64)
    counts = mask.sum(axis=0)
    safe = np.where(counts > 0, counts, 1.0)
    return ExpectationEstimates(
        psr=vals.psr.mean(axis=0),
        rate=(vals.rate * mask).sum(axis=0) / safe / rate_unit,
        ee=(vals.energy_efficiency * mask).sum(axis=0) / safe / ee_unit,
        counts=counts,
        batch_size=len(batch),
        record=rec,
        jacobians=jac,
        rate_unit=rate_unit,
        ee_unit=ee_unit,
    )


def lagrangian(objective: float, est: ExpectationEstimates, state: PdState) -> float:
    d = est.defined
    return float(
        objective
        + state.lam_y @ (est.psr - state.y)
        + state.lam_r @ np.where(d, est.rate - state.r, 0.0)
        + state.lam_e @ np.where(d, est.ee - state.e, 0.0)
    )


def power_upstream(est: ExpectationEstimates, lam_y, lam_r, lam_e) -> np.ndarray:
    """d(lam_y.E[f_y] + lam_r.E_c[f_r] + lam_e.E_c[f_e]) / dp for every instance.

    Participation indicators are constants; undefined conditionals add nothing.
    """
    jac = est.jacobians
    mask = jac.values.active.astype(np.float64)
    safe = np.where(est.counts > 0, est.counts, 1.0)
    w_y = np.broadcast_to(lam_y / est.batch_size, mask.shape)
    w_r = mask * (lam_r / safe / est.rate_unit)
    w_e = mask * (lam_e / safe / est.ee_unit)
    return (
        np.einsum("bi,bij->bj", w_y, jac.psr)
        + np.einsum("bi,bij->bj", w_r, jac.rate)
        + np.einsum("bi,bij->bj", w_e, jac.ee)
    )


def update_theta(policy, est: ExpectationEstimates, state: PdState, optimizer: AdamState | None = None):
    """Gradient ascent on the multiplier-weighted expectations.

    With ``optimizer=None`` the step is the plain ``Theta += lr * grad``;
    an :class:`AdamState` instead applies Adam to the ascent direction.
    """
    if est.record is None:
        raise ValueError("estimates were computed without a recorded forward pass")
    upstream = power_upstream(est, state.lam_y, state.lam_r, state.lam_e)
    grads = policy_backward(policy, est.record, upstream)
    params = policy.params
    if optimizer is None:
        new = [p + state.lr_theta * g for p, g in zip(params, grads)]
    else:
        flat = np.concatenate([p.reshape(-1) for p in params])
        gflat = np.concatenate([g.reshape(-1) for g in grads])
        flat = adam_step(optimizer, flat, -gflat)
        new, i = [], 0
        for p in params:
            new.append(flat[i : i + p.size].reshape(p.shape))
            i += p.size
    policy.set_params(new)
    return policy


def update_primal(state: PdState, weights) -> PdState:
    state.y = np.clip(state.y + state.lr_y * (np.asarray(weights) - state.lam_y), 0.0, 1.0)
    state.r = np.maximum(state.r - state.lr_r * state.lam_r, state.r_floor)
    state.e = np.maximum(state.e - state.lr_e * state.lam_e, state.e_floor)
    return state


def update_duals(state: PdState, est: ExpectationEstimates) -> PdState:
    d = est.defined
    state.lam_y = np.maximum(state.lam_y - state.lr_y * (est.psr - state.y), 0.0)
    state.lam_r = np.where(d, np.maximum(state.lam_r - state.lr_r * (est.rate - state.r), 0.0), state.lam_r)
    state.lam_e = np.where(d, np.maximum(state.lam_e - state.lr_e * (est.ee - state.e), 0.0), state.lam_e)
    return state


@dataclass
class TrainHistory:
    objective: list[float] = field(default_factory=list)
    val_wpsr: list[float] = field(default_factory=list)
    feasible: list[bool] = field(default_factory=list)
    lambda_y_norm: list[float] = field(default_factory=list)
    lambda_r_norm: list[float] = field(default_factory=list)
    lambda_e_norm: list[float] = field(default_factory=list)
    val_rate: list[np.ndarray] = field(default_factory=list, repr=False)
    val_ee: list[np.ndarray] = field(default_factory=list, repr=False)
    best_epoch: int = -1

    def __len__(self):
        return len(self.objective)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for i in range(len(self)):
            w.writerow([
                i + 1, repr(self.objective[i]), repr(self.val_wpsr[i]), int(self.feasible[i]),
                repr(self.lambda_y_norm[i]), repr(self.lambda_r_norm[i]), repr(self.lambda_e_norm[i]),
            ])
        return buf.getvalue()


@dataclass
class Validation:
    wpsr: float
    rate: np.ndarray
    ee: np.ndarray
    feasible: bool
    violation: float


def validate(policy, channels, consts: SystemConstants) -> Validation:
    est = estimate_expectations(policy, channels, consts)
    d = est.defined
    rate_ok = ~d | (est.rate >= consts.rate_floor)
    ee_ok = ~d | (est.ee >= consts.ee_floor)
    rel = lambda mean, floor: np.where(d & (floor > 0), np.maximum(floor - mean, 0.0) / np.where(floor > 0, floor, 1.0), 0.0)
    violation = float(rel(est.rate, consts.rate_floor).sum() + rel(est.ee, consts.ee_floor).sum())
    return Validation(
        wpsr=float(consts.weights @ est.psr),
        rate=est.rate,
        ee=est.ee,
        feasible=bool(np.all(rate_ok & ee_ok)),
        violation=violation,
    )


def _selection_key(v: Validation) -> tuple:
    # feasible epochs first, then objective (penalized when infeasible)
    return (1, v.wpsr) if v.feasible else (0, v.wpsr - v.violation)


def train(policy, channels: ChannelSet, consts: SystemConstants, config: TrainConfig = TrainConfig(), on_epoch=None):
    """Run primal-dual epochs; return the best validation snapshot and the history.

    ``on_epoch(epoch, est, before, after)`` is called after every epoch with the
    batch estimates, a copy of the state just before the dual step, and the
    live state after it.
    """
    rng = np.random.default_rng(config.seed)
    train_H = channels.split("train")
    val_H = channels.split("validation")
    if len(train_H) == 0 or len(val_H) == 0:
        raise ValueError("channel set needs non-empty train and validation splits")
    rate_unit = config.rate_unit or consts.bandwidth
    ee_unit = config.ee_unit or consts.bandwidth
    if isinstance(policy, MlpPolicy) and config.fit_input_scaling:
        policy.fit_input_scaling(train_H)

    bs = min(config.batch_size, len(train_H))
    y0 = estimate_expectations(policy, train_H[:bs], consts).psr
    state = PdState.initial(
        consts, y0, rate_unit, ee_unit,
        lr_theta=config.lr_theta, lr_y=config.lr_y, lr_r=config.lr_r, lr_e=config.lr_e,
    )
    optimizer = AdamState(lr=config.lr_theta) if config.theta_optimizer == "adam" else None
    if config.theta_optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown theta optimizer {config.theta_optimizer!r}")

    history = TrainHistory()
    best_key, best_params, stale = None, None, 0
    for epoch in range(config.epochs):
        idx = rng.permutation(len(train_H))[:bs]
        est = estimate_expectations(policy, train_H[idx], consts, record=True, rate_unit=rate_unit, ee_unit=ee_unit)
        objective = float(consts.weights @ state.y)
        lag = lagrangian(objective, est, state)
        if not np.isfinite(lag):
            raise DivergenceError(f"non-finite Lagrangian at epoch {epoch + 1}", history)
        update_theta(policy, est, state, optimizer)
        update_primal(state, consts.weights)
        before = copy.deepcopy(state) if on_epoch else None
        if not config.freeze_duals:
            update_duals(state, est)
        if on_epoch:
            on_epoch(epoch + 1, est, before, state)

        v = validate(policy, val_H, consts)
        history.objective.append(float(consts.weights @ state.y))
        history.val_wpsr.append(v.wpsr)
        history.feasible.append(v.feasible)
        history.lambda_y_norm.append(float(np.linalg.norm(state.lam_y)))
        history.lambda_r_norm.append(float(np.linalg.norm(state.lam_r)))
        history.lambda_e_norm.append(float(np.linalg.norm(state.lam_e)))
        history.val_rate.append(v.rate)
        history.val_ee.append(v.ee)

        key = _selection_key(v)
        if best_key is None or key > best_key:
            best_key, stale = key, 0
            best_params = [p.copy() for p in policy.params]
            history.best_epoch = epoch + 1
        else:
            stale += 1
        if stale >= config.patience:
            break
        if epoch % 100 == 0:
            log.debug("epoch %d val_wpsr %.4f feasible %s", epoch + 1, v.wpsr, v.feasible)

    policy.set_params(best_params)
    return policy, history


# --- evaluation ------------------------------------------------------------


@dataclass
class EvalReport:
    wper: float  # transmit-conditioned weighted PER, mean over channels
    wper_all: float  # silent workers counted as failures (= 1 - weighted PSR)
    silent_channels: int
    success_count: float
    cond_rate: list[float]
    cond_ee: list[float]
    rate_satisfied: list[bool]
    ee_satisfied: list[bool]
    satisfaction_fraction: float
    mean_power: float
    active_fraction: float
    hist_edges: list[float]
    hist_counts: list[int]
    num_channels: int
    num_workers: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def allocate(policy, H, consts: SystemConstants, rng=None, H_input=None) -> np.ndarray:
    """Powers chosen from ``H_input`` (defaults to ``H``); any policy kind."""
    H_in = H if H_input is None else H_input
    return np.asarray(policy.allocate(H_in, consts, rng), dtype=np.float64)


def transmit_weighted_per(per, active, weights) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel weighted PER over transmitting workers; 1 and flagged if none transmit."""
    w = np.where(active, weights, 0.0)
    tot = w.sum(axis=-1)
    silent = tot <= 0
    val = np.where(silent, 1.0, (w * per).sum(axis=-1) / np.where(silent, 1.0, tot))
    return val, silent


def evaluate(
    policy, H, consts: SystemConstants, rng=None, noise_var: float = 0.0, bins: int = 20
) -> EvalReport:
    H = np.asarray(H, dtype=np.float64)
    if len(H) == 0:
        raise ValueError("empty evaluation split")
    if rng is None:
        rng = np.random.default_rng(0)
    H_in = add_estimation_noise(H, noise_var, rng) if noise_var > 0 else H
    p = allocate(policy, H, consts, rng, H_in)
    vals = compute_metrics(p, H, consts)
    active = vals.active
    wper, silent = transmit_weighted_per(vals.per, active, consts.weights)
    counts = active.sum(axis=0)
    safe = np.where(counts > 0, counts, 1)
    cond_rate = (vals.rate * active).sum(axis=0) / safe
    cond_ee = (vals.energy_efficiency * active).sum(axis=0) / safe
    rate_ok = (counts == 0) | (cond_rate >= consts.rate_floor)
    ee_ok = (counts == 0) | (cond_ee >= consts.ee_floor)
    hist, edges = np.histogram(p.reshape(-1), bins=bins, range=(0.0, consts.p_max))
    return EvalReport(
        wper=float(wper.mean()),
        wper_all=float(np.mean(1.0 - vals.psr @ consts.weights)),
        silent_channels=int(silent.sum()),
        success_count=float(np.mean((vals.psr * active).sum(axis=-1))),
        cond_rate=cond_rate.tolist(),
        cond_ee=cond_ee.tolist(),
        rate_satisfied=rate_ok.tolist(),
        ee_satisfied=ee_ok.tolist(),
        satisfaction_fraction=float(np.mean(rate_ok & ee_ok)),
        mean_power=float(p.mean()),
        active_fraction=float(active.mean()),
        hist_edges=edges.tolist(),
        hist_counts=hist.astype(int).tolist(),
        num_channels=int(len(H)),
        num_workers=int(H.shape[-1]),
    )


def percentile_floors(policy, H, consts: SystemConstants, q: float = 30.0, rng=None, pooled: bool = False):
    """Rate and EE floors at the q-th percentile of the policy's conditional metrics.

    By default the percentile is taken over the L per-worker conditional means
    E_c[f_r], E_c[f_e]; ``pooled=True`` uses every transmitting instance instead.
    """
    p = allocate(policy, H, consts, rng)
    vals = compute_metrics(p, H, consts)
    act = vals.active
    if not act.any():
        raise ValueError("policy never transmits; cannot derive floors")
    L = consts.num_workers
    if pooled:
        r0 = float(np.percentile(vals.rate[act], q))
        e0 = float(np.percentile(vals.energy_efficiency[act], q))
    else:
        counts = act.sum(axis=0)
        ok = counts > 0
        cond_r = (vals.rate * act).sum(axis=0)[ok] / counts[ok]
        cond_e = (vals.energy_efficiency * act).sum(axis=0)[ok] / counts[ok]
        r0 = float(np.percentile(cond_r, q))
        e0 = float(np.percentile(cond_e, q))
    return np.full(L, r0), np.full(L, e0)
