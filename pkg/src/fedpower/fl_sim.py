"""Federated learning over a lossy uplink.

Workers train locally from the broadcast global model, the allocated powers
set each upload's packet error rate, one Bernoulli draw per worker decides
whether the server receives it, and the server averages what arrived
weighted by sample counts.  If nothing arrives the previous global model is
kept (rollback).
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, sample_csi
from .metrics import SystemConstants, compute_metrics
from .numerics import AdamState, NumericalError, adam_step

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class WorkerDataset:
    features: np.ndarray
    targets: np.ndarray
    weight: float = 0.0
    noise_level: float | None = None

    def __post_init__(self):
        if len(self.features) < 1 or len(self.features) != len(self.targets):
            raise ValueError("a worker needs at least one sample and matching targets")
        if self.weight < 0:
            raise ValueError("weights must be non-negative")

    @property
    def num_samples(self) -> int:
        return len(self.features)


@dataclass
class Task:
    workers: list[WorkerDataset]
    test_x: np.ndarray
    test_y: np.ndarray
    kind: str  # "regression" | "classification"
    num_classes: int = 1

    @property
    def weights(self) -> np.ndarray:
        return np.array([w.weight for w in self.workers])


# --- models ----------------------------------------------------------------


@dataclass
class FlModel:
    """Flat parameter vector plus architecture.

    ``arch`` is one of ``"linear"`` (affine map), ``"mlp"`` (one tanh hidden
    layer) or ``"softmax"`` (affine map read as class logits).
    """

    arch: str
    in_dim: int
    out_dim: int = 1
    hidden: int = 50
    bias: bool = True
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.arch not in ("linear", "mlp", "softmax"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.params is None:
            self.params = np.zeros(self.num_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.size != self.num_params:
            raise ValueError(f"{self.arch} model needs {self.num_params} parameters, got {self.params.size}")

    @property
    def shapes(self) -> list[tuple]:
        if self.arch == "mlp":
            return [(self.in_dim, self.hidden), (self.hidden,), (self.hidden, self.out_dim), (self.out_dim,)]
        return [(self.in_dim, self.out_dim)] + ([(self.out_dim,)] if self.bias else [])

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, flat=None) -> list[np.ndarray]:
        flat = self.params if flat is None else flat
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(flat[i : i + n].reshape(s))
            i += n
        return out

    def with_params(self, params) -> "FlModel":
        return replace(self, params=np.array(params, dtype=np.float64))

    def init(self, rng: np.random.Generator) -> "FlModel":
        parts = []
        for s in self.shapes:
            if len(s) == 2:
                a = np.sqrt(6.0 / (s[0] + s[1]))
                parts.append(rng.uniform(-a, a, size=s).ravel())
            else:
                parts.append(np.zeros(s))
        return self.with_params(np.concatenate(parts))

    def output(self, x, flat=None):
        parts = self.unpack(flat)
        if self.arch == "mlp":
            w1, b1, w2, b2 = parts
            return np.tanh(x @ w1 + b1) @ w2 + b2
        out = x @ parts[0]
        return out + parts[1] if self.bias else out

    def predict(self, x):
        out = self.output(x)
        if self.arch == "softmax" or (self.arch == "mlp" and self.out_dim > 1):
            return out.argmax(axis=1)
        return out[:, 0]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(model: FlModel, flat, x, y, task: str):
    """Mean-square error (regression) or cross-entropy (classification) and its gradient."""
    parts = model.unpack(flat)
    n = len(x)
    if model.arch == "mlp":
        w1, b1, w2, b2 = parts
        h = np.tanh(x @ w1 + b1)
        out = h @ w2 + b2
    else:
        out = x @ parts[0] + (parts[1] if model.bias else 0.0)
    if task == "regression":
        err = out[:, 0] - y
        loss = float(np.mean(err**2))
        d_out = (2.0 / n) * err[:, None]
    else:
        prob = _softmax(out)
        loss = float(-np.mean(np.log(prob[np.arange(n), y] + 1e-300)))
        d_out = prob
        d_out[np.arange(n), y] -= 1.0
        d_out /= n
    if model.arch == "mlp":
        g_w2 = h.T @ d_out
        g_b2 = d_out.sum(axis=0)
        d_h = (d_out @ w2.T) * (1.0 - h**2)
        grads = [x.T @ d_h, d_h.sum(axis=0), g_w2, g_b2]
    else:
        grads = [x.T @ d_out] + ([d_out.sum(axis=0)] if model.bias else [])
    return loss, np.concatenate([g.ravel() for g in grads])


def evaluate_model(model: FlModel, x, y, task: str) -> float:
    """Test RMSE for regression, error rate for classification."""
    if task == "regression":
        return float(np.sqrt(np.mean((model.predict(x) - y) ** 2)))
    return float(np.mean(model.predict(x) != y))


@dataclass(frozen=True)
class LocalTrainOptions:
    lr: float = 8e-4
    batch_size: int = 8
    steps: int | None = None  # None: one full pass over the local data


def local_train(model: FlModel, data: WorkerDataset, opts: LocalTrainOptions, task: str, rng) -> np.ndarray:
    """Adam on the local loss from the given parameters; returns new parameters."""
    n = data.num_samples
    flat = model.params.copy()
    if opts.lr == 0:
        return flat
    state = AdamState(lr=opts.lr)
    if opts.steps is None:
        order = rng.permutation(n)
        batches = [order[i : i + opts.batch_size] for i in range(0, n, opts.batch_size)]
    else:
        batches = [rng.choice(n, size=min(opts.batch_size, n), replace=False) for _ in range(opts.steps)]
    for idx in batches:
        loss, grad = loss_and_grad(model, flat, data.features[idx], data.targets[idx], task)
        if not np.isfinite(loss):
            raise NumericalError("non-finite local loss")
        flat = adam_step(state, flat, grad)
    return flat


# --- data ------------------------------------------------------------------


def _sample_counts(L, sample_range, rng):
    lo, hi = sample_range
    if lo < 1 or hi < lo:
        raise ValueError("sample_range must satisfy 1 <= low <= high")
    return rng.integers(lo, hi + 1, size=L)


def _with_size_weights(workers: list[WorkerDataset]) -> list[WorkerDataset]:
    k = np.array([w.num_samples for w in workers], dtype=np.float64)
    return [replace(w, weight=float(ki / k.sum())) for w, ki in zip(workers, k)]


def make_regression_task(
    L: int = 8, sample_range=(20, 200), feature_dim: int = 8, seed: int = 0, test_size: int = 100, noise: float = 0.1
) -> Task:
    """Synthetic linear-plus-noise regression; k_i uniform over ``sample_range``."""
    rng = np.random.default_rng(seed)
    counts = _sample_counts(L, sample_range, rng)
    w_true = rng.standard_normal(feature_dim) / np.sqrt(feature_dim)
    b_true = rng.standard_normal()

    def draw(n):
        x = rng.standard_normal((n, feature_dim))
        return x, x @ w_true + b_true + noise * rng.standard_normal(n)

    workers = [WorkerDataset(*draw(int(k))) for k in counts]
    test_x, test_y = draw(test_size)
    return Task(_with_size_weights(workers), test_x, test_y, "regression")


def _blobs(n_per_class: np.ndarray, centers: np.ndarray, rng):
    xs, ys = [], []
    for c, n in enumerate(n_per_class):
        xs.append(centers[c] + rng.standard_normal((int(n), centers.shape[1])))
        ys.append(np.full(int(n), c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def make_classification_task(
    L: int = 8,
    classes: int = 10,
    samples_per_worker_range=(20, 200),
    feature_dim: int = 64,
    seed: int = 0,
    test_size: int = 1000,
    separation: float = 1.0,
) -> Task:
    """Balanced Gaussian-blob classes with labels 0..classes-1."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    counts = _sample_counts(L, samples_per_worker_range, rng)
    centers = separation * rng.standard_normal((classes, feature_dim))

    def balanced(n):
        base = np.full(classes, n // classes)
        base[: n % classes] += 1
        return base

    workers = [WorkerDataset(*_blobs(balanced(int(k)), centers, rng)) for k in counts]
    test_x, test_y = _blobs(balanced(test_size), centers, rng)
    return Task(_with_size_weights(workers), test_x, test_y, "classification", classes)


def noise_weights(eta) -> np.ndarray:
    """Importance exp(2 - (eta_i - min eta)/30), normalized to sum to one."""
    eta = np.asarray(eta, dtype=np.float64)
    raw = np.exp(2.0 - (eta - eta.min()) / 30.0)
    return raw / raw.sum()


def apply_feature_noise(task: Task, eta, seed: int = 0, std_scale: float = 1.0) -> Task:
    """Gaussian feature noise of std ``eta_i * std_scale`` per worker; weights from ``noise_weights(eta)``."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (len(task.workers),) or np.any(eta < 0):
        raise ValueError("need one non-negative noise level per worker")
    rng = np.random.default_rng(seed)
    weights = noise_weights(eta)
    workers = [
        replace(w, features=w.features + rng.normal(0.0, e * std_scale, size=w.features.shape), weight=float(om), noise_level=float(e))
        for w, e, om in zip(task.workers, eta, weights)
    ]
    return replace(task, workers=workers)


def dirichlet_assign(labels, L: int, kappa: float, rng, max_retries: int = 100) -> list[np.ndarray]:
    """Split every sample index among L workers by per-class Dirichlet(kappa) shares."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    labels = np.asarray(labels)
    for _ in range(max_retries):
        pools = [[] for _ in range(L)]
        for d in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == d))
            share = rng.dirichlet(np.full(L, kappa))
            cuts = np.round(np.cumsum(share)[:-1] * len(idx)).astype(int)
            for i, part in enumerate(np.split(idx, cuts)):
                pools[i].extend(part.tolist())
        if all(pools):
            return [np.sort(np.array(p, dtype=np.int64)) for p in pools]
    raise ValueError(f"a worker received no samples after {max_retries} Dirichlet draws")


def partition_dirichlet(x, y, L: int, kappa: float, k_targets, seed: int = 0) -> list[WorkerDataset]:
    """Label-skewed worker datasets: Dirichlet pools, then k_i draws from each pool."""
    rng = np.random.default_rng(seed)
    pools = dirichlet_assign(y, L, kappa, rng)
    workers = []
    for pool, k in zip(pools, np.broadcast_to(k_targets, (L,))):
        pick = rng.choice(pool, size=min(int(k), len(pool)), replace=False)
        workers.append(WorkerDataset(x[pick], y[pick]))
    return _with_size_weights(workers)


# --- IDX ingestion ---------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Images (magic 0x803, 3 dims) or labels (magic 0x801, 1 dim), big-endian."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError("IDX file too short")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"bad IDX magic 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise ValueError("IDX payload size does not match its header")
    return body.reshape(dims)


def load_idx_dataset(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError("IDX images and labels do not match")
    return images.reshape(len(images), -1).astype(np.float64) / 255.0, labels.astype(np.int64)


# --- rounds ----------------------------------------------------------------


@dataclass
class RoundOutcome:
    power: np.ndarray
    per: np.ndarray
    success: np.ndarray
    local_params: list[np.ndarray]
    global_params: np.ndarray
    rollback: bool


def aggregate(local_params, counts, success, previous):
    """Sample-count weighted mean of the received models; previous model if none.

    Accumulates in worker order so results are reproducible bit for bit.
    """
    num, den = None, 0.0
    for w, k, s in zip(local_params, counts, success):
        if not s:
            continue
        term = float(k) * np.asarray(w, dtype=np.float64)
        num = term if num is None else num + term
        den += float(k)
    if den == 0:
        return np.array(previous, dtype=np.float64), True
    return num / den, False


def simulate_round(
    model: FlModel,
    task: Task,
    policy,
    H,
    consts: SystemConstants,
    rng: np.random.Generator,
    opts: LocalTrainOptions = LocalTrainOptions(),
    success=None,
    uniforms=None,
) -> tuple[RoundOutcome, FlModel]:
    """One global iteration.

    ``success`` forces the per-worker outcome (e.g. all ones for ideal FL);
    otherwise worker i arrives iff it transmits and ``uniforms[i] < PSR_i``.
    """
    locals_ = [local_train(model, w, opts, task.kind, rng) for w in task.workers]
    L = len(task.workers)
    if policy is None:
        p = np.full(L, consts.p_max)
    else:
        p = np.asarray(policy.allocate(H, consts, rng), dtype=np.float64)
    vals = compute_metrics(p, H, consts)
    if success is None:
        u = rng.random(L) if uniforms is None else np.asarray(uniforms)
        success = vals.active & (u < vals.psr)
    success = np.asarray(success, dtype=bool)
    counts = [w.num_samples for w in task.workers]
    new_params, rollback = aggregate(locals_, counts, success, model.params)
    outcome = RoundOutcome(p, vals.per, success, locals_, new_params, rollback)
    return outcome, model.with_params(new_params)


@dataclass
class FlConfig:
    task: str = "regression"
    num_workers: int = 8
    rounds: int = 50
    sample_range: tuple = (20, 200)
    feature_dim: int | None = None
    classes: int = 10
    lr: float | None = None
    batch_size: int | None = None
    local_steps: int | None = None
    noniid: str = "none"  # none | gaussian | dirichlet
    kappa: float = 1.0
    eta: tuple | None = None
    eta_scale: float = 1.0 / 64  # feature-noise std per unit of eta (eta lives on a 0-255 pixel scale)
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def local_options(self) -> LocalTrainOptions:
        if self.task == "regression":
            return LocalTrainOptions(self.lr or 8e-4, self.batch_size or 8, self.local_steps)
        return LocalTrainOptions(self.lr or 1e-3, self.batch_size or 16, self.local_steps or 5)


def build_task(cfg: FlConfig, seed: int) -> tuple[Task, FlModel]:
    L = cfg.num_workers
    if cfg.task == "regression":
        d = cfg.feature_dim or 8
        task = make_regression_task(L, cfg.sample_range, d, seed)
        model = FlModel("mlp", d, 1)
    elif cfg.task == "classification":
        d = cfg.feature_dim or 64
        task = make_classification_task(L, cfg.classes, cfg.sample_range, d, seed)
        model = FlModel("mlp", d, cfg.classes)
    else:
        raise ValueError(f"unknown task {cfg.task!r}")
    if cfg.noniid == "gaussian":
        eta = np.asarray(cfg.eta if cfg.eta is not None else np.linspace(0, 70, L), dtype=np.float64)
        task = apply_feature_noise(task, eta, seed + 1, std_scale=cfg.eta_scale)
    elif cfg.noniid == "dirichlet":
        if cfg.task != "classification":
            raise ValueError("dirichlet partitioning needs a classification task")
        x = np.concatenate([w.features for w in task.workers])
        y = np.concatenate([w.targets for w in task.workers])
        k = [w.num_samples for w in task.workers]
        task = replace(task, workers=partition_dirichlet(x, y, L, cfg.kappa, k, seed + 2))
    elif cfg.noniid != "none":
        raise ValueError(f"unknown non-iid mode {cfg.noniid!r}")
    return task, model.init(np.random.default_rng([seed, 7]))


@dataclass
class FlResult:
    metric: np.ndarray  # (seeds, rounds + 1)
    successes: np.ndarray  # (seeds, rounds)
    rollbacks: np.ndarray  # (seeds, rounds)

    def curve(self) -> dict:
        n = self.metric.shape[0]
        succ = np.concatenate([[np.nan], self.successes.mean(axis=0)]) if self.successes.size else np.array([np.nan])
        return {
            "metric_mean": self.metric.mean(axis=0),
            "metric_std": self.metric.std(axis=0, ddof=1) if n > 1 else np.zeros(self.metric.shape[1]),
            "succ_mean": succ,
        }


def run_single(cfg: FlConfig, policy, consts: SystemConstants, seed: int, ideal: bool = False):
    """One seed of one policy; channel, data, local training and success draws share seeds across policies."""
    task, model = build_task(cfg, seed)
    opts = cfg.local_options()
    consts = replace(consts, weights=task.weights) if consts.num_workers == cfg.num_workers else consts
    chan_rng = np.random.default_rng([seed, 1])
    succ_rng = np.random.default_rng([seed, 2])
    metric = [evaluate_model(model, task.test_x, task.test_y, task.kind)]
    scale = metric[0] if task.kind == "regression" and metric[0] > 0 else 1.0
    successes, rollbacks = [], []
    for n in range(cfg.rounds):
        H = sample_csi(cfg.channel, chan_rng)
        u = succ_rng.random(cfg.num_workers)
        train_rng = np.random.default_rng([seed, 3, n])
        pol_rng = np.random.default_rng([seed, 4, n])
        if ideal:
            outcome, model = _ideal_round(model, task, opts, train_rng)
        else:
            outcome, model = _policy_round(model, task, policy, H, consts, opts, train_rng, pol_rng, u)
        successes.append(int(outcome.success.sum()))
        rollbacks.append(outcome.rollback)
        metric.append(evaluate_model(model, task.test_x, task.test_y, task.kind))
    metric = np.array(metric)
    if task.kind == "regression":
        metric = metric / scale
    return metric, np.array(successes), np.array(rollbacks)


def _ideal_round(model, task, opts, train_rng):
    L = len(task.workers)
    locals_ = [local_train(model, w, opts, task.kind, train_rng) for w in task.workers]
    new, rb = aggregate(locals_, [w.num_samples for w in task.workers], np.ones(L, bool), model.params)
    return RoundOutcome(np.full(L, np.nan), np.zeros(L), np.ones(L, bool), locals_, new, rb), model.with_params(new)


def _policy_round(model, task, policy, H, consts, opts, train_rng, pol_rng, u):
    locals_ = [local_train(model, w, opts, task.kind, train_rng) for w in task.workers]
    p = np.asarray(policy.allocate(H, consts, pol_rng), dtype=np.float64)
    vals = compute_metrics(p, H, consts)
    success = vals.active & (u < vals.psr)
    new, rb = aggregate(locals_, [w.num_samples for w in task.workers], success, model.params)
    return RoundOutcome(p, vals.per, success, locals_, new, rb), model.with_params(new)


def run_fl(
    cfg: FlConfig, policies: dict, consts: SystemConstants, seeds, threads: int = 1, include_ideal: bool = True
) -> dict[str, FlResult]:
    """Curves for every named policy (plus ``"ideal"``) over the given seeds."""
    seeds = list(seeds)
    jobs = [(name, pol, False) for name, pol in policies.items()]
    if include_ideal:
        jobs.append(("ideal", None, True))
    work = [(name, pol, ideal, s) for name, pol, ideal in jobs for s in seeds]

    def run(item):
        name, pol, ideal, s = item
        return run_single(cfg, pol, consts, s, ideal)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, work))
    else:
        results = [run(w) for w in work]

    out = {}
    for j, (name, _, _) in enumerate(jobs):
        chunk = results[j * len(seeds) : (j + 1) * len(seeds)]
        if cfg.rounds:
            out[name] = FlResult(np.stack([c[0] for c in chunk]), np.stack([c[1] for c in chunk]), np.stack([c[2] for c in chunk]))
        else:
            out[name] = FlResult(np.stack([c[0] for c in chunk]), np.zeros((len(seeds), 0)), np.zeros((len(seeds), 0), bool))
    return out


def curves_csv(result: FlResult) -> str:
    c = result.curve()
    lines = ["round,metric_mean,metric_std,succ_mean"]
    for n in range(len(c["metric_mean"])):
        lines.append(f"{n},{float(c['metric_mean'][n])!r},{float(c['metric_std'][n])!r},{float(c['succ_mean'][n])!r}")
    return "\n".join(lines) + "\n"
