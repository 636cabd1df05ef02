"""Fully-connected power policy (PDM); locked to the worker count it was built for."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import LEAKY_SLOPE, POWER_CLAMP, GradTape, NumericalError, StaleTapeError
from .gcn import ForwardRecord, glorot_uniform

HIDDEN_WIDTHS = (128, 256, 64, 16, 8)


class DimensionError(ValueError):
    pass


def mlp_widths(num_workers: int, hidden=HIDDEN_WIDTHS) -> list[int]:
    return [num_workers * num_workers + 1, *hidden, num_workers]


@dataclass
class MlpPolicy:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    p_max: float
    clamp: float = POWER_CLAMP
    slope: float = LEAKY_SLOPE
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    seed: int | None = None
    version: int = field(default=0, compare=False)

    kind = "pdm"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        n_in = self.weights[0].shape[0]
        L = self.weights[-1].shape[1]
        if n_in != L * L + 1:
            raise DimensionError(f"input width {n_in} is not L^2 + 1 for L = {L}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise DimensionError("bias does not match its weight matrix")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise DimensionError(f"inconsistent layer shapes {a.shape} -> {b.shape}")
        if self.input_mean is None:
            self.input_mean = np.zeros(n_in)
        if self.input_std is None:
            self.input_std = np.ones(n_in)
        self.input_mean = np.asarray(self.input_mean, dtype=np.float64)
        self.input_std = np.asarray(self.input_std, dtype=np.float64)

    @classmethod
    def init(cls, num_workers: int, p_max: float, seed: int = 0, hidden=HIDDEN_WIDTHS, **kw) -> "MlpPolicy":
        rng = np.random.default_rng(seed)
        widths = mlp_widths(num_workers, hidden)
        weights = [glorot_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(b) for b in widths[1:]]
        return cls(weights, biases, p_max, seed=seed, **kw)

    @property
    def num_workers(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        return [x for pair in zip(self.weights, self.biases) for x in pair]

    def set_params(self, params: list[np.ndarray]) -> None:
        if [p.shape for p in params] != [p.shape for p in self.params]:
            raise ValueError("parameter shapes do not match the architecture")
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]
        self.version += 1

    def features(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=np.float64)
        L = H.shape[-1]
        if L != self.num_workers:
            raise DimensionError(f"policy was built for {self.num_workers} workers, got {L}")
        flat = H.reshape(H.shape[:-2] + (L * L,))
        pmax = np.full(flat.shape[:-1] + (1,), self.p_max)
        return np.concatenate([flat, pmax], axis=-1)

    def fit_input_scaling(self, H_train) -> None:
        """Standardize inputs with statistics of a training set of channels."""
        x = self.features(H_train).reshape(-1, self.widths[0])
        std = x.std(axis=0)
        self.input_mean = x.mean(axis=0)
        self.input_std = np.where(std > 0, std, 1.0)

    def allocate(self, H, consts=None, rng=None) -> np.ndarray:
        p, _ = mlp_forward(self, H, record=False)
        return p

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.p_max, self.clamp,
            self.slope, self.input_mean.copy(), self.input_std.copy(), self.seed,
        )


def mlp_forward(policy: MlpPolicy, H, record: bool = False):
    x = (policy.features(H) - policy.input_mean) / policy.input_std
    tape = GradTape()
    z = tape.constant(x)
    n = len(policy.weights)
    for k, (w, b) in enumerate(zip(policy.weights, policy.biases), start=1):
        pre = tape.add(tape.matmul(z, tape.parameter(f"w{k}", w)), tape.parameter(f"b{k}", b))
        if k < n:
            z = tape.map(pre, "leaky_relu", slope=policy.slope)
        else:
            z = tape.map(pre, "scaled_sigmoid", p_max=policy.p_max)
        if not np.all(np.isfinite(z.value)):
            raise NumericalError(f"non-finite activations in MLP layer {k}")
    out = tape.map(z, "clamp", threshold=policy.clamp)
    rec = ForwardRecord(tape, out, policy.version, id(policy)) if record else None
    return out.value, rec


def mlp_backward(policy: MlpPolicy, rec: ForwardRecord, upstream) -> list[np.ndarray]:
    if rec.owner != id(policy) or rec.version != policy.version:
        raise StaleTapeError("tape was recorded against different parameters")
    grads = rec.tape.backward(rec.output, np.asarray(upstream, dtype=np.float64))
    out = []
    for k in range(1, len(policy.weights) + 1):
        out += [grads[f"w{k}"], grads[f"b{k}"]]
    return out
