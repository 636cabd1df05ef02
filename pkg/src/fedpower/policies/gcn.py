"""Graph-convolutional power policy (PDG)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..channel import normalize_adjacency
from ..numerics import POWER_CLAMP, GradTape, NumericalError, StaleTapeError, Var

DEFAULT_WIDTHS = (1, 64, 32, 16, 1)


@dataclass
class ForwardRecord:
    """Tape of one recorded forward pass, tied to the parameter version it saw."""

    tape: GradTape
    output: Var
    version: int
    owner: int


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class GcnPolicy:
    thetas: list[np.ndarray]
    p_max: float
    clamp: float = POWER_CLAMP
    hidden_activation: str = "elu"
    seed: int | None = None
    version: int = field(default=0, compare=False)

    kind = "pdg"

    def __post_init__(self):
        self.thetas = [np.asarray(t, dtype=np.float64) for t in self.thetas]
        widths = self.widths
        if widths[0] != 1 or widths[-1] != 1:
            raise ValueError("GCN input and output widths must both be 1")
        for a, b in zip(self.thetas, self.thetas[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"inconsistent layer shapes {a.shape} -> {b.shape}")

    @classmethod
    def init(cls, p_max: float, widths=DEFAULT_WIDTHS, seed: int = 0, **kw) -> "GcnPolicy":
        rng = np.random.default_rng(seed)
        thetas = [glorot_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        return cls(thetas, p_max, seed=seed, **kw)

    @property
    def widths(self) -> list[int]:
        return [self.thetas[0].shape[0]] + [t.shape[1] for t in self.thetas]

    @property
    def params(self) -> list[np.ndarray]:
        return self.thetas

    def set_params(self, params: list[np.ndarray]) -> None:
        if [p.shape for p in params] != [t.shape for t in self.thetas]:
            raise ValueError("parameter shapes do not match the architecture")
        self.thetas = [np.array(p, dtype=np.float64) for p in params]
        self.version += 1

    def forward(self, Hhat, record: bool = False):
        return gcn_forward(self, Hhat, record)

    def allocate(self, H, consts=None, rng=None) -> np.ndarray:
        p, _ = gcn_forward(self, normalize_adjacency(H), record=False)
        return p

    def copy(self) -> "GcnPolicy":
        return GcnPolicy([t.copy() for t in self.thetas], self.p_max, self.clamp, self.hidden_activation, self.seed)


def gcn_forward(policy: GcnPolicy, Hhat, record: bool = False):
    """Run the layer rule Z_t = act(Hhat Z_{t-1} Theta_t) from Z_0 = P_max * 1.

    ``Hhat`` may carry leading batch axes.  Returns ``(p, record)`` where
    ``record`` is None unless ``record`` was requested.
    """
    Hhat = np.asarray(Hhat, dtype=np.float64)
    if Hhat.ndim < 2 or Hhat.shape[-1] != Hhat.shape[-2]:
        raise ValueError(f"normalized adjacency must be square, got {Hhat.shape}")
    tape = GradTape()
    adj = tape.constant(Hhat)
    z = tape.constant(np.full(Hhat.shape[:-1] + (1,), policy.p_max))
    T = len(policy.thetas)
    for t, theta in enumerate(policy.thetas, start=1):
        w = tape.parameter(f"theta{t}", theta)
        pre = tape.matmul(tape.matmul(adj, z), w)
        if t < T:
            z = tape.map(pre, policy.hidden_activation)
        else:
            z = tape.map(pre, "scaled_sigmoid", p_max=policy.p_max)
        if not np.all(np.isfinite(z.value)):
            raise NumericalError(f"non-finite activations in GCN layer {t}")
    out = tape.map(z, "clamp", threshold=policy.clamp)
    p = out.value[..., 0]
    rec = ForwardRecord(tape, out, policy.version, id(policy)) if record else None
    return p, rec


def gcn_backward(policy: GcnPolicy, rec: ForwardRecord, upstream) -> list[np.ndarray]:
    """Parameter gradients of ``sum(upstream * p)`` for the recorded pass."""
    if rec.owner != id(policy) or rec.version != policy.version:
        raise StaleTapeError("tape was recorded against different parameters")
    upstream = np.asarray(upstream, dtype=np.float64)[..., None]
    grads = rec.tape.backward(rec.output, upstream)
    return [grads[f"theta{t}"] for t in range(1, len(policy.thetas) + 1)]
