"""Per-link physical-layer quantities and their derivatives in the power vector.

Every function accepts a power array ``p`` of shape (..., L) and a CSI array
``H`` of shape (..., L, L); leading axes index channel instances.
Workers whose power sits below the clamp threshold are silent: they see
SINR 0, rate 0, PER 1 and an infinite transmission time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import POWER_CLAMP

LN2 = np.log(2.0)


@dataclass(frozen=True)
class SystemConstants:
    num_workers: int = 8
    bandwidth: float = 1e6  # Hz
    waterfall: float = 0.023
    payload_bits: float = 3.2e5
    static_power: float = 0.05  # W
    compute_energy: float = 1e-9  # J/bit
    p_max: float = 0.01  # W
    rate_floor: np.ndarray | None = field(default=None, compare=False)  # bits/s
    ee_floor: np.ndarray | None = field(default=None, compare=False)  # bits/J
    weights: np.ndarray | None = field(default=None, compare=False)
    clamp: float = POWER_CLAMP

    def __post_init__(self):
        L = self.num_workers
        for name, default in (("rate_floor", 0.0), ("ee_floor", 0.0), ("weights", 1.0 / L)):
            val = getattr(self, name)
            arr = np.full(L, default) if val is None else np.broadcast_to(np.asarray(val, dtype=np.float64), (L,)).copy()
            object.__setattr__(self, name, arr)
        if min(self.bandwidth, self.payload_bits, self.static_power, self.p_max) <= 0 or self.waterfall < 0:
            raise ValueError("physical constants must be positive")
        if self.compute_energy < 0 or np.any(self.weights < 0):
            raise ValueError("compute energy and weights must be non-negative")

    def with_workers(self, L: int) -> "SystemConstants":
        """Same scalars for a network of ``L`` workers (floors broadcast from the mean)."""
        if L == self.num_workers:
            return self
        return replace(
            self,
            num_workers=L,
            rate_floor=np.full(L, float(np.mean(self.rate_floor))),
            ee_floor=np.full(L, float(np.mean(self.ee_floor))),
            weights=None,
        )

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("rate_floor", "ee_floor", "weights"):
            d[k] = d[k].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConstants":
        return cls(**d)


@dataclass
class MetricsBundle:
    sinr: np.ndarray
    rate: np.ndarray
    tx_time: np.ndarray
    per: np.ndarray
    psr: np.ndarray
    energy_efficiency: np.ndarray
    energy_total: np.ndarray
    active: np.ndarray


def _active(p, clamp):
    return np.asarray(p) > clamp


def sinr(p, H, clamp: float = POWER_CLAMP) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    active = _active(p, clamp)
    p = np.where(active, p, 0.0)
    gain = np.diagonal(H, axis1=-2, axis2=-1)
    received = np.einsum("...ij,...j->...i", H, p)
    interference = received - gain * p
    return np.where(active, gain * p / (1.0 + interference), 0.0)


def rate(p, H, consts: SystemConstants) -> np.ndarray:
    return consts.bandwidth * np.log2(1.0 + sinr(p, H, consts.clamp))


def tx_time(p, H, consts: SystemConstants) -> np.ndarray:
    r = rate(p, H, consts)
    with np.errstate(divide="ignore"):
        return np.where(r > 0, consts.payload_bits / np.where(r > 0, r, 1.0), np.inf)


def energy_total(p, H, consts: SystemConstants) -> np.ndarray:
    """Compute plus transmit energy; silent workers report the compute term only."""
    p = np.asarray(p, dtype=np.float64)
    tau = tx_time(p, H, consts)
    active = _active(p, consts.clamp) & np.isfinite(tau)
    compute = consts.compute_energy * consts.payload_bits
    return np.where(active, compute + (p + consts.static_power) * np.where(active, tau, 0.0), compute)


def per_from_sinr(s, m: float) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, -np.expm1(-m / np.where(s > 0, s, 1.0)), 1.0)


def per(p, H, consts: SystemConstants) -> np.ndarray:
    return per_from_sinr(sinr(p, H, consts.clamp), consts.waterfall)


def psr(p, H, consts: SystemConstants) -> np.ndarray:
    return 1.0 - per(p, H, consts)


def energy_efficiency(p, H, consts: SystemConstants) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    active = _active(p, consts.clamp)
    return np.where(active, rate(p, H, consts) / (p + consts.static_power), 0.0)


def weighted_psr(psr_values, weights) -> np.ndarray:
    psr_values = np.asarray(psr_values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if psr_values.shape[-1] != weights.shape[-1]:
        raise ValueError("weights and PSR lengths differ")
    return psr_values @ weights


def compute_metrics(p, H, consts: SystemConstants) -> MetricsBundle:
    s = sinr(p, H, consts.clamp)
    r = consts.bandwidth * np.log2(1.0 + s)
    pe = per_from_sinr(s, consts.waterfall)
    return MetricsBundle(
        sinr=s,
        rate=r,
        tx_time=tx_time(p, H, consts),
        per=pe,
        psr=1.0 - pe,
        energy_efficiency=energy_efficiency(p, H, consts),
        energy_total=energy_total(p, H, consts),
        active=_active(p, consts.clamp),
    )


@dataclass
class MetricJacobians:
    """``d_x[..., i, j]`` is the derivative of metric x of worker i in p_j."""

    psr: np.ndarray
    rate: np.ndarray
    ee: np.ndarray
    values: MetricsBundle


def metric_grads_wrt_p(p, H, consts: SystemConstants) -> MetricJacobians:
    p = np.asarray(p, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    L = p.shape[-1]
    vals = compute_metrics(p, H, consts)
    active = vals.active
    pa = np.where(active, p, 0.0)
    gain = np.diagonal(H, axis1=-2, axis2=-1)
    denom = 1.0 + np.einsum("...ij,...j->...i", H, pa) - gain * pa
    s = vals.sinr

    # dSINR_i/dp_j: own term alpha_i / D_i, cross terms -SINR_i beta_ij / D_i
    eye = np.eye(L, dtype=bool)
    off = np.where(eye, 0.0, H)
    d_sinr = -(s / denom)[..., :, None] * off
    idx = np.arange(L)
    d_sinr[..., idx, idx] = gain / denom
    # silent workers neither receive nor (through the clamp) carry gradient
    row_mask = active[..., :, None] & active[..., None, :]
    d_sinr = np.where(row_mask, d_sinr, 0.0)

    m = consts.waterfall
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        safe_s = np.where(s > 0, s, 1.0)
        if m > 0:
            # PSR * m / SINR^2, evaluated in log space to survive underflow
            dpsr_ds = np.where(s > 0, np.exp(np.log(m) - m / safe_s - 2.0 * np.log(safe_s)), 0.0)
        else:
            dpsr_ds = np.zeros_like(s)
    drate_ds = consts.bandwidth / ((1.0 + s) * LN2)

    j_psr = dpsr_ds[..., :, None] * d_sinr
    j_rate = drate_ds[..., :, None] * d_sinr
    denom_ee = pa + consts.static_power
    j_ee = j_rate / denom_ee[..., :, None]
    j_ee[..., idx, idx] -= np.where(active, vals.rate / denom_ee**2, 0.0)
    return MetricJacobians(j_psr, j_rate, j_ee, vals)
