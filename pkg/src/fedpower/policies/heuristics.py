"""Model-based baselines: random powers, the orthogonal-channel rule, and worker selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..metrics import SystemConstants, energy_efficiency, rate

GRID_POINTS = 256
GRID_DECADES = 8
BISECTION_STEPS = 40


def baseline_select(p, H, consts: SystemConstants) -> np.ndarray:
    """Silence every worker whose instantaneous rate or EE misses its floor.

    One pass, judged against the allocation as given; silencing only removes
    interference, so the survivors' rates can only go up afterwards.
    """
    p = np.asarray(p, dtype=np.float64)
    r = rate(p, H, consts)
    ee = energy_efficiency(p, H, consts)
    bad = (r < consts.rate_floor) | (ee < consts.ee_floor)
    return np.where(bad, 0.0, p)


def rand_policy(H, consts: SystemConstants, rng: np.random.Generator) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    p = rng.uniform(0.0, consts.p_max, size=H.shape[:-1])
    ee = energy_efficiency(p, H, consts)
    return np.where(ee < consts.ee_floor, 0.0, p)


def _orth_ee(p, gain, consts: SystemConstants):
    return consts.bandwidth * np.log2(1.0 + gain * p) / (p + consts.static_power)


def orth_policy(H, consts: SystemConstants) -> np.ndarray:
    """min(P_max, largest interference-free power meeting the EE floor), else 0."""
    H = np.asarray(H, dtype=np.float64)
    gain = np.diagonal(H, axis1=-2, axis2=-1)
    e0 = np.broadcast_to(consts.ee_floor, gain.shape)
    grid = consts.p_max * np.logspace(-GRID_DECADES, 0, GRID_POINTS)
    ee = _orth_ee(grid, gain[..., None], consts)  # (..., L, G)
    feasible = ee >= e0[..., None]
    any_ok = feasible.any(axis=-1)
    last = GRID_POINTS - 1 - np.argmax(feasible[..., ::-1], axis=-1)

    lo = grid[last]
    hi = grid[np.minimum(last + 1, GRID_POINTS - 1)]
    refine = any_ok & (last < GRID_POINTS - 1)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        ok = _orth_ee(mid, gain, consts) >= e0
        lo = np.where(refine & ok, mid, lo)
        hi = np.where(refine & ~ok, mid, hi)
    p_e = np.where(last == GRID_POINTS - 1, consts.p_max, lo)
    return np.where(any_ok, np.minimum(consts.p_max, p_e), 0.0)


@dataclass
class RandPolicy:
    select: bool = True
    kind = "rand"

    def allocate(self, H, consts: SystemConstants, rng: np.random.Generator) -> np.ndarray:
        p = rand_policy(H, consts, rng)
        return baseline_select(p, H, consts) if self.select else p


@dataclass
class OrthPolicy:
    select: bool = True
    kind = "orth"

    def allocate(self, H, consts: SystemConstants, rng=None) -> np.ndarray:
        p = orth_policy(H, consts)
        return baseline_select(p, H, consts) if self.select else p
