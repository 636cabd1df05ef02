"""Rayleigh-fading uplink channels, CSI matrices and their perturbations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "validation", "test")
CSI_FLOOR = 1e-12


class DegenerateChannelError(ValueError):
    pass


@dataclass(frozen=True)
class RawChannel:
    """Per-worker complex channel vectors ``h`` (shape L x n_R) and noise power."""

    h: np.ndarray
    noise_power: float = 1.0

    def __post_init__(self):
        if self.h.ndim != 2 or self.h.shape[0] < 1 or self.h.shape[1] < 1:
            raise ValueError("h must have shape (L, n_R) with L, n_R >= 1")
        if not self.noise_power > 0:
            raise ValueError("noise power must be positive")

    @property
    def num_workers(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class ChannelConfig:
    num_workers: int = 8
    num_antennas: int = 10
    pathloss_spread: float = 100.0
    noise_power: float = 0.01
    interference_scale: float = 1.0


def sample_raw(
    num_workers: int,
    num_antennas: int,
    pathloss_spread: float,
    noise_power: float,
    rng: np.random.Generator,
) -> RawChannel:
    if num_workers < 1 or num_antennas < 1:
        raise ValueError("need at least one worker and one antenna")
    if pathloss_spread < 1:
        raise ValueError("pathloss_spread must be >= 1")
    # log-uniform over [1/spread, 1]
    gain = np.exp(-rng.uniform(0.0, np.log(pathloss_spread), size=num_workers))
    v = (rng.standard_normal((num_workers, num_antennas)) + 1j * rng.standard_normal((num_workers, num_antennas))) / np.sqrt(2.0)
    return RawChannel(np.sqrt(gain)[:, None] * v, float(noise_power))


def build_csi(raw: RawChannel) -> np.ndarray:
    """Gains on the diagonal, interference coefficients off it."""
    h = raw.h
    norms = np.sum(np.abs(h) ** 2, axis=1)
    if np.any(norms == 0):
        raise DegenerateChannelError("a worker has an all-zero channel vector")
    gram = np.abs(h.conj() @ h.T) ** 2  # |h_i^H h_j|^2
    csi = gram / (raw.noise_power * norms[:, None])
    np.fill_diagonal(csi, norms / raw.noise_power)
    return csi


def check_csi(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim < 2 or H.shape[-1] != H.shape[-2]:
        raise ValueError(f"CSI must be square, got shape {H.shape}")
    if np.any(H < 0) or not np.all(np.isfinite(H)):
        raise ValueError("CSI entries must be finite and non-negative")
    if np.any(np.diagonal(H, axis1=-2, axis2=-1) <= 0):
        raise ValueError("CSI diagonal (channel gains) must be positive")
    return H


def normalize_adjacency(H) -> np.ndarray:
    """D^{-1/2} H D^{-1/2} with D the row-sum degree matrix; batches allowed."""
    H = np.asarray(H, dtype=np.float64)
    deg = H.sum(axis=-1)
    if np.any(deg <= 0):
        raise DegenerateChannelError("zero row sum in CSI matrix")
    s = 1.0 / np.sqrt(deg)
    return s[..., :, None] * H * s[..., None, :]


def _offdiag_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def scale_interference(H, factor: float) -> np.ndarray:
    if not factor > 0:
        raise ValueError("factor must be positive")
    H = np.asarray(H, dtype=np.float64)
    return np.where(_offdiag_mask(H.shape[-1]), H * factor, H)


def add_estimation_noise(H, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian estimate noise, floored so entries stay positive."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    H = np.asarray(H, dtype=np.float64)
    if variance == 0:
        return H.copy()
    noisy = H + rng.normal(0.0, np.sqrt(variance), size=H.shape)
    return np.maximum(noisy, CSI_FLOOR)


def sample_csi(config: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    raw = sample_raw(config.num_workers, config.num_antennas, config.pathloss_spread, config.noise_power, rng)
    H = build_csi(raw)
    if config.interference_scale != 1.0:
        H = scale_interference(H, config.interference_scale)
    return H


@dataclass
class ChannelSet:
    matrices: np.ndarray  # (count, L, L)
    splits: dict[str, np.ndarray]
    seed: int
    config: ChannelConfig = field(default_factory=ChannelConfig)

    @property
    def num_workers(self) -> int:
        return self.matrices.shape[-1]

    def split(self, name: str) -> np.ndarray:
        try:
            return self.matrices[self.splits[name]]
        except KeyError:
            raise KeyError(f"channel set has no split {name!r}") from None

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "L": self.num_workers,
            "n_R": self.config.num_antennas,
            "params": asdict(self.config),
            "splits": {k: v.tolist() for k, v in self.splits.items()},
            "matrices": [m.reshape(-1).tolist() for m in self.matrices],
        }
        return json.dumps(doc, indent=None, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChannelSet":
        doc = json.loads(text)
        L = int(doc["L"])
        mats = np.array(doc["matrices"], dtype=np.float64).reshape(-1, L, L)
        splits = {k: np.array(v, dtype=np.int64) for k, v in doc["splits"].items()}
        config = ChannelConfig(**doc["params"])
        if config.num_workers != L:
            raise ValueError("channel file L does not match its params")
        for idx in splits.values():
            if idx.size and (idx.min() < 0 or idx.max() >= len(mats)):
                raise ValueError("split index out of range")
        return cls(mats, splits, int(doc["seed"]), config)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ChannelSet":
        return cls.from_json(Path(path).read_text())


def make_channel_set(
    count: int,
    config: ChannelConfig = ChannelConfig(),
    seed: int = 0,
    split: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> ChannelSet:
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    mats = np.stack([sample_csi(config, rng) for _ in range(count)]) if count else np.zeros((0, config.num_workers, config.num_workers))
    n_train = int(round(split[0] * count))
    n_val = int(round(split[1] * count))
    n_train = min(n_train, count)
    n_val = min(n_val, count - n_train)
    bounds = [0, n_train, n_train + n_val, count]
    splits = {name: np.arange(bounds[i], bounds[i + 1]) for i, name in enumerate(SPLIT_NAMES)}
    return ChannelSet(mats, splits, seed, config)
