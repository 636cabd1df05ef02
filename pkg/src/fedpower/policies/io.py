"""JSON serialization for trainable policies."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gcn import GcnPolicy
from .heuristics import OrthPolicy, RandPolicy
from .mlp import DimensionError, MlpPolicy


class PolicyFormatError(ValueError):
    pass


def policy_to_dict(policy) -> dict:
    if isinstance(policy, GcnPolicy):
        arch = {"widths": policy.widths, "hidden_activation": policy.hidden_activation}
    elif isinstance(policy, MlpPolicy):
        arch = {
            "widths": policy.widths,
            "slope": policy.slope,
            "input_mean": policy.input_mean.tolist(),
            "input_std": policy.input_std.tolist(),
        }
    else:
        raise TypeError(f"cannot serialize {type(policy).__name__}")
    flat = np.concatenate([p.reshape(-1) for p in policy.params])
    return {
        "kind": policy.kind,
        "architecture": arch,
        "seed": policy.seed,
        "p_max": policy.p_max,
        "clamp": policy.clamp,
        "params": flat.tolist(),
    }


def _split_flat(flat: np.ndarray, shapes: list[tuple]) -> list[np.ndarray]:
    need = sum(int(np.prod(s)) for s in shapes)
    if flat.size != need:
        raise PolicyFormatError(f"expected {need} parameters, file has {flat.size}")
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[i : i + n].reshape(s))
        i += n
    return out


def policy_from_dict(doc: dict):
    kind = doc.get("kind")
    arch = doc.get("architecture", {})
    flat = np.asarray(doc.get("params", []), dtype=np.float64)
    widths = [int(w) for w in arch.get("widths", [])]
    if len(widths) < 2:
        raise PolicyFormatError("architecture needs at least two widths")
    if kind == "pdg":
        if widths[0] != 1 or widths[-1] != 1:
            raise PolicyFormatError("GCN widths must start and end with 1")
        thetas = _split_flat(flat, list(zip(widths[:-1], widths[1:])))
        return GcnPolicy(thetas, float(doc["p_max"]), float(doc["clamp"]), arch.get("hidden_activation", "elu"), doc.get("seed"))
    if kind == "pdm":
        shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            shapes += [(a, b), (b,)]
        parts = _split_flat(flat, shapes)
        try:
            return MlpPolicy(
                parts[0::2], parts[1::2], float(doc["p_max"]), float(doc["clamp"]), float(arch["slope"]),
                np.asarray(arch["input_mean"]), np.asarray(arch["input_std"]), doc.get("seed"),
            )
        except DimensionError as exc:
            raise PolicyFormatError(str(exc)) from exc
    raise PolicyFormatError(f"unknown policy kind {kind!r}")


def save_policy(policy, path, **extra) -> None:
    doc = policy_to_dict(policy)
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_policy(path):
    return policy_from_dict(json.loads(Path(path).read_text()))


def make_policy(spec: str, path_ok: bool = True):
    """Resolve 'rand', 'orth' or a path to a saved learned policy."""
    if spec == "rand":
        return RandPolicy()
    if spec == "orth":
        return OrthPolicy()
    if path_ok:
        return load_policy(spec)
    raise ValueError(f"unknown policy {spec!r}")
