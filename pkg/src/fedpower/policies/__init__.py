"""Power allocation policies: learned (PDG, PDM) and heuristic (Rand, Orth)."""

from .gcn import DEFAULT_WIDTHS, ForwardRecord, GcnPolicy, gcn_backward, gcn_forward
from .heuristics import OrthPolicy, RandPolicy, baseline_select, orth_policy, rand_policy
from .io import PolicyFormatError, load_policy, make_policy, policy_from_dict, policy_to_dict, save_policy
from .mlp import DimensionError, MlpPolicy, mlp_backward, mlp_forward


def policy_forward(policy, H, record: bool = False):
    """Forward pass of a learned policy from raw CSI."""
    if isinstance(policy, GcnPolicy):
        from ..channel import normalize_adjacency

        return gcn_forward(policy, normalize_adjacency(H), record)
    return mlp_forward(policy, H, record)


def policy_backward(policy, rec, upstream):
    if isinstance(policy, GcnPolicy):
        return gcn_backward(policy, rec, upstream)
    return mlp_backward(policy, rec, upstream)


__all__ = [
    "DEFAULT_WIDTHS", "DimensionError", "ForwardRecord", "GcnPolicy", "MlpPolicy", "OrthPolicy",
    "PolicyFormatError", "RandPolicy", "baseline_select", "gcn_backward", "gcn_forward", "load_policy",
    "make_policy", "mlp_backward", "mlp_forward", "orth_policy", "policy_backward", "policy_forward",
    "policy_from_dict", "policy_to_dict", "rand_policy", "save_policy",
]
