import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpower.channel import ChannelConfig, make_channel_set, scale_interference
from fedpower.metrics import (
    SystemConstants,
    compute_metrics,
    energy_efficiency,
    energy_total,
    metric_grads_wrt_p,
    per,
    per_from_sinr,
    psr,
    rate,
    sinr,
    tx_time,
    weighted_psr,
)
from fedpower.numerics import finite_diff_grad


def consts(L=2, **kw):
    return SystemConstants(num_workers=L, **kw)


def test_sinr_examples():
    assert sinr([0.5], [[2.0]]) == pytest.approx([1.0])
    assert sinr([1, 1], [[1, 1], [1, 1]]) == pytest.approx([0.5, 0.5])
    assert sinr([1, 0.5], [[2, 0.5], [1, 4]]) == pytest.approx([1.6, 1.0])
    assert sinr([0.0, 1.0], [[1, 1], [1, 1]])[0] == 0.0


def test_rate_and_time_examples():
    H = np.array([[1.0]])
    assert rate([1.0], H, consts(1, bandwidth=1.0)) == pytest.approx([1.0])
    assert rate([3.0], H, consts(1, bandwidth=2.0)) == pytest.approx([4.0])
    assert rate([0.0], H, consts(1)) == [0.0]
    c = consts(1, bandwidth=2.0, payload_bits=10.0)
    assert tx_time([1.0], H, c) == pytest.approx([5.0])  # R = 2 log2(2) = 2
    assert tx_time([0.0], H, c)[0] == math.inf
    assert tx_time([1.0], H, replace(c, payload_bits=20.0)) == pytest.approx([10.0])


def test_energy_examples():
    H = np.array([[1.0]])
    # p=1, alpha=1 -> SINR 1 -> R = B; pick B = Z/5 so tau = 5
    c = consts(1, bandwidth=2.0, payload_bits=10.0, static_power=1.0, compute_energy=0.0)
    assert energy_total([1.0], H, c) == pytest.approx([10.0])
    assert energy_total([1.0], H, replace(c, compute_energy=0.1)) == pytest.approx([11.0])
    assert energy_total([0.0], H, replace(c, compute_energy=0.1)) == pytest.approx([1.0])


def test_per_examples():
    assert per_from_sinr(0.023, 0.023) == pytest.approx(1 - math.exp(-1))
    assert per([1.0, 1.0], np.eye(2), consts(waterfall=0.0)) == pytest.approx([0.0, 0.0])
    assert per_from_sinr(1e12, 0.023) < 1e-10
    assert per([0.0, 1.0], np.eye(2), consts())[0] == 1.0


def test_ee_and_weighted_psr_examples():
    c = consts(1, bandwidth=2.0, static_power=1.0)
    assert energy_efficiency([1.0], np.array([[1.0]]), c) == pytest.approx([1.0])
    assert energy_efficiency([0.0], np.array([[1.0]]), c) == [0.0]
    assert weighted_psr([0.8, 0.6], [0.5, 0.5]) == pytest.approx(0.7)
    assert weighted_psr([0.8, 0.6, 0.3], [0, 1, 0]) == pytest.approx(0.6)
    assert weighted_psr(np.ones(4), np.full(4, 0.25)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        weighted_psr([1.0], [0.5, 0.5])


def test_ee_eventually_decreasing():
    H = make_channel_set(20, ChannelConfig(num_workers=1), seed=0).matrices
    c = consts(1, p_max=10.0)
    grid = np.geomspace(1e-4, 1e3, 400)
    for h in H:
        ee = np.array([energy_efficiency([p], h, c)[0] for p in grid])
        peak = int(np.argmax(ee))
        assert peak < len(grid) - 1
        assert np.all(np.diff(ee[peak:]) <= 0)


def test_constants_validation():
    c = SystemConstants(num_workers=3)
    assert c.weights.tolist() == pytest.approx([1 / 3] * 3)
    assert SystemConstants.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        SystemConstants(bandwidth=0)
    with pytest.raises(ValueError):
        SystemConstants(num_workers=2, weights=[-1, 2])
    assert c.with_workers(5).rate_floor.shape == (5,)


channel_and_power = st.integers(2, 8).flatmap(
    lambda L: st.tuples(st.just(L), st.integers(0, 10**6), st.lists(st.floats(0, 0.01), min_size=L, max_size=L))
)


@settings(max_examples=100, deadline=None)
@given(channel_and_power)
def test_bundle_invariants(args):
    L, seed, p = args
    H = make_channel_set(1, ChannelConfig(num_workers=L), seed=seed).matrices[0]
    m = compute_metrics(np.array(p), H, consts(L))
    assert np.all((m.per >= 0) & (m.per <= 1))
    assert np.array_equal(m.psr, 1.0 - m.per)
    assert np.all(m.sinr >= 0) and np.all(m.rate >= 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_rate_non_increasing_in_interference_scale(L, seed):
    H = make_channel_set(1, ChannelConfig(num_workers=L), seed=seed).matrices[0]
    p = np.random.default_rng(seed).uniform(0.001, 0.01, L)
    c = consts(L)
    rates = [rate(p, scale_interference(H, f), c) for f in (0.5, 1, 2, 4, 8)]
    assert all(np.all(b <= a) for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_jacobians_match_finite_differences(seed):
    L = 4
    rng = np.random.default_rng(seed)
    H = make_channel_set(1, ChannelConfig(num_workers=L, pathloss_spread=10.0), seed=seed).matrices[0]
    c = consts(L)
    p = rng.uniform(0.002, 0.01, L)
    jac = metric_grads_wrt_p(p, H, c)
    for name, fn, J in (
        ("psr", lambda q: psr(q, H, c), jac.psr),
        ("rate", lambda q: rate(q, H, c), jac.rate),
        ("ee", lambda q: energy_efficiency(q, H, c), jac.ee),
    ):
        for i in range(L):
            fd = finite_diff_grad(lambda q: float(fn(q)[i]), p, h=1e-6 * 0.01, order=4)
            assert np.allclose(J[i], fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max()), name


def test_jacobian_signs_and_scalar_case():
    c = consts(1)
    a, p, m = 3.0, 0.004, c.waterfall
    s = a * p
    want = math.exp(-m / s) * m / s**2 * a
    assert metric_grads_wrt_p([p], [[a]], c).psr[0, 0] == pytest.approx(want, rel=1e-12)

    rng = np.random.default_rng(0)
    for seed in range(20):
        H = make_channel_set(1, ChannelConfig(num_workers=5), seed=seed).matrices[0]
        p = rng.uniform(0.001, 0.01, 5)
        J = metric_grads_wrt_p(p, H, consts(5))
        off = ~np.eye(5, dtype=bool)
        assert np.all(J.rate[off] < 0)
        assert np.all(np.diag(J.psr) > 0)
        assert np.all(J.psr[off] <= 0)  # PER rises with others' power


def test_silent_workers_carry_no_gradient():
    H = make_channel_set(1, ChannelConfig(num_workers=3), seed=1).matrices[0]
    J = metric_grads_wrt_p(np.array([0.0, 0.005, 0.01]), H, consts(3))
    for M in (J.psr, J.rate, J.ee):
        assert np.all(M[0] == 0) and np.all(M[:, 0] == 0)
