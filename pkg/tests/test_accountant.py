import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feta.accountant import (DEFAULT_ORDERS, AlphaGrid, RdpLedger, SgmSpec, budget_ratios, calibrate_sigma_d,
                             compose, format_ledger_table, ledger_for, sgm_rdp, sgm_rdp_step, to_dp)
from feta.errors import InfeasibleBudgetError
from oracles import renyi_quadrature


def test_default_grid():
    assert DEFAULT_ORDERS[:2] == (2.0, 3.0)
    assert DEFAULT_ORDERS[-3:] == (64.0, 128.0, 256.0)
    assert len(AlphaGrid()) == 65


def test_grid_validation():
    with pytest.raises(ValueError):
        AlphaGrid((1.0, 2.0))
    with pytest.raises(ValueError):
        AlphaGrid((3.0, 2.0))


def test_zero_rate_costs_nothing():
    assert sgm_rdp_step(0.0, 5.0, 8) == 0.0


def test_full_rate_is_gaussian():
    assert sgm_rdp_step(1.0, 1.0, 2) == 1.0


def test_reference_point_matches_quadrature():
    assert abs(sgm_rdp_step(0.01, 2.0, 16) - renyi_quadrature(0.01, 2.0, 16)) < 1e-6


@pytest.mark.parametrize("args", [(-0.1, 1.0, 2), (1.1, 1.0, 2), (0.5, 0.0, 2), (0.5, -1.0, 2),
                                  (0.5, float("inf"), 2), (0.5, 1.0, 1), (0.5, 1.0, 2.5)])
def test_step_rejects_bad_inputs(args):
    with pytest.raises(ValueError):
        sgm_rdp_step(*args)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.001, 0.999), st.floats(0.5, 50), st.integers(2, 64))
def test_monotone_in_sigma_and_below_gaussian(q, sigma, alpha):
    g = sgm_rdp_step(q, sigma, alpha)
    assert g < sgm_rdp_step(q, sigma * 0.9, alpha) or g == 0.0
    assert g < alpha / (2 * sigma ** 2)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.99), st.floats(0.5, 50), st.integers(2, 64))
def test_monotone_in_q(q, sigma, alpha):
    assert sgm_rdp_step(q, sigma, alpha) <= sgm_rdp_step(min(1.0, q + 0.01), sigma, alpha) + 1e-15


def test_compose_is_linear():
    a = SgmSpec(0.1, 3.0, 7)
    twice = compose(compose(RdpLedger(), a), a)
    once = compose(RdpLedger(), SgmSpec(0.1, 3.0, 14))
    assert np.allclose(twice.gamma, once.gamma, rtol=1e-12, atol=0)


def test_compose_zero_steps_keeps_gamma():
    base = ledger_for([SgmSpec(0.2, 2.0, 3)])
    assert compose(base, SgmSpec(0.5, 1.0, 0)).gamma == base.gamma


def test_three_stage_ledger_is_sum_of_parts():
    parts = [SgmSpec(0.11, 20.0, 50, "spatial"), SgmSpec(1.0, 26.0, 1, "frequency"),
             SgmSpec(0.074, 16.0, 2027, "dpsgd")]
    total = ledger_for(parts).gamma_array()
    independent = sum(ledger_for([p]).gamma_array() for p in parts)
    assert np.max(np.abs(total - independent) / independent) < 1e-12


def test_compose_never_decreases_gamma():
    led = RdpLedger()
    for s in [SgmSpec(0.3, 1.5, 2), SgmSpec(0.0, 1.0, 5), SgmSpec(1.0, 9.0, 1)]:
        nxt = compose(led, s)
        assert np.all(nxt.gamma_array() >= led.gamma_array())
        led = nxt


def test_to_dp_single_order_formula():
    led = RdpLedger(AlphaGrid((2.0,)), (1.0,))
    eps, alpha = to_dp(led, math.exp(-1))
    assert eps == 2.0 and alpha == 2.0


def test_to_dp_zero_gamma_uses_largest_order():
    eps, alpha = to_dp(RdpLedger(), 1e-5)
    assert alpha == 256.0
    assert eps == math.log(1e5) / 255.0


def test_to_dp_gaussian_matches_dense_scan():
    led = ledger_for([SgmSpec(1.0, 1.0, 1)])
    eps, _ = to_dp(led, 1e-5)
    orders = np.array(DEFAULT_ORDERS)
    assert eps == pytest.approx(np.min(orders / 2 + math.log(1e5) / (orders - 1)), abs=1e-12)
    dense = np.linspace(1.01, 300, 300000)
    assert eps >= np.min(dense / 2 + math.log(1e5) / (dense - 1)) - 1e-12


def test_to_dp_validates_delta():
    for d in (0.0, 1.0, 2.0):
        with pytest.raises(ValueError):
            to_dp(RdpLedger(), d)


def test_to_dp_monotone():
    led = ledger_for([SgmSpec(0.05, 1.2, 100)])
    assert to_dp(led, 1e-6)[0] >= to_dp(led, 1e-5)[0]
    assert to_dp(compose(led, SgmSpec(0.05, 1.2, 1)), 1e-5)[0] >= to_dp(led, 1e-5)[0]


def test_calibration_round_trip():
    for sigma in (0.8, 3.0, 11.0, 57.0):
        target = to_dp(ledger_for([SgmSpec(1.0, sigma, 1)]), 1e-5)[0]
        found = calibrate_sigma_d(target, 1e-5, [], 1.0, 1)
        assert abs(found / sigma - 1) < 1e-3


def test_calibration_infeasible():
    with pytest.raises(InfeasibleBudgetError):
        calibrate_sigma_d(0.5, 1e-5, [SgmSpec(1.0, 1.0, 1)], 0.1, 10)


def test_calibration_published_setting_recomposes_within_target():
    fixed = [SgmSpec(0.11, 20.0, 50), SgmSpec(1.0, 26.6, 1)]
    sigma_d = calibrate_sigma_d(1.0, 1e-5, fixed, 0.074, 2027)
    eps = to_dp(ledger_for(fixed + [SgmSpec(0.074, sigma_d, 2027)]), 1e-5)[0]
    assert 0.99 <= eps <= 1.0


def test_budget_ratios_examples():
    one = budget_ratios({"a": SgmSpec(0.1, 2.0, 5)}, 1e-5)
    assert one["shares"] == {"a": 1.0}
    two = budget_ratios({"a": SgmSpec(0.1, 2.0, 5), "b": SgmSpec(0.1, 2.0, 5)}, 1e-5)
    assert two["shares"]["a"] == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.6, 40), st.integers(1, 200)), min_size=1, max_size=4))
def test_budget_shares_sum_to_one(raw):
    specs = {f"m{i}": SgmSpec(q, s, n) for i, (q, s, n) in enumerate(raw)}
    shares = budget_ratios(specs, 1e-5)["shares"]
    assert abs(math.fsum(shares.values()) - 1.0) <= 1e-12


def test_ledger_dict_round_trip_and_table():
    led = ledger_for([SgmSpec(0.2, 3.0, 4, "spatial"), SgmSpec(1.0, 10.0, 1, "frequency")])
    back = RdpLedger.from_dict(led.to_dict(1e-5))
    assert back.gamma == led.gamma and back.entries == led.entries
    table = format_ledger_table(led, 1e-5, {"spatial": 0.5, "frequency": 0.5})
    assert table.count("\n") >= len(DEFAULT_ORDERS)
    assert "*" in table and "epsilon" in table


def test_stage_gamma_partitions_total():
    led = ledger_for([SgmSpec(0.2, 3.0, 4, "x"), SgmSpec(1.0, 10.0, 1, "y"), SgmSpec(0.2, 3.0, 1, "x")])
    assert np.allclose(led.stage_gamma("x") + led.stage_gamma("y"), led.gamma_array(), rtol=1e-13)
    assert np.allclose(sgm_rdp(0.2, 3.0, 5), led.stage_gamma("x"), rtol=1e-13)
