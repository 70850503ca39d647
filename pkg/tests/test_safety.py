import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetinfer.safety import (
    GuaranteeVoid,
    GuardrailPolicy,
    Health,
    HealthConfig,
    HealthState,
    InputRequest,
    Outcome,
    ThermalPolicy,
    check_output,
    check_resources,
    degraded_latency_bound,
    throttle_multiplier,
    validate_input,
)

POLICY = ThermalPolicy()


def test_throttle_boundaries():
    assert throttle_multiplier(POLICY, 85.0, 100.0) == 1.0
    assert throttle_multiplier(POLICY, 100.0, 100.0) == 0.0
    assert throttle_multiplier(POLICY, 92.5, 100.0) == 0.5


@given(st.floats(-50, 200), st.floats(-50, 200), st.floats(50, 150))
def test_throttle_bounded_and_nonincreasing(t1, t2, t_max):
    a, b = sorted((t1, t2))
    ma, mb = throttle_multiplier(POLICY, a, t_max), throttle_multiplier(POLICY, b, t_max)
    assert 0.0 <= mb <= ma <= 1.0


@given(st.floats(80, 105))
def test_throttle_continuous(t):
    h = 1e-9
    assert abs(throttle_multiplier(POLICY, t + h, 100.0) - throttle_multiplier(POLICY, t, 100.0)) <= 1e-7


def fresh():
    return HealthState(["a", "b"], HealthConfig(), now=0.0)


def test_timeout_over_ten_times_expected_fails():
    s = fresh()
    ev = s.observe("a", Outcome.timeout(10.1, 1.0), 0.5)
    assert ev is not None and ev.kind == "fail"
    assert s.status("a") is Health.FAILED


def test_timeout_at_exactly_ten_times_does_not_fail():
    s = fresh()
    assert s.observe("a", Outcome.timeout(10.0, 1.0), 0.5) is None


def _feed(s, errors, n=100):
    ev = None
    for k in range(n):
        out = Outcome.error() if k < errors else Outcome.ok()
        ev = s.observe("a", out, 0.001 * k) or ev
    return ev


def test_one_error_in_window_does_not_trip():
    s = fresh()
    assert _feed(s, 1) is None
    assert s.status("a") is Health.HEALTHY


def test_two_errors_in_window_trip():
    s = fresh()
    ev = _feed(s, 2)
    assert ev is not None and ev.payload["reason"] == "ErrorRate"


def test_error_rule_waits_for_full_window():
    s = fresh()
    _feed(s, 5, n=50)
    assert s.status("a") is Health.HEALTHY


def test_missed_heartbeats_fail():
    s = fresh()
    assert s.check_heartbeat("a", 3.0) is None
    ev = s.check_heartbeat("a", 3.01)
    assert ev is not None and ev.payload["reason"] == "Heartbeat"


def test_recovery_ramp():
    s = fresh()
    s.observe("a", Outcome.timeout(20, 1), 1.0)
    s.recover("a", 10.0)
    assert s.status("a") is Health.DEGRADED
    assert s["a"].reintro_capacity == 0.5
    s.advance(40.0)
    assert s["a"].reintro_capacity == pytest.approx(0.75)
    events = s.advance(70.0)
    assert s.status("a") is Health.HEALTHY and s["a"].reintro_capacity == 1.0
    assert [e.kind for e in events] == ["healthy"]


ACTIONS = st.lists(
    st.tuples(st.sampled_from(["ok", "error", "timeout", "recover", "advance", "beat"]), st.floats(0, 5)),
    max_size=60,
)


@given(ACTIONS)
def test_failed_never_jumps_to_healthy(actions):
    s = HealthState(["a"], HealthConfig(window=3, ramp_duration=2.0), now=0.0)
    now = 0.0
    prev = s.status("a")
    for kind, dt in actions:
        now += dt
        if kind == "ok":
            s.observe("a", Outcome.ok(), now)
        elif kind == "error":
            s.observe("a", Outcome.error(), now)
        elif kind == "timeout":
            s.observe("a", Outcome.timeout(100.0, 1.0), now)
        elif kind == "recover":
            s.recover("a", now)
        elif kind == "advance":
            s.advance(now)
        else:
            s.check_heartbeat("a", now)
        cur = s.status("a")
        assert not (prev is Health.FAILED and cur is Health.HEALTHY)
        prev = cur


def test_degraded_bound_examples():
    assert degraded_latency_bound(2.0, 4, 4) == 2.0
    assert degraded_latency_bound(2e-3, 4, 1) == pytest.approx(8e-3)
    assert degraded_latency_bound(1.34e-3, 4, 2) == pytest.approx(2.68e-3)
    with pytest.raises(GuaranteeVoid):
        degraded_latency_bound(1.0, 4, 0)


G = GuardrailPolicy()


def test_oversize_input_rejected():
    v = validate_input(G, InputRequest(b"x" * (4 * 10 * G.max_seq_len)))
    assert not v and v.reason == "Oversize"


def test_bad_utf8_rejected():
    v = validate_input(G, InputRequest(b"ok \xc3\x28 bad"))
    assert not v and v.reason == "Encoding"


def test_empty_input_accepted():
    assert validate_input(G, InputRequest(b""))


def test_rate_limit():
    burst = [0.001 * k for k in range(150)]
    v = validate_input(G, InputRequest(b"x" * 4000, arrivals=burst))
    assert not v and v.reason == "RateLimit"


@given(st.binary(max_size=200))
def test_validate_input_deterministic(data):
    assert validate_input(G, InputRequest(data)) == validate_input(G, InputRequest(data))


def test_output_length_cap():
    v = check_output(G, list(range(200)), 100)
    assert not v and v.reason == "LengthCap"


def test_output_repetition():
    toks = [7] * 91 + list(range(100, 109))
    v = check_output(G, toks, 1000)
    assert not v and v.reason == "Repetition"


def test_output_distinct_continues():
    assert check_output(G, list(range(150)), 1000)


def test_resource_budgets():
    assert check_resources(G, 1.6, 1.0, 0.0, 1.0).reason == "MemoryBudget"
    assert check_resources(G, 1.0, 1.0, 5.1, 1.0).reason == "TimeBudget"
    assert check_resources(G, 1.0, 1.0, 1.0, 1.0)
