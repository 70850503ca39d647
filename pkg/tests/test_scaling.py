import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetinfer import presets, scaling
from hetinfer.core import DeviceSpec, Quantization, WorkloadSpec
from hetinfer.scaling import CostParams, RooflineClass, ScalingParams

mpmath.mp.dps = 50


def mp_coverage(alpha, bn, bs, d, N, S, T):
    x = mpmath.mpf(alpha) * mpmath.mpf(N) ** bn * mpmath.mpf(S) ** bs * mpmath.mpf(T) ** d
    return 1 - mpmath.exp(-x)


def test_coverage_matches_arbitrary_precision_oracle():
    p = ScalingParams(alpha=1e-6, beta_n=0.7, beta_s=0.7, delta=0.2)
    got = scaling.coverage(p, 1e6, 20, 100)
    want = mp_coverage(1e-6, 0.7, 0.7, 0.2, 1e6, 20, 100)
    assert abs(got - float(want)) <= 1e-12 * float(want)


@settings(max_examples=200)
@given(
    alpha=st.floats(1e-12, 1e-3),
    bn=st.floats(0.1, 1.0, exclude_max=True),
    bs=st.floats(0.1, 1.0, exclude_max=True),
    d=st.floats(0.0, 1.0),
    N=st.floats(1e5, 1e10),
    S=st.integers(1, 1000),
    T=st.integers(1, 4096),
)
def test_coverage_oracle_random(alpha, bn, bs, d, N, S, T):
    p = ScalingParams(alpha=alpha, beta_n=bn, beta_s=bs, delta=d)
    got = scaling.coverage(p, N, S, T)
    want = float(mp_coverage(alpha, bn, bs, d, N, S, T))
    assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


def test_coverage_zero_samples():
    assert scaling.coverage(ScalingParams(), 125e6, 0, 100) == 0.0


def test_coverage_saturates():
    p = ScalingParams(alpha=1e-4)
    assert scaling.coverage(p, 1e300, 20, 100) == 1.0


@settings(max_examples=100)
@given(
    st.floats(1e6, 1e10), st.floats(1e6, 1e10),
    st.integers(1, 200), st.integers(1, 200),
    st.integers(1, 1000), st.integers(1, 1000),
)
def test_coverage_monotone(n1, n2, s1, s2, t1, t2):
    p = ScalingParams()
    lo = scaling.coverage(p, min(n1, n2), min(s1, s2), min(t1, t2))
    hi = scaling.coverage(p, max(n1, n2), max(s1, s2), max(t1, t2))
    assert lo <= hi


def test_default_alpha_reproduces_calibration_coverage():
    p = ScalingParams()
    assert scaling.coverage(p, 125e6, 20, 100) == pytest.approx(0.595, abs=1e-12)


CPU = presets.fleet("cpu").devices[0]


def test_energy_zero_samples():
    assert scaling.energy(ScalingParams(), CPU, 125e6, 0, 100) == 0.0


def test_energy_linear_in_samples_and_tokens():
    p = ScalingParams()
    e = scaling.energy(p, CPU, 125e6, 10, 100)
    assert scaling.energy(p, CPU, 125e6, 20, 100) == 2 * e
    assert scaling.energy(p, CPU, 125e6, 10, 200) == 2 * e


def test_energy_fp8_ratio():
    p = ScalingParams()
    r = scaling.energy(p, CPU, 125e6, 20, 100, Quantization.FP8) / scaling.energy(p, CPU, 125e6, 20, 100)
    assert r == pytest.approx(0.65, rel=1e-15)


def test_energy_log_slope_in_n_is_gamma_e():
    p = ScalingParams()
    grid = [1e6, 1e7, 1e8, 1e9, 1e10]
    es = [scaling.energy(p, CPU, n, 20, 100) for n in grid]
    for (n1, e1), (n2, e2) in zip(zip(grid, es), zip(grid[1:], es[1:])):
        slope = (math.log(e2) - math.log(e1)) / (math.log(n2) - math.log(n1))
        assert slope == pytest.approx(p.gamma_e, abs=1e-9)


def test_default_c1_reproduces_calibration_energy():
    e = scaling.energy(ScalingParams(), CPU, 125e6, 20, 100)
    assert e == pytest.approx(43_057.7, rel=1e-12)


def test_calibrate_alpha_inverts_coverage():
    a = scaling.calibrate_alpha(0.3, 1e9, 5, 256)
    p = ScalingParams(alpha=a)
    assert scaling.coverage(p, 1e9, 5, 256) == pytest.approx(0.3, rel=1e-12)


def test_latency_components_published_sums():
    assert scaling.LatencyBreakdown(18.2, 2.1, 0.0, 0.4).total == pytest.approx(20.7, abs=1e-12)
    assert scaling.LatencyBreakdown(7.2, 0.9, 0.0, 0.5).total == pytest.approx(8.6, abs=1e-12)


def test_latency_single_sample_has_no_decode():
    lb = scaling.latency(ScalingParams(), CPU, presets.model("gpt2"), WorkloadSpec(n_samples=1))
    assert lb.decode == 0.0
    assert lb.prefill > 0


def test_latency_formulas():
    p = ScalingParams()
    m = presets.model("gpt2")
    w = WorkloadSpec(n_samples=20, tokens_per_sample=100, prompt_tokens=128)
    lb = scaling.latency(p, CPU, m, w, io_transfers=[(1e9, 32e9)], heterogeneous=True)
    C = 2 * CPU.frequency * CPU.n_cores
    assert lb.prefill == pytest.approx(128 * m.flops_per_token_total / C, rel=1e-14)
    assert lb.decode == pytest.approx(19 * 100 * m.flops_per_token_total / (C * CPU.bandwidth / 100e9), rel=1e-14)
    assert lb.io == pytest.approx(1e9 / 32e9)
    assert lb.overhead == pytest.approx(p.overhead_const + p.overhead_alpha * math.log(20))
    assert lb.total == lb.prefill + lb.decode + lb.io + lb.overhead


def test_overhead_log_base_configurable():
    p = ScalingParams(log_base=10.0)
    assert scaling.overhead_time(p, 100) == pytest.approx(p.overhead_const + 2 * p.overhead_alpha)


def test_io_rejects_zero_bandwidth():
    with pytest.raises(ValueError):
        scaling.io_time([(1.0, 0.0)])


@given(
    st.floats(0, 1e4), st.floats(1, 1e9), st.floats(0, 1e8), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000)
)
def test_cost_total_is_sum(hw, life, energy, price, maint, s):
    c = scaling.cost(CostParams(hw, life, price, maint), energy, s)
    assert c.total == c.amort + c.energy_cost + c.maint


def test_cost_examples():
    assert scaling.cost(CostParams(0, 1, 0, 0), 0.0, 0).total == 0
    assert scaling.cost(CostParams(1000, 1e6, 0, 0), 0.0, 100).amort == pytest.approx(0.1)
    assert scaling.cost(CostParams(0, 1, 0.20, 0), 3.6e6, 1).energy_cost == pytest.approx(0.20)


def gpu(bw=900e9, f=2.5e9, cores=2000):
    return DeviceSpec("g", "GPU", 1e9, bw, f, 300.0, cores)


def test_roofline_examples():
    g = gpu()
    assert scaling.ridge_point(g) == pytest.approx(11.11, abs=0.01)
    assert scaling.roofline_class(1.0, g) is RooflineClass.MEMORY_BOUND
    assert scaling.roofline_class(scaling.ridge_point(g), g) is RooflineClass.BALANCED
    assert scaling.roofline_class(100 * scaling.ridge_point(g), g) is RooflineClass.COMPUTE_BOUND


@given(st.floats(1e-3, 1e4), st.floats(1e-3, 1e3))
def test_roofline_scale_invariance(intensity, k):
    g = gpu()
    scaled = DeviceSpec("g", "GPU", 1e9, g.bandwidth * k, g.frequency * g.n_cores * k, 300.0, 1)
    # Classification depends on C/B only; compare away from the band edges.
    ratio = intensity / scaling.ridge_point(g)
    if min(abs(ratio - 0.95), abs(ratio - 1.05)) > 1e-9:
        assert scaling.roofline_class(intensity, g) is scaling.roofline_class(intensity, scaled)


def test_params_round_trip():
    p = ScalingParams(alpha=2e-7, beta_s=0.68)
    assert ScalingParams.from_dict(p.to_dict()) == p
