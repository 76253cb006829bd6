"""Unit tests for the scalar neuron, synapse and mismatch primitives.

Expected values are frozen literals computed by hand from the model
equations, not read back from the implementation, so a silent change to
an update rule fails loudly here.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import replace

import numpy as np
import pytest

from cpgpace.errors import NumericOverflowError, StabilityError
from cpgpace.neuron_core import (MismatchModel, NeuronParams, NeuronState,
                                 SynapseParams, apply_mismatch,
                                 derive_time_constants,
                                 membrane_time_constants, step_neuron,
                                 step_synapse, synapse_increment,
                                 synapse_time_constant)

# ---------------------------------------------------------------------------
# time constants


def test_membrane_time_constant_from_circuit_constants():
    # c * u_t / (kappa * i_tau) with the defaults: 1.5p * 25m / (0.7 * 0.5p)
    tau, tau_ahp = membrane_time_constants(NeuronParams())
    assert tau == pytest.approx(0.10714285714285714, rel=1e-12)
    assert tau_ahp == pytest.approx(0.10714285714285714, rel=1e-12)


def test_membrane_time_constant_scales_inversely_with_leak_bias():
    p = NeuronParams(i_tau=1.0e-12, i_tau_ahp=2.0e-12)
    tau, tau_ahp = membrane_time_constants(p)
    assert tau == pytest.approx(0.05357142857142857, rel=1e-12)
    assert tau_ahp == pytest.approx(tau / 2.0, rel=1e-12)


def test_synapse_time_constant_default_is_30ms():
    assert synapse_time_constant(SynapseParams()) == pytest.approx(
        0.02999520076787714, rel=1e-12)


def test_derive_time_constants_bundles_all_three():
    p = NeuronParams()
    s = SynapseParams()
    tau, tau_ahp, tau_syn = derive_time_constants(p, s)
    assert (tau, tau_ahp) == membrane_time_constants(p)
    assert tau_syn == synapse_time_constant(s, p.u_t, p.kappa)


def test_time_constants_use_neuron_thermal_voltage():
    p = NeuronParams(u_t=0.05)
    tau, _ = membrane_time_constants(p)
    assert tau == pytest.approx(2 * 0.10714285714285714, rel=1e-12)
    _, _, tau_syn = derive_time_constants(p, SynapseParams())
    assert tau_syn == pytest.approx(2 * 0.02999520076787714, rel=1e-12)


# ---------------------------------------------------------------------------
# synapse step


def test_synapse_increment_matches_pulse_integral():
    # (i_g_syn * i_w / i_tau_syn) * (t_pulse / tau_syn) with defaults:
    # 1n * (1m / 29.995ms)
    assert synapse_increment(SynapseParams()) == pytest.approx(
        3.333866666666667e-11, rel=1e-12)


def test_synapse_increment_is_linear_in_weight():
    s1 = SynapseParams(i_w=1e-9)
    s2 = SynapseParams(i_w=3e-9)
    assert synapse_increment(s2) == pytest.approx(3 * synapse_increment(s1), rel=1e-12)


def test_synapse_decay_single_step_closed_form():
    out = step_synapse(2e-9, SynapseParams(), n_spikes=0, dt=1e-3)
    assert out == pytest.approx(1.9344218840197852e-09, rel=1e-12)


def test_synapse_decay_composes_over_many_steps():
    s = SynapseParams()
    tau_syn = synapse_time_constant(s)
    i = 2e-9
    for _ in range(50):
        i = step_synapse(i, s, n_spikes=0, dt=1e-3)
    assert i == pytest.approx(2e-9 * math.exp(-50e-3 / tau_syn), rel=1e-10)


def test_synapse_spikes_add_increments_after_decay():
    out = step_synapse(2e-9, SynapseParams(), n_spikes=3, dt=1e-3)
    assert out == pytest.approx(2.0344378840197854e-09, rel=1e-12)


def test_synapse_rejects_coarse_time_step():
    with pytest.raises(StabilityError):
        step_synapse(0.0, SynapseParams(), n_spikes=0, dt=0.01)


# ---------------------------------------------------------------------------
# neuron step


def test_membrane_euler_step_by_hand():
    """One forward-Euler step against a hand-computed trajectory point.

    gain 2, DC 0.3 nA, one inhibitory port at 0.2 nA, adaptation 50 pA.
    """
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.3e-9)
    st = NeuronState(i_mem=0.1e-9, i_ahp=0.05e-9,
                     i_syn_by_port={"inh": 0.2e-9})
    new, spiked = step_neuron(st, p, dt=1e-3, port_sign={"inh": -1})
    assert not spiked
    assert new.i_ahp == pytest.approx(4.953550435158206e-11, rel=1e-12)
    assert new.i_mem == pytest.approx(9.95370058781557e-11, rel=1e-12)


def test_unlisted_ports_count_as_excitatory():
    p = NeuronParams(i_dc=0.0)
    st = NeuronState(i_mem=0.0, i_syn_by_port={"x": 0.1e-9})
    signed, _ = step_neuron(st, p, dt=1e-3, port_sign={"x": 1})
    unlisted, _ = step_neuron(st, p, dt=1e-3, port_sign={})
    default, _ = step_neuron(st, p, dt=1e-3, port_sign=None)
    assert signed.i_mem == unlisted.i_mem == default.i_mem
    assert signed.i_mem > 0.0


def test_membrane_clamps_at_zero_under_inhibition():
    p = NeuronParams(i_dc=0.0)
    st = NeuronState(i_mem=1e-11, i_syn_by_port={"inh": 5e-9})
    new, _ = step_neuron(st, p, dt=1e-3, port_sign={"inh": -1})
    assert new.i_mem == 0.0


def test_spike_resets_membrane_and_jumps_adaptation():
    p = NeuronParams(i_dc=1e-6, i_ca=2e-9, i_reset=1e-12, t_refr=5e-3)
    st = NeuronState(i_mem=0.9e-9, i_ahp=0.1e-9)
    new, spiked = step_neuron(st, p, dt=1e-3)
    assert spiked
    assert new.i_mem == p.i_reset
    tau, tau_ahp = membrane_time_constants(p)
    jump = p.i_g_ahp * p.i_ca / p.i_tau_ahp
    assert new.i_ahp == pytest.approx(0.1e-9 * math.exp(-1e-3 / tau_ahp) + jump,
                                      rel=1e-12)
    assert new.refr_remaining == p.t_refr


def test_refractory_holds_membrane_and_blocks_spiking():
    p = NeuronParams(i_dc=1e-6, i_reset=2e-12)
    st = NeuronState(i_mem=0.5e-9, i_ahp=0.2e-9, refr_remaining=2.5e-3)
    new, spiked = step_neuron(st, p, dt=1e-3)
    assert not spiked
    assert new.i_mem == p.i_reset
    assert new.refr_remaining == pytest.approx(1.5e-3)
    # adaptation keeps decaying while the membrane is held
    _, tau_ahp = membrane_time_constants(p)
    assert new.i_ahp == pytest.approx(0.2e-9 * math.exp(-1e-3 / tau_ahp), rel=1e-12)


def test_refractory_release_after_elapsed_period():
    p = NeuronParams(i_dc=0.0)
    st = NeuronState(i_mem=0.0, refr_remaining=2e-3)
    st, _ = step_neuron(st, p, dt=1e-3)
    st, _ = step_neuron(st, p, dt=1e-3)
    assert st.refr_remaining == 0.0
    st, _ = step_neuron(st, p, dt=1e-3)   # integrates again, no drive
    assert st.i_mem == 0.0
    assert st.refr_remaining == 0.0


def test_positive_feedback_term_by_hand():
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, pos_fb_gain=1e-11, pos_fb_ref=1e-10,
                     i_spike_thr=math.inf)
    st = NeuronState(i_mem=0.5e-9)
    new, _ = step_neuron(st, p, dt=1e-3)
    assert new.i_mem == pytest.approx(5.091758948495738e-10, rel=1e-12)


def test_positive_feedback_exponent_is_clamped():
    p = NeuronParams(pos_fb_gain=1e-12, pos_fb_ref=1e-10, i_spike_thr=math.inf)
    st = NeuronState(i_mem=1e-6)   # raw exponent 1e4, clamp at 60
    new, _ = step_neuron(st, p, dt=1e-3)
    assert math.isfinite(new.i_mem)
    tau, _ = membrane_time_constants(p)
    fb = 1e-12 * math.exp(60.0)
    gain = p.i_g / p.i_tau
    expect = 1e-6 + (1e-3 / tau) * (gain * (0.0 - 0.0 - p.i_tau) - 0.0 + fb - 1e-6)
    assert new.i_mem == pytest.approx(expect, rel=1e-12)


def test_runaway_feedback_raises_overflow_error():
    p = NeuronParams(pos_fb_gain=1e308, pos_fb_ref=1e-10, i_spike_thr=math.inf)
    st = NeuronState(i_mem=0.0)
    with np.errstate(over="ignore"), pytest.raises(NumericOverflowError):
        for _ in range(5):
            st, _ = step_neuron(st, p, dt=1e-3)


def test_neuron_rejects_coarse_time_step():
    p = NeuronParams(i_tau_ahp=5e-12)   # tau_ahp ~ 10.7 ms
    with pytest.raises(StabilityError):
        step_neuron(NeuronState(), p, dt=3e-3)


def test_step_neuron_returns_new_state_object():
    st = NeuronState(i_mem=0.1e-9, i_syn_by_port={"x": 1e-10})
    new, _ = step_neuron(st, NeuronParams(), dt=1e-3)
    assert new is not st
    assert new.i_syn_by_port is not st.i_syn_by_port
    assert st.i_mem == 0.1e-9


def test_integrator_relaxes_to_driven_fixed_point():
    """With constant drive and no spiking the membrane settles at
    gain * (i_dc - i_tau)."""
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.25e-9, i_spike_thr=math.inf)
    st = NeuronState()
    for _ in range(20000):
        st, _ = step_neuron(st, p, dt=1e-3)
    gain = p.i_g / p.i_tau
    assert st.i_mem == pytest.approx(gain * (p.i_dc - p.i_tau), rel=1e-6)


# ---------------------------------------------------------------------------
# device mismatch


def test_mismatch_factor_is_one_for_unlisted_parameter():
    m = MismatchModel(cv_per_param={"i_tau": 0.1})
    assert m.factor("i_w", 7) == 1.0
    assert m.factor("i_tau", 7) != 1.0


def test_mismatch_factor_is_one_for_zero_cv():
    m = MismatchModel(cv_per_param={"i_tau": 0.0})
    assert m.factor("i_tau", 7) == 1.0


def test_mismatch_factor_frozen_literals():
    """The draw is a pure function of (seed, device, parameter name)."""
    m = MismatchModel(cv_per_param={"i_tau_syn": 0.13, "i_w": 0.10}, seed=0)
    assert m.factor("i_tau_syn", 0) == pytest.approx(1.0271635764517064, rel=1e-12)
    assert m.factor("i_tau_syn", 1) == pytest.approx(0.9927648971570655, rel=1e-12)
    assert m.factor("i_tau_syn", 2) == pytest.approx(1.0037711732150965, rel=1e-12)
    assert m.factor("i_w", 0) == pytest.approx(0.9558752984375591, rel=1e-12)
    m1 = MismatchModel(cv_per_param={"i_tau_syn": 0.13}, seed=1)
    assert m1.factor("i_tau_syn", 0) == pytest.approx(1.1368533957200753, rel=1e-12)


def test_mismatch_factor_reproduces_documented_construction():
    """Independent reimplementation of the documented draw."""
    seed, device, name, cv = 42, 13, "i_dc", 0.05
    ss = np.random.SeedSequence([seed, device, zlib.crc32(name.encode())])
    rng = np.random.Generator(np.random.PCG64(ss))
    while True:
        z = rng.standard_normal()
        if abs(z) <= 3.0:
            break
    expect = max(0.05, 1.0 + cv * z)
    m = MismatchModel(cv_per_param={name: cv}, seed=seed)
    assert m.factor(name, device) == expect


def test_mismatch_factors_differ_across_devices_params_and_seeds():
    m = MismatchModel(cv_per_param={"i_tau": 0.1, "i_g": 0.1}, seed=0)
    assert m.factor("i_tau", 0) != m.factor("i_tau", 1)
    assert m.factor("i_tau", 0) != m.factor("i_g", 0)
    m2 = MismatchModel(cv_per_param={"i_tau": 0.1}, seed=99)
    assert m.factor("i_tau", 0) != m2.factor("i_tau", 0)


def test_mismatch_factor_repeatable():
    m = MismatchModel(cv_per_param={"i_tau": 0.1}, seed=3)
    assert m.factor("i_tau", 5) == m.factor("i_tau", 5)


def test_mismatch_population_statistics():
    cv = 0.13
    m = MismatchModel(cv_per_param={"i_tau_syn": cv}, seed=0)
    f = np.array([m.factor("i_tau_syn", d) for d in range(2000)])
    assert f.mean() == pytest.approx(1.0, abs=0.02)
    assert f.std(ddof=1) == pytest.approx(cv, abs=0.02)
    # clipped at 3 sigma on both sides
    assert f.min() >= 1.0 - 3 * cv
    assert f.max() <= 1.0 + 3 * cv


def test_mismatch_floor_truncates_large_negative_draws():
    m = MismatchModel(cv_per_param={"i_tau": 0.40}, seed=0)
    f = np.array([m.factor("i_tau", d) for d in range(2000)])
    assert f.min() == 0.05
    assert np.all(f >= 0.05)


def test_synaptic_leak_spread_realises_30_plus_minus_4ms():
    """256 nominally identical 30 ms synapses under the default leak cv."""
    m = MismatchModel(cv_per_param={"i_tau_syn": 0.13}, seed=0)
    nominal = SynapseParams()
    taus = np.array([synapse_time_constant(apply_mismatch(nominal, m, d))
                     for d in range(256)])
    assert taus.mean() == pytest.approx(30e-3, abs=1e-3)
    assert taus.std(ddof=1) == pytest.approx(4e-3, abs=1e-3)


def test_apply_mismatch_touches_only_listed_fields():
    m = MismatchModel(cv_per_param={"i_tau": 0.1}, seed=0)
    p = NeuronParams(i_tau=5e-13, i_g=7e-13, i_dc=2e-9)
    out = apply_mismatch(p, m, device_id=4)
    assert out.i_tau == pytest.approx(5e-13 * m.factor("i_tau", 4), rel=1e-12)
    assert out.i_g == p.i_g
    assert out.i_dc == p.i_dc
    assert out.c_mem == p.c_mem
    assert out is not p


def test_apply_mismatch_on_synapse_params():
    m = MismatchModel(cv_per_param={"i_w": 0.1, "i_tau_syn": 0.13}, seed=0)
    s = SynapseParams(i_w=2e-9, sign=-1)
    out = apply_mismatch(s, m, device_id=9)
    assert out.i_w == pytest.approx(2e-9 * m.factor("i_w", 9), rel=1e-12)
    assert out.i_tau_syn == pytest.approx(
        s.i_tau_syn * m.factor("i_tau_syn", 9), rel=1e-12)
    assert out.sign == -1
    assert out.t_pulse == s.t_pulse


def test_apply_mismatch_same_device_same_result():
    m = MismatchModel(cv_per_param={"i_tau": 0.1, "i_dc": 0.05}, seed=0)
    p = NeuronParams(i_dc=1.5e-9)
    a = apply_mismatch(p, m, device_id=11)
    b = apply_mismatch(p, m, device_id=11)
    assert a == b


def test_apply_mismatch_rescales_changed_nominal_through_same_factor():
    """Changing a spec value re-derives the device through its frozen factor."""
    m = MismatchModel(cv_per_param={"i_dc": 0.05}, seed=0)
    a = apply_mismatch(NeuronParams(i_dc=1.0e-9), m, device_id=3)
    b = apply_mismatch(NeuronParams(i_dc=2.0e-9), m, device_id=3)
    assert b.i_dc == pytest.approx(2 * a.i_dc, rel=1e-12)


def test_mismatch_moves_time_constant_inversely():
    m = MismatchModel(cv_per_param={"i_tau_syn": 0.13}, seed=0)
    s = apply_mismatch(SynapseParams(), m, device_id=0)
    f = m.factor("i_tau_syn", 0)
    assert synapse_time_constant(s) == pytest.approx(
        0.02999520076787714 / f, rel=1e-12)
