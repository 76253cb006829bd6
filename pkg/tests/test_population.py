"""Unit tests for activity traces and activation-event detection."""

from __future__ import annotations

import numpy as np
import pytest

from cpgpace.population import (ActivationEvent, ActivityTrace,
                                detect_activations, ema_trace)


def _trace(values, dt=0.01, pop_id="x") -> ActivityTrace:
    return ActivityTrace(pop_id=pop_id, dt=dt, values=np.asarray(values, dtype=float))


# ---------------------------------------------------------------------------
# ema_trace


def test_single_spike_decays_exponentially():
    dt, tau = 0.1, 0.5
    tr = ema_trace(np.array([5]), n_steps=12, dt=dt, trace_tau=tau)
    k = np.arange(12)
    expect = np.where(k >= 5, np.exp(-(k - 5) * dt / tau), 0.0)
    np.testing.assert_allclose(tr.values, expect, rtol=1e-12)


def test_spikes_superpose_linearly():
    dt, tau = 0.001, 0.05
    spikes = np.array([3, 3, 10, 40, 40, 40])
    tr = ema_trace(spikes, n_steps=60, dt=dt, trace_tau=tau)
    k = np.arange(60)[:, None]
    expect = np.where(k >= spikes[None, :],
                      np.exp(-(k - spikes[None, :]) * dt / tau), 0.0).sum(axis=1)
    np.testing.assert_allclose(tr.values, expect, rtol=1e-10)


def test_trace_counts_spike_on_its_own_step():
    tr = ema_trace(np.array([0]), n_steps=3, dt=0.01, trace_tau=0.05)
    assert tr.values[0] == 1.0


def test_trace_times_axis():
    tr = ema_trace(np.array([], dtype=int), n_steps=5, dt=0.25, trace_tau=1.0)
    np.testing.assert_allclose(tr.times, [0.0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(tr.values, np.zeros(5))


def test_resampled_strides_over_values():
    tr = _trace(np.arange(10, dtype=float), dt=0.01)
    t, v = tr.resampled(0.03)
    np.testing.assert_allclose(t, [0.0, 0.03, 0.06, 0.09])
    np.testing.assert_array_equal(v, [0.0, 3.0, 6.0, 9.0])


def test_resampled_never_drops_below_full_rate():
    tr = _trace(np.arange(4, dtype=float), dt=0.01)
    t, v = tr.resampled(0.001)   # finer than dt clamps to stride 1
    np.testing.assert_array_equal(v, tr.values)


# ---------------------------------------------------------------------------
# detect_activations


def test_detects_single_upward_crossing():
    tr = _trace([0.0, 0.3, 0.6, 1.2, 1.5, 0.8, 0.3, 0.1])
    ev = detect_activations(tr, threshold=1.0)
    assert [e.time for e in ev] == [pytest.approx(0.03)]
    assert ev[0].value == 1.2
    assert ev[0].pop_id == "x"


def test_second_event_requires_rearm_below_half_threshold():
    # dip to 0.6 stays above the 0.5 re-arm level: one event only
    tr = _trace([0.0, 1.2, 0.6, 1.3, 0.0])
    assert len(detect_activations(tr, threshold=1.0)) == 1
    # dip to 0.4 re-arms: two events
    tr2 = _trace([0.0, 1.2, 0.4, 1.3, 0.0])
    ev = detect_activations(tr2, threshold=1.0)
    assert [e.time for e in ev] == [pytest.approx(0.01), pytest.approx(0.03)]


def test_rearm_fraction_is_configurable():
    tr = _trace([0.0, 1.2, 0.6, 1.3, 0.0])
    ev = detect_activations(tr, threshold=1.0, rearm_fraction=0.7)
    assert len(ev) == 2


def test_min_gap_suppresses_close_events():
    tr = _trace([0.0, 1.2, 0.1, 1.2, 0.1, 0.0])
    assert len(detect_activations(tr, threshold=1.0, min_gap=0.05)) == 1
    assert len(detect_activations(tr, threshold=1.0, min_gap=0.015)) == 2


def test_threshold_crossing_is_inclusive():
    tr = _trace([0.0, 1.0, 0.0])
    assert len(detect_activations(tr, threshold=1.0)) == 1


def test_first_sample_above_threshold_counts():
    tr = _trace([1.5, 0.2, 0.0])
    ev = detect_activations(tr, threshold=1.0)
    assert [e.time for e in ev] == [0.0]


def test_no_events_below_threshold():
    tr = _trace([0.0, 0.5, 0.9, 0.5, 0.0])
    assert detect_activations(tr, threshold=1.0) == []


def test_empty_trace_gives_no_events():
    tr = _trace([])
    assert detect_activations(tr, threshold=1.0) == []


def test_events_are_time_ordered_dataclasses():
    tr = _trace([0.0, 1.2, 0.1, 1.2, 0.1, 1.2, 0.0])
    ev = detect_activations(tr, threshold=1.0)
    assert all(isinstance(e, ActivationEvent) for e in ev)
    times = [e.time for e in ev]
    assert times == sorted(times)
    assert len(ev) == 3


def test_burst_shaped_trace_yields_one_event_per_burst():
    """A ragged plateau above threshold must not split into extra events."""
    dt, tau = 1e-3, 0.05
    burst = [100, 101, 102, 103, 500, 501, 502, 503]
    tr = ema_trace(np.array(burst), n_steps=700, dt=dt, trace_tau=tau)
    # two spikes leave the trace at 1 + exp(-dt/tau) < 2, the third crosses
    ev = detect_activations(tr, threshold=2.0, min_gap=tau)
    assert [round(e.time, 3) for e in ev] == [0.102, 0.502]
