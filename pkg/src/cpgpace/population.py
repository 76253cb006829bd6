"""Population activity traces and activation-event detection.

A population's activity is summarised by an exponential moving average
of its spike counts: each simulation step the trace decays by
``exp(-dt / trace_tau)`` and every spike adds 1.  A population
"activates" when that trace crosses a count threshold from below.  Two
guards keep one burst from producing several events: the detector
re-arms only after the trace falls below half the threshold, and events
closer than ``min_gap`` (one trace time constant by default) are
suppressed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ActivityTrace:
    """Exponential moving average of one population's spike counts."""

    pop_id: str
    dt: float
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) * self.dt

    def resampled(self, period: float) -> tuple[np.ndarray, np.ndarray]:
        """Subsample to ``period`` (a multiple of dt) for compact export."""
        stride = max(int(round(period / self.dt)), 1)
        idx = np.arange(0, self.values.shape[0], stride)
        return idx * self.dt, self.values[idx]


@dataclass(frozen=True)
class ActivationEvent:
    """One upward threshold crossing of a population trace."""

    pop_id: str
    time: float
    value: float


def ema_trace(spike_steps: np.ndarray, n_steps: int, dt: float, trace_tau: float,
              pop_id: str = "") -> ActivityTrace:
    """Build the activity trace for one population from raw spike steps.

    Scalar reference for what the engine computes inline; used by tests
    and by anything that needs a trace for spikes that never went through
    the engine.
    """
    counts = np.bincount(spike_steps, minlength=n_steps).astype(np.float64)
    decay = np.exp(-dt / trace_tau)
    values = np.empty(n_steps)
    acc = 0.0
    for k in range(n_steps):
        acc = acc * decay + counts[k]
        values[k] = acc
    return ActivityTrace(pop_id=pop_id, dt=dt, values=values)


def detect_activations(trace: ActivityTrace, threshold: float,
                       min_gap: float | None = None,
                       rearm_fraction: float = 0.5) -> list[ActivationEvent]:
    """Find activation onsets of a population trace.

    Args:
        trace: the population activity trace.
        threshold: absolute trace level (a spike count) that defines an
            activation.
        min_gap: minimum time between two events; ``None`` uses one trace
            time constant worth of samples is not known here, so callers
            normally pass their ``trace_tau``.  ``0`` disables the guard.
        rearm_fraction: the trace must drop below ``rearm_fraction *
            threshold`` before a new event can trigger.

    Returns events ordered by time.
    """
    v = trace.values
    if v.shape[0] == 0:
        return []
    gap = 0.0 if min_gap is None else min_gap

    above = v >= threshold
    prev_above = np.concatenate(([False], above[:-1]))
    ups = np.nonzero(above & ~prev_above)[0]
    rearm_idx = np.nonzero(v < rearm_fraction * threshold)[0]

    events: list[ActivationEvent] = []
    last_i = -1
    for i in ups:
        if last_i >= 0:
            if (i - last_i) * trace.dt < gap:
                continue
            # hysteresis: require a re-arm sample since the last event
            j = np.searchsorted(rearm_idx, last_i)
            if j >= rearm_idx.shape[0] or rearm_idx[j] >= i:
                continue
        events.append(ActivationEvent(pop_id=trace.pop_id, time=i * trace.dt,
                                      value=float(v[i])))
        last_i = i
    return events
