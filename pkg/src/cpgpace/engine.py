"""Backend dispatch and array-level network runner.

The network builder (:mod:`cpgpace.network`) flattens a network into the
plain arrays held by :class:`NetworkArrays`; this module feeds them to
one of two interchangeable kernels:

* ``numba``: :mod:`cpgpace._engine_nb`, JIT-compiled, the default.
* ``numpy``: :mod:`cpgpace._engine_np`, pure numpy, used when numba is
  unavailable or when the environment variable ``CPGPACE_NO_NUMBA`` is
  set to ``1``/``true``/``yes``.

Both kernels implement the same update (see the numpy module docstring);
``benchmarks/bench_engine.py`` compares their speed.  Results are
bit-reproducible for a fixed backend; across backends they agree to
floating-point accuracy but not necessarily bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _engine_np
from .errors import ConfigError, NumericOverflowError, SimulationRunError

try:  # pragma: no cover - import guard
    from . import _engine_nb
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _engine_nb = None
    _HAVE_NUMBA = False

_ENV_FLAG = "CPGPACE_NO_NUMBA"


def _env_disables_numba() -> bool:
    return os.environ.get(_ENV_FLAG, "").strip().lower() in {"1", "true", "yes"}


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def default_backend() -> str:
    """Backend used when none is requested explicitly."""
    if _HAVE_NUMBA and not _env_disables_numba():
        return "numba"
    return "numpy"


def _resolve(backend: str | None):
    name = backend or default_backend()
    if name == "numba":
        if not _HAVE_NUMBA:
            raise ConfigError("numba backend requested but numba is not importable")
        return name, _engine_nb.run_network
    if name == "numpy":
        return name, _engine_np.run_network
    raise ConfigError(f"unknown engine backend {name!r}")


@dataclass
class NetworkArrays:
    """Flattened, engine-ready description of a network.

    Neuron arrays are indexed by a global neuron index, port arrays by a
    global synapse-port index.  A port is one first-order synapse state
    on one target neuron, fed either by an internal population
    (``port_src_kind`` 0, ``port_src_idx`` = population index: the port
    receives that population's total spike count each step) or by an
    external spike channel (kind 1, index into the channel axis of the
    binned external input).
    """

    # per neuron
    tau: np.ndarray
    gain: np.ndarray
    i_tau_cur: np.ndarray
    i_dc: np.ndarray
    pos_fb_gain: np.ndarray
    pos_fb_ref: np.ndarray
    thr: np.ndarray
    reset: np.ndarray
    t_refr: np.ndarray
    ahp_decay_rate: np.ndarray     # 1 / tau_ahp, turned into a decay factor once dt is known
    ahp_jump: np.ndarray
    pop_of: np.ndarray             # int32, population index per neuron
    # per port
    port_target: np.ndarray        # int32
    port_tau: np.ndarray           # synaptic time constant per port
    port_inc: np.ndarray           # current added per presynaptic spike
    port_sign: np.ndarray          # float64, +1 / -1
    port_src_kind: np.ndarray      # int8
    port_src_idx: np.ndarray       # int32
    # per population
    trace_tau: np.ndarray

    @property
    def n_neurons(self) -> int:
        return self.tau.shape[0]

    @property
    def n_ports(self) -> int:
        return self.port_target.shape[0]

    @property
    def n_pops(self) -> int:
        return self.trace_tau.shape[0]

    def min_time_constant(self) -> float:
        parts = [self.tau.min()]
        if self.ahp_jump.any():
            parts.append((1.0 / self.ahp_decay_rate[self.ahp_jump > 0]).min())
        if self.n_ports:
            parts.append(self.port_tau.min())
        return float(min(parts))


@dataclass
class EngineState:
    """Mutable dynamic state, reusable to warm-start a follow-up run."""

    i_mem: np.ndarray
    i_ahp: np.ndarray
    refr: np.ndarray
    i_syn: np.ndarray
    trace: np.ndarray

    @classmethod
    def zeros(cls, net: NetworkArrays) -> "EngineState":
        return cls(i_mem=np.zeros(net.n_neurons),
                   i_ahp=np.zeros(net.n_neurons),
                   refr=np.zeros(net.n_neurons),
                   i_syn=np.zeros(net.n_ports),
                   trace=np.zeros(net.n_pops))

    def copy(self) -> "EngineState":
        return EngineState(self.i_mem.copy(), self.i_ahp.copy(), self.refr.copy(),
                           self.i_syn.copy(), self.trace.copy())


@dataclass
class EngineResult:
    spike_step: np.ndarray         # int64 step index per spike
    spike_neuron: np.ndarray       # int32 neuron index per spike
    traces: np.ndarray             # (n_steps, n_pops) activity traces
    mem_out: np.ndarray            # (n_steps, n_recorded) membrane samples
    final_state: EngineState
    backend: str
    n_steps: int = 0
    dt: float = 0.0


def _spike_capacity(net: NetworkArrays, n_steps: int, dt: float) -> int:
    per_neuron_min_isi = np.maximum(net.t_refr, 10.0 * dt)
    cap = int(np.sum(n_steps * dt / per_neuron_min_isi)) + 16 * net.n_neurons + 1024
    return min(cap, 20_000_000)


def run(net: NetworkArrays, n_steps: int, dt: float,
        ext_counts: np.ndarray | None = None,
        state: EngineState | None = None,
        record_neurons: np.ndarray | None = None,
        backend: str | None = None) -> EngineResult:
    """Simulate ``n_steps`` of ``dt`` seconds each.

    ``ext_counts`` is a ``(n_steps, n_channels)`` array of external spike
    counts per step; required if any port reads an external channel.
    ``state`` (not mutated) warm-starts the run; by default everything
    starts at rest.  Spike deliveries pending across the boundary are not
    part of the state, so a warm start reproduces a continuous run
    exactly only when the previous segment ended with a silent step.
    ``record_neurons`` selects membrane traces to store.

    Raises:
        ConfigError: dt too large for the fastest time constant, or a
            missing/misshaped external input.
        NumericOverflowError / SimulationRunError: integration failed.
    """
    name, kernel = _resolve(backend)

    if dt <= 0:
        raise ConfigError("dt must be positive")
    min_tc = net.min_time_constant()
    if dt > min_tc / 5.0:
        raise ConfigError(
            f"dt={dt:g}s exceeds a fifth of the smallest time constant {min_tc:g}s")

    n_ext = int(net.port_src_idx[net.port_src_kind == 1].max()) + 1 \
        if np.any(net.port_src_kind == 1) else 0
    if ext_counts is None:
        ext_counts = np.zeros((n_steps, 0), dtype=np.uint16)
    if ext_counts.shape[0] != n_steps or ext_counts.shape[1] < n_ext:
        raise ConfigError(
            f"external input shape {ext_counts.shape} does not cover "
            f"{n_steps} steps x {n_ext} channels")
    ext_counts = np.ascontiguousarray(ext_counts, dtype=np.uint16)

    st = (state.copy() if state is not None else EngineState.zeros(net))

    rec_idx = (np.asarray(record_neurons, dtype=np.int32)
               if record_neurons is not None else np.zeros(0, dtype=np.int32))
    mem_out = np.zeros((n_steps if rec_idx.size else 0, rec_idx.size))

    traces = np.zeros((n_steps, net.n_pops))
    cap = _spike_capacity(net, n_steps, dt)
    spike_step = np.zeros(cap, dtype=np.int64)
    spike_neuron = np.zeros(cap, dtype=np.int32)

    ahp_decay = np.exp(-dt * net.ahp_decay_rate)
    port_decay = np.exp(-dt / net.port_tau) if net.n_ports else np.zeros(0)
    trace_decay = np.exp(-dt / net.trace_tau)

    n_spk, status, fail_step = kernel(
        n_steps, dt,
        st.i_mem, st.i_ahp, st.refr,
        net.tau, net.gain, net.i_tau_cur, net.i_dc,
        net.pos_fb_gain, net.pos_fb_ref,
        net.thr, net.reset, net.t_refr,
        ahp_decay, net.ahp_jump, net.pop_of,
        st.i_syn, net.port_target, port_decay, net.port_inc, net.port_sign,
        net.port_src_kind, net.port_src_idx,
        ext_counts,
        trace_decay, st.trace,
        traces, spike_step, spike_neuron,
        rec_idx, mem_out)

    if status == _engine_np.STATUS_NONFINITE:
        raise NumericOverflowError(
            f"network state became non-finite at t={fail_step * dt:.4f}s")
    if status == _engine_np.STATUS_SPIKES_FULL:
        raise SimulationRunError(
            f"spike buffer ({cap} events) overflowed at t={fail_step * dt:.4f}s; "
            "the network is spiking far faster than its refractory limit")

    st.trace = traces[-1].copy() if n_steps else st.trace
    return EngineResult(spike_step=spike_step[:n_spk].copy(),
                        spike_neuron=spike_neuron[:n_spk].copy(),
                        traces=traces, mem_out=mem_out, final_state=st,
                        backend=name, n_steps=n_steps, dt=dt)
