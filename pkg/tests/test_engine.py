"""Engine tests: the vectorised kernels against the scalar reference.

The single-neuron functions in ``neuron_core`` are the ground truth; a
hand-rolled loop over ``step_neuron``/``step_synapse`` replays the
engine's documented update order (ports first, internal spike effects
delayed one step) and the engine must reproduce it. The numba and numpy
kernels are also compared against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from cpgpace import engine
from cpgpace.engine import EngineState, NetworkArrays
from cpgpace.errors import (ConfigError, NumericOverflowError,
                            SimulationRunError)
from cpgpace.neuron_core import (NeuronParams, NeuronState, SynapseParams,
                                 membrane_time_constants, step_neuron,
                                 step_synapse, synapse_increment,
                                 synapse_time_constant)
from cpgpace.population import ema_trace

NUMPY_ONLY = {"backend": "numpy"}


@dataclass(frozen=True)
class Port:
    target: int
    syn: SynapseParams
    src_kind: int      # 0 internal population, 1 external channel
    src_idx: int


def make_arrays(neurons: list[NeuronParams], ports: list[Port],
                trace_tau: float = 50e-3) -> NetworkArrays:
    """Flatten scalar parameter sets the way the network builder does,
    with every neuron as its own single-member population."""
    n = len(neurons)
    tau = np.zeros(n)
    gain = np.zeros(n)
    i_tau_cur = np.zeros(n)
    i_dc = np.zeros(n)
    pos_fb_gain = np.zeros(n)
    pos_fb_ref = np.zeros(n)
    thr = np.zeros(n)
    reset = np.zeros(n)
    t_refr = np.zeros(n)
    ahp_decay_rate = np.zeros(n)
    ahp_jump = np.zeros(n)
    for i, p in enumerate(neurons):
        t_m, t_ahp = membrane_time_constants(p)
        tau[i] = t_m
        gain[i] = p.i_g / p.i_tau
        i_tau_cur[i] = p.i_tau
        i_dc[i] = p.i_dc
        pos_fb_gain[i] = p.pos_fb_gain
        pos_fb_ref[i] = p.pos_fb_ref
        thr[i] = p.i_spike_thr
        reset[i] = p.i_reset
        t_refr[i] = p.t_refr
        ahp_decay_rate[i] = 1.0 / t_ahp
        ahp_jump[i] = p.i_g_ahp * p.i_ca / p.i_tau_ahp
    u_t, kappa = neurons[0].u_t, neurons[0].kappa
    return NetworkArrays(
        tau=tau, gain=gain, i_tau_cur=i_tau_cur, i_dc=i_dc,
        pos_fb_gain=pos_fb_gain, pos_fb_ref=pos_fb_ref,
        thr=thr, reset=reset, t_refr=t_refr,
        ahp_decay_rate=ahp_decay_rate, ahp_jump=ahp_jump,
        pop_of=np.arange(n, dtype=np.int32),
        port_target=np.array([q.target for q in ports], dtype=np.int32),
        port_tau=np.array([synapse_time_constant(q.syn, u_t, kappa) for q in ports]),
        port_inc=np.array([synapse_increment(q.syn, u_t, kappa) for q in ports]),
        port_sign=np.array([float(q.syn.sign) for q in ports]),
        port_src_kind=np.array([q.src_kind for q in ports], dtype=np.int8),
        port_src_idx=np.array([q.src_idx for q in ports], dtype=np.int32),
        trace_tau=np.full(n, trace_tau))


def scalar_reference(neurons: list[NeuronParams], ports: list[Port],
                     n_steps: int, dt: float, ext: np.ndarray | None = None):
    """Replay the engine's update order through the scalar primitives."""
    n = len(neurons)
    states = [NeuronState() for _ in neurons]
    i_syn = [0.0] * len(ports)
    counts_prev = [0] * n
    mem = np.zeros((n_steps, n))
    spikes: list[tuple[int, int]] = []
    for k in range(n_steps):
        for j, q in enumerate(ports):
            cnt = counts_prev[q.src_idx] if q.src_kind == 0 else int(ext[k, q.src_idx])
            i_syn[j] = step_synapse(i_syn[j], q.syn, cnt, dt,
                                    neurons[0].u_t, neurons[0].kappa)
        counts_now = [0] * n
        for i, p in enumerate(neurons):
            mine = {f"p{j}": i_syn[j] for j, q in enumerate(ports) if q.target == i}
            sign = {f"p{j}": q.syn.sign for j, q in enumerate(ports) if q.target == i}
            states[i].i_syn_by_port = mine
            states[i], spiked = step_neuron(states[i], p, dt, port_sign=sign)
            if spiked:
                spikes.append((k, i))
                counts_now[i] += 1
            mem[k, i] = states[i].i_mem
        counts_prev = counts_now
    return mem, spikes, states


# ---------------------------------------------------------------------------
# equivalence with the scalar reference


def test_subthreshold_matches_scalar_reference():
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.4e-9)
    net = make_arrays([p], [])
    n_steps, dt = 3000, 1e-4
    res = engine.run(net, n_steps, dt, record_neurons=np.array([0]), **NUMPY_ONLY)
    mem, spikes, _ = scalar_reference([p], [], n_steps, dt)
    assert not spikes
    np.testing.assert_allclose(res.mem_out[:, 0], mem[:, 0], rtol=1e-9)
    assert res.spike_step.size == 0


def test_adaptation_decay_matches_scalar_reference():
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.2e-9, i_ca=1e-9)
    net = make_arrays([p], [])
    st = EngineState.zeros(net)
    st.i_ahp[0] = 0.3e-9
    n_steps, dt = 2000, 1e-4
    res = engine.run(net, n_steps, dt, state=st,
                     record_neurons=np.array([0]), **NUMPY_ONLY)
    states = [NeuronState(i_ahp=0.3e-9)]
    mem = np.zeros(n_steps)
    for k in range(n_steps):
        states[0], spiked = step_neuron(states[0], p, dt)
        assert not spiked
        mem[k] = states[0].i_mem
    np.testing.assert_allclose(res.mem_out[:, 0], mem, rtol=1e-9)
    np.testing.assert_allclose(res.final_state.i_ahp[0], states[0].i_ahp, rtol=1e-9)


def test_spiking_network_matches_scalar_reference():
    """Two neurons, internal + external ports, adaptation, refractoriness."""
    pacer = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=1.2e-9,
                         i_ca=0.5e-9, t_refr=3e-3)
    follower = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.3e-9, t_refr=2e-3)
    ports = [
        Port(target=1, syn=SynapseParams(i_w=150e-9, sign=1), src_kind=0, src_idx=0),
        Port(target=1, syn=SynapseParams(i_w=10e-9, sign=-1), src_kind=1, src_idx=0),
        Port(target=0, syn=SynapseParams(i_w=5e-9, sign=1), src_kind=0, src_idx=0),
    ]
    n_steps, dt = 8000, 1e-4
    rng = np.random.default_rng(0)
    ext = np.zeros((n_steps, 1), dtype=np.uint16)
    ext[rng.integers(0, n_steps, 40), 0] = 1

    net = make_arrays([pacer, follower], ports)
    res = engine.run(net, n_steps, dt, ext_counts=ext,
                     record_neurons=np.array([0, 1]), **NUMPY_ONLY)
    mem, spikes, _ = scalar_reference([pacer, follower], ports, n_steps, dt, ext)

    assert len(spikes) > 10
    assert any(n == 1 for _, n in spikes)   # the follower fires too
    assert list(zip(res.spike_step.tolist(), res.spike_neuron.tolist())) == spikes
    np.testing.assert_allclose(res.mem_out, mem, rtol=1e-9, atol=1e-24)


def test_traces_match_scalar_ema():
    pacer = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=1.2e-9, i_ca=0.5e-9, t_refr=3e-3)
    net = make_arrays([pacer], [], trace_tau=50e-3)
    n_steps, dt = 8000, 1e-4
    res = engine.run(net, n_steps, dt, **NUMPY_ONLY)
    assert res.spike_step.size > 3
    ref = ema_trace(res.spike_step, n_steps, dt, 50e-3)
    np.testing.assert_allclose(res.traces[:, 0], ref.values, rtol=1e-10)
    np.testing.assert_allclose(res.final_state.trace, res.traces[-1], rtol=0)


# ---------------------------------------------------------------------------
# port source semantics


def _pacer_and_silent_follower():
    pacer = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=2e-9, i_ca=2e-9, t_refr=5e-3)
    silent = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.0)
    return pacer, silent


def test_internal_spikes_arrive_one_step_later():
    pacer, silent = _pacer_and_silent_follower()
    ports = [Port(target=1, syn=SynapseParams(i_w=10e-9, sign=1),
                  src_kind=0, src_idx=0)]
    net = make_arrays([pacer, silent], ports)
    res = engine.run(net, 500, 1e-4, record_neurons=np.array([1]), **NUMPY_ONLY)
    s0 = int(res.spike_step[res.spike_neuron == 0][0])
    follower = res.mem_out[:, 0]
    assert np.all(follower[:s0 + 1] == 0.0)
    assert follower[s0 + 1] > 0.0


def test_external_spikes_arrive_same_step():
    _, silent = _pacer_and_silent_follower()
    ports = [Port(target=0, syn=SynapseParams(i_w=10e-9, sign=1),
                  src_kind=1, src_idx=0)]
    net = make_arrays([silent], ports)
    n_steps = 100
    ext = np.zeros((n_steps, 1), dtype=np.uint16)
    ext[30, 0] = 1
    res = engine.run(net, n_steps, 1e-4, ext_counts=ext,
                     record_neurons=np.array([0]), **NUMPY_ONLY)
    assert np.all(res.mem_out[:30, 0] == 0.0)
    assert res.mem_out[30, 0] > 0.0


def test_port_sign_inverts_contribution():
    _, silent = _pacer_and_silent_follower()
    exc = Port(target=0, syn=SynapseParams(i_w=10e-9, sign=1), src_kind=1, src_idx=0)
    inh = Port(target=0, syn=SynapseParams(i_w=10e-9, sign=-1), src_kind=1, src_idx=0)
    ext = np.zeros((200, 1), dtype=np.uint16)
    ext[10, 0] = 1
    up = engine.run(make_arrays([silent], [exc]), 200, 1e-4, ext_counts=ext,
                    record_neurons=np.array([0]), **NUMPY_ONLY)
    down = engine.run(make_arrays([silent], [inh]), 200, 1e-4, ext_counts=ext,
                      record_neurons=np.array([0]), **NUMPY_ONLY)
    assert up.mem_out[50, 0] > 0.0
    assert np.all(down.mem_out[:, 0] == 0.0)   # clamped at zero


# ---------------------------------------------------------------------------
# determinism and warm starts


def test_bit_identical_reruns_on_fixed_backend():
    pacer = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=1.5e-9, i_ca=2e-9, t_refr=3e-3)
    ports = [Port(target=0, syn=SynapseParams(i_w=3e-9, sign=1), src_kind=0, src_idx=0)]
    net = make_arrays([pacer], ports)
    a = engine.run(net, 3000, 1e-4, record_neurons=np.array([0]), **NUMPY_ONLY)
    b = engine.run(net, 3000, 1e-4, record_neurons=np.array([0]), **NUMPY_ONLY)
    np.testing.assert_array_equal(a.spike_step, b.spike_step)
    np.testing.assert_array_equal(a.mem_out, b.mem_out)
    np.testing.assert_array_equal(a.traces, b.traces)


def test_passed_state_is_not_mutated():
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.4e-9)
    net = make_arrays([p], [])
    st = EngineState.zeros(net)
    engine.run(net, 100, 1e-4, state=st, **NUMPY_ONLY)
    assert st.i_mem[0] == 0.0
    assert st.trace[0] == 0.0


def test_warm_start_continues_subthreshold_run_exactly():
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.4e-9)
    net = make_arrays([p], [])
    full = engine.run(net, 800, 1e-4, record_neurons=np.array([0]), **NUMPY_ONLY)
    first = engine.run(net, 400, 1e-4, record_neurons=np.array([0]), **NUMPY_ONLY)
    second = engine.run(net, 400, 1e-4, state=first.final_state,
                        record_neurons=np.array([0]), **NUMPY_ONLY)
    np.testing.assert_array_equal(
        np.concatenate([first.mem_out, second.mem_out]), full.mem_out)
    np.testing.assert_array_equal(
        np.concatenate([first.traces, second.traces]), full.traces)


def test_warm_start_carries_refractory_and_adaptation():
    """A port-free spiker split across two runs equals one long run."""
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=1.5e-9, i_ca=2e-9, t_refr=7e-3)
    net = make_arrays([p], [])
    full = engine.run(net, 2000, 1e-4, **NUMPY_ONLY)
    first = engine.run(net, 900, 1e-4, **NUMPY_ONLY)
    second = engine.run(net, 1100, 1e-4, state=first.final_state, **NUMPY_ONLY)
    glued = np.concatenate([first.spike_step, second.spike_step + 900])
    np.testing.assert_array_equal(glued, full.spike_step)


# ---------------------------------------------------------------------------
# backend dispatch


def test_available_backends_always_offers_numpy():
    assert "numpy" in engine.available_backends()


def test_env_flag_forces_numpy_default(monkeypatch):
    monkeypatch.setenv("CPGPACE_NO_NUMBA", "1")
    assert engine.default_backend() == "numpy"
    monkeypatch.setenv("CPGPACE_NO_NUMBA", "")
    assert engine.default_backend() in engine.available_backends()


def test_unknown_backend_rejected():
    p = NeuronParams(i_dc=0.0)
    net = make_arrays([p], [])
    with pytest.raises(ConfigError):
        engine.run(net, 10, 1e-4, backend="fortran")


@pytest.mark.skipif("numba" not in engine.available_backends(),
                    reason="numba not installed")
def test_numba_and_numpy_paths_agree():
    pacer = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=1.3e-9, i_ca=2e-9, t_refr=4e-3)
    follower = NeuronParams(i_tau=5e-13, i_g=1e-12, i_dc=0.6e-9, i_ca=1e-9, t_refr=4e-3)
    ports = [
        Port(target=1, syn=SynapseParams(i_w=20e-9, sign=1), src_kind=0, src_idx=0),
        Port(target=0, syn=SynapseParams(i_w=8e-9, sign=-1), src_kind=0, src_idx=1),
    ]
    net = make_arrays([pacer, follower], ports)
    a = engine.run(net, 20000, 1e-4, record_neurons=np.array([0, 1]), backend="numba")
    b = engine.run(net, 20000, 1e-4, record_neurons=np.array([0, 1]), backend="numpy")
    assert a.backend == "numba" and b.backend == "numpy"
    np.testing.assert_array_equal(a.spike_step, b.spike_step)
    np.testing.assert_array_equal(a.spike_neuron, b.spike_neuron)
    np.testing.assert_allclose(a.mem_out, b.mem_out, rtol=1e-9, atol=1e-24)
    np.testing.assert_allclose(a.traces, b.traces, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# guard rails


def test_engine_rejects_coarse_time_step():
    p = NeuronParams(i_tau=5e-11)   # tau ~ 1.07 ms
    net = make_arrays([p], [])
    with pytest.raises(ConfigError, match="exceeds"):
        engine.run(net, 10, 1e-3, **NUMPY_ONLY)


def test_engine_rejects_nonpositive_time_step():
    net = make_arrays([NeuronParams()], [])
    with pytest.raises(ConfigError):
        engine.run(net, 10, 0.0, **NUMPY_ONLY)


def test_missing_external_input_rejected():
    _, silent = _pacer_and_silent_follower()
    ports = [Port(target=0, syn=SynapseParams(), src_kind=1, src_idx=0)]
    net = make_arrays([silent], ports)
    with pytest.raises(ConfigError, match="external"):
        engine.run(net, 10, 1e-4, **NUMPY_ONLY)


def test_misshaped_external_input_rejected():
    _, silent = _pacer_and_silent_follower()
    ports = [Port(target=0, syn=SynapseParams(), src_kind=1, src_idx=0)]
    net = make_arrays([silent], ports)
    with pytest.raises(ConfigError, match="external"):
        engine.run(net, 10, 1e-4,
                   ext_counts=np.zeros((5, 1), dtype=np.uint16), **NUMPY_ONLY)


def test_nonfinite_state_raises_overflow_error():
    p = NeuronParams(i_tau=5e-13, i_g=1e-12, pos_fb_gain=1e308,
                     pos_fb_ref=1e-10, i_spike_thr=np.inf)
    net = make_arrays([p], [])
    with np.errstate(over="ignore"), pytest.raises(NumericOverflowError):
        engine.run(net, 10, 1e-4, **NUMPY_ONLY)


def test_runaway_spiking_overflows_spike_buffer():
    # zero refractory period and a huge drive: one spike every step,
    # far beyond the refractory-based capacity estimate
    p = NeuronParams(i_tau=5.357142857142857e-11, i_g=5.357142857142857e-11,
                     i_dc=1e-6, t_refr=0.0)
    net = make_arrays([p], [])
    with pytest.raises(SimulationRunError, match="spike buffer"):
        engine.run(net, 20000, 1e-4, **NUMPY_ONLY)


def test_mem_out_empty_without_recording():
    net = make_arrays([NeuronParams(i_dc=0.0)], [])
    res = engine.run(net, 50, 1e-4, **NUMPY_ONLY)
    assert res.mem_out.shape == (0, 0)
    assert res.traces.shape == (50, 1)
    assert res.n_steps == 50
    assert res.dt == 1e-4


def test_min_time_constant_ignores_disabled_adaptation():
    fast_ahp = NeuronParams(i_tau_ahp=5e-11, i_ca=0.0)   # ahp tau ~ 1 ms, unused
    net = make_arrays([fast_ahp], [])
    assert net.min_time_constant() == pytest.approx(0.10714285714285714, rel=1e-9)
    engaged = NeuronParams(i_tau_ahp=5e-11, i_ca=1e-9)
    net2 = make_arrays([engaged], [])
    assert net2.min_time_constant() == pytest.approx(1.0714285714285714e-3, rel=1e-9)


def test_engine_state_copy_is_independent():
    net = make_arrays([NeuronParams()], [])
    st = EngineState.zeros(net)
    cp = st.copy()
    cp.i_mem[0] = 5.0
    assert st.i_mem[0] == 0.0
