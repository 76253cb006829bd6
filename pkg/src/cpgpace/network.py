"""Network description, builder and rhythm measurements.

A network is a ring of excitatory/inhibitory oscillators.  Each
oscillator has one excitatory population (all-to-all self-excitation,
weight ``w_a``) and one inhibitory population; the excitatory population
drives the inhibitory one (``w_b``) and is inhibited back by it
(``w_c``).  Consecutive ring members are coupled twice: the source's
excitatory population excites the target's excitatory population
(``w_d``, the phase-delay knob) and the source's inhibitory population
inhibits the target's inhibitory population (``w_e``), which keeps
neighbours out of phase.  Every excitatory population also carries an
inhibitory port fed by an external spike channel (``w_fb``), used for
closed-loop rate modulation; with no external input it is inert.

Weights are bias currents in amperes and always non-negative; whether a
connection excites or inhibits is fixed by its class, not by the sign of
its weight.

All structural parameters pass through the multiplicative device
mismatch model before reaching the engine, so two builds with the same
spec and seed are identical devices, and changing one spec value (say a
DC bias) re-derives that device's effective value through its frozen
mismatch factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as _engine
from .errors import ConfigError, UnstableRhythmError
from .neuron_core import (MismatchModel, NeuronParams, SynapseParams,
                          membrane_time_constants, synapse_increment,
                          synapse_time_constant)
from .population import ActivationEvent, ActivityTrace, detect_activations

MAX_BIAS_CURRENT = 23e-6  # upper bound of the emulated bias generator [A]

# Mismatch spread per parameter.  The synaptic leak spread is calibrated
# so that a batch of 256 nominally identical 30 ms synapses shows a
# 4 ms standard deviation of the realised time constant.
DEFAULT_MISMATCH_CV = {
    "i_tau_syn": 0.13,
    "i_w": 0.10,
    "i_tau": 0.05,
    "i_g": 0.05,
    "i_dc": 0.05,
    "i_tau_ahp": 0.05,
}


@dataclass
class OscillatorSpec:
    """Weights and drive of one excitatory/inhibitory oscillator."""

    osc_id: str
    n_e: int = 16
    n_i: int = 4
    i_dc: float = 1.5e-9    # DC drive into every excitatory neuron [A]
    i_dc_i: float = 0.5e-9  # DC drive into every inhibitory neuron [A]
    w_a: float = 9.0e-9     # excitatory self-coupling weight [A]
    w_b: float = 16.0e-9    # excitatory -> inhibitory weight [A]
    w_c: float = 90.0e-9    # inhibitory -> excitatory weight [A]
    w_d: float = 1.0e-9     # ring excitation onto this oscillator's E population [A]
    w_e: float = 10.0e-9    # ring inhibition onto this oscillator's I population [A]
    w_fb: float = 1.5e-9    # external feedback inhibition onto E [A]
    # Optional per-oscillator overrides of the inhibitory neuron class.
    # ``None`` keeps the shared class value.  A member whose inhibitory
    # population runs tonically (adaptation off, short refractory) can
    # act as a disinhibition gate for its excitatory population.
    i_ca_i: float | None = None
    t_refr_i: float | None = None


def default_e_neuron() -> NeuronParams:
    """Excitatory nominal: 50 ms membrane, 250 ms adaptation recovery.

    The long refractory period limits each neuron to one spike per
    population burst, so the adaptation increment per cycle is exactly
    one jump: that quantisation is what keeps the period jitter well
    under a millisecond.  The adaptation wall is also what makes an
    oscillator immune to ring kicks early in its cycle; without it the
    firing order of a ring never stabilises.
    """
    return NeuronParams(i_tau=1.0714e-12, i_g=1.0714e-12,
                        i_ca=2.0e-9, i_tau_ahp=2.1429e-13, i_g_ahp=2.1429e-13,
                        t_refr=30e-3)


def default_i_neuron() -> NeuronParams:
    """Inhibitory nominal: subthreshold standby, one spike per volley.

    The standby DC parks each inhibitory neuron halfway to threshold, so
    the volley fires when the slow drive ramp covers the remaining gap;
    that makes the volley latency move by tens of milliseconds per
    octave of ``w_b``.  The adaptation jump (plus the shared refractory
    period) outweighs drive left over after a burst, so each neuron
    contributes one spike per volley instead of rebounding, yet has
    fully recovered by the next cycle.
    """
    return NeuronParams(i_tau=1.0714e-12, i_g=1.0714e-12, i_dc=0.5e-9,
                        i_ca=4.0e-9, i_tau_ahp=6.696e-13, i_g_ahp=6.696e-13,
                        t_refr=30e-3)


def default_volley_synapse() -> SynapseParams:
    """Slow (90 ms) synapse nominal for the excitatory-to-inhibitory class.

    The inhibitory volley latency is the integration time of this
    synapse's ramp, so the weight moves the volley by tens of
    milliseconds: that is what makes ``w_b`` a usable fine frequency
    knob rather than a cosmetic one.
    """
    return SynapseParams(i_tau_syn=5.952e-13, i_g_syn=5.952e-13)


def default_recovery_synapse() -> SynapseParams:
    """Slow (120 ms) synapse nominal for the inhibitory-to-excitatory class.

    The recovery inhibition must still be decaying when the adaptation
    wall comes down; that overlap is what gives the volley timing (and
    therefore ``w_b``/``w_c``) its leverage on the cycle period.
    """
    return SynapseParams(i_tau_syn=4.4643e-13, i_g_syn=4.4643e-13)


def default_coupling_synapse() -> SynapseParams:
    """Slow (80 ms) synapse nominal for the ring coupling class.

    The predecessor's burst charges a successor through this ramp, so
    the successor fires where the ramp crosses its remaining threshold
    gap.  The weight dials the anchored activation delay smoothly over
    roughly 3 to 50 ms; longer delays are the disinhibition gate's job
    (see ``cardiac_ring_spec``).
    """
    return SynapseParams(i_tau_syn=6.696e-13, i_g_syn=6.696e-13)


def default_feedback_synapse() -> SynapseParams:
    """Slow (120 ms) synapse nominal for the external feedback port.

    The port integrates a stochastic rate-coded train, and the period
    responds to the integrated current over roughly one synapse time
    constant, so the relative period jitter scales as 1/sqrt(rate * tau).
    A slow leak keeps the beat-to-beat jitter a small fraction of the
    respiratory modulation depth while still tracking rate changes far
    faster than any breathing cycle.
    """
    return SynapseParams(i_tau_syn=4.4643e-13, i_g_syn=4.4643e-13)


@dataclass
class NetworkSpec:
    """Full description of an oscillator ring.

    ``oscillators`` order defines the ring: member ``i`` projects to
    member ``(i + 1) % n``.  A single-member spec builds a standalone
    oscillator with no ring connections.
    """

    oscillators: list[OscillatorSpec]
    neuron_e: NeuronParams = field(default_factory=default_e_neuron)
    neuron_i: NeuronParams = field(default_factory=default_i_neuron)
    synapse: SynapseParams = field(default_factory=SynapseParams)
    synapse_b: SynapseParams = field(default_factory=default_volley_synapse)
    synapse_c: SynapseParams = field(default_factory=default_recovery_synapse)
    synapse_d: SynapseParams = field(default_factory=default_coupling_synapse)
    synapse_fb: SynapseParams = field(default_factory=default_feedback_synapse)
    dt: float = 1.0e-4
    trace_tau: float = 50.0e-3
    e_threshold_fraction: float = 0.5
    i_threshold_fraction: float = 0.25
    mismatch_cv: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MISMATCH_CV))
    mismatch_seed: int = 0
    input_seed: int = 0

    def validate(self) -> None:
        if not self.oscillators:
            raise ConfigError("spec needs at least one oscillator")
        ids = [o.osc_id for o in self.oscillators]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate oscillator ids: {ids}")
        for o in self.oscillators:
            if o.n_e < 1 or o.n_i < 1:
                raise ConfigError(f"{o.osc_id}: population sizes must be >= 1")
            for name in ("i_dc", "i_dc_i", "w_a", "w_b", "w_c", "w_d", "w_e", "w_fb"):
                v = getattr(o, name)
                if not (0.0 <= v <= MAX_BIAS_CURRENT):
                    raise ConfigError(
                        f"{o.osc_id}.{name}={v:g}A outside [0, {MAX_BIAS_CURRENT:g}]A")
            if o.i_ca_i is not None and not (0.0 <= o.i_ca_i <= MAX_BIAS_CURRENT):
                raise ConfigError(f"{o.osc_id}.i_ca_i outside [0, {MAX_BIAS_CURRENT:g}]A")
            if o.t_refr_i is not None and o.t_refr_i <= 0.0:
                raise ConfigError(f"{o.osc_id}.t_refr_i must be positive")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not (0.0 < self.e_threshold_fraction <= 1.0
                and 0.0 < self.i_threshold_fraction <= 1.0):
            raise ConfigError("threshold fractions must lie in (0, 1]")
        for npar, who in ((self.neuron_e, "excitatory"), (self.neuron_i, "inhibitory")):
            if npar.i_reset >= npar.i_spike_thr:
                raise ConfigError(f"{who} reset current must stay below the spike threshold")
            tau, tau_ahp = membrane_time_constants(npar)
            tau_syn = min(synapse_time_constant(s, npar.u_t, npar.kappa)
                          for s in (self.synapse, self.synapse_b,
                                    self.synapse_c, self.synapse_d))
            fastest = min(tau, tau_syn, self.trace_tau)
            if npar.i_ca > 0:
                fastest = min(fastest, tau_ahp)
            if self.dt > fastest / 5.0:
                raise ConfigError(
                    f"dt={self.dt:g}s exceeds a fifth of the fastest {who} "
                    f"time constant {fastest:g}s")


def cardiac_ring_spec(mismatch_seed: int = 0, input_seed: int = 0) -> NetworkSpec:
    """Three-member ring shaped like the sinus-to-ventricle conduction chain.

    The members play different roles and the starting parameters encode
    them:

    * ``RA`` free-runs and paces the ring; its drive sets the rhythm.
    * ``LA`` is biased slightly slow and is fired by RA's burst through
      the ring coupling ramp, which anchors a short activation delay.
      The kick weight ``w_d`` positions the delay.
    * ``V`` cannot fire on its own: a tonic inhibitory population
      (adaptation off, short refractory) holds its excitatory neurons
      down.  LA's inhibitory volley silences that population through
      the ring's inhibitory link, and the suppression then decays with
      the recovery synapse.  V fires where the decay crosses its drive
      margin, so ``i_dc`` positions a delay of one to several hundred
      milliseconds with sub-millisecond jitter.  A plain kick cannot
      anchor delays that long: its ramp has sagged long before the
      target time, and the cycle drifts between kick-driven and
      free-running firing.

    The values below realise a 555 ms rhythm with activation delays of
    about 15, 110 and 430 ms on the default mismatch seed; the tuning
    procedures polish them for other seeds or targets.
    """
    return NetworkSpec(oscillators=[
        OscillatorSpec(osc_id="RA", i_dc=1.4777e-9, w_d=0.0, w_e=0.0),
        OscillatorSpec(osc_id="LA", i_dc=1.4000e-9, w_d=1.4e-9, w_e=0.0),
        OscillatorSpec(osc_id="V", n_i=8, i_dc=2.5640e-9, i_dc_i=2.0e-9,
                       w_c=8.0e-9, w_d=0.0, w_e=2.5e-6,
                       i_ca_i=0.0, t_refr_i=5e-3),
    ], mismatch_seed=mismatch_seed, input_seed=input_seed)


@dataclass(frozen=True)
class PopulationInfo:
    pop_id: str
    osc_id: str
    kind: str              # "E" or "I"
    index: int             # population index used by the engine
    neuron_slice: slice    # global neuron indices of the members
    size: int
    threshold: float       # activation threshold in trace units (spike count)
    trace_tau: float


@dataclass
class Network:
    """A built network: spec plus engine arrays plus bookkeeping."""

    spec: NetworkSpec
    arrays: _engine.NetworkArrays
    populations: list[PopulationInfo]
    fb_channel: dict[str, int]      # osc_id -> external channel index
    synapse_count: int
    port_labels: list[str]          # one human-readable label per engine port

    def population(self, pop_id: str) -> PopulationInfo:
        for p in self.populations:
            if p.pop_id == pop_id:
                return p
        raise KeyError(pop_id)

    @property
    def n_neurons(self) -> int:
        return self.arrays.n_neurons

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        """Engine parameter tensors, primarily for reproducibility checks."""
        a = self.arrays
        return {
            "tau": a.tau, "gain": a.gain, "i_tau_cur": a.i_tau_cur, "i_dc": a.i_dc,
            "pos_fb_gain": a.pos_fb_gain, "pos_fb_ref": a.pos_fb_ref,
            "thr": a.thr, "reset": a.reset, "t_refr": a.t_refr,
            "ahp_decay_rate": a.ahp_decay_rate, "ahp_jump": a.ahp_jump,
            "port_tau": a.port_tau, "port_inc": a.port_inc, "port_sign": a.port_sign,
        }


@dataclass
class SimulationResult:
    """Raster, traces and activation events of one run."""

    dt: float
    duration: float
    spike_times: np.ndarray       # seconds, ordered
    spike_neurons: np.ndarray     # global neuron index per spike
    traces: dict[str, ActivityTrace]
    events: dict[str, list[ActivationEvent]]
    backend: str
    final_state: _engine.EngineState

    def onset_times(self, pop_id: str, after: float = 0.0) -> np.ndarray:
        return np.array([e.time for e in self.events[pop_id] if e.time >= after])


def _mismatched_neuron(nominal: NeuronParams, model: MismatchModel,
                       device_id: int) -> NeuronParams:
    from .neuron_core import apply_mismatch
    return apply_mismatch(nominal, model, device_id)


def build_network(spec: NetworkSpec) -> Network:
    """Instantiate the engine arrays for a spec.

    Deterministic: device identities are positional (neurons first, then
    synapse ports, in spec order), and every device parameter is the spec
    value times that device's frozen mismatch factor.
    """
    spec.validate()
    model = MismatchModel(cv_per_param=spec.mismatch_cv, seed=spec.mismatch_seed)

    n_osc = len(spec.oscillators)
    n_neurons = sum(o.n_e + o.n_i for o in spec.oscillators)

    tau = np.zeros(n_neurons)
    gain = np.zeros(n_neurons)
    i_tau_cur = np.zeros(n_neurons)
    i_dc = np.zeros(n_neurons)
    pos_fb_gain = np.zeros(n_neurons)
    pos_fb_ref = np.zeros(n_neurons)
    thr = np.zeros(n_neurons)
    reset = np.zeros(n_neurons)
    t_refr = np.zeros(n_neurons)
    ahp_decay_rate = np.zeros(n_neurons)
    ahp_jump = np.zeros(n_neurons)
    pop_of = np.zeros(n_neurons, dtype=np.int32)

    populations: list[PopulationInfo] = []
    fb_channel: dict[str, int] = {}
    e_slices: list[slice] = []
    i_slices: list[slice] = []

    idx = 0
    for k, osc in enumerate(spec.oscillators):
        e_sl = slice(idx, idx + osc.n_e)
        i_sl = slice(idx + osc.n_e, idx + osc.n_e + osc.n_i)
        e_slices.append(e_sl)
        i_slices.append(i_sl)
        populations.append(PopulationInfo(
            pop_id=f"{osc.osc_id}.E", osc_id=osc.osc_id, kind="E", index=2 * k,
            neuron_slice=e_sl, size=osc.n_e,
            threshold=spec.e_threshold_fraction * osc.n_e, trace_tau=spec.trace_tau))
        populations.append(PopulationInfo(
            pop_id=f"{osc.osc_id}.I", osc_id=osc.osc_id, kind="I", index=2 * k + 1,
            neuron_slice=i_sl, size=osc.n_i,
            threshold=spec.i_threshold_fraction * osc.n_i, trace_tau=spec.trace_tau))
        fb_channel[osc.osc_id] = k
        idx += osc.n_e + osc.n_i

    for k, osc in enumerate(spec.oscillators):
        for n in range(*e_slices[k].indices(n_neurons)):
            p = _mismatched_neuron(replace(spec.neuron_e, i_dc=osc.i_dc), model, n)
            _fill_neuron(n, p, 2 * k, tau, gain, i_tau_cur, i_dc, pos_fb_gain,
                         pos_fb_ref, thr, reset, t_refr, ahp_decay_rate, ahp_jump, pop_of)
        for n in range(*i_slices[k].indices(n_neurons)):
            base_i = replace(spec.neuron_i, i_dc=osc.i_dc_i)
            if osc.i_ca_i is not None:
                base_i = replace(base_i, i_ca=osc.i_ca_i)
            if osc.t_refr_i is not None:
                base_i = replace(base_i, t_refr=osc.t_refr_i)
            p = _mismatched_neuron(base_i, model, n)
            _fill_neuron(n, p, 2 * k + 1, tau, gain, i_tau_cur, i_dc, pos_fb_gain,
                         pos_fb_ref, thr, reset, t_refr, ahp_decay_rate, ahp_jump, pop_of)

    # Synapse ports.  Order per oscillator: every E neuron's (a, c, d, fb)
    # then every I neuron's (b, e); ring ports are skipped for a
    # standalone oscillator.
    port_target: list[int] = []
    port_tau: list[float] = []
    port_inc: list[float] = []
    port_sign: list[float] = []
    port_src_kind: list[int] = []
    port_src_idx: list[int] = []
    port_labels: list[str] = []
    synapse_count = 0
    device = n_neurons

    def add_port(target: int, weight: float, sign: int, src_kind: int, src_idx: int,
                 n_sources: int, label: str, base: SynapseParams | None = None) -> None:
        nonlocal device, synapse_count
        s = replace(base if base is not None else spec.synapse, i_w=weight, sign=sign)
        from .neuron_core import apply_mismatch
        s = apply_mismatch(s, model, device)
        device += 1
        port_target.append(target)
        port_tau.append(synapse_time_constant(s, spec.neuron_e.u_t, spec.neuron_e.kappa))
        port_inc.append(synapse_increment(s, spec.neuron_e.u_t, spec.neuron_e.kappa))
        port_sign.append(float(sign))
        port_src_kind.append(src_kind)
        port_src_idx.append(src_idx)
        port_labels.append(label)
        synapse_count += n_sources

    for k, osc in enumerate(spec.oscillators):
        prev = (k - 1) % n_osc
        prev_osc = spec.oscillators[prev]
        for n in range(*e_slices[k].indices(n_neurons)):
            add_port(n, osc.w_a, +1, 0, 2 * k, osc.n_e, f"{osc.osc_id}.E{n}.a")
            add_port(n, osc.w_c, -1, 0, 2 * k + 1, osc.n_i, f"{osc.osc_id}.E{n}.c",
                     base=spec.synapse_c)
            if n_osc > 1:
                add_port(n, osc.w_d, +1, 0, 2 * prev, prev_osc.n_e,
                         f"{osc.osc_id}.E{n}.d", base=spec.synapse_d)
            add_port(n, osc.w_fb, -1, 1, k, 1, f"{osc.osc_id}.E{n}.fb",
                     base=spec.synapse_fb)
        for n in range(*i_slices[k].indices(n_neurons)):
            add_port(n, osc.w_b, +1, 0, 2 * k, osc.n_e, f"{osc.osc_id}.I{n}.b",
                     base=spec.synapse_b)
            if n_osc > 1:
                add_port(n, osc.w_e, -1, 0, 2 * prev + 1, prev_osc.n_i,
                         f"{osc.osc_id}.I{n}.e")

    arrays = _engine.NetworkArrays(
        tau=tau, gain=gain, i_tau_cur=i_tau_cur, i_dc=i_dc,
        pos_fb_gain=pos_fb_gain, pos_fb_ref=pos_fb_ref,
        thr=thr, reset=reset, t_refr=t_refr,
        ahp_decay_rate=ahp_decay_rate, ahp_jump=ahp_jump, pop_of=pop_of,
        port_target=np.array(port_target, dtype=np.int32),
        port_tau=np.array(port_tau), port_inc=np.array(port_inc),
        port_sign=np.array(port_sign),
        port_src_kind=np.array(port_src_kind, dtype=np.int8),
        port_src_idx=np.array(port_src_idx, dtype=np.int32),
        trace_tau=np.array([p.trace_tau for p in populations]))

    return Network(spec=spec, arrays=arrays, populations=populations,
                   fb_channel=fb_channel, synapse_count=synapse_count,
                   port_labels=port_labels)


def _fill_neuron(n, p: NeuronParams, pop_index, tau, gain, i_tau_cur, i_dc,
                 pos_fb_gain, pos_fb_ref, thr, reset, t_refr,
                 ahp_decay_rate, ahp_jump, pop_of) -> None:
    t_m, t_ahp = membrane_time_constants(p)
    tau[n] = t_m
    gain[n] = p.i_g / p.i_tau
    i_tau_cur[n] = p.i_tau
    i_dc[n] = p.i_dc
    pos_fb_gain[n] = p.pos_fb_gain
    pos_fb_ref[n] = p.pos_fb_ref
    thr[n] = p.i_spike_thr
    reset[n] = p.i_reset
    t_refr[n] = p.t_refr
    ahp_decay_rate[n] = 1.0 / t_ahp
    ahp_jump[n] = p.i_g_ahp * p.i_ca / p.i_tau_ahp
    pop_of[n] = pop_index


def bin_external_spikes(net: Network, n_steps: int,
                        external: dict[str, np.ndarray] | None) -> np.ndarray:
    """Turn per-oscillator external spike times into per-step counts."""
    n_ch = len(net.fb_channel)
    counts = np.zeros((n_steps, n_ch), dtype=np.uint16)
    if not external:
        return counts
    dt = net.spec.dt
    for osc_id, times in external.items():
        if osc_id not in net.fb_channel:
            raise ConfigError(f"external input for unknown oscillator {osc_id!r}")
        t = np.asarray(times, dtype=np.float64)
        steps = np.floor(t / dt).astype(np.int64)
        keep = (steps >= 0) & (steps < n_steps)
        ch = net.fb_channel[osc_id]
        np.add.at(counts[:, ch], steps[keep], 1)
    return counts


def simulate(net: Network, duration: float,
             external: dict[str, np.ndarray] | None = None,
             state: _engine.EngineState | None = None,
             record_neurons: np.ndarray | None = None,
             backend: str | None = None) -> SimulationResult:
    """Run the network for ``duration`` seconds.

    ``external`` maps oscillator ids to spike-time arrays (seconds) for
    the feedback channels.  The run is deterministic: identical inputs
    give an identical raster, bit for bit, on a fixed backend.
    """
    dt = net.spec.dt
    n_steps = int(round(duration / dt))
    ext = bin_external_spikes(net, n_steps, external)
    res = _engine.run(net.arrays, n_steps, dt, ext_counts=ext, state=state,
                      record_neurons=record_neurons, backend=backend)

    traces: dict[str, ActivityTrace] = {}
    events: dict[str, list[ActivationEvent]] = {}
    for p in net.populations:
        tr = ActivityTrace(pop_id=p.pop_id, dt=dt, values=res.traces[:, p.index].copy())
        traces[p.pop_id] = tr
        events[p.pop_id] = detect_activations(tr, p.threshold, min_gap=p.trace_tau)

    return SimulationResult(dt=dt, duration=n_steps * dt,
                            spike_times=res.spike_step * dt,
                            spike_neurons=res.spike_neuron,
                            traces=traces, events=events,
                            backend=res.backend, final_state=res.final_state)


@dataclass(frozen=True)
class PeriodStats:
    mean: float
    sd: float
    n_cycles: int


def measure_period(result: SimulationResult, pop_id: str,
                   warmup: float = 2.0) -> PeriodStats:
    """Mean and SD of the interval between consecutive activations.

    Raises UnstableRhythmError when fewer than three activations remain
    after the warm-up window.
    """
    t = result.onset_times(pop_id, after=warmup)
    if t.shape[0] < 3:
        raise UnstableRhythmError(
            f"{pop_id}: only {t.shape[0]} activations after t={warmup:g}s")
    d = np.diff(t)
    return PeriodStats(mean=float(d.mean()),
                       sd=float(d.std(ddof=1)) if d.shape[0] > 1 else 0.0,
                       n_cycles=d.shape[0])


@dataclass(frozen=True)
class DelayStats:
    src: str
    dst: str
    mean: float
    sd: float
    samples: np.ndarray


@dataclass(frozen=True)
class PhaseDelayMeasurement:
    delays: dict[tuple[str, str], DelayStats]
    n_cycles: int
    violations: int

    def delay(self, src: str, dst: str) -> DelayStats:
        return self.delays[(src, dst)]


def measure_phase_delays(result: SimulationResult, order: tuple[str, ...],
                         warmup: float = 2.0,
                         max_violation_fraction: float = 0.10) -> PhaseDelayMeasurement:
    """Per-cycle delays between consecutive populations of a firing order.

    A cycle is the window between consecutive activations of the first
    population in ``order``.  A cycle counts as a violation when any
    later population does not activate exactly once inside it or the
    activations are out of order.  Delays of the last pair wrap to the
    next cycle start.

    Raises UnstableRhythmError if more than ``max_violation_fraction`` of
    cycles are violations (or no clean cycle exists).  An order with
    fewer than two populations has no delays to measure.
    """
    if len(order) < 2:
        return PhaseDelayMeasurement(delays={}, n_cycles=0, violations=0)
    onsets = {p: result.onset_times(p, after=warmup) for p in order}
    ref = onsets[order[0]]
    if ref.shape[0] < 3:
        raise UnstableRhythmError(
            f"{order[0]}: only {ref.shape[0]} activations after t={warmup:g}s")

    pair_samples: dict[tuple[str, str], list[float]] = {}
    for a, b in zip(order, order[1:] + (order[0],)):
        pair_samples[(a, b)] = []

    n_cycles = ref.shape[0] - 1
    violations = 0
    for c in range(n_cycles):
        t0, t1 = ref[c], ref[c + 1]
        chain = [t0]
        ok = True
        for p in order[1:]:
            t = onsets[p]
            inside = t[(t >= t0) & (t < t1)]
            if inside.shape[0] != 1:
                ok = False
                break
            chain.append(float(inside[0]))
        if ok:
            chain.append(t1)
            ok = all(x < y for x, y in zip(chain, chain[1:]))
        if not ok:
            violations += 1
            continue
        for i, (a, b) in enumerate(zip(order, order[1:] + (order[0],))):
            pair_samples[(a, b)].append(chain[i + 1] - chain[i])

    clean = n_cycles - violations
    if clean < 2 or violations > max_violation_fraction * n_cycles:
        raise UnstableRhythmError(
            f"rhythm too irregular: {violations}/{n_cycles} cycles violated "
            f"firing order {' -> '.join(order)}")

    delays = {}
    for (a, b), samples in pair_samples.items():
        arr = np.asarray(samples)
        delays[(a, b)] = DelayStats(src=a, dst=b, mean=float(arr.mean()),
                                    sd=float(arr.std(ddof=1)), samples=arr)
    return PhaseDelayMeasurement(delays=delays, n_cycles=n_cycles,
                                 violations=violations)
