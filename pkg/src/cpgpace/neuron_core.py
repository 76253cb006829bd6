"""Current-mode adaptive-exponential neuron and first-order synapse primitives.

The unit model follows a translinear (subthreshold current-mode) circuit:
all state variables are currents in amperes, capacitances are farads and
times are seconds.  Time constants are not free parameters; they derive
from capacitance, thermal voltage and a leak bias current, which is also
how the device-mismatch emulation enters: perturbing a bias current moves
the corresponding time constant.

The functions here are scalar, single-step reference implementations used
for unit tests and documentation.  Network simulation uses the vectorised
engine (:mod:`cpgpace.engine`), which must stay numerically equivalent to
these updates; the test suite checks that equivalence.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .errors import NumericOverflowError, StabilityError

# Thermal voltage and subthreshold slope factor of the emulated process.
# Both only ever appear in the ratio c * u_t / (kappa * i_bias), so their
# exact values shift the bias-current scale but not the dynamics.
DEFAULT_U_T = 0.025
DEFAULT_KAPPA = 0.7

# Exponent clamp for the positive-feedback term.  exp(60) ~ 1e26 is far
# beyond any spike threshold, so clamping only affects trajectories that
# are already past threshold within the same step.
_EXP_ARG_MAX = 60.0

# Floor for mismatch factors: a sampled device never loses more than
# 95 % of its nominal bias.
_MISMATCH_FLOOR = 0.05


@dataclass
class NeuronParams:
    """Bias currents and circuit constants of one neuron.

    Defaults give a leak time constant of 50 ms and an adaptation branch
    that is effectively switched off (``i_ca`` = 0).
    """

    c_mem: float = 1.5e-12        # membrane capacitance [F]
    c_p: float = 1.5e-12          # adaptation capacitance [F]
    i_tau: float = 5.0e-13        # leak bias [A]; sets the membrane time constant
    i_g: float = 5.0e-13          # gain bias [A]
    i_tau_ahp: float = 5.0e-13    # adaptation leak bias [A]
    i_g_ahp: float = 5.0e-13      # adaptation gain bias [A]
    i_ca: float = 0.0             # adaptation jump bias [A]; 0 disables adaptation
    i_dc: float = 0.0             # constant input current [A]
    i_spike_thr: float = 1.0e-9   # spike detection level on the membrane current [A]
    i_reset: float = 0.0          # membrane current after a spike [A]
    t_refr: float = 2.0e-3        # absolute refractory period [s]
    pos_fb_gain: float = 0.0      # positive-feedback amplitude [A]; 0 gives a plain leaky integrator
    pos_fb_ref: float = 1.0e-10   # positive-feedback reference current [A]
    u_t: float = DEFAULT_U_T      # thermal voltage [V]
    kappa: float = DEFAULT_KAPPA  # subthreshold slope factor


@dataclass
class SynapseParams:
    """Bias currents of one first-order (diff-pair integrator) synapse.

    Defaults give a 30 ms synaptic time constant.  ``sign`` is +1 for an
    excitatory contribution and -1 for an inhibitory one; the synapse
    state itself is always a non-negative current.
    """

    c_syn: float = 1.5e-12        # synapse capacitance [F]
    i_tau_syn: float = 1.786e-12  # synapse leak bias [A]
    i_g_syn: float = 1.786e-12    # synapse gain bias [A]
    i_w: float = 1.0e-9           # weight bias [A]
    t_pulse: float = 1.0e-3       # presynaptic pulse width [s]
    sign: int = 1


@dataclass
class NeuronState:
    """Dynamic state of one neuron plus its incoming synapse ports.

    ``i_syn_by_port`` holds one first-order synapse current per named
    input port (e.g. one port per presynaptic population).
    """

    i_mem: float = 0.0
    i_ahp: float = 0.0
    refr_remaining: float = 0.0
    i_syn_by_port: dict[str, float] = field(default_factory=dict)


@dataclass
class MismatchModel:
    """Multiplicative device-mismatch description.

    Each parameter named in ``cv_per_param`` is scaled by
    ``max(floor, 1 + cv * z)`` where ``z`` is a standard normal truncated
    to ``[-clip_sigma, +clip_sigma]``.  The draw is a pure function of
    ``(seed, device_id, parameter name)``: re-running a script with the
    same seed reproduces every virtual device exactly.
    """

    cv_per_param: Mapping[str, float]
    seed: int = 0
    clip_sigma: float = 3.0

    def factor(self, param: str, device_id: int) -> float:
        """Mismatch factor for one parameter of one device (1.0 if unlisted)."""
        cv = self.cv_per_param.get(param, 0.0)
        if cv == 0.0:
            return 1.0
        ss = np.random.SeedSequence([self.seed, device_id, zlib.crc32(param.encode())])
        rng = np.random.Generator(np.random.PCG64(ss))
        while True:
            z = rng.standard_normal()
            if abs(z) <= self.clip_sigma:
                break
        return max(_MISMATCH_FLOOR, 1.0 + cv * z)


def membrane_time_constants(p: NeuronParams) -> tuple[float, float]:
    """Leak and adaptation time constants (tau, tau_ahp) in seconds."""
    tau = p.c_mem * p.u_t / (p.kappa * p.i_tau)
    tau_ahp = p.c_p * p.u_t / (p.kappa * p.i_tau_ahp)
    return tau, tau_ahp


def synapse_time_constant(s: SynapseParams, u_t: float = DEFAULT_U_T,
                          kappa: float = DEFAULT_KAPPA) -> float:
    """Synaptic time constant in seconds."""
    return s.c_syn * u_t / (kappa * s.i_tau_syn)


def derive_time_constants(p: NeuronParams, s: SynapseParams) -> tuple[float, float, float]:
    """All three time constants (tau, tau_ahp, tau_syn) of a neuron/synapse pair."""
    tau, tau_ahp = membrane_time_constants(p)
    return tau, tau_ahp, synapse_time_constant(s, p.u_t, p.kappa)


def synapse_increment(s: SynapseParams, u_t: float = DEFAULT_U_T,
                      kappa: float = DEFAULT_KAPPA) -> float:
    """Synapse current added per presynaptic spike.

    A presynaptic spike drives the synapse with its steady-state target
    ``i_g_syn * i_w / i_tau_syn`` for a short pulse ``t_pulse``; for
    pulses much shorter than the time constant this integrates to the
    target scaled by ``t_pulse / tau_syn``.
    """
    tau_syn = synapse_time_constant(s, u_t, kappa)
    return (s.i_g_syn * s.i_w / s.i_tau_syn) * (s.t_pulse / tau_syn)


def step_synapse(i_syn: float, s: SynapseParams, n_spikes: int, dt: float,
                 u_t: float = DEFAULT_U_T, kappa: float = DEFAULT_KAPPA) -> float:
    """Advance one synapse current by ``dt``.

    Uses the closed-form exponential decay (the synapse ODE is linear
    between spikes) plus ``n_spikes`` discrete increments applied at the
    end of the step.

    Raises:
        StabilityError: if ``dt`` exceeds a fifth of the synaptic time
            constant.  The exact decay itself would tolerate any step,
            but lumping spikes at step boundaries does not.
    """
    tau_syn = synapse_time_constant(s, u_t, kappa)
    if dt > tau_syn / 5.0:
        raise StabilityError(
            f"dt={dt:g}s too large for synaptic time constant {tau_syn:g}s")
    out = i_syn * np.exp(-dt / tau_syn)
    if n_spikes:
        out += n_spikes * synapse_increment(s, u_t, kappa)
    return out


def step_neuron(state: NeuronState, p: NeuronParams, dt: float,
                port_sign: Mapping[str, int] | None = None) -> tuple[NeuronState, bool]:
    """Advance one neuron by ``dt`` and report whether it spiked.

    The membrane current follows a forward-Euler step of

        tau * dI/dt = gain*(I_in - I_ahp - i_tau) - I_ahp + fb(I) - I

    with ``gain = i_g / i_tau`` and an exponential positive-feedback term
    ``fb(I) = pos_fb_gain * exp(I / pos_fb_ref)``.  The adaptation
    current decays with its own closed-form exponential and receives a
    fixed increment on every spike.  The membrane current is clamped to
    be non-negative and is held at ``i_reset`` while refractory.

    ``port_sign`` maps port names to +1/-1; ports not listed count as
    excitatory.  Synapse currents themselves are advanced separately by
    :func:`step_synapse`; this function only sums them into the input.

    Returns the updated state (a new object) and the spike flag.
    """
    tau, tau_ahp = membrane_time_constants(p)
    if dt > min(tau, tau_ahp) / 5.0:
        raise StabilityError(
            f"dt={dt:g}s too large for time constants tau={tau:g}s, tau_ahp={tau_ahp:g}s")

    i_in = p.i_dc
    for port, value in state.i_syn_by_port.items():
        sign = 1 if port_sign is None else port_sign.get(port, 1)
        i_in += sign * value

    i_ahp = state.i_ahp * np.exp(-dt / tau_ahp)

    spiked = False
    if state.refr_remaining > 0.0:
        i_mem = p.i_reset
        refr = state.refr_remaining - dt
    else:
        gain = p.i_g / p.i_tau
        i_mem_inf = gain * (i_in - i_ahp - p.i_tau)
        arg = min(state.i_mem / p.pos_fb_ref, _EXP_ARG_MAX)
        fb = p.pos_fb_gain * np.exp(arg)
        i_mem = state.i_mem + (dt / tau) * (i_mem_inf - i_ahp + fb - state.i_mem)
        i_mem = max(i_mem, 0.0)
        if not np.isfinite(i_mem):
            raise NumericOverflowError("membrane current became non-finite")
        refr = 0.0
        if i_mem >= p.i_spike_thr:
            spiked = True
            i_mem = p.i_reset
            i_ahp += p.i_g_ahp * p.i_ca / p.i_tau_ahp
            refr = p.t_refr

    new = NeuronState(i_mem=i_mem, i_ahp=i_ahp, refr_remaining=max(refr, 0.0),
                      i_syn_by_port=dict(state.i_syn_by_port))
    return new, spiked


def apply_mismatch(params, model: MismatchModel, device_id: int):
    """Return a copy of a params dataclass with mismatch factors applied.

    Every field of ``params`` whose name appears in ``model.cv_per_param``
    is multiplied by that device's factor; other fields pass through.
    """
    changes = {}
    for f in fields(params):
        if f.name in model.cv_per_param:
            value = getattr(params, f.name)
            changes[f.name] = value * model.factor(f.name, device_id)
    return replace(params, **changes) if changes else replace(params)
