"""Pure-numpy network kernel.

Reference implementation of the fixed-step network update.  The numba
kernel in :mod:`cpgpace._engine_nb` mirrors this loop operation for
operation; any semantic change here must be copied there (the test suite
compares the two paths on the same network).

Update order within one step ``k`` (spike effects are delayed by one
step, which makes the result independent of neuron iteration order):

1. every synapse port decays by its exact exponential factor and receives
   the increments earned by last step's presynaptic spikes (or by
   external spikes binned into step ``k``),
2. input currents are accumulated per neuron (DC + signed port sum),
3. neurons integrate one Euler step, refractory neurons hold at reset,
   threshold crossings emit spikes and reset,
4. population activity traces decay and count this step's spikes.

Status codes returned by :func:`run_network`: 0 = completed,
1 = non-finite state, 2 = spike buffer full.
"""

from __future__ import annotations

import numpy as np

STATUS_OK = 0
STATUS_NONFINITE = 1
STATUS_SPIKES_FULL = 2


def run_network(n_steps, dt,
                i_mem, i_ahp, refr,
                tau, gain, i_tau_cur, i_dc,
                pos_fb_gain, pos_fb_ref,
                thr, reset, t_refr,
                ahp_decay, ahp_jump, pop_of,
                i_syn, port_target, port_decay, port_inc, port_sign,
                port_src_kind, port_src_idx,
                ext_counts,
                trace_decay, trace_init,
                traces, spike_step, spike_neuron,
                rec_idx, mem_out):
    """Run the network for ``n_steps``; state arrays are updated in place.

    Returns ``(n_spikes, status, fail_step)``.
    """
    n_neurons = i_mem.shape[0]
    n_pops = trace_decay.shape[0]
    cap = spike_step.shape[0]

    internal = port_src_kind == 0
    internal_src = np.where(internal, port_src_idx, 0)
    external_src = np.where(internal, 0, port_src_idx)
    signed_port = port_sign.astype(np.float64)
    dt_over_tau = dt / tau
    exp_cap = 60.0

    counts_prev = np.zeros(n_pops, dtype=np.int64)
    trace_prev = trace_init.copy()
    n_spikes = 0

    for k in range(n_steps):
        cnt = np.where(internal,
                       counts_prev[internal_src],
                       ext_counts[k][external_src] if ext_counts.shape[1] else 0)
        i_syn *= port_decay
        i_syn += cnt * port_inc

        i_in = i_dc.copy()
        np.add.at(i_in, port_target, signed_port * i_syn)

        i_ahp *= ahp_decay
        in_refr = refr > 0.0

        i_mem_inf = gain * (i_in - i_ahp - i_tau_cur)
        arg = np.minimum(i_mem / pos_fb_ref, exp_cap)
        fb = pos_fb_gain * np.exp(arg)
        stepped = i_mem + dt_over_tau * (i_mem_inf - i_ahp + fb - i_mem)
        stepped = np.maximum(stepped, 0.0)

        i_mem[:] = np.where(in_refr, reset, stepped)
        refr[:] = np.where(in_refr, refr - dt, 0.0)

        if not np.isfinite(i_mem).all():
            return n_spikes, STATUS_NONFINITE, k

        spiking = np.nonzero((i_mem >= thr) & ~in_refr)[0]
        if spiking.size:
            if n_spikes + spiking.size > cap:
                return n_spikes, STATUS_SPIKES_FULL, k
            spike_step[n_spikes:n_spikes + spiking.size] = k
            spike_neuron[n_spikes:n_spikes + spiking.size] = spiking
            n_spikes += spiking.size
            i_mem[spiking] = reset[spiking]
            i_ahp[spiking] += ahp_jump[spiking]
            refr[spiking] = t_refr[spiking]
            counts_prev = np.bincount(pop_of[spiking], minlength=n_pops).astype(np.int64)
        else:
            counts_prev = np.zeros(n_pops, dtype=np.int64)

        trace_prev = trace_prev * trace_decay + counts_prev
        traces[k] = trace_prev

        if rec_idx.shape[0]:
            mem_out[k] = i_mem[rec_idx]

    return n_spikes, STATUS_OK, n_steps
