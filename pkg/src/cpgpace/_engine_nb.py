"""Numba network kernel.

Loop-for-loop mirror of :mod:`cpgpace._engine_np`; see that module for
the step semantics and status codes.  Keep the two in lockstep.
"""

from __future__ import annotations

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NONFINITE = 1
STATUS_SPIKES_FULL = 2


@njit(cache=True)
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
                rec_idx, mem_out):  # pragma: no cover - exercised via engine tests
    n_neurons = i_mem.shape[0]
    n_ports = i_syn.shape[0]
    n_pops = trace_decay.shape[0]
    cap = spike_step.shape[0]
    exp_cap = 60.0

    i_in = np.empty(n_neurons, dtype=np.float64)
    counts_prev = np.zeros(n_pops, dtype=np.int64)
    counts_new = np.zeros(n_pops, dtype=np.int64)
    trace_prev = trace_init.copy()
    n_spikes = 0

    for k in range(n_steps):
        for p in range(n_ports):
            if port_src_kind[p] == 0:
                cnt = counts_prev[port_src_idx[p]]
            else:
                cnt = np.int64(ext_counts[k, port_src_idx[p]])
            i_syn[p] = i_syn[p] * port_decay[p] + cnt * port_inc[p]

        for n in range(n_neurons):
            i_in[n] = i_dc[n]
        for p in range(n_ports):
            i_in[port_target[p]] += port_sign[p] * i_syn[p]

        for n in range(n_pops):
            counts_new[n] = 0

        for n in range(n_neurons):
            i_ahp[n] *= ahp_decay[n]
            if refr[n] > 0.0:
                i_mem[n] = reset[n]
                refr[n] -= dt
                continue
            refr[n] = 0.0
            i_mem_inf = gain[n] * (i_in[n] - i_ahp[n] - i_tau_cur[n])
            arg = i_mem[n] / pos_fb_ref[n]
            if arg > exp_cap:
                arg = exp_cap
            fb = pos_fb_gain[n] * np.exp(arg)
            stepped = i_mem[n] + (dt / tau[n]) * (i_mem_inf - i_ahp[n] + fb - i_mem[n])
            if stepped < 0.0:
                stepped = 0.0
            if not np.isfinite(stepped):
                return n_spikes, STATUS_NONFINITE, k
            i_mem[n] = stepped
            if stepped >= thr[n]:
                if n_spikes >= cap:
                    return n_spikes, STATUS_SPIKES_FULL, k
                spike_step[n_spikes] = k
                spike_neuron[n_spikes] = n
                n_spikes += 1
                i_mem[n] = reset[n]
                i_ahp[n] += ahp_jump[n]
                refr[n] = t_refr[n]
                counts_new[pop_of[n]] += 1

        for q in range(n_pops):
            trace_prev[q] = trace_prev[q] * trace_decay[q] + counts_new[q]
            traces[k, q] = trace_prev[q]
            counts_prev[q] = counts_new[q]

        for r in range(rec_idx.shape[0]):
            mem_out[k, r] = i_mem[rec_idx[r]]

    return n_spikes, STATUS_OK, n_steps
