"""Rhythm tuning: iterative frequency/phase bring-up and explicit period maps.

The tuner treats a network the way one brings up an analog board with a
computer in the loop: every probe rebuilds the network (same mismatch
seed, hence the same virtual device), runs it for a fixed window and
reads the rhythm off the population traces.  All procedures are
deterministic; two runs from the same spec produce identical reports.

Frequency is tuned per oscillator in isolation in two stages: the DC
drive walks the period to within a coarse 50 ms window by bisection on
the monotone period-to-current relation, then the volley weight ``w_b``
trims the residual.  Activation delays are tuned in the coupled ring
afterwards, with the mechanism picked per member:

* a delay positioned by a disinhibition gate (tonic inhibitory
  population, ``i_ca_i == 0``) moves through the gate member's DC
  drive, again by bisection;
* a delay anchored by a ring kick moves through the kick weight ``w_d``
  in counteracting pairs: every accepted step raises one coupling
  weight and lowers another by the same relative amount, so the phase
  budget shifts without detuning the global rhythm.  Steps that move
  the measured period or break the firing order are reverted.

A final in-ring trim of the pacing member's drive absorbs the small
period shift the coupled context adds, and the delay/trim stages repeat
until the measured rhythm meets all targets.

The explicit alternative trades accuracy for speed: probe one
oscillator over a DC grid, fit the current-versus-period relation as a
sum of two decaying exponentials, and set drives straight from the fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import least_squares

from .errors import (CalibrationError, ConfigError, ConvergenceError,
                     UnstableRhythmError)
from .network import (MAX_BIAS_CURRENT, NetworkSpec, OscillatorSpec,
                      build_network, measure_period, measure_phase_delays,
                      simulate)

COARSE_PERIOD_TOL = 50e-3   # fixed tolerance of the DC coarse stage [s]
PROBE_DURATION = 16.0       # simulated seconds per tuning probe
PROBE_WARMUP = 6.0          # seconds discarded before measuring

# Free-run probes read the period off the last few cycles only.  Some
# device realizations approach their limit cycle through a slow burst
# recruitment that drags the period upward by tens of milliseconds over
# the first ten-plus cycles; a whole-window mean would fold that
# transient into the estimate.
_TAIL_INTERVALS = 8

# A kick-anchored member is tuned to free-run slower than the ring by
# this fraction (capped in absolute terms), so the predecessor's kick
# always arrives before the member would fire on its own.  Isolation
# periods shift by about a percent once the member sits in the ring
# (different port devices draw different mismatch), so 3% leaves the
# anchor a safe lead, and even with both members at the far edges of
# the frequency tolerance the spread stays inside the 5%
# common-frequency precondition of the phase stage.
SLOW_BIAS_FRACTION = 0.03
MAX_SLOW_BIAS = 30e-3

_BRACKET_GROW = 1.35
_MAX_EXPANSIONS = 12


def _is_gated(osc: OscillatorSpec) -> bool:
    """A member whose inhibitory population is tonic acts as a gate."""
    return osc.i_ca_i is not None and osc.i_ca_i == 0.0


@dataclass(frozen=True)
class TuningTarget:
    """Desired rhythm: global period plus pairwise activation delays.

    ``delays`` maps ordered population pairs (``("RA.E", "LA.E")``) to
    the desired onset delay in seconds.  The pairs must chain into a
    single activation order; a closed chain (last pair wrapping back to
    the first population) is allowed, in which case the wrap delay is
    implied by the others and only verified.
    """

    period: float
    delays: dict[tuple[str, str], float] = field(default_factory=dict)
    period_tol: float = 5e-3
    delay_tol: float = 5e-3
    max_iters: int = 40

    def validate(self) -> None:
        if self.period <= 0:
            raise ConfigError("target period must be positive")
        if self.period_tol <= 0 or self.delay_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        for pair, d in self.delays.items():
            if d <= 0:
                raise ConfigError(f"delay target {pair} must be positive")
        order = self.activation_order()
        total = sum(self.delays.values())
        if self._is_closed():
            if abs(total - self.period) > self.period_tol + len(order) * self.delay_tol:
                raise ConfigError(
                    f"closed delay chain sums to {total:g}s, "
                    f"inconsistent with period {self.period:g}s")
        elif total >= self.period:
            raise ConfigError(
                f"delay targets sum to {total:g}s, not below period {self.period:g}s")

    def _is_closed(self) -> bool:
        if not self.delays:
            return False
        srcs = {a for a, _ in self.delays}
        dsts = {b for _, b in self.delays}
        return srcs == dsts

    def activation_order(self) -> tuple[str, ...]:
        """The population firing order implied by the delay pairs."""
        if not self.delays:
            return ()
        nxt: dict[str, str] = {}
        for a, b in self.delays:
            if a in nxt:
                raise ConfigError(f"delay targets branch at {a!r}")
            nxt[a] = b
        dsts = set(nxt.values())
        starts = [a for a in nxt if a not in dsts]
        if len(starts) > 1:
            raise ConfigError("delay targets must form a single chain")
        start = starts[0] if starts else next(iter(nxt))
        chain = [start]
        cur = start
        while cur in nxt and nxt[cur] != start:
            cur = nxt[cur]
            if cur in chain:
                raise ConfigError("delay targets must not revisit a population")
            chain.append(cur)
        if len(chain) != len(set(chain)) or len(nxt) not in (len(chain) - 1, len(chain)):
            raise ConfigError("delay targets must form a single chain")
        return tuple(chain)

    def targeted_pairs(self) -> list[tuple[str, str]]:
        """Delay pairs the tuner actively adjusts (the wrap pair is implied)."""
        order = self.activation_order()
        open_pairs = list(zip(order, order[1:]))
        return [p for p in open_pairs if p in self.delays]


def cardiac_targets(period: float = 0.555,
                    d_first: float = 0.015,
                    d_second: float = 0.110) -> TuningTarget:
    """Targets matching the three-member conduction-chain preset."""
    return TuningTarget(period=period,
                        delays={("RA.E", "LA.E"): d_first,
                                ("LA.E", "V.E"): d_second})


@dataclass(frozen=True)
class TuneStep:
    """One probe of the iteration trace."""

    stage: str              # "dc", "w_b", "gate", "phase" or "trim"
    osc_id: str
    parameter: str
    value: float            # parameter value probed [A]
    period: float = math.nan
    delay: float = math.nan
    partner: str = ""       # counteracting partner as "OSC.param", if any
    partner_value: float = math.nan
    accepted: bool = True


@dataclass
class TuningReport:
    """Outcome of a tuning procedure plus its full iteration trace."""

    converged: bool
    period_target: float
    period: float
    period_sd: float
    delays: dict[tuple[str, str], tuple[float, float]]  # pair -> (mean, sd)
    violations: int
    final_bias: dict[str, dict[str, float]]             # osc_id -> parameter -> value
    steps: list[TuneStep] = field(default_factory=list)

    def write_csv(self, path: str) -> None:
        """Summary block (comment lines) followed by the iteration log."""
        def num(x: float) -> str:
            return "" if math.isnan(x) else f"{x:.9g}"

        lines = [
            f"# converged,{str(self.converged).lower()}",
            f"# period_target_s,{self.period_target:.9g}",
            f"# period_s,{num(self.period)}",
            f"# period_sd_s,{num(self.period_sd)}",
            f"# violations,{self.violations}",
        ]
        for (a, b), (m, sd) in self.delays.items():
            lines.append(f"# delay_s,{a}->{b},{m:.9g},{sd:.9g}")
        for osc_id, table in self.final_bias.items():
            for name, value in table.items():
                lines.append(f"# bias_a,{osc_id},{name},{value:.9g}")
        lines.append("stage,osc_id,parameter,value_a,period_s,delay_s,"
                     "partner,partner_value_a,accepted")
        for s in self.steps:
            lines.append(",".join([
                s.stage, s.osc_id, s.parameter, f"{s.value:.9g}",
                num(s.period), num(s.delay), s.partner,
                num(s.partner_value), str(s.accepted).lower(),
            ]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _bias_table(spec: NetworkSpec) -> dict[str, dict[str, float]]:
    names = ("i_dc", "i_dc_i", "w_a", "w_b", "w_c", "w_d", "w_e", "w_fb")
    return {o.osc_id: {n: getattr(o, n) for n in names} for o in spec.oscillators}


def _with_osc(spec: NetworkSpec, osc: OscillatorSpec) -> NetworkSpec:
    oscs = [osc if o.osc_id == osc.osc_id else o for o in spec.oscillators]
    return replace(spec, oscillators=oscs)


def _isolated(spec: NetworkSpec, osc: OscillatorSpec) -> NetworkSpec:
    return replace(spec, oscillators=[replace(osc)])


def _detached(spec: NetworkSpec, osc: OscillatorSpec) -> NetworkSpec:
    """The full network with one member's incoming couplings silenced.

    Zeroing the kick and ring-inhibition weights detaches the member
    without changing the build's device layout (the ports stay, inert),
    so the measurement reads the member's own free-running rhythm under
    exactly the mismatch realisation it has in the deployed ring.  A
    standalone build cannot do that: it renumbers the port devices and
    shifts the period by around a percent.
    """
    return _with_osc(spec, replace(osc, w_d=0.0, w_e=0.0))


def _fail(message: str, report: TuningReport) -> None:
    err = ConvergenceError(message)
    err.report = report
    raise err


def prepare_defaults(spec: NetworkSpec) -> NetworkSpec:
    """Reset everything but the per-oscillator drives and weights.

    Components the rhythm does not use are switched off (the class
    defaults carry no positive feedback), and dispensable shared
    parameters (time constants, gains, thresholds, step size) return to
    their nominals, so tuning moves only the DC drives and the weight
    currents.  Oscillator entries, mismatch model and seeds are kept.
    Idempotent.
    """
    return NetworkSpec(oscillators=[replace(o) for o in spec.oscillators],
                       mismatch_cv=dict(spec.mismatch_cv),
                       mismatch_seed=spec.mismatch_seed,
                       input_seed=spec.input_seed)


# ---------------------------------------------------------------------------
# measurement probes


def _tail_stats(onsets: np.ndarray) -> tuple[float, float, float]:
    """(mean, sd, drift) over the last few onset intervals."""
    d = np.diff(onsets[-(_TAIL_INTERVALS + 1):])
    sd = float(d.std(ddof=1)) if d.shape[0] > 1 else 0.0
    return float(d.mean()), sd, float(abs(d[-1] - d[0]))


def _rhythm_period(spec: NetworkSpec, pop_id: str) -> tuple[float, float]:
    """(mean period, sd) of one population's settled activation rhythm.

    The estimate comes from the tail of the run, and a tail that is
    still drifting (the slow recruitment transient has not finished)
    triggers one retry over a doubled window.  Sentinels classify the
    unusable cases so bisection can keep its bracket: ``inf`` for a
    quiet population (too little drive) and for a rhythm that never
    settles onto a single period (a parameter pushed past its stable
    branch), ``0`` for runaway firing with no discrete activations.
    """
    net = build_network(spec)
    sd = 0.0
    for duration in (PROBE_DURATION, 2 * PROBE_DURATION):
        res = simulate(net, duration)
        onsets = res.onset_times(pop_id)
        if onsets.shape[0] >= 4:
            mean, sd, drift = _tail_stats(onsets)
            if sd <= max(1e-3, 0.004 * mean) and drift <= max(1.5e-3, 0.0075 * mean):
                return mean, sd
            continue
        info = net.population(pop_id)
        sl = info.neuron_slice
        in_pop = (res.spike_neurons >= sl.start) & (res.spike_neurons < sl.stop)
        late = res.spike_times >= PROBE_WARMUP
        rate = float(np.sum(in_pop & late)) / (duration - PROBE_WARMUP) / info.size
        return (0.0, 0.0) if rate > 3.0 else (math.inf, 0.0)
    return math.inf, sd


def _ring_probe(spec: NetworkSpec, order: tuple[str, ...]):
    """One coupled run: (result, delay measurement or None)."""
    net = build_network(spec)
    res = simulate(net, PROBE_DURATION)
    try:
        m = measure_phase_delays(res, order, warmup=PROBE_WARMUP)
    except UnstableRhythmError:
        m = None
    return res, m


def _gate_delay(spec: NetworkSpec, order: tuple[str, ...],
                pair: tuple[str, str]) -> tuple[float, float]:
    """(mean, sd) of one ring delay, with bracket sentinels.

    A member that fires clearly more often than the reference
    population free-runs past its gate and reads as zero delay (too
    much drive).  Anything else that defeats the measurement (silent,
    or crossing only in some cycles) reads as infinite (too little).
    """
    res, m = _ring_probe(spec, order)
    if m is not None:
        d = m.delay(*pair)
        return d.mean, d.sd
    ref = res.onset_times(order[0], after=PROBE_WARMUP).shape[0]
    dst = res.onset_times(pair[1], after=PROBE_WARMUP).shape[0]
    if dst >= max(3, int(1.5 * ref)):
        return 0.0, 0.0
    return math.inf, 0.0


# ---------------------------------------------------------------------------
# bisection on a monotone response


@dataclass(frozen=True)
class _Probe:
    x: float
    y: float
    sd: float


def _bisect_decreasing(measure: Callable[[float], tuple[float, float]],
                       x0: float, target: float, tol: float,
                       lo_limit: float, hi_limit: float,
                       max_iters: int) -> tuple[_Probe, list[_Probe], bool, str]:
    """Drive a non-increasing response to ``target`` within ``tol``.

    ``measure(x)`` returns (value, sd); ``inf``/``0`` sentinels stand
    for "far too slow"/"far too fast" and keep the bracket usable.
    Returns the best probe, the full probe list, a convergence flag and
    a note explaining a failure.  The bracket midpoint is geometric;
    bias currents act on the rhythm through exponentials, so equal
    ratios, not equal offsets, give balanced splits.
    """
    probes: list[_Probe] = []

    def m(x: float) -> _Probe:
        y, sd = measure(x)
        p = _Probe(x, y, sd)
        probes.append(p)
        return p

    p0 = m(min(max(x0, lo_limit), hi_limit))
    if abs(p0.y - target) <= tol:
        return p0, probes, True, ""

    lo = p0 if p0.y > target else None   # smaller x, longer response
    hi = p0 if p0.y <= target else None
    going_up = hi is None
    x = p0.x
    for _ in range(_MAX_EXPANSIONS):
        if lo is not None and hi is not None:
            break
        at_edge = x >= hi_limit if going_up else x <= lo_limit
        if at_edge:
            break
        x = min(x * _BRACKET_GROW, hi_limit) if going_up else max(x / _BRACKET_GROW, lo_limit)
        p = m(x)
        if abs(p.y - target) <= tol:
            return p, probes, True, ""
        if p.y > target:
            lo = p
        else:
            hi = p
    if lo is None or hi is None:
        side = "above" if lo is None else "below"
        best = min(probes, key=lambda q: abs(q.y - target))
        return best, probes, False, (
            f"no bracket: target {target:g}s stays {side} the response "
            f"over [{lo_limit:g}, {hi_limit:g}]")

    best = min((lo, hi), key=lambda q: abs(q.y - target))
    for _ in range(max_iters):
        if abs(best.y - target) <= tol:
            return best, probes, True, ""
        xm = math.sqrt(lo.x * hi.x)
        if not (lo.x < xm < hi.x):
            return best, probes, False, "bracket exhausted numerically"
        pm = m(xm)
        if pm.y > target:
            lo = pm
        else:
            hi = pm
        if abs(pm.y - target) < abs(best.y - target):
            best = pm
    if abs(best.y - target) <= tol:
        return best, probes, True, ""
    return best, probes, False, f"no convergence within {max_iters} iterations"


# ---------------------------------------------------------------------------
# iterative tuning procedures


def _frequency_stages(spec_for: Callable[[OscillatorSpec], NetworkSpec],
                      pop: str, osc: OscillatorSpec, target: TuningTarget
                      ) -> tuple[OscillatorSpec, list[TuneStep], float, float, str]:
    """Shared staged frequency logic; returns a failure note or ""."""
    current = replace(osc)
    steps: list[TuneStep] = []

    def measure_with(param: str) -> Callable[[float], tuple[float, float]]:
        def measure(x: float) -> tuple[float, float]:
            return _rhythm_period(spec_for(replace(current, **{param: x})), pop)
        return measure

    best, probes, ok, note = _bisect_decreasing(
        measure_with("i_dc"), current.i_dc, target.period, COARSE_PERIOD_TOL,
        1e-12, MAX_BIAS_CURRENT, target.max_iters)
    steps += [TuneStep("dc", osc.osc_id, "i_dc", p.x, period=p.y) for p in probes]
    current = replace(current, i_dc=best.x)
    period, sd = best.y, best.sd
    if not ok:
        return current, steps, period, sd, f"coarse frequency stage failed: {note}"

    if abs(period - target.period) > target.period_tol:
        # The bracket stays on the volley branch: far below nominal the
        # inhibitory volley stops entirely (discontinuous period, and
        # the ring couplings lose their volley source), far above it
        # the volley collides with the burst and the rhythm frays.
        # The branch spans only a few milliseconds, so when the
        # residual exceeds it the stage leaves w_b at nominal instead
        # of parking it on a branch edge.
        best, probes, ok, note = _bisect_decreasing(
            measure_with("w_b"), current.w_b, target.period, target.period_tol,
            current.w_b * 0.6, min(current.w_b * 4.0, MAX_BIAS_CURRENT),
            target.max_iters)
        steps += [TuneStep("w_b", osc.osc_id, "w_b", p.x, period=p.y) for p in probes]
        if ok:
            current = replace(current, w_b=best.x)
            period, sd = best.y, best.sd

    if abs(period - target.period) > target.period_tol:
        best, probes, ok, note = _bisect_decreasing(
            measure_with("i_dc"), current.i_dc, target.period, target.period_tol,
            current.i_dc * 0.5, min(current.i_dc * 2.0, MAX_BIAS_CURRENT),
            target.max_iters)
        steps += [TuneStep("dc_fine", osc.osc_id, "i_dc", p.x, period=p.y)
                  for p in probes]
        current = replace(current, i_dc=best.x)
        period, sd = best.y, best.sd
        if not ok:
            return current, steps, period, sd, f"fine frequency stage failed: {note}"

    return current, steps, period, sd, ""


def tune_oscillator_frequency(osc: OscillatorSpec, target: TuningTarget,
                              base: NetworkSpec | None = None
                              ) -> tuple[OscillatorSpec, TuningReport]:
    """Staged frequency tuning of one oscillator in isolation.

    Stage one bisects the DC drive until the free-running period is
    within the coarse 50 ms window.  Stage two bisects the volley
    weight ``w_b`` toward ``target.period_tol``; the volley only nudges
    the recovery inhibition, so its leverage spans a few milliseconds
    and the stage moves w_b only when that is enough.  A residual
    beyond the tolerance is closed by a final fine bisection of the DC
    drive.  Stages that land inside the tolerance skip the rest.
    ``base`` supplies the shared classes and seeds (its oscillator list
    is ignored).

    Raises ConvergenceError, with the partial report attached as
    ``err.report``, when the target is out of reach.
    """
    target.validate()
    base = base if base is not None else NetworkSpec(oscillators=[osc])
    current, steps, period, sd, failure = _frequency_stages(
        lambda o: _isolated(base, o), f"{osc.osc_id}.E", osc, target)
    report = TuningReport(converged=not failure, period_target=target.period,
                          period=period, period_sd=sd, delays={}, violations=0,
                          final_bias=_bias_table(_isolated(base, current)),
                          steps=steps)
    if failure:
        _fail(f"{osc.osc_id}: {failure}", report)
    return current, report


def tune_gate_delay(spec: NetworkSpec, pair: tuple[str, str],
                    target: TuningTarget) -> tuple[NetworkSpec, TuningReport]:
    """Position a disinhibition-gated delay through the gate member's drive.

    The gated member fires where the decaying suppression crosses its
    drive margin, so the delay falls monotonically with ``i_dc`` and
    bisection applies.  Only the pair's two populations enter the
    measurement, so the rest of the ring cannot mask the bracket.
    """
    target.validate()
    if pair not in target.delays:
        raise ConfigError(f"no delay target for pair {pair}")
    osc_id = pair[1].split(".")[0]
    by_id = {o.osc_id: o for o in spec.oscillators}
    if osc_id not in by_id:
        raise ConfigError(f"unknown oscillator {osc_id!r}")
    osc = by_id[osc_id]
    if not _is_gated(osc):
        raise ConfigError(
            f"{osc_id} has no tonic inhibitory population; its delay is "
            f"kick-anchored and belongs to tune_phase_shifts")
    order = (pair[0], pair[1])
    want = target.delays[pair]

    def measure(x: float) -> tuple[float, float]:
        return _gate_delay(_with_osc(spec, replace(osc, i_dc=x)), order, pair)

    best, probes, ok, note = _bisect_decreasing(
        measure, osc.i_dc, want, target.delay_tol,
        osc.i_dc * 0.4, min(osc.i_dc * 2.5, MAX_BIAS_CURRENT), target.max_iters)
    steps = [TuneStep("gate", osc_id, "i_dc", p.x, delay=p.y) for p in probes]
    tuned = _with_osc(spec, replace(osc, i_dc=best.x))
    rep = TuningReport(converged=ok, period_target=target.period,
                       period=math.nan, period_sd=math.nan,
                       delays={pair: (best.y, best.sd)}, violations=0,
                       final_bias=_bias_table(tuned), steps=steps)
    if not ok:
        _fail(f"{osc_id}: gate delay stage failed: {note}", rep)
    return tuned, rep


def _partner_weight(spec: NetworkSpec, knob_osc: str,
                    need_decrease: bool) -> tuple[str, str]:
    """Pick the counteracting partner for a kick-weight step.

    Candidates are coupling weights near the knob, preferring the
    inhibitory arm of the knob member's outgoing link (stored on the
    successor).  A partner that must shrink needs a positive value; one
    that must grow needs headroom.
    """
    ids = [o.osc_id for o in spec.oscillators]
    by_id = {o.osc_id: o for o in spec.oscillators}
    succ = ids[(ids.index(knob_osc) + 1) % len(ids)]
    candidates = [(succ, "w_e"), (succ, "w_d"), (knob_osc, "w_e")]
    for osc_id, param in candidates:
        if osc_id == knob_osc and param == "w_d":
            continue
        v = getattr(by_id[osc_id], param)
        if need_decrease and v > 0.0:
            return osc_id, param
        if not need_decrease and v < MAX_BIAS_CURRENT:
            return osc_id, param
    raise ConfigError(
        f"no counteracting partner weight available for {knob_osc}.w_d")


def tune_phase_shifts(spec: NetworkSpec,
                      target: TuningTarget) -> tuple[NetworkSpec, TuningReport]:
    """Walk kick-anchored delays to target with counteracting weight pairs.

    Precondition: the free-running members must already agree on the
    frequency (isolated periods within 5%), otherwise the ring has no
    stable order to shift and the procedure refuses to start.  Each
    iteration adjusts the worst pair: the kick weight of the delayed
    member moves by a relative step (2% initially, halved whenever the
    error changes sign) and the partner weight moves by the same
    relative amount the other way.  A step that detunes the measured
    period beyond ``period_tol`` + 20 ms or breaks the firing order is
    reverted and the step size halved.  Delays of gated members are
    left to ``tune_gate_delay``.
    """
    target.validate()
    if len(spec.oscillators) < 2:
        raise ConfigError("a single oscillator has no phase shifts to tune")
    by_id = {o.osc_id: o for o in spec.oscillators}
    order = target.activation_order()
    for p in order:
        if p.split(".")[0] not in by_id:
            raise ConfigError(f"delay target names unknown oscillator {p!r}")
    kick_pairs = [pair for pair in target.targeted_pairs()
                  if not _is_gated(by_id[pair[1].split(".")[0]])]
    steps: list[TuneStep] = []

    free_periods: dict[str, float] = {}
    for o in spec.oscillators:
        if _is_gated(o):
            continue
        t, _ = _rhythm_period(_detached(spec, o), f"{o.osc_id}.E")
        free_periods[o.osc_id] = t
    finite = [t for t in free_periods.values() if math.isfinite(t) and t > 0]
    if len(finite) != len(free_periods) or (
            finite and max(finite) - min(finite) > 0.05 * min(finite)):
        detail = ", ".join(f"{k}={v:g}s" for k, v in free_periods.items())
        raise ConfigError(
            f"free-running periods disagree by more than 5% ({detail}); "
            f"tune frequencies before phases")

    def summarize(m, res) -> tuple[dict, float, float, int]:
        period = measure_period(res, order[0], warmup=PROBE_WARMUP)
        delays = {pr: (d.mean, d.sd) for pr, d in m.delays.items()}
        return delays, period.mean, period.sd, m.violations

    res, m = _ring_probe(spec, order)
    if m is None:
        raise ConfigError(
            "the coupled rhythm has no stable firing order to start from; "
            "tune frequencies and gate delays first")
    delays, period, period_sd, violations = summarize(m, res)

    def report(converged: bool) -> TuningReport:
        return TuningReport(converged=converged, period_target=target.period,
                            period=period, period_sd=period_sd, delays=delays,
                            violations=violations, final_bias=_bias_table(spec),
                            steps=list(steps))

    if not kick_pairs:
        return spec, report(True)

    delta = {pair: 0.02 for pair in kick_pairs}
    last_sign = {pair: 0 for pair in kick_pairs}
    guard = target.period_tol + 20e-3

    for _ in range(target.max_iters):
        errors = {pair: delays[pair][0] - target.delays[pair] for pair in kick_pairs}
        worst = max(errors, key=lambda pr: abs(errors[pr]))
        if abs(errors[worst]) <= target.delay_tol:
            return spec, report(True)

        sign = 1 if errors[worst] > 0 else -1   # too long: strengthen the kick
        if last_sign[worst] != 0 and sign != last_sign[worst]:
            delta[worst] = delta[worst] / 2.0
        last_sign[worst] = sign

        knob_id = worst[1].split(".")[0]
        knob = by_id[knob_id]
        partner_id, partner_param = _partner_weight(spec, knob_id,
                                                    need_decrease=sign > 0)
        partner = by_id[partner_id]
        new_wd = knob.w_d * (1.0 + sign * delta[worst])
        new_pv = getattr(partner, partner_param) * (1.0 - sign * delta[worst])
        if not (0.0 < new_wd <= MAX_BIAS_CURRENT
                and 0.0 <= new_pv <= MAX_BIAS_CURRENT):
            delta[worst] = delta[worst] / 2.0
            continue
        candidate = _with_osc(spec, replace(knob, w_d=new_wd))
        candidate = _with_osc(candidate, replace(
            {o.osc_id: o for o in candidate.oscillators}[partner_id],
            **{partner_param: new_pv}))

        res2, m2 = _ring_probe(candidate, order)
        accepted = False
        if m2 is not None and m2.violations == 0:
            d2, t2, sd2, v2 = summarize(m2, res2)
            if abs(t2 - target.period) <= guard:
                accepted = True
                spec, by_id = candidate, {o.osc_id: o for o in candidate.oscillators}
                delays, period, period_sd, violations = d2, t2, sd2, v2
        steps.append(TuneStep("phase", knob_id, "w_d", new_wd,
                              period=period if accepted else math.nan,
                              delay=delays[worst][0] if accepted else math.nan,
                              partner=f"{partner_id}.{partner_param}",
                              partner_value=new_pv, accepted=accepted))
        if not accepted:
            delta[worst] = delta[worst] / 2.0

    _fail(f"phase stage exhausted {target.max_iters} iterations", report(False))


def tune_rhythm(spec: NetworkSpec,
                target: TuningTarget) -> tuple[NetworkSpec, TuningReport]:
    """Full bring-up: defaults, frequencies, delays, in-ring period trim.

    Stage order mirrors the manual procedure: reset dispensable
    parameters, tune each free-running member's frequency individually
    with its incoming couplings silenced (kick-anchored members aim
    slightly slow so the kick stays ahead of their own firing),
    position gated delays through the gate drive, walk kick-anchored
    delays with counteracting weight pairs, then trim the pacing
    member's drive inside the coupled ring, where the couplings shift
    the period slightly.  Delay and trim stages repeat until a full
    measurement meets every target.

    Returns the tuned spec and the report; raises ConvergenceError
    (report attached as ``err.report``) when a stage gives up.
    """
    target.validate()
    spec = prepare_defaults(spec)
    by_id = {o.osc_id: o for o in spec.oscillators}
    order = target.activation_order()
    for p in order:
        parts = p.split(".")
        if parts[0] not in by_id or parts[-1] != "E":
            raise ConfigError(f"delay target names unknown population {p!r}")
    pacing_pop = order[0] if order else f"{spec.oscillators[0].osc_id}.E"
    pacing_id = pacing_pop.split(".")[0]
    gated_pairs = [pair for pair in target.targeted_pairs()
                   if _is_gated(by_id[pair[1].split(".")[0]])]
    kick_dsts = {pair[1].split(".")[0] for pair in target.targeted_pairs()
                 if not _is_gated(by_id[pair[1].split(".")[0]])}

    steps: list[TuneStep] = []
    period = period_sd = math.nan
    delays: dict[tuple[str, str], tuple[float, float]] = {}
    violations = 0

    def report(converged: bool) -> TuningReport:
        return TuningReport(converged=converged, period_target=target.period,
                            period=period, period_sd=period_sd, delays=delays,
                            violations=violations, final_bias=_bias_table(spec),
                            steps=list(steps))

    def merge_failure(err: ConvergenceError) -> None:
        if hasattr(err, "report"):
            steps.extend(err.report.steps)
        _fail(str(err), report(False))

    for osc in list(spec.oscillators):
        if _is_gated(osc):
            continue
        member_period = target.period
        tol = target.period_tol
        if osc.osc_id in kick_dsts:
            member_period += min(SLOW_BIAS_FRACTION * target.period, MAX_SLOW_BIAS)
            # Half tolerance: the anchor's lead over the ring period is
            # the slow bias minus this member's frequency error, so a
            # loosely tuned member could erode it.
            tol = target.period_tol / 2.0
        sub = TuningTarget(period=member_period, period_tol=tol,
                           delay_tol=target.delay_tol, max_iters=target.max_iters)
        tuned, fsteps, _, _, failure = _frequency_stages(
            lambda o, s=spec: _detached(s, o), f"{osc.osc_id}.E", osc, sub)
        steps.extend(fsteps)
        spec = _with_osc(spec, tuned)
        by_id = {o.osc_id: o for o in spec.oscillators}
        if failure:
            _fail(f"{osc.osc_id}: {failure}", report(False))

    converged = False
    for _ in range(3):
        for pair in gated_pairs:
            try:
                spec, rep = tune_gate_delay(spec, pair, target)
            except ConvergenceError as err:
                merge_failure(err)
            steps.extend(rep.steps)
        if [pair for pair in target.targeted_pairs() if pair not in gated_pairs]:
            try:
                spec, rep = tune_phase_shifts(spec, target)
            except ConvergenceError as err:
                merge_failure(err)
            steps.extend(rep.steps)
        by_id = {o.osc_id: o for o in spec.oscillators}

        pacer = by_id[pacing_id]

        def trim_measure(x: float) -> tuple[float, float]:
            return _rhythm_period(_with_osc(spec, replace(pacer, i_dc=x)), pacing_pop)

        best, probes, ok, note = _bisect_decreasing(
            trim_measure, pacer.i_dc, target.period, target.period_tol,
            pacer.i_dc * 0.5, min(pacer.i_dc * 2.0, MAX_BIAS_CURRENT),
            target.max_iters)
        steps += [TuneStep("trim", pacing_id, "i_dc", p.x, period=p.y)
                  for p in probes]
        spec = _with_osc(spec, replace(pacer, i_dc=best.x))
        by_id = {o.osc_id: o for o in spec.oscillators}
        if not ok:
            period, period_sd = best.y, best.sd
            _fail(f"in-ring period trim failed: {note}", report(False))

        if order:
            res, m = _ring_probe(spec, order)
            if m is None:
                continue
            stats = measure_period(res, pacing_pop, warmup=PROBE_WARMUP)
            period, period_sd = stats.mean, stats.sd
            delays = {pr: (d.mean, d.sd) for pr, d in m.delays.items()}
            violations = m.violations
            delay_ok = all(
                abs(delays[pr][0] - want) <= target.delay_tol
                for pr, want in target.delays.items() if pr in delays)
        else:
            period, period_sd = best.y, best.sd
            delay_ok = True
        if (delay_ok and violations == 0
                and abs(period - target.period) <= target.period_tol):
            converged = True
            break

    if not converged:
        _fail("rhythm did not meet all targets within three delay/trim passes",
              report(False))
    return spec, report(True)


# ---------------------------------------------------------------------------
# explicit period-to-current map


@dataclass(frozen=True)
class PeriodMap:
    """Fitted current-versus-period relation of one oscillator.

    ``current_for`` evaluates x1*exp(-x2*T) + x3*exp(-x4*T): a strictly
    decreasing, positive map from the desired free-running period to
    the DC drive that realises it.  Valid only on the probed range.
    """

    osc_id: str
    x1: float
    x2: float
    x3: float
    x4: float
    t_min: float
    t_max: float
    rmse: float
    grid_periods: tuple[float, ...] = ()
    grid_currents: tuple[float, ...] = ()

    def current_for(self, period: float) -> float:
        if not (self.t_min <= period <= self.t_max):
            raise ConfigError(
                f"{self.osc_id}: period {period:g}s outside the map's "
                f"valid range [{self.t_min:g}, {self.t_max:g}]s")
        return (self.x1 * math.exp(-self.x2 * period)
                + self.x3 * math.exp(-self.x4 * period))

    def write_text(self, path: str) -> None:
        lines = [
            "# period-to-current map",
            f"osc_id = {self.osc_id}",
            f"x1_a = {self.x1:.9g}",
            f"x2_per_s = {self.x2:.9g}",
            f"x3_a = {self.x3:.9g}",
            f"x4_per_s = {self.x4:.9g}",
            f"t_min_s = {self.t_min:.9g}",
            f"t_max_s = {self.t_max:.9g}",
            f"rmse_a = {self.rmse:.9g}",
            "[grid]",
        ]
        lines += [f"{t:.9g} {i:.9g}" for t, i in
                  zip(self.grid_periods, self.grid_currents)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read_text(cls, path: str) -> "PeriodMap":
        fields: dict[str, str] = {}
        grid: list[tuple[float, float]] = []
        in_grid = False
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if line == "[grid]":
                    in_grid = True
                    continue
                if in_grid:
                    a, b = line.split()
                    grid.append((float(a), float(b)))
                elif "=" in line:
                    key, _, value = line.partition("=")
                    fields[key.strip()] = value.strip()
        try:
            return cls(osc_id=fields["osc_id"],
                       x1=float(fields["x1_a"]), x2=float(fields["x2_per_s"]),
                       x3=float(fields["x3_a"]), x4=float(fields["x4_per_s"]),
                       t_min=float(fields["t_min_s"]), t_max=float(fields["t_max_s"]),
                       rmse=float(fields["rmse_a"]),
                       grid_periods=tuple(t for t, _ in grid),
                       grid_currents=tuple(i for _, i in grid))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: not a period map file ({exc})") from exc


def fit_double_exponential(periods, currents) -> tuple[tuple[float, float, float, float], float]:
    """Least-squares fit of current = x1*exp(-x2*T) + x3*exp(-x4*T).

    Coefficients are constrained non-negative, which makes the fitted
    map non-increasing by construction; a single-exponential relation
    is the nested case with one vanishing amplitude.  Returns the
    coefficients and the RMSE in amperes.
    """
    t = np.asarray(periods, dtype=np.float64)
    i = np.asarray(currents, dtype=np.float64)
    if t.shape != i.shape or t.ndim != 1 or t.shape[0] < 4:
        raise CalibrationError("fit needs at least 4 (period, current) points")
    if np.any(i <= 0) or np.any(t <= 0):
        raise CalibrationError("periods and currents must be positive")
    order = np.argsort(t)
    t, i = t[order], i[order]
    span = float(t[-1] - t[0]) or 1.0

    # Split-grid start: the slow half of the grid sees mostly the
    # smaller decay rate; what it misses on the fast half seeds the
    # larger one.
    half = t.shape[0] // 2
    s_slope, s_icpt = np.polyfit(t[half:], np.log(i[half:]), 1)
    x4 = max(-s_slope, 1e-9)
    x3 = math.exp(s_icpt)
    resid = i[:half] - x3 * np.exp(-x4 * t[:half])
    mask = resid > float(i.mean()) * 1e-3
    if int(mask.sum()) >= 2:
        f_slope, f_icpt = np.polyfit(t[:half][mask], np.log(resid[mask]), 1)
        x2 = max(-f_slope, x4)
        x1 = math.exp(f_icpt)
    else:
        x1, x2 = float(i.max()) * 0.5, 3.0 / span
    starts = [
        np.array([x1, x2, x3, x4]),
        np.array([float(i.max()), 5.0 / span, float(i.min()) * 0.5, 0.5 / span]),
    ]

    scale = float(i.mean())

    def resid_fn(x):
        return (x[0] * np.exp(-x[1] * t) + x[2] * np.exp(-x[3] * t) - i) / scale

    best = None
    for x0 in starts:
        x0 = np.clip(x0, 0.0, None)
        if not np.all(np.isfinite(x0)):
            continue
        sol = least_squares(resid_fn, x0, bounds=(0.0, np.inf), max_nfev=20000)
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise CalibrationError("fit initialisation failed")
    x = tuple(float(v) for v in best.x)
    rmse = float(np.sqrt(np.mean((resid_fn(best.x) * scale) ** 2)))
    return x, rmse


def fit_period_map(osc: OscillatorSpec, dc_grid, base: NetworkSpec | None = None,
                   min_points: int = 8) -> PeriodMap:
    """Probe one oscillator over a DC grid and fit its period map.

    Grid points where the oscillator does not settle into a countable
    rhythm (quiet, runaway or ragged) are excluded; at least
    ``min_points`` must survive.  The fit must track the grid to within
    10% of the mean probed current, otherwise the relation is not the
    assumed double exponential and a CalibrationError is raised.
    """
    grid = sorted({float(x) for x in np.asarray(dc_grid, dtype=np.float64)})
    if len(grid) < min_points:
        raise ConfigError(f"DC grid needs at least {min_points} distinct currents")
    for x in grid:
        if not (0.0 < x <= MAX_BIAS_CURRENT):
            raise ConfigError(f"grid current {x:g}A outside (0, {MAX_BIAS_CURRENT:g}]A")
    base = base if base is not None else NetworkSpec(oscillators=[osc])
    pop = f"{osc.osc_id}.E"

    periods, currents = [], []
    for x in grid:
        mean, sd = _rhythm_period(_isolated(base, replace(osc, i_dc=x)), pop)
        if math.isfinite(mean) and mean > 0.0 and sd <= 0.1 * mean:
            periods.append(mean)
            currents.append(x)
    if len(periods) < min_points:
        raise CalibrationError(
            f"{osc.osc_id}: only {len(periods)} of {len(grid)} grid points "
            f"oscillate; need {min_points}")

    (x1, x2, x3, x4), rmse = fit_double_exponential(periods, currents)
    mean_current = float(np.mean(currents))
    if rmse > 0.10 * mean_current:
        raise CalibrationError(
            f"{osc.osc_id}: map RMSE {rmse:g}A exceeds 10% of the mean "
            f"probed current {mean_current:g}A")
    t_min, t_max = float(min(periods)), float(max(periods))
    f_lo = x1 * math.exp(-x2 * t_max) + x3 * math.exp(-x4 * t_max)
    f_hi = x1 * math.exp(-x2 * t_min) + x3 * math.exp(-x4 * t_min)
    if not (0.0 < f_lo < f_hi):
        raise CalibrationError(f"{osc.osc_id}: fitted map is not strictly decreasing")
    return PeriodMap(osc_id=osc.osc_id, x1=x1, x2=x2, x3=x3, x4=x4,
                     t_min=t_min, t_max=t_max, rmse=rmse,
                     grid_periods=tuple(periods), grid_currents=tuple(currents))


def _pacing_id(spec: NetworkSpec) -> str:
    """The member that paces: free-running with no incoming kick."""
    for o in spec.oscillators:
        if not _is_gated(o) and o.w_d == 0.0:
            return o.osc_id
    for o in spec.oscillators:
        if not _is_gated(o):
            return o.osc_id
    return spec.oscillators[0].osc_id


def set_period_explicit(spec: NetworkSpec, maps: Mapping[str, PeriodMap],
                        period: float) -> NetworkSpec:
    """Set DC drives straight from fitted period maps.

    Kick-anchored members (incoming kick weight, no gate) are aimed
    slightly slow, like the iterative tuner does, so the kick stays
    ahead of their own firing.  Gated members keep their drive: their
    delay is positioned by the gate, not by a free-running period.
    Raises ConfigError when the pacing member has no map or the period
    falls outside a map's probed range.
    """
    if period <= 0:
        raise ConfigError("period must be positive")
    pacer = _pacing_id(spec)
    if pacer not in maps:
        raise ConfigError(f"no period map for pacing member {pacer!r}")
    oscs = []
    for o in spec.oscillators:
        if _is_gated(o) or o.osc_id not in maps:
            oscs.append(replace(o))
            continue
        t_eff = period
        if o.osc_id != pacer and o.w_d > 0.0:
            t_eff = period + min(SLOW_BIAS_FRACTION * period, MAX_SLOW_BIAS)
        oscs.append(replace(o, i_dc=maps[o.osc_id].current_for(t_eff)))
    return replace(spec, oscillators=oscs)
