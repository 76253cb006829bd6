"""Respiratory modulation: breathing coefficient, feedback maps, closed loop.

The pipeline mirrors how one modulates a rhythm generator from a
respiration recording: phase onsets are detected from the smoothed
signal, a drift-free breathing coefficient C is built from logistic
ramps between the onsets, a quadratic model maps interval-averaged C
to the desired beat interval, and a per-oscillator feedback map turns
desired intervals into inhibitory input spike rates.  The map is
calibrated in three passes: steady rates probe the base relation, an
exponential correction recovers the long intervals that transient
rates cannot reach, and a scaling pass harmonizes the coupled members
so the activation order survives modulation.

Rising respiration values correspond to exhalation, so exhalation
onsets sit at local minima of the signal and inhalation onsets at
local maxima.  Inhibitory feedback can only lengthen a period, never
shorten it; every oscillator is therefore brought to the fastest
needed rhythm before calibration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence
from zlib import crc32

import numpy as np
from scipy import signal as sps
from scipy import stats as spst

from .errors import (CalibrationError, ConfigError, DataError,
                     SimulationRunError)
from .network import NetworkSpec, build_network, simulate
from .tuning import _detached, _tail_stats

# Logistic saturation argument beyond which the ramp is numerically flat.
_RAMP_CLIP = 500.0

# Steady rates (Hz) probed when calibrating a base feedback map.  Dense
# enough that a member losing points to extinction or to beating between
# the probe train and its rhythm still keeps 5 usable rates.
DEFAULT_RATE_GRID = (0.0, 20.0, 40.0, 60.0, 90.0, 120.0, 160.0,
                     200.0, 240.0, 290.0, 350.0, 420.0)


def _logistic(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -_RAMP_CLIP, _RAMP_CLIP)))


# ---------------------------------------------------------------------------
# breath phases


@dataclass
class BreathPhases:
    """Alternating exhalation/inhalation onset times, seconds."""

    exhale_onsets: np.ndarray
    inhale_onsets: np.ndarray

    def marks(self) -> list[tuple[float, str]]:
        out = [(float(t), "exhale") for t in self.exhale_onsets]
        out += [(float(t), "inhale") for t in self.inhale_onsets]
        return sorted(out)


def detect_breath_phases(resp: np.ndarray, sample_rate: float) -> BreathPhases:
    """Phase onsets from the extrema of the smoothed respiration signal.

    Exhalation onsets are the local minima, inhalation onsets the local
    maxima.  Only onset times matter downstream, so the detection is
    insensitive to offset, gain and slow drift of the raw signal.
    Raises DataError when fewer than two full breathing cycles are
    found.
    """
    resp = np.asarray(resp, dtype=np.float64)
    if resp.ndim != 1 or resp.shape[0] < 3:
        raise DataError("respiration trace must be a 1-D signal")
    if sample_rate <= 0:
        raise ConfigError("sample rate must be positive")
    win = max(3, int(round(0.3 * sample_rate)) | 1)
    if win < resp.shape[0]:
        pad = win // 2
        padded = np.pad(resp, pad, mode="reflect")
        smooth = np.convolve(padded, np.ones(win) / win, mode="valid")
    else:
        smooth = resp
    spread = float(np.percentile(smooth, 95) - np.percentile(smooth, 5))
    if spread <= 0.0:
        raise DataError("respiration trace is flat; fewer than 2 breathing cycles")
    distance = max(1, int(round(0.8 * sample_rate)))
    prominence = 0.2 * spread
    maxima, _ = sps.find_peaks(smooth, distance=distance, prominence=prominence)
    minima, _ = sps.find_peaks(-smooth, distance=distance, prominence=prominence)

    # Enforce strict alternation: between equals keep the more extreme.
    marks = [(i, "inhale") for i in maxima] + [(i, "exhale") for i in minima]
    marks.sort()
    cleaned: list[tuple[int, str]] = []
    for idx, kind in marks:
        if cleaned and cleaned[-1][1] == kind:
            prev = cleaned[-1][0]
            better = (smooth[idx] > smooth[prev] if kind == "inhale"
                      else smooth[idx] < smooth[prev])
            if better:
                cleaned[-1] = (idx, kind)
            continue
        cleaned.append((idx, kind))
    ex = np.array([i for i, k in cleaned if k == "exhale"], dtype=np.float64)
    inh = np.array([i for i, k in cleaned if k == "inhale"], dtype=np.float64)
    if ex.shape[0] < 2 or inh.shape[0] < 2:
        raise DataError(
            f"found {ex.shape[0]} exhalation / {inh.shape[0]} inhalation "
            f"onsets; need at least 2 breathing cycles")
    return BreathPhases(exhale_onsets=ex / sample_rate,
                        inhale_onsets=inh / sample_rate)


# ---------------------------------------------------------------------------
# breathing coefficient


@dataclass(frozen=True)
class RampShape:
    """Logistic ramp parameters of the breathing coefficient.

    The exhale ramp rises from exactly zero at the exhalation onset
    toward ``c_max``; the inhale ramp mirrors it, decaying from the
    value reached at the inhalation onset toward zero.  ``mu`` places
    the steepest point (seconds after the onset) and ``sigma`` sets the
    ramp width.
    """

    c_max: float = 1.0
    mu_e: float = 1.0
    sigma_e: float = 0.3
    mu_i: float = 1.0
    sigma_i: float = 0.3

    def validate(self) -> None:
        if self.c_max <= 0:
            raise ConfigError("c_max must be positive")
        if self.sigma_e <= 0 or self.sigma_i <= 0:
            raise ConfigError("ramp widths must be positive")


def _rise(dt: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Normalized logistic ramp: 0 at dt=0, approaching 1."""
    s0 = _logistic(-mu / sigma)
    return (_logistic((dt - mu) / sigma) - s0) / (1.0 - s0)


@dataclass
class BreathingTrace:
    """Sampled breathing coefficient with the marks that shaped it."""

    sample_period: float
    c: np.ndarray
    phases: BreathPhases
    shape: RampShape

    @property
    def duration(self) -> float:
        return self.c.shape[0] * self.sample_period

    def times(self) -> np.ndarray:
        return np.arange(self.c.shape[0]) * self.sample_period

    def value_at(self, t: np.ndarray | float) -> np.ndarray | float:
        return np.interp(t, self.times(), self.c)


def compute_breathing_coefficient(phases: BreathPhases, shape: RampShape,
                                  sample_period: float,
                                  duration: float) -> BreathingTrace:
    """Build the C trace: rise during exhalation, fall during inhalation.

    C is exactly zero at every exhalation onset (the reset), strictly
    rises along the exhale ramp, and decays along the inhale ramp from
    whatever value the exhale reached.  Before the first mark C is
    zero; after the last mark the final ramp continues.
    """
    shape.validate()
    if sample_period <= 0 or duration <= 0:
        raise ConfigError("sample period and duration must be positive")
    t = np.arange(0.0, duration, sample_period)
    c = np.zeros_like(t)
    marks = phases.marks()
    if not marks:
        return BreathingTrace(sample_period, c, phases, shape)

    level = 0.0
    for j, (t0, kind) in enumerate(marks):
        t1 = marks[j + 1][0] if j + 1 < len(marks) else duration + sample_period
        seg = (t >= t0) & (t < t1)
        dt = t[seg] - t0
        if kind == "exhale":
            level = 0.0
            c[seg] = shape.c_max * _rise(dt, shape.mu_e, shape.sigma_e)
            end = shape.c_max * _rise(np.array([t1 - t0]),
                                      shape.mu_e, shape.sigma_e)[0]
        else:
            c[seg] = level * (1.0 - _rise(dt, shape.mu_i, shape.sigma_i))
            end = level * (1.0 - _rise(np.array([t1 - t0]),
                                       shape.mu_i, shape.sigma_i)[0])
        level = end
    return BreathingTrace(sample_period, np.maximum(c, 0.0), phases, shape)


def average_c(bt: BreathingTrace, t0: float, t1: float) -> float:
    """Time-average of C over [t0, t1] of the piecewise-linear trace."""
    if not (0.0 <= t0 < t1 <= bt.duration):
        raise ConfigError(
            f"[{t0:g}, {t1:g}]s outside the trace span [0, {bt.duration:g}]s")
    grid = bt.times()
    inner = grid[(grid > t0) & (grid < t1)]
    xs = np.concatenate(([t0], inner, [t1]))
    ys = np.interp(xs, grid, bt.c)
    return float(np.trapezoid(ys, xs) / (t1 - t0))


# ---------------------------------------------------------------------------
# the interval model G


@dataclass
class RsaModelG:
    """Quadratic map from interval-averaged C to the beat interval."""

    x1: float
    x2: float
    x3: float
    r_squared: float
    data: tuple[tuple[float, float], ...] = ()

    def predict(self, c: np.ndarray | float) -> np.ndarray | float:
        return self.x1 * np.square(c) + self.x2 * np.asarray(c) + self.x3

    def validate(self, c_lo: float, c_hi: float) -> None:
        """Positive and non-decreasing over the C range it will serve."""
        cs = np.linspace(c_lo, c_hi, 64)
        ts = self.predict(cs)
        if np.any(ts <= 0.0):
            raise CalibrationError("interval model predicts non-positive intervals")
        if np.any(np.diff(ts) < -1e-2 * (ts.max() - ts.min() + 1e-12)):
            raise CalibrationError(
                "interval model is decreasing over the breathing range")


def fit_g(points: Sequence[tuple[float, float]]) -> RsaModelG:
    """Least-squares quadratic fit of interval versus average C.

    R-squared follows the usual definition; data with zero interval
    variance gets R-squared 0 by convention (nothing to explain).
    """
    pts = [(float(c), float(t)) for c, t in points]
    if len(pts) < 10:
        raise CalibrationError(f"need at least 10 (C, interval) points, got {len(pts)}")
    c = np.array([p[0] for p in pts])
    t = np.array([p[1] for p in pts])
    if np.unique(np.round(c, 12)).shape[0] < 3:
        raise CalibrationError(
            "average C values span fewer than 3 distinct levels; "
            "a quadratic fit is rank deficient")
    x1, x2, x3 = np.polyfit(c, t, 2)
    pred = x1 * c * c + x2 * c + x3
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    ss_res = float(np.sum((t - pred) ** 2))
    r2 = 0.0 if ss_tot <= 0.0 else 1.0 - ss_res / ss_tot
    return RsaModelG(x1=float(x1), x2=float(x2), x3=float(x3),
                     r_squared=r2, data=tuple(pts))


# ---------------------------------------------------------------------------
# feedback maps


@dataclass
class FeedbackMap:
    """Per-oscillator map from a desired interval to an inhibitory rate.

    The base relation is a monotone piecewise-linear interpolation of
    steady-rate measurements.  Intervals beyond ``t_thr`` (the longest
    the base map reaches under realistic time-varying input) add an
    exponential correction exp((T - t_thr) * k); ``k`` = 0 disables the
    correction.  The scaling ``s`` multiplies the composed rate.
    """

    osc_id: str
    t_grid: tuple[float, ...]
    rate_grid: tuple[float, ...]
    t_thr: float = math.inf
    k: float = 0.0
    s: float = 1.0
    reference: bool = False

    def validate(self) -> None:
        if len(self.t_grid) != len(self.rate_grid) or len(self.t_grid) < 2:
            raise ConfigError("base map needs matching grids of at least 2 points")
        if any(b < a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise ConfigError("interval grid must be sorted")
        if any(b < a for a, b in zip(self.rate_grid, self.rate_grid[1:])):
            raise ConfigError("rate grid must be non-decreasing")
        if self.s < 0 or self.k < 0:
            raise ConfigError("scaling and correction factors must be non-negative")

    def h_base(self, t_h: np.ndarray | float) -> np.ndarray | float:
        return np.interp(t_h, self.t_grid, self.rate_grid)

    def rate_for(self, t_h: np.ndarray | float) -> np.ndarray | float:
        """Composed commanded rate (h_base + exponential correction) * s."""
        t_h = np.asarray(t_h, dtype=np.float64)
        r = np.asarray(self.h_base(t_h), dtype=np.float64).copy()
        if self.k > 0.0 and math.isfinite(self.t_thr):
            over = t_h >= self.t_thr
            r[over] += np.exp(np.clip((t_h[over] - self.t_thr) * self.k,
                                      None, _RAMP_CLIP))
        out = r * self.s
        return float(out) if out.ndim == 0 else out

    def write_text(self, path: str) -> None:
        lines = [
            "# feedback map",
            f"osc_id = {self.osc_id}",
            f"t_thr_s = {self.t_thr:.9g}",
            f"k_per_s = {self.k:.9g}",
            f"s = {self.s:.9g}",
            f"reference = {str(self.reference).lower()}",
            "[grid]",
        ]
        lines += [f"{t:.9g} {r:.9g}" for t, r in zip(self.t_grid, self.rate_grid)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read_text(cls, path: str) -> "FeedbackMap":
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
            fmap = cls(osc_id=fields["osc_id"],
                       t_grid=tuple(t for t, _ in grid),
                       rate_grid=tuple(r for _, r in grid),
                       t_thr=float(fields["t_thr_s"]), k=float(fields["k_per_s"]),
                       s=float(fields["s"]),
                       reference=fields["reference"] == "true")
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: not a feedback map file ({exc})") from exc
        fmap.validate()
        return fmap


# ---------------------------------------------------------------------------
# spike train generation


@dataclass
class FeedbackSpikeTrain:
    """Seeded realisation of an inhomogeneous rate profile."""

    osc_id: str
    times: np.ndarray
    seed: int


def rate_to_spike_train(t: np.ndarray, rates: np.ndarray, seed: int,
                        osc_id: str = "", regular: bool = False
                        ) -> FeedbackSpikeTrain:
    """Sample a spike train from a rate profile r(t) in hertz.

    Default statistics are inhomogeneous Poisson via thinning: draw a
    homogeneous train at the peak rate and keep each candidate with
    probability r(t)/r_max.  ``regular`` instead emits evenly spaced
    spikes at the (piecewise) commanded rate, for sensitivity checks
    and steady-rate calibration.  Deterministic per (seed, osc_id).
    """
    t = np.asarray(t, dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    if t.shape != rates.shape or t.ndim != 1 or t.shape[0] < 2:
        raise ConfigError("rate profile needs matching 1-D time and rate arrays")
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ConfigError("rates must be finite and non-negative")
    t_end = float(t[-1])
    r_max = float(rates.max())
    if r_max == 0.0:
        return FeedbackSpikeTrain(osc_id, np.zeros(0), seed)

    if regular:
        times = []
        now = float(t[0])
        while now < t_end:
            r = float(np.interp(now, t, rates))
            if r <= 0.0:
                # skip ahead to the next point where the profile is live
                ahead = t[(t > now) & (rates > 0.0)]
                if ahead.shape[0] == 0:
                    break
                now = float(ahead[0])
                continue
            times.append(now)
            now += 1.0 / r
        return FeedbackSpikeTrain(osc_id, np.array(times), seed)

    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, crc32(osc_id.encode())])))
    n_expect = int(r_max * (t_end - t[0]) * 1.2) + 32
    cand = float(t[0]) + np.cumsum(rng.exponential(1.0 / r_max, size=n_expect))
    while cand[-1] < t_end:
        extra = cand[-1] + np.cumsum(rng.exponential(1.0 / r_max, size=n_expect))
        cand = np.concatenate([cand, extra])
    keep_u = rng.random(cand.shape[0])
    mask = (cand < t_end) & (keep_u < np.interp(cand, t, rates) / r_max)
    return FeedbackSpikeTrain(osc_id, cand[mask], seed)


# ---------------------------------------------------------------------------
# calibration step: steady rates


def _isotonic_nondecreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators fit, mean pooling."""
    level = [float(v) for v in y]
    weight = [1.0] * len(level)
    out: list[float] = []
    wout: list[float] = []
    for lv, w in zip(level, weight):
        out.append(lv)
        wout.append(w)
        while len(out) > 1 and out[-2] > out[-1]:
            total = wout[-2] + wout[-1]
            merged = (out[-2] * wout[-2] + out[-1] * wout[-1]) / total
            out[-2:] = [merged]
            wout[-2:] = [total]
    expanded = []
    for lv, w in zip(out, wout):
        expanded += [lv] * int(w)
    return np.array(expanded)


def _modulated_period(spec: NetworkSpec, osc_id: str, train: np.ndarray,
                      duration: float) -> tuple[float, float]:
    """Settled period of one detached member under a feedback train.

    Sentinels as in the tuner: inf for silence or a rhythm that never
    settles, 0 for runaway.
    """
    osc = {o.osc_id: o for o in spec.oscillators}[osc_id]
    det = _detached(spec, osc)
    net = build_network(det)
    res = simulate(net, duration,
                   external={osc_id: train} if train.size else None)
    onsets = res.onset_times(f"{osc_id}.E")
    if onsets.shape[0] < 4:
        info = net.population(f"{osc_id}.E")
        sl = info.neuron_slice
        in_pop = (res.spike_neurons >= sl.start) & (res.spike_neurons < sl.stop)
        rate = float(np.sum(in_pop)) / duration / info.size
        return (0.0, 0.0) if rate > 3.0 else (math.inf, 0.0)
    mean, sd, drift = _tail_stats(onsets)
    if sd > max(2e-3, 0.01 * mean) or drift > max(3e-3, 0.015 * mean):
        return math.inf, sd
    return mean, sd


def calibrate_h_constant(spec: NetworkSpec, osc_id: str,
                         rate_grid: Sequence[float] = DEFAULT_RATE_GRID,
                         duration: float = 24.0,
                         anchor_bias: float = 0.0) -> FeedbackMap:
    """Fit the base interval-to-rate map from steady-rate probes.

    The member runs detached inside the full build (same devices as
    deployed) under evenly spaced trains at each grid rate; the settled
    period is recorded, rates that extinguish the rhythm are excluded,
    and the surviving (period, rate) pairs are made monotone by
    isotonic regression before inversion.  Raises CalibrationError with
    fewer than 5 usable points.

    ``anchor_bias`` compresses the stored interval grid by 1 + bias, so
    a commanded interval T_h yields the rate that holds the member at
    T_h * (1 + bias).  A kick-anchored follower calibrated with a small
    bias free-runs slightly slower than its commanded slot at every
    breathing depth, which is what keeps the leader's kick in charge of
    its timing (the rest-state rhythm is anchored by the same margin).
    """
    by_id = {o.osc_id: o for o in spec.oscillators}
    if osc_id not in by_id:
        raise ConfigError(f"unknown oscillator {osc_id!r}")
    if anchor_bias < 0.0:
        raise ConfigError("anchor_bias must be non-negative")
    rates = sorted({float(r) for r in rate_grid})
    if rates and rates[0] < 0:
        raise ConfigError("rates must be non-negative")

    periods: list[float] = []
    usable: list[float] = []
    for r in rates:
        if r == 0.0:
            train = np.zeros(0)
        else:
            train = np.arange(0.5 / r, duration, 1.0 / r)
        mean, _sd = _modulated_period(spec, osc_id, train, duration)
        if math.isfinite(mean) and mean > 0.0:
            periods.append(mean)
            usable.append(r)
    if len(usable) < 5:
        raise CalibrationError(
            f"{osc_id}: only {len(usable)} of {len(rates)} rates give a "
            f"steady rhythm; need 5")

    t = _isotonic_nondecreasing(np.array(periods)) / (1.0 + anchor_bias)
    r = np.array(usable)
    # Collapse plateaus: keep the gentlest rate that reaches each period.
    keep = np.concatenate(([True], np.diff(t) > 0))
    fmap = FeedbackMap(osc_id=osc_id, t_grid=tuple(float(v) for v in t[keep]),
                       rate_grid=tuple(float(v) for v in r[keep]))
    fmap.validate()
    return fmap


def derive_follower_map(ref: FeedbackMap, osc_id: str) -> FeedbackMap:
    """Seed a gated member's map from the reference base relation.

    A disinhibition-gated member has no rhythm of its own to probe in
    isolation, so it starts from the reference map (same base grid and
    correction) and relies on the scaling pass to place it.
    """
    return replace(ref, osc_id=osc_id, s=1.0, reference=False)


# ---------------------------------------------------------------------------
# calibration step: exponential correction


def _commanded_rates(bt: BreathingTrace, g: RsaModelG,
                     fmap: FeedbackMap) -> tuple[np.ndarray, np.ndarray]:
    t = bt.times()
    t_h = np.asarray(g.predict(bt.c), dtype=np.float64)
    return t, np.asarray(fmap.rate_for(t_h), dtype=np.float64)


def _detached_intervals(spec: NetworkSpec, fmap: FeedbackMap,
                        bt: BreathingTrace, g: RsaModelG, seed: int
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(onsets, intervals, commanded intervals) of the detached member."""
    t, rates = _commanded_rates(bt, g, fmap)
    train = rate_to_spike_train(t, rates, seed, osc_id=fmap.osc_id)
    osc = {o.osc_id: o for o in spec.oscillators}[fmap.osc_id]
    det = _detached(spec, osc)
    res = simulate(build_network(det), bt.duration,
                   external={fmap.osc_id: train.times})
    onsets = res.onset_times(f"{fmap.osc_id}.E", after=2.0)
    if onsets.shape[0] < 3:
        return onsets, np.zeros(0), np.zeros(0)     # inhibited into silence
    gaps = np.diff(onsets)
    cmd = np.array([g.predict(average_c(bt, float(a), float(min(b, bt.duration))))
                    for a, b in zip(onsets[:-1], onsets[1:])])
    return onsets, gaps, cmd


def _achieved_max_interval(spec: NetworkSpec, fmap: FeedbackMap,
                           bt: BreathingTrace, g: RsaModelG,
                           seed: int) -> float:
    """Longest delay the detached member reaches under the map.

    Every breath commands the same peak, so the realized peak is the
    per-breath maximum interval averaged over breaths (the first breath
    is settling time and is skipped).  Averaging keeps the measure
    stable against the spike-train randomness that a global maximum
    would amplify.
    """
    onsets, gaps, _cmd = _detached_intervals(spec, fmap, bt, g, seed)
    if gaps.shape[0] == 0:
        return math.inf
    mids = 0.5 * (onsets[:-1] + onsets[1:])
    edges = bt.phases.exhale_onsets
    peaks = []
    for j in range(1, edges.shape[0] - 1):
        inside = gaps[(mids >= edges[j]) & (mids < edges[j + 1])]
        if inside.shape[0]:
            peaks.append(float(inside.max()))
    if not peaks:
        return float(gaps.max())
    return float(np.mean(peaks))


def _realized_top(spec: NetworkSpec, fmap: FeedbackMap, bt: BreathingTrace,
                  g: RsaModelG, seed: int) -> tuple[float, float]:
    """(realized, commanded) mean interval over the top command band.

    The band is the slowest-commanded decile of beats.  This is the
    quantity the correction must fix: not whether some lucky interval
    reaches the peak, but whether beats commanded to be slow actually
    are.
    """
    _onsets, gaps, cmd = _detached_intervals(spec, fmap, bt, g, seed)
    if gaps.shape[0] == 0:
        return math.inf, math.nan
    cut = float(np.quantile(cmd, 0.9))
    band = cmd >= cut
    return float(gaps[band].mean()), float(cmd[band].mean())


def refine_h_exponential(spec: NetworkSpec, fmap: FeedbackMap,
                         bt: BreathingTrace, g: RsaModelG, seed: int = 0,
                         tol: float = 0.05, k_bound: float = 512.0
                         ) -> FeedbackMap:
    """Add the exponential long-interval correction to a base map.

    The base map is exact for steady rates but undershoots when the
    commanded rate only peaks briefly: beats commanded to be slow come
    out too fast.  The longest interval the base map reaches under the
    realistic trace becomes ``t_thr``, and ``k`` grows geometrically
    until the slowest-commanded beats are realized within ``tol`` of
    their command.  A map that already realizes them keeps k = 0.
    """
    fmap.validate()
    base = replace(fmap, t_thr=math.inf, k=0.0)
    t_thr = _achieved_max_interval(spec, base, bt, g, seed)
    if not math.isfinite(t_thr):
        raise CalibrationError(
            f"{fmap.osc_id}: rhythm extinguished under the base map alone")
    realized, commanded = _realized_top(spec, base, bt, g, seed)
    if realized >= (1.0 - tol) * commanded:
        return replace(fmap, t_thr=t_thr, k=0.0)

    lo_k, hi_k = 0.0, None
    k = 1.0
    while k <= k_bound:
        cand = replace(fmap, t_thr=t_thr, k=k)
        realized, commanded = _realized_top(spec, cand, bt, g, seed)
        if not math.isfinite(realized) or realized > (1.0 + tol) * commanded:
            hi_k = k
            break
        if realized >= (1.0 - tol) * commanded:
            return cand
        lo_k = k
        k *= 1.6
    if hi_k is None:
        raise CalibrationError(
            f"{fmap.osc_id}: correction factor search reached {k_bound:g} "
            f"with at most {realized:g}s of the commanded {commanded:g}s")

    for _ in range(20):
        k = 0.5 * (lo_k + hi_k)
        cand = replace(fmap, t_thr=t_thr, k=k)
        realized, commanded = _realized_top(spec, cand, bt, g, seed)
        if not math.isfinite(realized) or realized > (1.0 + tol) * commanded:
            hi_k = k
        elif realized < (1.0 - tol) * commanded:
            lo_k = k
        else:
            return cand
    raise CalibrationError(
        f"{fmap.osc_id}: no correction factor lands the commanded "
        f"{commanded:g}s within {tol:.0%}")


# ---------------------------------------------------------------------------
# calibration step: harmonize coupled members


def _pair_timing(res, a: str, b: str, warmup: float) -> tuple[float, float]:
    """(violation fraction, median signed delay) of b relative to a."""
    ta = res.onset_times(a, after=warmup)
    tb = res.onset_times(b, after=warmup)
    if ta.shape[0] < 3:
        return 1.0, math.nan
    bad = 0
    delays = []
    for i in range(ta.shape[0] - 1):
        inside = tb[(tb >= ta[i]) & (tb < ta[i + 1])]
        if inside.shape[0] == 0:
            bad += 1
            near = tb[np.argmin(np.abs(tb - ta[i]))] if tb.size else math.nan
            delays.append(near - ta[i])
        else:
            delays.append(float(inside[0] - ta[i]))
    frac = bad / max(1, ta.shape[0] - 1)
    med = float(np.median(delays)) if delays else math.nan
    return frac, med


def _closed_loop_run(spec: NetworkSpec, maps: Mapping[str, FeedbackMap],
                     bt: BreathingTrace, g: RsaModelG, seed: int):
    external = {}
    for osc_id, fmap in maps.items():
        t, rates = _commanded_rates(bt, g, fmap)
        external[osc_id] = rate_to_spike_train(t, rates, seed,
                                               osc_id=osc_id).times
    return simulate(build_network(spec), bt.duration, external=external)


def harmonize_scaling(spec: NetworkSpec, maps: dict[str, FeedbackMap],
                      bt: BreathingTrace, g: RsaModelG,
                      order: tuple[str, ...], seed: int = 0,
                      max_violation: float = 0.05
                      ) -> dict[str, FeedbackMap]:
    """Scale follower maps until the firing order survives modulation.

    The first member of ``order`` is the reference (s = 1) and pairs
    are settled one after another, each only once its predecessor pair
    holds.  A follower that breaks its slot has usually lost its anchor
    (same command as the leader erases the rest-state margin and lets
    it fire too early), so its scaling is first stepped up; if extra
    inhibition does not restore the order, it is stepped down instead.
    """
    maps = {k: replace(v) for k, v in maps.items()}
    ref = order[0].split(".")[0]
    if ref in maps:
        maps[ref] = replace(maps[ref], s=1.0, reference=True)
    warmup = min(5.0, 0.1 * bt.duration)

    for a_pop, b_pop in zip(order, order[1:]):
        b = b_pop.split(".")[0]
        if b not in maps:
            continue
        s0 = maps[b].s
        ladder = [s0] + [s0 * 1.15 ** j for j in range(1, 9)] \
                      + [s0 * 0.87 ** j for j in range(1, 7)]
        best_s, best_frac = s0, math.inf
        for s in ladder:
            maps[b] = replace(maps[b], s=s)
            res = _closed_loop_run(spec, maps, bt, g, seed)
            frac, _med = _pair_timing(res, a_pop, b_pop, warmup)
            if frac < best_frac:
                best_s, best_frac = s, frac
            if frac <= max_violation:
                break
        maps[b] = replace(maps[b], s=best_s)
        if best_frac > max_violation:
            raise CalibrationError(
                f"no scaling preserves the {a_pop}->{b_pop} order "
                f"(best violation rate {best_frac:.0%} at s={best_s:.3f})")
    return maps


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class RsaRunResult:
    """Beats and the fitted interval model of one closed-loop run."""

    beat_times: np.ndarray
    intervals: np.ndarray
    interval_c: np.ndarray
    g_sim: RsaModelG
    r_squared_vs_ref: float
    spearman_rho: float
    trace: BreathingTrace

    def write_csv(self, path: str) -> None:
        lines = [
            f"# r_squared_vs_ref,{self.r_squared_vs_ref:.9g}",
            f"# r_squared_sim_fit,{self.g_sim.r_squared:.9g}",
            f"# spearman_rho,{self.spearman_rho:.9g}",
            f"# g_sim_x1,{self.g_sim.x1:.9g}",
            f"# g_sim_x2,{self.g_sim.x2:.9g}",
            f"# g_sim_x3,{self.g_sim.x3:.9g}",
            "beat_time_s,rr_interval_s,avg_c",
        ]
        for i in range(self.intervals.shape[0]):
            lines.append(f"{self.beat_times[i + 1]:.9g},"
                         f"{self.intervals[i]:.9g},{self.interval_c[i]:.9g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def run_rsa(spec: NetworkSpec, resp: np.ndarray, sample_rate: float,
            maps: Mapping[str, FeedbackMap], g_ref: RsaModelG,
            beat_pop: str = "V.E", seed: int = 0, warmup: float = 5.0,
            shape: RampShape = RampShape()) -> RsaRunResult:
    """Closed-loop run: respiration in, modulated beat sequence out.

    The recording becomes a breathing-coefficient trace, every mapped
    member gets its own inhibitory train from the composed rates, and
    the coupled network runs for the trace duration.  Beats are the
    given population's activation onsets; each interval is paired with
    its average C, refit as a quadratic, and scored against the
    reference model.  Raises SimulationRunError if the rhythm collapses
    mid-run.
    """
    phases = detect_breath_phases(resp, sample_rate)
    bt = compute_breathing_coefficient(phases, shape, 1.0 / sample_rate,
                                       resp.shape[0] / sample_rate)
    g_ref.validate(0.0, float(bt.c.max()))
    res = _closed_loop_run(spec, maps, bt, g_ref, seed)

    beats = res.onset_times(beat_pop, after=warmup)
    limit = max(3.0, 2.0 * float(np.max(g_ref.predict(bt.c))))
    if beats.shape[0] < 3:
        raise SimulationRunError(f"rhythm collapsed near t={warmup:g}s: "
                                 f"{beats.shape[0]} beats after warm-up")
    gaps = np.diff(beats)
    if float(gaps.max()) > limit:
        at = beats[int(np.argmax(gaps))]
        raise SimulationRunError(f"rhythm collapsed near t={at:.2f}s "
                                 f"(gap {gaps.max():.2f}s)")
    if bt.duration - beats[-1] > limit:
        raise SimulationRunError(
            f"rhythm collapsed near t={beats[-1]:.2f}s (no further beats)")

    intervals = gaps
    cs = np.array([average_c(bt, float(a), float(b))
                   for a, b in zip(beats[:-1], beats[1:])])
    g_sim = fit_g(list(zip(cs, intervals)))
    pred_ref = np.asarray(g_ref.predict(cs))
    ss_tot = float(np.sum((intervals - intervals.mean()) ** 2))
    ss_res = float(np.sum((intervals - pred_ref) ** 2))
    r2_ref = 0.0 if ss_tot <= 0.0 else 1.0 - ss_res / ss_tot
    rho = float(spst.spearmanr(cs, intervals).statistic)
    return RsaRunResult(beat_times=beats, intervals=intervals, interval_c=cs,
                        g_sim=g_sim, r_squared_vs_ref=r2_ref,
                        spearman_rho=rho, trace=bt)
