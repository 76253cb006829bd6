"""cpgpace: coupled-oscillator pacemaker network simulation and tuning.

A desk-scale emulator of a small spiking central-pattern-generator ring
(three excitatory/inhibitory oscillators with device mismatch), plus the
calibration machinery around it: structured frequency/phase tuning, an
explicit period-to-bias map, and closed-loop respiratory modulation of
the generated rhythm.
"""

from .engine import available_backends, default_backend
from .errors import (CalibrationError, ConfigError, ConvergenceError, CpgPaceError,
                     DataError, NumericOverflowError, SimulationRunError,
                     StabilityError, UnstableRhythmError)
from .network import (Network, NetworkSpec, OscillatorSpec, SimulationResult,
                      build_network, cardiac_ring_spec, measure_period,
                      measure_phase_delays, simulate)
from .neuron_core import (MismatchModel, NeuronParams, NeuronState, SynapseParams,
                          apply_mismatch, derive_time_constants, step_neuron,
                          step_synapse)
from .tuning import (PeriodMap, TuningReport, TuningTarget, cardiac_targets,
                     fit_double_exponential, fit_period_map, prepare_defaults,
                     set_period_explicit, tune_gate_delay,
                     tune_oscillator_frequency, tune_phase_shifts, tune_rhythm)

__version__ = "0.1.0"

__all__ = [
    "available_backends", "default_backend",
    "CpgPaceError", "ConfigError", "StabilityError", "DataError",
    "SimulationRunError", "NumericOverflowError", "UnstableRhythmError",
    "ConvergenceError", "CalibrationError",
    "Network", "NetworkSpec", "OscillatorSpec", "SimulationResult",
    "build_network", "cardiac_ring_spec", "simulate",
    "measure_period", "measure_phase_delays",
    "NeuronParams", "SynapseParams", "NeuronState", "MismatchModel",
    "derive_time_constants", "step_neuron", "step_synapse", "apply_mismatch",
    "TuningTarget", "TuningReport", "PeriodMap", "cardiac_targets",
    "prepare_defaults", "tune_oscillator_frequency", "tune_phase_shifts",
    "tune_gate_delay", "tune_rhythm", "fit_period_map",
    "fit_double_exponential", "set_period_explicit",
    "__version__",
]
