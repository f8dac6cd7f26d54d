"""Discrete-time DPI synapse and neuron circuits.

All state variables are subthreshold currents in amperes. Parameters and
states may hold floats, numpy arrays (populations, mismatch draws) or
:class:`~dpisim.autodiff.Var` objects (training); the arithmetic is the same
in every case, so inference and training runs are bit-identical in their
forward values.

Integration scheme:

* synapse (first-order linear DPI filter) and AHP: exponential integrator,
  exact for an input held constant over the step;
* membrane current: explicit Euler on the nonlinear neuron equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateSpec, value_of

SYNAPSE_KINDS = ("ampa", "nmda", "gaba_a", "gaba_b")


class NumericalError(ArithmeticError):
    """Non-finite state; usually the time step is too coarse for the parameters."""


@dataclass(frozen=True)
class PhysicalConstants:
    kappa: float = 0.7
    U_T: float = 0.025
    I_0: float = 0.5e-12

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.U_T <= 0 or self.I_0 <= 0:
            raise ValueError("U_T and I_0 must be positive")


DEFAULT_CONSTANTS = PhysicalConstants()


def time_constant(C, I_tau, consts: PhysicalConstants = DEFAULT_CONSTANTS):
    """tau = C U_T / (kappa I_tau)."""
    return C * consts.U_T / (consts.kappa * I_tau)


@dataclass
class SynapseParams:
    kind: str = "ampa"
    C_syn: float = 1.0e-12
    I_tau: float = 5e-12
    I_g: float = 50e-12
    I_w: float = 10e-12
    nmda_gate_threshold: float | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in SYNAPSE_KINDS:
            raise ValueError(f"unknown synapse kind {self.kind!r}")

    def tau(self, consts: PhysicalConstants = DEFAULT_CONSTANTS):
        return time_constant(self.C_syn, self.I_tau, consts)

    def validate(self, consts: PhysicalConstants = DEFAULT_CONSTANTS):
        for name in ("I_tau", "I_g", "I_w"):
            if np.any(np.asarray(value_of(getattr(self, name))) < consts.I_0):
                raise ValueError(f"{name} below dark current I_0")
        if np.any(np.asarray(value_of(self.C_syn)) <= 0):
            raise ValueError("C_syn must be positive")
        tau = np.asarray(value_of(self.tau(consts)))
        if not np.all(np.isfinite(tau) & (tau > 0)):
            raise ValueError("synapse time constant must be finite and positive")
        return self


@dataclass
class SynapseState:
    I_syn: float


@dataclass
class AhpParams:
    C_ahp: float = 5e-12
    I_tau_ahp: float = 1e-12
    I_g_ahp: float = 5e-12
    I_w_ahp: float = 20e-12

    def tau(self, consts: PhysicalConstants = DEFAULT_CONSTANTS):
        return time_constant(self.C_ahp, self.I_tau_ahp, consts)


@dataclass
class FeedbackParams:
    alpha: float = 2e10   # 1/A
    I_g_fb: float = 500e-12


@dataclass
class NeuronParams:
    C_mem: float = 5e-12
    I_tau: float = 4.1e-12
    I_g: float = 500e-12
    I_dc: float = 36.6e-12
    spike_threshold: float = 2e-9
    reset_current: float | None = None
    t_refractory: float = 2e-3
    ahp: AhpParams | None = None
    feedback: FeedbackParams = field(default_factory=FeedbackParams)
    ahp_pulse_width: float | None = None

    def tau(self, consts: PhysicalConstants = DEFAULT_CONSTANTS):
        return time_constant(self.C_mem, self.I_tau, consts)

    def validate(self, consts: PhysicalConstants = DEFAULT_CONSTANTS):
        I0 = consts.I_0
        for name in ("I_tau", "I_g", "I_dc", "spike_threshold"):
            if np.any(np.asarray(value_of(getattr(self, name))) < I0 * (1 - 1e-12)):
                raise ValueError(f"{name} below dark current I_0")
        if np.any(np.asarray(value_of(self.spike_threshold)) <= np.asarray(value_of(self.I_g))):
            raise ValueError("spike_threshold must exceed I_g")
        if np.any(np.asarray(self.t_refractory) < 0):
            raise ValueError("t_refractory must be >= 0")
        return self


@dataclass
class NeuronState:
    I_mem: float
    I_ahp: float
    refractory_remaining: float = 0.0
    spiked: float = 0.0

    @classmethod
    def rest(cls, shape=(), consts: PhysicalConstants = DEFAULT_CONSTANTS) -> "NeuronState":
        if shape == ():
            return cls(consts.I_0, consts.I_0, 0.0, 0.0)
        return cls(np.full(shape, consts.I_0), np.full(shape, consts.I_0),
                   np.zeros(shape), np.zeros(shape))


def synapse_update(i_syn, params: SynapseParams, spike_in, dt,
                   consts: PhysicalConstants = DEFAULT_CONSTANTS):
    """Array-level synapse update used by :func:`synapse_step` and the network engine."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = params.tau(consts)
    if np.any(np.asarray(value_of(tau)) < dt):
        raise ValueError("dt exceeds the synapse time constant")
    i_ss = params.I_g / params.I_tau * params.I_w * spike_in
    decay = ad.exp(-dt / tau) if ad.is_var(tau) else np.exp(-dt / tau)
    return ad.maximum(i_ss + (i_syn - i_ss) * decay, consts.I_0)


def synapse_step(state: SynapseState, params: SynapseParams, spike_in, dt,
                 consts: PhysicalConstants = DEFAULT_CONSTANTS) -> SynapseState:
    """Advance one DPI synapse by ``dt``; ``spike_in`` is the weighted input drive during the step."""
    return SynapseState(synapse_update(state.I_syn, params, spike_in, dt, consts))


def positive_feedback(i_mem, params: NeuronParams, consts: PhysicalConstants = DEFAULT_CONSTANTS,
                      i_tau=None):
    """Positive-feedback current of the spike-generation block.

    f = I_fb / I_tau * (I_mem - I_g_fb), with
    I_fb = I_0^(1/(k+1)) * I_mem^(k/(k+1)) / (1 + exp(-alpha (I_mem - I_g_fb))).
    """
    k = consts.kappa
    fb = params.feedback
    if i_tau is None:
        i_tau = params.I_tau
    gate = ad.logistic(fb.alpha * (i_mem - fb.I_g_fb))
    i_fb = consts.I_0 ** (1.0 / (k + 1.0)) * ad.power(i_mem, k / (k + 1.0)) * gate
    return i_fb / i_tau * (i_mem - fb.I_g_fb)


def nmda_gate(i_syn_nmda, i_mem, threshold, slope: float = 4.0, hard: bool = False):
    """Voltage(-current) gate of the NMDA synapse.

    Logistic in log-current: ``i_syn * 1 / (1 + (threshold / i_mem)**slope)``.
    ``hard=True`` swaps in a step at the threshold (inference only).
    """
    if hard:
        return i_syn_nmda * (np.asarray(value_of(i_mem)) >= value_of(threshold))
    return i_syn_nmda * ad.logistic(slope * (ad.log(i_mem) - np.log(value_of(threshold))
                                             if not ad.is_var(threshold)
                                             else ad.log(i_mem) - ad.log(threshold)))


def _zero_inputs():
    return {k: 0.0 for k in SYNAPSE_KINDS}


def neuron_step(state: NeuronState, params: NeuronParams, syn_inputs: Mapping | None, dt,
                consts: PhysicalConstants = DEFAULT_CONSTANTS,
                surrogate: SurrogateSpec | None = None,
                nmda_threshold=None, nmda_slope: float = 4.0, nmda_hard: bool = False,
                check_finite: bool = True) -> NeuronState:
    """Advance a DPI neuron (or a population of them) by ``dt``.

    ``syn_inputs`` maps synapse kind to its output current. With ``surrogate``
    set, spikes go through :func:`~dpisim.autodiff.spike_surrogate` so the
    step is differentiable; otherwise a hard comparison is used.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    syn = _zero_inputs()
    if syn_inputs:
        syn.update({k.lower(): v for k, v in syn_inputs.items()})
    I0 = consts.I_0
    i_mem, i_ahp = state.I_mem, state.I_ahp
    refr = np.asarray(state.refractory_remaining, dtype=float)
    held = refr > 0.5 * dt

    i_tau = params.I_tau + syn["gaba_b"]
    nmda = syn["nmda"]
    if not (np.isscalar(value_of(nmda)) and value_of(nmda) == 0.0):
        thr = params.spike_threshold if nmda_threshold is None else nmda_threshold
        nmda = nmda_gate(nmda, i_mem, thr, nmda_slope, hard=nmda_hard)
    i_in = ad.maximum(params.I_dc + syn["ampa"] + nmda - syn["gaba_a"], I0)
    i_inf = params.I_g / i_tau * (i_in - i_ahp - i_tau)
    f = positive_feedback(i_mem, params, consts, i_tau=i_tau)
    tau = params.C_mem * consts.U_T / (consts.kappa * i_tau)
    didt = (i_inf + f - i_mem * (1.0 + i_ahp / i_tau)) / (tau * (1.0 + params.I_g / i_mem))
    cand = ad.maximum(i_mem + dt * didt, I0)

    threshold = params.spike_threshold
    if surrogate is None:
        s = (np.asarray(value_of(cand)) >= value_of(threshold)) * 1.0
    else:
        s = ad.spike_surrogate(cand, threshold, surrogate)
    if np.any(held):
        s = ad.where(held, 0.0, s)
    elif np.ndim(value_of(s)) == 0:
        s = s if ad.is_var(s) else float(s)
    reset = I0 if params.reset_current is None else params.reset_current
    if surrogate is not None and surrogate.detach_reset:
        sv = value_of(s)
        new_mem = sv * reset + (1.0 - sv) * cand
    else:
        new_mem = s * reset + (1.0 - s) * cand
    if np.any(held):
        new_mem = ad.where(held, reset, new_mem)

    if params.ahp is not None:
        a = params.ahp
        pulse = dt if params.ahp_pulse_width is None else params.ahp_pulse_width
        u = state.spiked * (pulse / dt)
        i_ss = a.I_g_ahp / a.I_tau_ahp * a.I_w_ahp * u
        tau_ahp = a.tau(consts)
        decay = ad.exp(-dt / tau_ahp) if ad.is_var(tau_ahp) else np.exp(-dt / tau_ahp)
        new_ahp = ad.maximum(i_ss + (i_ahp - i_ss) * decay, I0)
    else:
        new_ahp = i_ahp

    fired = np.asarray(value_of(s)) >= 0.5
    t_ref = np.asarray(params.t_refractory, dtype=float)
    new_refr = np.where(fired, t_ref, np.where(held, np.maximum(refr - dt, 0.0), 0.0))
    if new_refr.ndim == 0:
        new_refr = float(new_refr)

    if check_finite:
        vm, va = value_of(new_mem), value_of(new_ahp)
        if not (np.all(np.isfinite(vm)) and np.all(np.isfinite(va))):
            raise NumericalError("non-finite neuron state; reduce dt")
    return NeuronState(new_mem, new_ahp, new_refr, s)


def simulate_neuron(params: NeuronParams, duration: float, dt: float,
                    consts: PhysicalConstants = DEFAULT_CONSTANTS, syn_inputs=None,
                    state: NeuronState | None = None, record: bool = True):
    """Run a single neuron (or a broadcast population) under constant inputs.

    Returns ``(times, i_mem_trace, spike_steps)``; ``spike_steps`` lists step
    indices where a spike was emitted (for arrays: a boolean matrix).
    """
    n = int(round(duration / dt))
    shape = np.shape(np.broadcast_arrays(*[np.asarray(value_of(v), dtype=float) for v in
                                           (params.I_tau, params.I_dc, params.I_g,
                                            params.spike_threshold)])[0])
    st = state or NeuronState.rest(shape, consts)
    trace = np.empty((n,) + shape) if record else None
    spikes = np.zeros((n,) + shape, dtype=bool)
    for k in range(n):
        st = neuron_step(st, params, syn_inputs, dt, consts)
        if record:
            trace[k] = st.I_mem
        spikes[k] = np.asarray(st.spiked) >= 0.5
    times = (np.arange(n) + 1) * dt
    if shape == ():
        return times, trace, np.flatnonzero(spikes)
    return times, trace, spikes


def firing_rate(params: NeuronParams, duration: float, dt: float,
                consts: PhysicalConstants = DEFAULT_CONSTANTS, syn_inputs=None, settle: float = 0.0):
    """Mean rate (Hz) over ``[settle, duration]`` under constant input."""
    _, _, spikes = simulate_neuron(params, duration, dt, consts, syn_inputs, record=False)
    start = int(round(settle / dt))
    if np.ndim(spikes) == 1:
        count = np.count_nonzero(spikes >= start)
        return count / (duration - start * dt)
    return spikes[start:].sum(axis=0) / (duration - start * dt)


def with_params(params: NeuronParams, **changes) -> NeuronParams:
    return replace(params, **changes)
