from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpisim.dpi_core import (DEFAULT_CONSTANTS, AhpParams, FeedbackParams, NeuronParams,
                             NeuronState, NumericalError, PhysicalConstants, SynapseParams,
                             SynapseState, firing_rate, neuron_step, nmda_gate, positive_feedback,
                             simulate_neuron, synapse_step, time_constant)

from oracles import I_0, neuron_rhs

PA = 1e-12
DC = NeuronParams(I_tau=4.1 * PA, I_g=500 * PA, I_dc=36.6 * PA)


# constants and parameters -------------------------------------------------------

def test_time_constant_formula():
    assert time_constant(5 * PA, 4.1 * PA) == pytest.approx(5e-12 * 0.025 / (0.7 * 4.1e-12))


@pytest.mark.parametrize("kw", [dict(kappa=1.2), dict(kappa=0.0), dict(U_T=-1.0), dict(I_0=0.0)])
def test_constants_are_validated(kw):
    with pytest.raises(ValueError):
        PhysicalConstants(**kw)


def test_parameter_validation():
    with pytest.raises(ValueError):
        NeuronParams(I_tau=0.1 * PA).validate()
    with pytest.raises(ValueError):
        NeuronParams(spike_threshold=400 * PA, I_g=500 * PA).validate()
    with pytest.raises(ValueError):
        SynapseParams(I_w=0.1 * PA).validate()
    with pytest.raises(ValueError):
        SynapseParams(kind="glycine")


# synapse -------------------------------------------------------------------------

def test_synapse_steady_state_is_fixed_point():
    p = SynapseParams(I_tau=5 * PA, I_g=50 * PA, I_w=10 * PA)
    i_ss = p.I_g / p.I_tau * p.I_w
    out = synapse_step(SynapseState(i_ss), p, 1.0, 1e-4)
    assert out.I_syn == pytest.approx(i_ss, rel=1e-14)


def test_synapse_decays_by_one_e_fold_per_tau():
    C = 10e-3 * 0.7 * 5 * PA / 0.025      # tau = 10 ms at I_tau = 5 pA
    p = SynapseParams(C_syn=C, I_tau=5 * PA)
    assert p.tau() == pytest.approx(10e-3)
    out = synapse_step(SynapseState(10 * PA), p, 0.0, 10e-3)
    assert out.I_syn == pytest.approx(10 * PA * np.exp(-1), rel=1e-12)


def test_synapse_floor_and_errors():
    p = SynapseParams()
    assert synapse_step(SynapseState(I_0), p, 0.0, 1e-4).I_syn == I_0
    with pytest.raises(ValueError):
        synapse_step(SynapseState(I_0), p, 0.0, 0.0)
    with pytest.raises(ValueError):
        synapse_step(SynapseState(I_0), p, 0.0, 10 * p.tau())


@given(st.lists(st.floats(0, 10), min_size=1, max_size=200))
def test_synapse_current_never_below_floor(drive):
    p = SynapseParams(I_tau=3 * PA, I_g=40 * PA, I_w=20 * PA)
    s = SynapseState(I_0)
    for u in drive:
        s = synapse_step(s, p, u, 1e-4)
        assert s.I_syn >= I_0 and np.isfinite(s.I_syn)


# feedback and gates ------------------------------------------------------------------

def test_feedback_vanishes_far_below_gain_and_at_gain():
    p = NeuronParams()
    # negligible next to the leak it competes with
    assert abs(positive_feedback(I_0, p)) < 1e-3 * p.I_tau
    assert positive_feedback(p.feedback.I_g_fb, p) == 0.0


def test_feedback_matches_arbitrary_precision_evaluation():
    p = NeuronParams(I_tau=4.1 * PA, feedback=FeedbackParams(alpha=2e10, I_g_fb=500 * PA))
    mpmath.mp.dps = 50
    k, i0 = mpmath.mpf("0.7"), mpmath.mpf("0.5e-12")
    i_g, i_tau, alpha = mpmath.mpf("500e-12"), mpmath.mpf("4.1e-12"), mpmath.mpf("2e10")
    i = 2 * i_g
    i_fb = i0 ** (1 / (k + 1)) * i ** (k / (k + 1)) / (1 + mpmath.exp(-alpha * (i - i_g)))
    ref = float(i_fb / i_tau * (i - i_g))
    assert positive_feedback(1000 * PA, p) == pytest.approx(ref, rel=1e-12)


def test_feedback_is_monotone_above_gain():
    p = NeuronParams()
    i = np.linspace(501, 5000, 200) * PA
    assert np.all(np.diff(positive_feedback(i, p)) > 0)


def test_nmda_gate_limits():
    thr = 100 * PA
    assert nmda_gate(10 * PA, 100 * thr, thr) == pytest.approx(10 * PA, rel=1e-6)
    assert nmda_gate(10 * PA, thr / 100, thr) == pytest.approx(0.0, abs=1e-6 * PA)
    assert nmda_gate(10 * PA, thr, thr) == pytest.approx(5 * PA)
    assert nmda_gate(10 * PA, 0.9 * thr, thr, hard=True) == 0.0


# neuron ---------------------------------------------------------------------------

def test_input_equal_to_leak_decays_to_floor_without_spiking():
    p = NeuronParams(I_dc=4.1 * PA, I_tau=4.1 * PA)
    _, trace, spikes = simulate_neuron(p, 0.5, 1e-4)
    assert len(spikes) == 0
    assert trace[-1] == pytest.approx(I_0, rel=1e-3)


def test_dc_experiment_fires_regularly_and_rate_is_converged():
    _, _, spikes = simulate_neuron(DC, 1.0, 1e-4)
    isi = np.diff(spikes[1:]) * 1e-4
    assert len(spikes) > 5
    assert np.std(isi) / np.mean(isi) < 0.01
    _, _, fine = simulate_neuron(DC, 0.25, 1e-6)
    assert np.mean(isi) == pytest.approx(np.mean(np.diff(fine[1:])) * 1e-6, rel=0.03)


def test_subthreshold_trajectory_follows_the_membrane_equation():
    """One Euler step equals the independently written right-hand side."""
    p = replace(DC, I_dc=20 * PA)
    for i in (1, 10, 100, 1000):
        s = NeuronState(i * PA, I_0, 0.0, 0.0)
        out = neuron_step(s, p, None, 1e-6)
        expected = i * PA + 1e-6 * neuron_rhs(i * PA, p.I_tau, p.I_g, p.I_dc, p.C_mem)
        assert out.I_mem == pytest.approx(expected, rel=1e-10)


def test_linear_regime_matches_first_order_low_pass():
    # with I_mem >> I_g the prefactor (1 + I_g/I_mem) -> 1 and, with the
    # feedback gate closed, the membrane is a first-order low-pass
    p = NeuronParams(C_mem=2 * PA, I_tau=5 * PA, I_g=5 * PA, I_dc=1000 * PA, spike_threshold=1e-6,
                     feedback=FeedbackParams(alpha=2e10, I_g_fb=1e-3))
    i_inf = p.I_g / p.I_tau * (p.I_dc - I_0 - p.I_tau) / (1 + I_0 / p.I_tau)
    tau = p.tau() / (1 + I_0 / p.I_tau)
    dt, n = tau / 2000, 8000
    s = NeuronState(500 * PA, I_0, 0.0, 0.0)
    err = 0.0
    for k in range(1, n + 1):
        s = neuron_step(s, p, None, dt)
        lin = i_inf + (500 * PA - i_inf) * np.exp(-k * dt / tau)
        err = max(err, abs(s.I_mem - lin) / i_inf)
    assert err < 0.01


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31))
def test_states_stay_finite_and_above_floor_under_random_input(seed):
    rng = np.random.default_rng(seed)
    n = 1000
    p = NeuronParams(C_mem=rng.uniform(1, 5, n) * PA, I_tau=rng.uniform(2, 20, n) * PA,
                     I_g=rng.uniform(50, 800, n) * PA, I_dc=rng.uniform(0.5, 200, n) * PA,
                     ahp=AhpParams())
    tau_min = float(np.min(p.tau()))
    dt = tau_min / 10
    s = NeuronState.rest((n,))
    for _ in range(1000):
        syn = {"ampa": rng.uniform(0.5, 300, n) * PA, "gaba_a": rng.uniform(0.5, 100, n) * PA,
               "gaba_b": rng.uniform(0.5, 10, n) * PA}
        s = neuron_step(s, p, syn, dt)
        assert np.all(s.I_mem >= I_0) and np.all(s.I_ahp >= I_0)
        assert np.all(np.isfinite(s.I_mem)) and np.all(np.isfinite(s.I_ahp))


@given(st.floats(0.5e-3, 20e-3))
def test_no_two_spikes_closer_than_refractory_period(t_ref):
    p = replace(DC, I_dc=2000 * PA, t_refractory=t_ref)
    dt = 1e-4
    _, _, spikes = simulate_neuron(p, 0.3, dt)
    assert len(spikes) > 2
    assert np.min(np.diff(spikes)) * dt >= t_ref - 1e-12


def test_refractory_hold_clamps_membrane_at_reset():
    p = replace(DC, I_dc=2000 * PA, t_refractory=5e-3)
    s = NeuronState.rest()
    held = []
    for _ in range(3000):
        s = neuron_step(s, p, None, 1e-4)
        if s.refractory_remaining > 0 and not s.spiked:
            held.append(s.I_mem)
    assert held and np.all(np.asarray(held) == I_0)


def test_rate_is_monotone_in_dc_input():
    i_dc = np.linspace(5, 400, 20) * PA
    rates = firing_rate(replace(DC, I_dc=i_dc), 1.0, 1e-4)
    assert np.all(np.diff(rates) >= 0)
    assert rates[-1] > rates[0]


def test_adaptation_reduces_rate():
    base = replace(DC, I_dc=100 * PA)
    plain = firing_rate(base, 2.0, 1e-4, settle=1.0)
    adapt = firing_rate(replace(base, ahp=AhpParams(I_w_ahp=2000 * PA)), 2.0, 1e-4, settle=1.0)
    assert adapt < 0.9 * plain


def test_both_inhibition_types_reduce_rate():
    base = replace(DC, I_dc=100 * PA)
    plain = firing_rate(base, 1.0, 1e-4)
    inh = 20 * PA
    shunt = firing_rate(base, 1.0, 1e-4, syn_inputs={"gaba_a": inh})
    leak = firing_rate(base, 1.0, 1e-4, syn_inputs={"gaba_b": inh})
    assert shunt < plain and leak < plain


def test_neuron_is_deterministic():
    a = simulate_neuron(DC, 0.3, 1e-4)
    b = simulate_neuron(DC, 0.3, 1e-4)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2], b[2])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_raises():
    p = replace(DC, I_dc=np.inf)
    with pytest.raises(NumericalError):
        neuron_step(NeuronState.rest(), p, None, 1e-4)
    with pytest.raises(ValueError):
        neuron_step(NeuronState.rest(), DC, None, -1.0)


def test_batched_step_equals_individual_steps():
    p = replace(DC, I_dc=np.array([20.0, 36.6, 80.0]) * PA)
    s = NeuronState.rest((3,))
    singles = [NeuronState.rest() for _ in range(3)]
    for _ in range(2000):
        s = neuron_step(s, p, None, 1e-4)
        singles = [neuron_step(si, replace(DC, I_dc=float(p.I_dc[i])), None, 1e-4)
                   for i, si in enumerate(singles)]
    np.testing.assert_array_equal(s.I_mem, [si.I_mem for si in singles])


def test_default_constants_are_shared():
    assert DEFAULT_CONSTANTS.I_0 == I_0
