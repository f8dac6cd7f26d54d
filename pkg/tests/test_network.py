import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpisim import autodiff as ad
from dpisim.autodiff import SurrogateSpec, Tape, value_of
from dpisim.dpi_core import NeuronParams, SynapseParams
from dpisim.hw_model import MismatchSpec
from dpisim.network import (Engine, Population, Projection, SpikeEvent, Topology, TrialProtocol,
                            classification_inputs, classify_batch, encode_poisson, encode_rates,
                            predict_from_counts, simulate, spikes_to_csv, traces_to_csv)

PA = 1e-12
NEURON = NeuronParams(I_tau=4.1 * PA, I_g=500 * PA, I_dc=1 * PA)
AMPA = SynapseParams(kind="ampa", I_tau=5 * PA, I_g=50 * PA, I_w=10 * PA)


def pair(w=1.0, kind="ampa", n_in=1, n_out=1):
    return Topology([Population("input", n_in), Population("out", n_out, NEURON)],
                    [Projection("input", "out", kind, np.full((n_out, n_in), w))],
                    {kind: SynapseParams(kind=kind, I_tau=5 * PA, I_g=50 * PA, I_w=10 * PA)})


def single_spike(n_steps, at=0, n=1):
    x = np.zeros((n, n_steps), dtype=bool)
    x[:, at] = True
    return x


# topology --------------------------------------------------------------------

def test_topology_validation():
    with pytest.raises(ValueError):
        Topology([Population("a", 1), Population("a", 2)], [])
    with pytest.raises(ValueError):
        Topology([Population("a", 1), Population("b", 2, NEURON)],
                 [Projection("a", "b", "ampa", np.ones((1, 1)))])
    with pytest.raises(ValueError):
        Topology([Population("a", 1), Population("b", 2)],
                 [Projection("a", "b", "ampa", np.ones((2, 1)))])
    with pytest.raises(ValueError):
        Projection("a", "b", "glycine", np.ones((1, 1)))


def test_fan_in_sums_over_all_incoming_projections():
    topo = Topology([Population("a", 3), Population("b", 2, NEURON)],
                    [Projection("a", "b", "ampa", np.array([[1, 2, 0], [0, 0, 4.0]])),
                     Projection("a", "b", "gaba_a", np.array([[1, 0, 0], [1, 1, 1.0]]))])
    np.testing.assert_array_equal(topo.fan_in("b"), [4, 7])
    assert topo.projection("a", "b", "GABA_A").kind == "gaba_a"
    assert set(topo.synapses) == {"ampa", "gaba_a"}


# engine ----------------------------------------------------------------------

def test_one_step_transmission_delay():
    topo = pair(w=5.0)
    eng = Engine(topo, 1e-4)
    i0 = eng.i_syn[("out", "ampa")].copy()
    eng.step({"input": np.ones((1, 1))})
    np.testing.assert_array_equal(eng.i_syn[("out", "ampa")], i0)
    eng.step({"input": np.zeros((1, 1))})
    assert eng.i_syn[("out", "ampa")][0, 0] > i0[0, 0]


@pytest.mark.parametrize("dt", [1e-5, 5e-5, 1e-4])
def test_spike_charge_does_not_depend_on_step(dt):
    topo = pair(w=1.0)
    eng = Engine(topo, dt)
    eng.step({"input": np.ones((1, 1))})
    eng.step({"input": np.zeros((1, 1))})
    peak = eng.i_syn[("out", "ampa")][0, 0]
    tau = AMPA.tau()
    expected = AMPA.I_g / AMPA.I_tau * AMPA.I_w * 1e-3 / tau
    assert peak == pytest.approx(expected, rel=0.03)


def test_synapse_count_scales_the_drive():
    peaks = []
    for w in (1.0, 2.0, 4.0):
        eng = Engine(pair(w=w), 1e-4)
        eng.step({"input": np.ones((1, 1))})
        eng.step({"input": np.zeros((1, 1))})
        peaks.append(eng.i_syn[("out", "ampa")][0, 0] - 0.5 * PA)
    assert peaks[1] == pytest.approx(2 * peaks[0], rel=1e-3)
    assert peaks[2] == pytest.approx(4 * peaks[0], rel=1e-3)


def test_batch_rows_are_independent_runs():
    topo = pair(w=20.0, n_in=4, n_out=3)
    rng = np.random.default_rng(0)
    x = rng.random((300, 2, 4)) < 0.2
    eng = Engine(topo, 1e-4, batch=2)
    both = np.array([value_of(eng.step({"input": x[t]})["out"]) for t in range(300)])
    for b in range(2):
        single = Engine(topo, 1e-4, batch=1)
        one = np.array([value_of(single.step({"input": x[t, b:b + 1]})["out"]) for t in range(300)])
        np.testing.assert_array_equal(both[:, b], one[:, 0])


def test_dt_must_be_positive():
    with pytest.raises(ValueError):
        Engine(pair(), 0.0)


# simulate --------------------------------------------------------------------

def test_zero_input_gives_no_spikes_and_header_only_csv():
    res = simulate(pair(), None, 0.2, 1e-4)
    assert res.spikes == []
    assert spikes_to_csv(res.spikes) == "time_s,population,neuron_id\n"


def test_strong_input_makes_sorted_deterministic_spikes():
    topo = pair(w=40.0, n_in=5, n_out=4)
    x = encode_poisson(np.full(5, 1.0), 200.0, 0.3, 1e-4, seed=1)
    a = simulate(topo, x, 0.3, 1e-4, record_traces=["out"])
    b = simulate(topo, x, 0.3, 1e-4, record_traces=["out"])
    assert len(a.spikes) > 0
    assert a.spikes == b.spikes
    assert a.spikes == sorted(a.spikes)
    assert spikes_to_csv(a.spikes) == spikes_to_csv(b.spikes)
    np.testing.assert_array_equal(a.counts["out"], a.spike_trains["out"].sum(axis=0))
    np.testing.assert_allclose(a.rate("out"), a.counts["out"] / 0.3)
    header = traces_to_csv(a, "out").splitlines()[0]
    assert header == "time_s,neuron_id,I_mem_pA,I_ahp_pA,I_syn_ampa_pA"


def test_inhibition_lowers_output_rate():
    exc = pair(w=30.0, n_in=5)
    x = encode_poisson(np.ones(5), 200.0, 0.5, 1e-4, seed=2)
    base = simulate(exc, x, 0.5, 1e-4).counts["out"][0]
    both = Topology([Population("input", 5), Population("out", 1, NEURON)],
                    [Projection("input", "out", "ampa", np.full((1, 5), 30.0)),
                     Projection("input", "out", "gaba_a", np.full((1, 5), 10.0))],
                    {"ampa": AMPA, "gaba_a": SynapseParams(kind="gaba_a", I_tau=5 * PA,
                                                           I_g=50 * PA, I_w=10 * PA)})
    assert simulate(both, x, 0.5, 1e-4).counts["out"][0] < base


def test_source_spikes_recorded_on_request():
    x = single_spike(100, at=10, n=2)
    res = simulate(pair(n_in=2), x, 0.01, 1e-4, record_sources=True)
    assert [(e.population, e.neuron_id) for e in res.spikes] == [("input", 0), ("input", 1)]
    assert res.spikes[0].time == pytest.approx(10e-4)


def test_input_shape_errors():
    topo = pair(n_in=2)
    with pytest.raises(ValueError):
        simulate(topo, np.zeros((3, 100), dtype=bool), 0.01, 1e-4)
    with pytest.raises(ValueError):
        simulate(topo, np.zeros((2, 10), dtype=bool), 0.01, 1e-4)
    with pytest.raises(ValueError):
        simulate(topo, {"out": np.zeros((1, 100), dtype=bool)}, 0.01, 1e-4)


def test_mismatch_is_reproducible_and_changes_dynamics():
    topo = pair(w=40.0, n_in=5, n_out=8)
    x = encode_poisson(np.ones(5), 200.0, 0.3, 1e-4, seed=3)
    clean = simulate(topo, x, 0.3, 1e-4).counts["out"]
    spec = MismatchSpec(cv=0.2, seed=9)
    m1 = simulate(topo, x, 0.3, 1e-4, mismatch=spec).counts["out"]
    m2 = simulate(topo, x, 0.3, 1e-4, mismatch=spec).counts["out"]
    np.testing.assert_array_equal(m1, m2)
    assert len(set(clean)) == 1
    assert len(set(m1)) > 1


# gradients through the network ----------------------------------------------

def test_weight_gradient_matches_finite_differences():
    # smooth forward makes the spike count differentiable in the ordinary sense
    spec = SurrogateSpec.for_threshold(NEURON.spike_threshold, "fast_sigmoid", 0.2,
                                       smooth_forward=True)
    x = encode_poisson(np.ones(3), 300.0, 0.05, 1e-4, seed=4).T[:, None, :]

    def count(w, tape=None):
        topo = Topology([Population("input", 3), Population("out", 2, NEURON)],
                        [Projection("input", "out", "ampa", w)], {"ampa": AMPA})
        eng = Engine(topo, 1e-4, surrogate=spec)
        total = 0.0
        for t in range(x.shape[0]):
            total = total + eng.step({"input": x[t]})["out"]
        return ad.sum(total * np.array([1.0, -0.5]))

    w0 = np.array([[30.0, 25.0, 35.0], [20.0, 40.0, 28.0]])
    tape = Tape()
    wv = tape.var(w0)
    g = tape.backward(count(wv))[wv]
    assert np.min(np.abs(g)) > 0.1
    h = 1e-3
    for idx in np.ndindex(w0.shape):
        e = np.zeros_like(w0)
        e[idx] = h
        fd = (value_of(count(w0 + e)) - value_of(count(w0 - e))) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


# encoding and classification -------------------------------------------------

@settings(max_examples=20)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_poisson_rate_matches_intensity(v, seed):
    x = encode_poisson(np.full(200, v), 100.0, 1.0, 1e-3, seed=seed)
    rate = x.sum() / 200
    assert abs(rate - 100 * v) < 5 * np.sqrt(100 * v / 200) + 1e-9


def test_poisson_encoding_errors():
    with pytest.raises(ValueError):
        encode_poisson(np.array([1.2]), 100.0, 1.0, 1e-3)
    with pytest.raises(ValueError):
        encode_poisson(np.array([0.5]), 2000.0, 1.0, 1e-3)
    with pytest.raises(ValueError):
        encode_rates(np.array([-1.0]), 1.0, 1e-3, np.random.default_rng())


def test_prediction_subtracts_rest_and_breaks_ties_low():
    assert list(predict_from_counts([[5, 5], [3, 9]], [[0, 0], [0, 7]])) == [0, 0]
    assert list(predict_from_counts([[2, 5]], [[0, 1]])) == [1]


def test_trial_inputs_are_silent_during_rest():
    proto = TrialProtocol(stim_ms=20.0, rest_ms=30.0, max_rate=500.0)
    x = classification_inputs(np.ones((2, 4)), proto, 1e-3, seed=0)
    assert x.shape == (50, 2, 4)
    assert not x[:30].any() and x[30:].any()
    again = classification_inputs(np.ones((2, 4)), proto, 1e-3, seed=0)
    np.testing.assert_array_equal(x, again)


def test_classify_batch_reads_the_driven_neuron():
    topo = Topology([Population("input", 2), Population("output", 2, NEURON)],
                    [Projection("input", "output", "ampa", np.array([[40.0, 0.0], [0.0, 40.0]]))],
                    {"ampa": AMPA})
    samples = np.array([[1.0, 0.0], [0.0, 1.0]])
    pred, stim, rest = classify_batch(topo, samples, TrialProtocol(100.0, 20.0, 300.0), 1e-4, 0)
    assert list(pred) == [0, 1]
    assert rest.sum() == 0


def test_spike_event_ordering():
    assert SpikeEvent(0.1, "a", 2) < SpikeEvent(0.1, "b", 0) < SpikeEvent(0.2, "a", 0)
