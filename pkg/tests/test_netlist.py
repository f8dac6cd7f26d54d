import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpisim.dpi_core import AhpParams, NeuronParams, SynapseParams
from dpisim.hw_model import default_calibration
from dpisim.netlist import (VERSION, ExportError, NetlistError, deploy, dumps, loads, to_topology,
                            validate)
from dpisim.network import Population, Projection, Topology, encode_poisson, simulate

PA = 1e-12
TABLE = default_calibration()


def network(seed=0, limit=16, scale=6.0, ahp=False):
    rng = np.random.default_rng(seed)
    hidden = NeuronParams(I_tau=4.1 * PA, I_dc=2 * PA, ahp=AhpParams() if ahp else None)
    out = NeuronParams(I_tau=rng.uniform(3, 6, 2) * PA, I_dc=1 * PA)
    return Topology(
        [Population("input", 6), Population("hidden", 4, hidden), Population("output", 2, out)],
        [Projection("input", "hidden", "ampa", rng.uniform(0, scale, (4, 6))),
         Projection("input", "hidden", "gaba_a", rng.uniform(0, 1, (4, 6))),
         Projection("hidden", "output", "ampa", rng.uniform(0, scale, (2, 4)))],
        {"ampa": SynapseParams(kind="ampa", I_tau=5 * PA, I_g=50 * PA, I_w=10 * PA),
         "gaba_a": SynapseParams(kind="gaba_a", I_tau=5 * PA, I_g=50 * PA, I_w=10 * PA)},
        fan_in_limit=limit)


def exported(**kw):
    deployed, net = deploy(network(**kw), TABLE)
    return deployed, net, dumps(net, TABLE)


def test_round_trip_is_exact_and_simulates_identically():
    deployed, net, text = exported(ahp=True)
    assert text.startswith(VERSION + "\n")
    assert validate(text, TABLE) == []
    again = to_topology(loads(text, TABLE), TABLE)
    assert dumps(deploy(again, TABLE)[1], TABLE) == text
    x = encode_poisson(np.full(6, 0.8), 200.0, 0.3, 1e-4, seed=5)
    a = simulate(deployed, x, 0.3, 1e-4)
    b = simulate(again, x, 0.3, 1e-4)
    assert len(a.spikes) > 0
    assert a.spikes == b.spikes


def test_deployed_weights_are_integer_counts_within_budget():
    deployed, net, _ = exported(limit=10, scale=8.0)
    for p in deployed.projections:
        assert np.all(p.weights == np.round(p.weights)) and np.all(p.weights >= 0)
    for pop in deployed.neurons:
        assert np.all(deployed.fan_in(pop.name) <= 10)
    assert max(net.fan_in().values()) <= 10


def test_biases_are_snapped_to_calibrated_codes():
    deployed, net, _ = exported()
    out = deployed.population("output").params
    for i, cur in enumerate(np.atleast_1d(out.I_tau)):
        code = net.biases[("output", i, "IF_TAU")]
        assert cur == TABLE.code_to_current("IF_TAU", code)
    hidden = deployed.population("hidden").params
    assert hidden.I_tau == pytest.approx(4.1 * PA)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.floats(0.5, 30.0))
def test_any_network_exports_within_fan_in(seed, limit, scale):
    _, net, text = exported(seed=seed, limit=limit, scale=scale)
    assert validate(text, TABLE) == []
    assert all(v <= limit for v in net.fan_in().values())


def test_unreachable_current_is_an_export_error():
    topo = network()
    topo.population("hidden").params.I_dc = 1.0
    with pytest.raises(ExportError):
        deploy(topo, TABLE)


# corrupted files -------------------------------------------------------------

def lines():
    return exported()[2].splitlines()


def corrupt(fn):
    ls = lines()
    fn(ls)
    return "\n".join(ls) + "\n"


def first(ls, prefix):
    return next(i for i, l in enumerate(ls) if l.startswith(prefix))


def _set(ls, prefix, field, value):
    i = first(ls, prefix)
    toks = ls[i].split()
    toks[field] = value
    ls[i] = " ".join(toks)


CORRUPTIONS = {
    "E_VERSION": lambda ls: ls.__setitem__(0, "dpi-netlist v2"),
    "E_SYNTAX": lambda ls: ls.insert(2, "wire a b"),
    "E_DANGLING": lambda ls: _set(ls, "conn input hidden", 5, "99"),
    "E_FANIN": lambda ls: _set(ls, "conn input hidden", 6, "500"),
    "E_BIAS_RANGE": lambda ls: _set(ls, "bias hidden 0 IF_TAU", 5, "300"),
    "E_COUNT": lambda ls: _set(ls, "conn hidden output", 6, "0"),
    "E_DUPLICATE": lambda ls: ls.append(ls[first(ls, "conn ")]),
}


@pytest.mark.parametrize("code", sorted(CORRUPTIONS))
def test_validator_reports_the_error_code(code):
    errors = validate(corrupt(CORRUPTIONS[code]), TABLE)
    assert errors and errors[0] == code
    with pytest.raises(NetlistError) as info:
        loads(corrupt(CORRUPTIONS[code]), TABLE)
    assert info.value.code == code


def test_more_invalid_netlists():
    cases = [
        (lambda ls: ls.pop(1), "E_SYNTAX"),                                     # fan_in_limit
        (lambda ls: _set(ls, "bias hidden 0 IF_TAU", 6, "9.999"), "E_BIAS_RANGE"),
        (lambda ls: ls.insert(2, ls[2]), "E_DUPLICATE"),                         # population twice
        (lambda ls: ls.pop(first(ls, "bias output 1 IF_TAU")), "E_DANGLING"),
        (lambda ls: _set(ls, "conn input hidden", 4, "x"), "E_SYNTAX"),
        (lambda ls: ls.pop(first(ls, "proj input hidden ampa")), "E_DANGLING"),
        (lambda ls: ls.insert(2, "bias nowhere 0 IF_TAU 6 22 4.100"), "E_DANGLING"),
    ]
    for fn, code in cases:
        assert validate(corrupt(fn), TABLE)[0] == code
    assert validate("", TABLE)[0] == "E_VERSION"


def test_comments_and_blank_lines_are_ignored():
    text = exported()[2]
    noisy = "# exported netlist\n\n" + text.replace("\n", "   # note\n", 3)
    assert validate(noisy, TABLE) == []
