from importlib import resources

import pytest

from dpisim.config import ConfigError, load_config, parse_config
from dpisim.hw_model import MismatchSpec

PA = 1e-12
PRESETS = sorted(p.name for p in resources.files("dpisim").joinpath("presets").iterdir()
                 if p.name.endswith(".ini"))


def cfg(text, **kw):
    return parse_config(text, "test.ini", **kw)


@pytest.mark.parametrize("name", PRESETS)
def test_every_preset_parses(name):
    with resources.as_file(resources.files("dpisim") / "presets" / name) as path:
        c = load_config(path)
    assert c.dt > 0


def test_units_are_converted_to_si():
    c = cfg("[run]\ndt_ms = 0.5\nseed = 4\n[neuron]\nC_mem_pF = 2\nI_dc_pA = 30\n"
            "t_refractory_ms = 3\n")
    p = c.neuron_params()
    assert c.dt == pytest.approx(5e-4)
    assert c.seed == 4
    assert p.C_mem == pytest.approx(2e-12)
    assert p.I_dc == pytest.approx(30 * PA)
    assert p.t_refractory == pytest.approx(3e-3)


def test_bias_codes_resolve_through_the_calibration_table():
    c = cfg("[neuron]\nI_tau_code = 6,22\nI_g_code = 6, 88\nI_dc_code = 2 57\n")
    p = c.neuron_params()
    assert p.I_tau == pytest.approx(4.1 * PA)
    assert p.I_g == pytest.approx(500 * PA)
    assert p.I_dc == pytest.approx(36.6 * PA)


def test_code_and_current_for_the_same_bias_conflict():
    with pytest.raises(ConfigError):
        cfg("[neuron]\nI_tau_code = 6,22\nI_tau_pA = 4\n").neuron_params()
    with pytest.raises(ConfigError):
        cfg("[synapse.ampa]\nI_w_code = 6,64\nI_w_pA = 4\n").synapse_params("ampa")


def test_population_overrides_the_neuron_template():
    c = cfg("[neuron]\nI_dc_pA = 10\nC_mem_pF = 3\n[population.a]\nsize = 2\nI_dc_pA = 20\n")
    p = c.neuron_params("population.a")
    assert p.I_dc == pytest.approx(20 * PA)
    assert p.C_mem == pytest.approx(3e-12)


def test_seed_override_wins(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nseed = 3\n")
    assert load_config(path).seed == 3
    assert load_config(path, seed=11).seed == 11


def test_mismatch_settings():
    assert cfg("[run]\nseed = 1\n").mismatch() is None
    assert cfg("[mismatch]\nenabled = false\n").mismatch() is None
    c = cfg("[run]\nseed = 5\n[mismatch]\ncv = 0.1\ndistribution = truncated_normal\n")
    assert c.mismatch() == MismatchSpec(0.1, "truncated_normal", 5)
    assert cfg("[mismatch]\nenabled = no\n").mismatch_spec().cv == 0.2


def test_experiment_setup_sections_are_typed():
    c = cfg("[run]\nexperiment = resonator\n[resonator]\nepochs = 7\nbeta1 = 0.3\n"
            "I_tau_init_pA = 5, 6\n")
    s = c.setup("resonator")
    assert (s.epochs, s.beta1, s.I_tau_init_pA) == (7, 0.3, (5.0, 6.0))
    d = cfg("[qat]\nfan_in_limit = 32\n").setup("binary_digits")
    assert d.qat.fan_in_limit == 32


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[run]\nbogus = 1\n",
    "[run]\ndt_ms = -1\n",
    "[run]\ndt_ms = nan\n",
    "[neuron]\nI_dc_pA = inf\n",
    "[mismatch]\ncv = nan\n",
    "[run]\nexperiment = cartwheel\n",
    "[run]\nseed = 1\nseed = 2\n",
    "[neuron]\nahp = maybe\n",
    "[neuron]\nI_tau_code = 9,22\n",
    "[neuron]\nI_tau_code = 6\n",
    "[synapse.glycine]\nI_w_pA = 1\n",
    "[projection.a.b]\nweights = 1\n",
    "[population.a]\nsource = true\n",
    "[population.a]\nsize = 1\nsource = true\nI_dc_pA = 3\n",
    "[population.a]\nsize = 1\n[projection.a.b.ampa]\nweights = 1\n",
    "[population.a]\nsize = 1\nsource = true\n[projection.b.a.ampa]\nweights = 1\n"
    "[population.b]\nsize = 1\n",
    "[population.a]\nsize = 1\n[input.a]\nkind = poisson\n",
    "[population.a]\nsize = 1\nsource = true\n[record]\ntraces = a\n",
    "[sweep]\nfine_start = 100\nfine_stop = 50\n",
    "[paths]\ncalibration = does/not/exist.csv\n",
    "no section header\n",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        cfg(text)


def test_parameter_level_checks_surface_as_config_errors():
    with pytest.raises(ConfigError):
        cfg("[neuron]\nthreshold_pA = 100\nI_g_pA = 500\n").neuron_params()
    with pytest.raises(ConfigError):
        cfg("[constants]\nkappa = 2\n").constants()
    with pytest.raises(ConfigError):
        cfg("[resonator]\nsurrogate_frac = x\n")


def test_paths_resolve_against_the_config_directory(tmp_path):
    (tmp_path / "cal.csv").write_text("bias_name,coarse,fine,current_pA\nIF_TAU,1,0,1\nIF_TAU,1,10,11\n")
    path = tmp_path / "c.ini"
    path.write_text("[paths]\ncalibration = cal.csv\n[neuron]\nI_tau_code = 1,5\n")
    c = load_config(path)
    assert c.path_of("calibration") == tmp_path / "cal.csv"
    assert c.neuron_params().I_tau == pytest.approx(6 * PA)


def test_unreadable_config_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
