"""INI run configuration with a strict schema.

Every section and key is checked before anything runs: unknown names, bad
types, out-of-range values and missing paths raise :class:`ConfigError`.
Numeric keys carry their unit in the name (``I_tau_pA``, ``dt_ms``).
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .dpi_core import (SYNAPSE_KINDS, AhpParams, FeedbackParams, NeuronParams, PhysicalConstants,
                       SynapseParams)
from .experiments import DigitsSetup, LocalRuleSetup, ResonatorSetup
from .hw_model import BiasCode, CalibrationTable, MismatchSpec, default_calibration, load_calibration
from .learn import QatSpec

PA = 1e-12
EXPERIMENTS = ("none", "resonator", "binary_digits", "local_rule")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ConfigError(ValueError):
    pass


# value parsers -----------------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _names(s: str) -> tuple:
    out = tuple(x for x in s.replace(",", " ").split())
    for x in out:
        if not _NAME.match(x):
            raise ValueError(f"bad name {x!r}")
    return out


def _code(s: str) -> BiasCode:
    parts = s.replace(",", " ").split()
    if len(parts) != 2:
        raise ValueError("bias code is 'coarse,fine'")
    return BiasCode(int(parts[0]), int(parts[1]))


def _positive(f):
    def parse(s):
        v = f(s)
        if not (v > 0 and np.isfinite(v)):
            raise ValueError("must be finite and > 0")
        return v
    return parse


def _nonneg(f):
    def parse(s):
        v = f(s)
        if not (v >= 0 and np.isfinite(v)):
            raise ValueError("must be finite and >= 0")
        return v
    return parse


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


POS, NONNEG = _positive(float), _nonneg(float)
POS_INT, NONNEG_INT = _positive(int), _nonneg(int)

NEURON_KEYS = {
    "C_mem_pF": POS, "I_tau_pA": POS, "I_g_pA": POS, "I_dc_pA": POS, "threshold_pA": POS,
    "reset_pA": POS, "t_refractory_ms": NONNEG, "alpha_per_A": NONNEG, "I_g_fb_pA": POS,
    "ahp": _bool, "C_ahp_pF": POS, "I_tau_ahp_pA": POS, "I_g_ahp_pA": POS, "I_w_ahp_pA": POS,
    "ahp_pulse_width_ms": POS,
    "I_tau_code": _code, "I_g_code": _code, "I_dc_code": _code, "threshold_code": _code,
}
SYNAPSE_KEYS = {"C_syn_pF": POS, "I_tau_pA": POS, "I_g_pA": POS, "I_w_pA": POS,
                "nmda_gate_threshold_pA": POS, "I_tau_code": _code, "I_g_code": _code,
                "I_w_code": _code}

STATIC_SCHEMA: dict[str, dict[str, Callable]] = {
    "run": {"experiment": _choice(*EXPERIMENTS), "seed": NONNEG_INT, "dt_ms": POS,
            "duration_s": POS, "out": str},
    "constants": {"kappa": POS, "U_T": POS, "I_0_pA": POS},
    "paths": {"calibration": str, "data_dir": str, "checkpoint": str},
    "neuron": NEURON_KEYS,
    "record": {"traces": _names, "plots": _bool, "sources": _bool},
    "mismatch": {"enabled": _bool, "cv": NONNEG,
                 "distribution": _choice("lognormal", "truncated_normal"), "seed": NONNEG_INT},
    "sweep": {"bias": str, "coarse": NONNEG_INT, "fine_start": NONNEG_INT, "fine_stop": NONNEG_INT,
              "points": POS_INT, "n": POS_INT, "C_mem_pF": POS},
    "qat": {"enabled": _bool, "fan_in_limit": POS_INT, "l1_lambda": NONNEG, "l2_lambda": NONNEG,
            "target_fanin": NONNEG, "per_weight": _bool},
}
PATTERN_SCHEMA = {
    "synapse": SYNAPSE_KEYS,
    "population": dict(NEURON_KEYS, size=POS_INT, source=_bool),
    "projection": {"weights": str, "seed": NONNEG_INT},
    "input": {"kind": _choice("none", "poisson", "times"), "rate_hz": NONNEG,
              "times_ms": _floats, "start_ms": NONNEG, "stop_ms": NONNEG, "seed": NONNEG_INT},
}


def _setup_schema(cls) -> dict:
    """Keys of an experiment setup dataclass, typed from their defaults."""
    out = {}
    for f in fields(cls):
        d = f.default
        if isinstance(d, bool):
            out[f.name] = _bool
        elif isinstance(d, int):
            out[f.name] = NONNEG_INT
        elif isinstance(d, float):
            out[f.name] = float
        elif isinstance(d, tuple):
            out[f.name] = _floats
        elif isinstance(d, str):
            out[f.name] = str
    return out


EXPERIMENT_SECTIONS = {"resonator": ResonatorSetup, "binary_digits": DigitsSetup,
                       "local_rule": LocalRuleSetup}
for _name, _cls in EXPERIMENT_SECTIONS.items():
    STATIC_SCHEMA[_name] = _setup_schema(_cls)


def _schema_for(section: str) -> dict | None:
    if section in STATIC_SCHEMA:
        return STATIC_SCHEMA[section]
    head, _, rest = section.partition(".")
    if head not in PATTERN_SCHEMA or not rest:
        return None
    parts = rest.split(".")
    if head == "projection":
        if len(parts) != 3 or parts[2] not in SYNAPSE_KINDS:
            return None
    elif head == "synapse":
        if len(parts) != 1 or parts[0] not in SYNAPSE_KINDS:
            return None
    elif len(parts) != 1:
        return None
    if not all(_NAME.match(p) for p in parts):
        return None
    return PATTERN_SCHEMA[head]


# the config object -------------------------------------------------------------

@dataclass
class RunConfig:
    path: Path
    sections: dict = field(default_factory=dict)   # section -> {key: parsed value}
    seed_override: int | None = None

    def get(self, section: str, key: str, default: Any = None):
        return self.sections.get(section, {}).get(key, default)

    def has(self, section: str) -> bool:
        return section in self.sections

    @property
    def seed(self) -> int:
        return self.seed_override if self.seed_override is not None else self.get("run", "seed", 0)

    @property
    def experiment(self) -> str:
        return self.get("run", "experiment", "none")

    @property
    def dt(self) -> float:
        return self.get("run", "dt_ms", 0.1) * 1e-3

    def path_of(self, key: str) -> Path | None:
        v = self.get("paths", key)
        return None if v is None else Path(v)

    # builders ---------------------------------------------------------------
    def constants(self) -> PhysicalConstants:
        s = self.sections.get("constants", {})
        try:
            return PhysicalConstants(kappa=s.get("kappa", 0.7), U_T=s.get("U_T", 0.025),
                                     I_0=s.get("I_0_pA", 0.5) * PA)
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [constants] {exc}") from None

    def calibration(self) -> CalibrationTable:
        p = self.path_of("calibration")
        try:
            return default_calibration() if p is None else load_calibration(p)
        except ValueError as exc:
            raise ConfigError(f"{p}: {exc}") from None

    def mismatch(self) -> MismatchSpec | None:
        s = self.sections.get("mismatch")
        if not s or not s.get("enabled", True):
            return None
        return MismatchSpec(cv=s.get("cv", 0.2), distribution=s.get("distribution", "lognormal"),
                            seed=s.get("seed", self.seed))

    def mismatch_spec(self) -> MismatchSpec:
        """Mismatch settings even when disabled for simulation (sweeps always sample)."""
        s = self.sections.get("mismatch", {})
        return MismatchSpec(cv=s.get("cv", 0.2), distribution=s.get("distribution", "lognormal"),
                            seed=s.get("seed", self.seed))

    def qat(self, base: QatSpec = QatSpec()) -> QatSpec:
        s = self.sections.get("qat", {})
        return replace(base, **s)

    def neuron_params(self, section: str = "neuron", base: NeuronParams | None = None,
                      table: CalibrationTable | None = None) -> NeuronParams:
        """Neuron template from ``[neuron]`` with ``section`` overrides on top."""
        keys = dict(self.sections.get("neuron", {}))
        if section != "neuron":
            keys.update({k: v for k, v in self.sections.get(section, {}).items()
                         if k in NEURON_KEYS})
        p = base or NeuronParams()
        codes = {"I_tau_code": ("I_tau", "IF_TAU"), "I_g_code": ("I_g", "IF_GAIN"),
                 "I_dc_code": ("I_dc", "IF_DC"), "threshold_code": ("spike_threshold", "IF_THR")}
        plain = {"C_mem_pF": ("C_mem", PA), "I_tau_pA": ("I_tau", PA), "I_g_pA": ("I_g", PA),
                 "I_dc_pA": ("I_dc", PA), "threshold_pA": ("spike_threshold", PA),
                 "reset_pA": ("reset_current", PA), "t_refractory_ms": ("t_refractory", 1e-3),
                 "ahp_pulse_width_ms": ("ahp_pulse_width", 1e-3)}
        kw = {attr: keys[k] * scale for k, (attr, scale) in plain.items() if k in keys}
        for k, (attr, bias) in codes.items():
            if k in keys:
                if attr in kw:
                    raise ConfigError(f"{self.path}: [{section}] sets both {k} and a current for {attr}")
                table = table or self.calibration()
                try:
                    kw[attr] = table.code_to_current(bias, keys[k])
                except ValueError as exc:
                    raise ConfigError(f"{self.path}: [{section}] {k}: {exc}") from None
        fb = p.feedback
        if "alpha_per_A" in keys or "I_g_fb_pA" in keys:
            fb = FeedbackParams(alpha=keys.get("alpha_per_A", fb.alpha),
                                I_g_fb=keys.get("I_g_fb_pA", fb.I_g_fb / PA) * PA)
        ahp = p.ahp
        if keys.get("ahp", ahp is not None):
            a = ahp or AhpParams()
            ahp = AhpParams(C_ahp=keys.get("C_ahp_pF", a.C_ahp / PA) * PA,
                            I_tau_ahp=keys.get("I_tau_ahp_pA", a.I_tau_ahp / PA) * PA,
                            I_g_ahp=keys.get("I_g_ahp_pA", a.I_g_ahp / PA) * PA,
                            I_w_ahp=keys.get("I_w_ahp_pA", a.I_w_ahp / PA) * PA)
        else:
            ahp = None
        params = replace(p, feedback=fb, ahp=ahp, **kw)
        try:
            return params.validate(self.constants())
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [{section}] {exc}") from None

    def synapse_params(self, kind: str, table: CalibrationTable | None = None) -> SynapseParams:
        s = self.sections.get(f"synapse.{kind}", {})
        kw = {}
        for key, attr, scale in (("C_syn_pF", "C_syn", PA), ("I_tau_pA", "I_tau", PA),
                                 ("I_g_pA", "I_g", PA), ("I_w_pA", "I_w", PA),
                                 ("nmda_gate_threshold_pA", "nmda_gate_threshold", PA)):
            if key in s:
                kw[attr] = s[key] * scale
        for key, attr, suffix in (("I_tau_code", "I_tau", "TAU"), ("I_g_code", "I_g", "GAIN"),
                                  ("I_w_code", "I_w", "WEIGHT")):
            if key in s:
                if attr in kw:
                    raise ConfigError(f"{self.path}: [synapse.{kind}] sets both {key} and a current")
                table = table or self.calibration()
                try:
                    kw[attr] = table.code_to_current(f"{kind.upper()}_{suffix}", s[key])
                except ValueError as exc:
                    raise ConfigError(f"{self.path}: [synapse.{kind}] {key}: {exc}") from None
        try:
            return SynapseParams(kind=kind, **kw).validate(self.constants())
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [synapse.{kind}] {exc}") from None

    def setup(self, name: str):
        cls = EXPERIMENT_SECTIONS[name]
        kw = dict(self.sections.get(name, {}))
        if name == "binary_digits":
            kw["qat"] = self.qat(DigitsSetup().qat)
        try:
            return replace(cls(), **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.path}: [{name}] {exc}") from None


def parse_config(text: str, path: Path | str = "<config>", check_paths: bool = True) -> RunConfig:
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig(path)
    for section in cp.sections():
        schema = _schema_for(section)
        if schema is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        parsed = {}
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"{path}: [{section}] unknown key {key!r}")
            try:
                parsed[key] = schema[key](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from None
        cfg.sections[section] = parsed
    _check(cfg, check_paths)
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    cfg = parse_config(text, path)
    cfg.seed_override = seed
    return cfg


def _check(cfg: RunConfig, check_paths: bool):
    path = cfg.path
    base = path.parent
    for key, val in list(cfg.sections.get("paths", {}).items()):
        p = Path(val)
        if not p.is_absolute():
            p = base / p
        if check_paths and not p.exists():
            raise ConfigError(f"{path}: [paths] {key} = {val!r}: no such file or directory ({p})")
        cfg.sections["paths"][key] = p
    pops = {s.split(".", 1)[1]: v for s, v in cfg.sections.items() if s.startswith("population.")}
    for name, s in pops.items():
        if "size" not in s:
            raise ConfigError(f"{path}: [population.{name}] needs a size")
        if s.get("source") and any(k in NEURON_KEYS for k in s):
            raise ConfigError(f"{path}: [population.{name}] is a source; neuron keys not allowed")
    for sec in cfg.sections:
        if sec.startswith("projection."):
            _, pre, post, _kind = sec.split(".")
            for n in (pre, post):
                if n not in pops:
                    raise ConfigError(f"{path}: [{sec}] refers to undeclared population {n!r}")
            if pops[post].get("source"):
                raise ConfigError(f"{path}: [{sec}] targets a source population")
        if sec.startswith("input."):
            n = sec.split(".", 1)[1]
            if n not in pops or not pops[n].get("source"):
                raise ConfigError(f"{path}: [{sec}] must name a source population")
    traces = cfg.get("record", "traces", ())
    for n in traces:
        if n not in pops or pops[n].get("source"):
            raise ConfigError(f"{path}: [record] traces: {n!r} is not a neuron population")
    sw = cfg.sections.get("sweep")
    if sw and sw.get("fine_start", 0) > sw.get("fine_stop", 255):
        raise ConfigError(f"{path}: [sweep] fine_start > fine_stop")
    dt = cfg.get("run", "dt_ms")
    if dt is not None and not np.isfinite(dt):
        raise ConfigError(f"{path}: [run] dt_ms must be finite")
