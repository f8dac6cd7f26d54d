"""Bias generator codes, calibration anchors and device mismatch.

The on-chip DAC maps a (coarse, fine) code to a bias current, but the mapping
is only known through measurement. :class:`CalibrationTable` therefore stores
measured anchors and interpolates in ``fine`` between anchors of the same
coarse level; nothing is extrapolated.
"""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field, fields, is_dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import stats

from .dpi_core import DEFAULT_CONSTANTS, NeuronParams, PhysicalConstants, time_constant

PA = 1e-12

COARSE_RANGE = (0, 7)
FINE_RANGE = (0, 255)


class CalibrationError(ValueError):
    """Unknown bias, code outside the anchored range, or current outside the table."""


@dataclass(frozen=True, order=True)
class BiasCode:
    coarse: int
    fine: int

    def __post_init__(self):
        if not (isinstance(self.coarse, (int, np.integer)) and isinstance(self.fine, (int, np.integer))):
            raise TypeError("bias codes are integers")
        if not COARSE_RANGE[0] <= self.coarse <= COARSE_RANGE[1]:
            raise ValueError(f"coarse {self.coarse} outside [0, 7]")
        if not FINE_RANGE[0] <= self.fine <= FINE_RANGE[1]:
            raise ValueError(f"fine {self.fine} outside [0, 255]")

    def __str__(self):
        return f"[{self.coarse},{self.fine}]"


@dataclass
class CalibrationTable:
    """Measured ``(bias_name, coarse, fine) -> current [A]`` anchors."""

    entries: dict = field(default_factory=dict)
    interp: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {}
        for (name, coarse, fine), current in self.entries.items():
            BiasCode(coarse, fine)
            if not current > 0:
                raise CalibrationError(f"{name} {coarse},{fine}: current must be > 0")
            self._index.setdefault((name, coarse), []).append((fine, current))
        for key, pts in self._index.items():
            pts.sort()
            cur = [c for _, c in pts]
            if any(b < a for a, b in zip(cur, cur[1:])):
                raise CalibrationError(f"{key[0]} coarse {key[1]}: current decreases with fine")
        self._grid_cache = {}

    @property
    def bias_names(self) -> list[str]:
        return sorted({name for name, _ in self._index})

    def coarse_levels(self, bias_name: str) -> list[int]:
        return sorted(c for name, c in self._index if name == bias_name)

    def fine_range(self, bias_name: str, coarse: int) -> tuple[int, int]:
        pts = self._index.get((bias_name, coarse))
        if not pts:
            raise CalibrationError(f"{bias_name}: coarse {coarse} not calibrated")
        return pts[0][0], pts[-1][0]

    def code_to_current(self, bias_name: str, code: BiasCode) -> float:
        if bias_name not in self.bias_names:
            raise CalibrationError(f"unknown bias {bias_name!r}")
        pts = self._index.get((bias_name, code.coarse))
        if not pts:
            raise CalibrationError(f"{bias_name}: coarse {code.coarse} not calibrated")
        fines = [f for f, _ in pts]
        if not fines[0] <= code.fine <= fines[-1]:
            raise CalibrationError(f"{bias_name}: code {code} outside anchored range")
        i = int(np.searchsorted(fines, code.fine))
        if fines[i] == code.fine:
            return pts[i][1]
        (f0, c0), (f1, c1) = pts[i - 1], pts[i]
        w = (code.fine - f0) / (f1 - f0)
        if self.interp.get(bias_name, "linear") == "log":
            return float(np.exp(np.log(c0) + w * (np.log(c1) - np.log(c0))))
        return c0 + w * (c1 - c0)

    def _grid(self, bias_name):
        if bias_name not in self._grid_cache:
            codes, currents = [], []
            for coarse in self.coarse_levels(bias_name):
                lo, hi = self.fine_range(bias_name, coarse)
                for fine in range(lo, hi + 1):
                    code = BiasCode(coarse, fine)
                    codes.append(code)
                    currents.append(self.code_to_current(bias_name, code))
            self._grid_cache[bias_name] = (codes, np.asarray(currents))
        return self._grid_cache[bias_name]

    def current_to_code(self, bias_name: str, current: float) -> BiasCode:
        """Nearest code in log-current. Ties go to the lower coarse level."""
        if bias_name not in self.bias_names:
            raise CalibrationError(f"unknown bias {bias_name!r}")
        codes, currents = self._grid(bias_name)
        lo, hi = currents.min(), currents.max()
        if not (lo * (1 - 1e-9) <= current <= hi * (1 + 1e-9)):
            raise CalibrationError(
                f"{bias_name}: {current / PA:.4g} pA outside calibration range "
                f"[{lo / PA:.4g}, {hi / PA:.4g}] pA")
        err = np.abs(np.log(currents) - np.log(current))
        return codes[int(np.argmin(err))]

    def snap(self, bias_name: str, current: float) -> float:
        return self.code_to_current(bias_name, self.current_to_code(bias_name, current))

    # I/O ------------------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bias_name", "coarse", "fine", "current_pA", "interp"])
        for (name, coarse, fine) in sorted(self.entries):
            w.writerow([name, coarse, fine, f"{self.entries[(name, coarse, fine)] / PA:.10g}",
                        self.interp.get(name, "linear")])
        return buf.getvalue()


def load_calibration(path) -> CalibrationTable:
    """Read a calibration file: ``bias_name,coarse,fine,current_pA[,interp]`` records."""
    text = Path(path).read_text() if not hasattr(path, "read") else path.read()
    return _parse_calibration(text, str(path))


def _parse_calibration(text: str, origin: str = "<string>") -> CalibrationTable:
    entries, interp = {}, {}
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
    if not rows or [c.strip() for c in rows[0][:4]] != ["bias_name", "coarse", "fine", "current_pA"]:
        raise CalibrationError(f"{origin}: missing header bias_name,coarse,fine,current_pA")
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            name, coarse, fine, cur = row[0].strip(), int(row[1]), int(row[2]), float(row[3])
        except (IndexError, ValueError) as exc:
            raise CalibrationError(f"{origin}:{lineno}: malformed record {row!r}") from exc
        if len(row) > 4 and row[4].strip():
            kind = row[4].strip()
            if kind not in ("linear", "log"):
                raise CalibrationError(f"{origin}:{lineno}: unknown interpolation {kind!r}")
            interp[name] = kind
        entries[(name, coarse, fine)] = cur * PA
    return CalibrationTable(entries, interp)


# reference points for the shipped table: (bias, coarse, fine, current [A]).
# The first three are measured; the rest set the scale of biases without a
# measurement.
MEASURED_ANCHORS = (
    ("IF_TAU", 6, 22, 4.1 * PA),
    ("IF_GAIN", 6, 88, 500 * PA),
    ("IF_DC", 2, 57, 36.6 * PA),
)
_DECLARED_REFERENCES = (
    ("IF_THR", 6, 128, 2000 * PA),
    ("IF_AHP_TAU", 6, 64, 1.0 * PA),
    ("IF_AHP_GAIN", 6, 64, 5.0 * PA),
    ("IF_AHP_W", 6, 64, 20.0 * PA),
    ("AMPA_TAU", 6, 64, 5.0 * PA),
    ("AMPA_GAIN", 6, 64, 50.0 * PA),
    ("AMPA_WEIGHT", 6, 64, 10.0 * PA),
    ("NMDA_TAU", 6, 64, 2.0 * PA),
    ("NMDA_GAIN", 6, 64, 50.0 * PA),
    ("NMDA_WEIGHT", 6, 64, 10.0 * PA),
    ("GABA_A_TAU", 6, 64, 5.0 * PA),
    ("GABA_A_GAIN", 6, 64, 50.0 * PA),
    ("GABA_A_WEIGHT", 6, 64, 10.0 * PA),
    ("GABA_B_TAU", 6, 64, 5.0 * PA),
    ("GABA_B_GAIN", 6, 64, 50.0 * PA),
    ("GABA_B_WEIGHT", 6, 64, 10.0 * PA),
)
COARSE_RATIO = 8.0


def build_default_calibration() -> CalibrationTable:
    """Linear-in-fine DAC around each reference point, x8 per coarse step."""
    entries = {}
    for name, c_ref, f_ref, cur in MEASURED_ANCHORS + _DECLARED_REFERENCES:
        full_scale = cur * FINE_RANGE[1] / f_ref
        for coarse in range(COARSE_RANGE[0], COARSE_RANGE[1] + 1):
            top = full_scale * COARSE_RATIO ** (coarse - c_ref)
            entries[(name, coarse, 1)] = top / FINE_RANGE[1]
            entries[(name, coarse, FINE_RANGE[1])] = top
        entries[(name, c_ref, f_ref)] = cur
    return CalibrationTable(entries)


def default_calibration() -> CalibrationTable:
    text = resources.files("dpisim").joinpath("data/calibration_default.csv").read_text()
    return _parse_calibration(text, "calibration_default.csv")


# mismatch -----------------------------------------------------------------

@dataclass(frozen=True)
class MismatchSpec:
    cv: float = 0.20
    distribution: str = "lognormal"
    seed: int = 0

    def __post_init__(self):
        if self.cv < 0:
            raise ValueError("cv must be >= 0")
        if self.distribution not in ("lognormal", "truncated_normal"):
            raise ValueError(f"unknown mismatch distribution {self.distribution!r}")


def _stream(seed: int, label: str) -> np.random.Generator:
    """Counter-based stream keyed by (seed, label): draws do not depend on call order."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode())])
    return np.random.Generator(np.random.Philox(ss))


def multipliers(spec: MismatchSpec, n: int, label: str) -> np.ndarray:
    """``n`` mean-one factors with coefficient of variation ``spec.cv``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.cv == 0:
        return np.ones(n)
    rng = _stream(spec.seed, label)
    if spec.distribution == "lognormal":
        sigma = np.sqrt(np.log1p(spec.cv ** 2))
        return rng.lognormal(mean=-0.5 * sigma ** 2, sigma=sigma, size=n)
    a = -1.0 / spec.cv
    return stats.truncnorm.rvs(a, np.inf, loc=1.0, scale=spec.cv, size=n, random_state=rng)


def sample_mismatch(nominal: Mapping[str, float], spec: MismatchSpec, n: int,
                    consts: PhysicalConstants = DEFAULT_CONSTANTS, label: str = "") -> dict:
    """Independently perturb every current in ``nominal``; returns ``name -> array(n)``."""
    out = {}
    for name in sorted(nominal):
        m = multipliers(spec, n, f"{label}/{name}")
        out[name] = np.maximum(nominal[name] * m, consts.I_0)
    return out


NEURON_CURRENTS = ("I_tau", "I_g", "I_dc", "spike_threshold")
AHP_CURRENTS = ("I_tau_ahp", "I_g_ahp", "I_w_ahp")


def mismatch_neuron_params(params: NeuronParams, spec: MismatchSpec, n: int,
                           consts: PhysicalConstants = DEFAULT_CONSTANTS,
                           label: str = "neuron") -> NeuronParams:
    """Per-neuron parameter arrays for a population of ``n`` mismatched neurons."""
    base = {k: getattr(params, k) for k in NEURON_CURRENTS}
    drawn = sample_mismatch(base, spec, n, consts, label)
    # spike threshold has to stay above the gain current
    drawn["spike_threshold"] = np.maximum(drawn["spike_threshold"], drawn["I_g"] * 1.01)
    new = replace(params, **drawn)
    if params.ahp is not None:
        a = sample_mismatch({k: getattr(params.ahp, k) for k in AHP_CURRENTS}, spec, n, consts,
                            label + "/ahp")
        new = replace(new, ahp=replace(params.ahp, **a))
    return new


def mismatch_synapse_params(params, spec: MismatchSpec, n: int,
                            consts: PhysicalConstants = DEFAULT_CONSTANTS, label: str = "syn"):
    drawn = sample_mismatch({k: getattr(params, k) for k in ("I_tau", "I_g", "I_w")}, spec, n,
                            consts, label)
    return replace(params, **drawn)


@dataclass
class SweepRow:
    bias_fine: int
    current: float
    mean_tau_s: float
    std_tau_s: float
    cv: float


def tau_sweep(table: CalibrationTable, bias_name: str, coarse: int, fines: Iterable[int],
              spec: MismatchSpec, n: int, C_mem: float = 5e-12,
              consts: PhysicalConstants = DEFAULT_CONSTANTS,
              keep_samples: bool = False):
    """Distribution of tau_mem = C U_T / (kappa I_tau) over mismatch draws at each fine value."""
    rows, samples = [], {}
    for fine in fines:
        code = BiasCode(coarse, int(fine))
        i_tau = table.code_to_current(bias_name, code)
        m = multipliers(spec, n, f"sweep/{bias_name}/{coarse}/{fine}")
        tau = time_constant(C_mem, np.maximum(i_tau * m, consts.I_0), consts)
        mean = float(tau.mean())
        std = float(tau.std(ddof=1)) if n > 1 and spec.cv > 0 else 0.0
        rows.append(SweepRow(int(fine), i_tau, mean, std, std / mean))
        if keep_samples:
            samples[int(fine)] = tau
    return (rows, samples) if keep_samples else rows


SWEEP_HEADER = ("bias_fine", "mean_tau_s", "std_tau_s", "cv")


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.bias_fine, f"{r.mean_tau_s:.9e}", f"{r.std_tau_s:.9e}", f"{r.cv:.6f}"])
    return buf.getvalue()


def current_fields(obj) -> list[str]:
    """Names of dataclass fields that hold currents (``I_*`` plus threshold/reset)."""
    if not is_dataclass(obj):
        return []
    return [f.name for f in fields(obj)
            if f.name.startswith("I_") or f.name in ("spike_threshold", "reset_current")]
