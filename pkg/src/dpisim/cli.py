"""``dpi-sim`` command-line entry point.

    dpi-sim <simulate|sweep|train|export|experiment> --config PATH [--seed N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 infeasible export. Every output file is written atomically and contains
no timestamps, so reruns with the same seed produce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import netlist as nl
from . import plotting
from .config import ConfigError, RunConfig, load_config
from .datasets import DataFormatError
from .dpi_core import NeuronParams, NumericalError
from .experiments import (DigitsSetup, ResonatorSetup, run_binary_digits, run_local_rule,
                          run_resonator)
from .hw_model import CalibrationError, tau_sweep, sweep_to_csv
from .learn import TrainingDiverged
from .network import (Population, Projection, SimResult, Topology, encode_rates, simulate,
                      spikes_to_csv, traces_to_csv)
from .serialize import CheckpointError, dumps_checkpoint, loads_checkpoint

log = logging.getLogger("dpisim")
PA = 1e-12
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_EXPORT = 0, 2, 3, 4
COMMANDS = ("simulate", "sweep", "train", "export", "experiment")


# output ----------------------------------------------------------------------

class Output:
    """Output directory with atomic (temp file + rename) writes."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.written: list[str] = []

    def write(self, name: str, data: str | bytes) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        raw = data.encode() if isinstance(data, str) else data
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(raw)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(name)
        return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def summary_csv(items) -> str:
    """``key,value`` pairs in the given order."""
    return _csv(("key", "value"), [(k, _num(v)) for k, v in items])


def _plots(cfg: RunConfig) -> bool:
    return cfg.get("record", "plots", True)


# network construction from config -------------------------------------------

def parse_weights(spec: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """``"2"`` (constant), ``"uniform:a:b"``, or explicit rows ``"1 0; 0 1"``."""
    s = spec.strip()
    if s.startswith("uniform:"):
        parts = s.split(":")
        if len(parts) != 3:
            raise ValueError("uniform weights are 'uniform:low:high'")
        lo, hi = float(parts[1]), float(parts[2])
        if not 0 <= lo <= hi:
            raise ValueError("need 0 <= low <= high")
        return rng.uniform(lo, hi, shape)
    if ";" in s or len(s.split()) > 1:
        rows = [[float(x) for x in r.replace(",", " ").split()] for r in s.split(";") if r.strip()]
        W = np.asarray(rows, dtype=float)
        if W.shape != shape:
            raise ValueError(f"matrix is {W.shape}, expected (post, pre) = {shape}")
    else:
        W = np.full(shape, float(s))
    if np.any(W < 0) or not np.all(np.isfinite(W)):
        raise ValueError("weights are non-negative synapse counts")
    return W


def build_topology(cfg: RunConfig, table=None) -> Topology:
    pops = []
    for sec, keys in cfg.sections.items():
        if not sec.startswith("population."):
            continue
        name = sec.split(".", 1)[1]
        if keys.get("source"):
            pops.append(Population(name, keys["size"]))
        else:
            table = table or cfg.calibration()
            pops.append(Population(name, keys["size"], cfg.neuron_params(sec, table=table)))
    if not pops:
        raise ConfigError(f"{cfg.path}: no [population.*] sections")
    sizes = {p.name: p.size for p in pops}
    projs, kinds = [], set()
    for sec, keys in cfg.sections.items():
        if not sec.startswith("projection."):
            continue
        _, pre, post, kind = sec.split(".")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, keys.get("seed", 0), len(projs)]))
        try:
            W = parse_weights(keys.get("weights", "1"), (sizes[post], sizes[pre]), rng)
        except ValueError as exc:
            raise ConfigError(f"{cfg.path}: [{sec}] weights: {exc}") from None
        projs.append(Projection(pre, post, kind, W))
        kinds.add(kind)
    syn = {k: cfg.synapse_params(k, table) for k in sorted(kinds)}
    return Topology(pops, projs, syn)


def build_inputs(cfg: RunConfig, topo: Topology, duration: float, dt: float) -> dict:
    n_steps = int(round(duration / dt))
    out = {}
    for k, pop in enumerate(topo.sources):
        keys = cfg.sections.get(f"input.{pop.name}", {})
        kind = keys.get("kind", "none")
        x = np.zeros((pop.size, n_steps), dtype=bool)
        start = int(round(keys.get("start_ms", 0.0) * 1e-3 / dt))
        stop = min(n_steps, int(round(keys.get("stop_ms", duration * 1e3) * 1e-3 / dt)))
        if kind == "poisson":
            rate = keys.get("rate_hz", 0.0)
            if rate * dt > 1:
                raise ConfigError(f"{cfg.path}: [input.{pop.name}] rate_hz * dt > 1")
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, keys.get("seed", 0), 11, k]))
            block = encode_rates(np.full(pop.size, rate), (stop - start) * dt, dt, rng) \
                if stop > start else np.zeros((pop.size, 0), dtype=bool)
            x[:, start:start + block.shape[1]] = block
        elif kind == "times":
            for t in keys.get("times_ms", ()):
                step = int(round(t * 1e-3 / dt))
                if not 0 <= step < n_steps:
                    raise ConfigError(f"{cfg.path}: [input.{pop.name}] time {t} ms outside the run")
                x[:, step] = True
        out[pop.name] = x
    return out


# commands --------------------------------------------------------------------

def _population_rows(topo: Topology, res: SimResult, duration: float):
    rows = []
    for pop in topo.neurons:
        c = res.counts[pop.name]
        rows.append((f"spikes.{pop.name}", int(c.sum())))
        rows.append((f"rate_hz.{pop.name}", float(c.mean() / duration)))
    return rows


def _check_step(cfg: RunConfig, topo: Topology, dt: float):
    """The exponential synapse update needs dt below every nominal time constant."""
    consts = cfg.constants()
    taus = [(f"synapse.{k}", float(np.min(sp.tau(consts)))) for k, sp in topo.synapses.items()]
    for name, tau in taus:
        if dt > tau:
            raise ConfigError(f"{cfg.path}: [run] dt_ms = {dt * 1e3:g} exceeds the {name} "
                              f"time constant ({tau * 1e3:.3g} ms)")


def cmd_simulate(cfg: RunConfig, out: Output) -> int:
    table = cfg.calibration()
    topo = build_topology(cfg, table)
    dt = cfg.dt
    _check_step(cfg, topo, dt)
    duration = cfg.get("run", "duration_s", 1.0)
    inputs = build_inputs(cfg, topo, duration, dt)
    traces = cfg.get("record", "traces", ())
    res = simulate(topo, inputs, duration, dt, record_traces=traces, mismatch=cfg.mismatch(),
                   consts=cfg.constants(), record_sources=cfg.get("record", "sources", False))
    out.write("spikes.csv", spikes_to_csv(res.spikes))
    for name in traces:
        out.write(f"traces_{name}.csv", traces_to_csv(res, name))
    out.write("summary.csv", summary_csv([("command", "simulate"), ("seed", cfg.seed),
                                          ("dt_s", dt), ("duration_s", duration),
                                          ("steps", res.n_steps)]
                                         + _population_rows(topo, res, duration)))
    if _plots(cfg):
        t = np.arange(res.n_steps) * dt
        for name in traces:
            tr = res.traces[name]
            series = {f"{name}[{i}] I_mem": tr["I_mem"][:, i] for i in range(min(4, tr["I_mem"].shape[1]))}
            out.write(f"traces_{name}.svg", plotting.trace_plot(t, series, title=f"{name} I_mem"))
        shown = topo.populations if cfg.get("record", "sources", False) else topo.neurons
        out.write("raster.svg", plotting.raster_plot(res.spikes, [(p.name, p.size) for p in shown],
                                                     t_stop=duration))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Output) -> int:
    if not cfg.has("sweep"):
        raise ConfigError(f"{cfg.path}: sweep needs a [sweep] section")
    s = cfg.sections["sweep"]
    table = cfg.calibration()
    bias = s.get("bias", "IF_TAU")
    coarse = s.get("coarse", 5)
    lo, hi, points = s.get("fine_start", 74), s.get("fine_stop", 190), s.get("points", 20)
    fines = np.unique(np.round(np.linspace(lo, hi, points)).astype(int)) if points > 1 else np.array([lo])
    if len(fines) != points:
        raise ConfigError(f"{cfg.path}: [sweep] {points} points do not fit fine {lo}..{hi}")
    spec = cfg.mismatch_spec()
    try:
        rows, samples = tau_sweep(table, bias, coarse, fines, spec, s.get("n", 1000),
                                  C_mem=s.get("C_mem_pF", 5.0) * PA, consts=cfg.constants(),
                                  keep_samples=True)
    except CalibrationError as exc:
        raise ConfigError(f"{cfg.path}: [sweep] {exc}") from None
    out.write("sweep.csv", sweep_to_csv(rows))
    out.write("sweep_currents.csv", _csv(("bias_fine", "current_pA"),
                                         [(r.bias_fine, f"{r.current / PA:.6f}") for r in rows]))
    cvs = np.array([r.cv for r in rows])
    spread = float((cvs.max() - cvs.min()) / cvs.mean()) if cvs.mean() > 0 else 0.0
    out.write("summary.csv", summary_csv([
        ("command", "sweep"), ("bias", bias), ("coarse", coarse), ("points", len(rows)),
        ("n", s.get("n", 1000)), ("cv_setting", spec.cv), ("distribution", spec.distribution),
        ("seed", spec.seed), ("tau_cv_mean", float(cvs.mean())), ("tau_cv_min", float(cvs.min())),
        ("tau_cv_max", float(cvs.max())), ("tau_cv_relative_spread", spread)]))
    if _plots(cfg):
        for r in rows:
            out.write(f"hist_{bias}_{coarse}_{r.bias_fine:03d}.svg",
                      plotting.histogram_plot(samples[r.bias_fine] * 1e3,
                                              f"tau_mem, {bias} [{coarse},{r.bias_fine}]",
                                              "tau_mem (ms)"))
        x = [r.bias_fine for r in rows]
        out.write("sweep_cv.svg", plotting.curve_plot(x, {"std/mean": cvs}, "relative spread of tau_mem",
                                                      "fine value", "std / mean", hline=spec.cv))
        out.write("sweep_tau.svg", plotting.curve_plot(x, {"mean tau": [r.mean_tau_s * 1e3 for r in rows]},
                                                       "mean tau_mem", "fine value", "tau (ms)", logy=True))
    return EXIT_OK


def _require_experiment(cfg: RunConfig, allowed) -> str:
    name = cfg.experiment
    if name not in allowed:
        raise ConfigError(f"{cfg.path}: [run] experiment must be one of {', '.join(allowed)} "
                          f"for this command (got {name!r})")
    return name


def _resonator_neuron(cfg: RunConfig):
    return cfg.neuron_params("neuron") if cfg.has("neuron") else None


def _resonator_checkpoint(cfg, setup: ResonatorSetup, res, neuron) -> tuple[Topology, dict]:
    base = neuron if neuron is not None else NeuronParams()
    params = replace(base, I_dc=setup.I_dc_pA * PA, I_tau=np.asarray(res.params["I_tau"]),
                     spike_threshold=np.asarray(res.params["spike_threshold"]))
    topo = Topology([Population("neuron", setup.seeds, params)], [], {})
    meta = {"experiment": "resonator", "seed": cfg.seed, "dt_s": setup.dt_ms * 1e-3,
            "setup": _jsonable(asdict(setup)),
            "converged_epoch": [int(e) for e in res.converged_epoch],
            "final_rate_hz": [float(r) for r in res.final_rate]}
    return topo, meta


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    if isinstance(d, np.generic):
        return d.item()
    return d


def _resonator_outputs(cfg, out: Output, setup, res):
    rows = [(e, f"{loss:.9e}", f"{float(np.mean(m)):.6f}") for e, loss, m in res.history]
    out.write("loss_history.csv", _csv(("epoch", "loss", "metric"), rows))
    per = [(e, k, f"{float(r):.6f}") for e, _, m in res.history for k, r in enumerate(np.atleast_1d(m))]
    out.write("rate_history.csv", _csv(("epoch", "seed_index", "rate_hz"), per))
    rows = [(k, int(res.converged_epoch[k]), f"{res.init['I_tau'][k] / PA:.6f}",
             f"{res.init['spike_threshold'][k] / PA:.6f}", f"{res.params['I_tau'][k] / PA:.6f}",
             f"{res.params['spike_threshold'][k] / PA:.6f}", f"{res.final_rate[k]:.6f}",
             "true" if res.success[k] else "false") for k in range(setup.seeds)]
    out.write("resonator_seeds.csv", _csv(("seed_index", "converged_epoch", "I_tau_init_pA",
                                           "threshold_init_pA", "I_tau_pA", "threshold_pA",
                                           "final_rate_hz", "success"), rows))
    if _plots(cfg):
        ep = [h[0] for h in res.history]
        rates = np.array([np.atleast_1d(h[2]) for h in res.history])
        out.write("rates.svg", plotting.curve_plot(
            ep, {f"seed {k}": rates[:, k] for k in range(rates.shape[1])}, "firing rate during training",
            "epoch", "rate (Hz)", hline=setup.target_hz))
        out.write("loss.svg", plotting.curve_plot(ep, {"loss": [h[1] for h in res.history]},
                                                  "training loss", "epoch", "loss"))
    return [("final_rate_hz_mean", float(np.mean(res.final_rate))),
            ("final_rate_hz_min", float(np.min(res.final_rate))),
            ("final_rate_hz_max", float(np.max(res.final_rate))),
            ("seeds", setup.seeds), ("seeds_converged", int(np.sum(res.success))),
            ("max_converged_epoch", int(np.max(res.converged_epoch)))]


def _digits_outputs(cfg, out: Output, res):
    rows = [(e, f"{loss:.9e}", f"{acc:.6f}") for e, loss, acc in res.history]
    out.write("loss_history.csv", _csv(("epoch", "loss", "metric"), rows))
    if _plots(cfg):
        ep = [h[0] for h in res.history]
        out.write("loss.svg", plotting.curve_plot(ep, {"loss": [h[1] for h in res.history]},
                                                  "training loss", "epoch", "loss"))
        for p in res.deployed.projections:
            out.write(f"weights_{p.kind}.svg", plotting.weight_plot(p.weights, f"{p.kind} synapse counts"))


def _digits_meta(cfg, setup: DigitsSetup, res) -> dict:
    return {"experiment": "binary_digits", "seed": cfg.seed, "dt_s": setup.dt_ms * 1e-3,
            "setup": _jsonable(asdict(setup)), "n_test": res.n_test,
            "test_split": {str(k): v for k, v in res.test_split.items()},
            "fake_quant_accuracy": res.fake_quant_accuracy,
            "deployed_accuracy": res.deployed_accuracy}


def _data_dir(cfg):
    return cfg.path_of("data_dir")


def cmd_train(cfg: RunConfig, out: Output) -> int:
    name = _require_experiment(cfg, ("resonator", "binary_digits"))
    if name == "resonator":
        setup = cfg.setup("resonator")
        neuron = _resonator_neuron(cfg)
        res = run_resonator(setup, cfg.seed, neuron)
        summary = _resonator_outputs(cfg, out, setup, res)
        topo, meta = _resonator_checkpoint(cfg, setup, res, neuron)
    else:
        setup = cfg.setup("binary_digits")
        res = run_binary_digits(setup, cfg.seed, _data_dir(cfg), cfg.calibration())
        _digits_outputs(cfg, out, res)
        topo, meta = res.trained, _digits_meta(cfg, setup, res)
        summary = [("fake_quant_accuracy", res.fake_quant_accuracy), ("n_test", res.n_test)]
    out.write("checkpoint.json", dumps_checkpoint(topo, meta))
    out.write("summary.csv", summary_csv([("command", "train"), ("experiment", name),
                                          ("seed", cfg.seed)] + summary))
    return EXIT_OK


def _probe_inputs(topo: Topology, duration: float, dt: float, seed: int) -> dict:
    """Poisson probe trains (20 Hz) used to compare rasters before and after a round trip."""
    out = {}
    for k, pop in enumerate(topo.sources):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13, k]))
        out[pop.name] = encode_rates(np.full(pop.size, 20.0), duration, dt, rng)
    return out


def export_topology(topo: Topology, table, out: Output, dt: float, seed: int,
                    probe_s: float = 1.0) -> list:
    """Deploy, write the netlist, reload it and check the raster round trip."""
    deployed, net = nl.deploy(topo, table)
    text = nl.dumps(net, table)
    problems = nl.validate(text, table)
    if problems:
        raise nl.ExportError(f"exported netlist fails validation: {problems[1]}")
    out.write("netlist.txt", text)
    reloaded = nl.to_topology(nl.loads(text, table), table)
    probe = _probe_inputs(deployed, probe_s, dt, seed)
    a = simulate(deployed, probe, probe_s, dt)
    b = simulate(reloaded, probe, probe_s, dt)
    same = a.spikes == b.spikes
    out.write("roundtrip_spikes.csv", spikes_to_csv(b.spikes))
    fan = net.fan_in()
    rows = [("populations", len(net.populations)), ("connections", len(net.connections)),
            ("synapses", int(sum(c[-1] for c in net.connections))),
            ("max_fan_in", max(fan.values()) if fan else 0), ("fan_in_limit", net.fan_in_limit),
            ("roundtrip_spikes", len(b.spikes)), ("roundtrip_identical", same)]
    if not same:
        raise NumericalError("netlist round trip changed the raster")
    return rows


def cmd_export(cfg: RunConfig, out: Output) -> int:
    ck = cfg.path_of("checkpoint")
    if ck is None:
        raise ConfigError(f"{cfg.path}: export needs [paths] checkpoint")
    try:
        topo, meta = loads_checkpoint(ck.read_text())
    except (OSError, CheckpointError) as exc:
        raise ConfigError(f"{ck}: {exc}") from None
    dt = float(meta.get("dt_s", cfg.dt))
    rows = export_topology(topo, cfg.calibration(), out, dt, cfg.seed)
    out.write("summary.csv", summary_csv([("command", "export"),
                                          ("experiment", meta.get("experiment", "none")),
                                          ("seed", cfg.seed)] + rows))
    return EXIT_OK


def _local_rule_outputs(cfg, out: Output, res):
    setup = res.setup
    first = res.runs[0]
    offsets = {"free": 0.0, "teach": setup.free_s, "test": setup.free_s + setup.teach_s}
    durations = {"free": setup.free_s, "teach": setup.teach_s, "test": setup.test_s}
    pops = [("hidden", setup.n), ("output", setup.n)]
    for phase in ("free", "teach", "test"):
        ev = first.phases.get(phase, [])
        out.write(f"raster_{phase}.csv", spikes_to_csv(ev))
        if _plots(cfg):
            out.write(f"raster_{phase}.svg", plotting.raster_plot(
                [type(e)(e.time - offsets[phase], e.population, e.neuron_id) for e in ev], pops,
                title=f"{phase} phase", t_stop=durations[phase]))
    rows = []
    for r, ok in zip(res.runs, res.passed):
        rows.append((r.seed, f"{r.test_rates[0, 0]:.6f}", f"{r.test_rates[0, 1]:.6f}",
                     f"{r.test_rates[1, 0]:.6f}", f"{r.test_rates[1, 1]:.6f}",
                     f"{r.ratios[0]:.6f}", f"{r.ratios[1]:.6f}", "true" if ok else "false"))
    out.write("local_rule_seeds.csv", _csv(
        ("seed", "class0_group0_hz", "class0_group1_hz", "class1_group0_hz", "class1_group1_hz",
         "ratio_group0", "ratio_group1", "passed"), rows))
    if _plots(cfg):
        for key, W in sorted(first.weights.items()):
            out.write(f"weights_{key}.svg", plotting.weight_plot(W, f"{key} weights after teaching"))
    return [("seeds", len(res.runs)), ("seeds_passed", int(sum(res.passed))),
            ("ratio_required", setup.ratio_required),
            ("min_ratio", float(min(min(r.ratios) for r in res.runs)))]


def cmd_experiment(cfg: RunConfig, out: Output) -> int:
    name = _require_experiment(cfg, ("resonator", "binary_digits", "local_rule"))
    table = cfg.calibration()
    head = [("command", "experiment"), ("experiment", name), ("seed", cfg.seed)]
    if name == "resonator":
        setup = cfg.setup("resonator")
        neuron = _resonator_neuron(cfg)
        res = run_resonator(setup, cfg.seed, neuron)
        rows = _resonator_outputs(cfg, out, setup, res)
        topo, meta = _resonator_checkpoint(cfg, setup, res, neuron)
        out.write("checkpoint.json", dumps_checkpoint(topo, meta))
        report = [f"final rate {np.mean(res.final_rate):.3f} Hz (target {setup.target_hz} "
                  f"+/- {setup.tolerance_hz} Hz); {int(np.sum(res.success))}/{setup.seeds} seeds "
                  f"within tolerance by epoch {setup.epochs}"]
        log.info("resonator finished in %.1f s", res.seconds)
    elif name == "binary_digits":
        setup = cfg.setup("binary_digits")
        res = run_binary_digits(setup, cfg.seed, _data_dir(cfg), table)
        _digits_outputs(cfg, out, res)
        out.write("checkpoint.json", dumps_checkpoint(res.trained, _digits_meta(cfg, setup, res)))
        text = nl.dumps(res.netlist, table)
        out.write("netlist.txt", text)
        preds = [(i, int(p)) for i, p in enumerate(res.deployed_predictions)]
        out.write("predictions.csv", _csv(("sample", "predicted"), preds))
        split = ", ".join(f"{k}: {v}" for k, v in sorted(res.test_split.items()))
        rows = [("n_test", res.n_test), ("n_test_label0", res.test_split[0]),
                ("n_test_label1", res.test_split[1]),
                ("fake_quant_accuracy", res.fake_quant_accuracy),
                ("deployed_accuracy", res.deployed_accuracy),
                ("accuracy_gap_pp", abs(res.deployed_accuracy - res.fake_quant_accuracy) * 100),
                ("max_fan_in", int(max(res.deployed.fan_in("output")))),
                ("netlist_valid", not nl.validate(text, table))]
        report = [f"deployed accuracy {100 * res.deployed_accuracy:.2f}% over {res.n_test} test "
                  f"samples (labels {split}); fake-quantized {100 * res.fake_quant_accuracy:.2f}%"]
        log.info("binary_digits finished in %.1f s", res.seconds)
    else:
        setup = cfg.setup("local_rule")
        res = run_local_rule(setup, cfg.seed)
        rows = _local_rule_outputs(cfg, out, res)
        report = [f"{int(sum(res.passed))}/{len(res.runs)} seeds with own-class/other-class rate "
                  f"ratio >= {setup.ratio_required} on both output groups"]
        log.info("local_rule finished in %.1f s", res.seconds)
    out.write("summary.csv", summary_csv(head + rows))
    out.write("report.txt", "\n".join(report) + "\n")
    print(report[0])
    return EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "train": cmd_train,
            "export": cmd_export, "experiment": cmd_experiment}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpi-sim", description="DPI neuromorphic circuit simulator")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="output directory (default: [run] out or ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = load_config(args.config, seed=args.seed)
        root = args.out or cfg.get("run", "out")
        if root is None:
            root = "out"
        elif args.out is None and not Path(root).is_absolute():
            root = cfg.path.parent / root
        return HANDLERS[args.command](cfg, Output(Path(root)))
    except (ConfigError, CheckpointError, DataFormatError) as exc:
        print(f"dpi-sim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (nl.ExportError, nl.NetlistError) as exc:
        print(f"dpi-sim: export failed: {exc}", file=sys.stderr)
        return EXIT_EXPORT
    except (NumericalError, TrainingDiverged, FloatingPointError) as exc:
        print(f"dpi-sim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"dpi-sim: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # parameter validation below the config layer (e.g. a mismatched
        # time constant that falls under dt)
        print(f"dpi-sim: invalid parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
