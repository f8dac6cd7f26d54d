"""Experiment drivers: resonator tuning, 0/1 digit classification, local-rule teaching.

Each driver takes a setup dataclass (all knobs, documented defaults) and
returns a result object; file output lives in :mod:`dpisim.cli`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateSpec, Tape, value_of
from .datasets import DigitSet, load_digits
from .dpi_core import DEFAULT_CONSTANTS, NeuronParams, NeuronState, SynapseParams, neuron_step
from .hw_model import CalibrationTable, default_calibration
from .learn import (Adam, QatSpec, ThreeFactorRule, TrainingDiverged, class_margin_loss,
                    fake_quantize_forward, fanin_regularizer, local_rule_step, project_fanin,
                    rate_loss, train_parameters)
from .netlist import deploy
from .network import (Engine, Population, Projection, SpikeEvent, Topology,
                      TrialProtocol, classification_inputs, classify_batch)
from .parallel import parallel_map

log = logging.getLogger(__name__)
PA = 1e-12


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


# resonator -------------------------------------------------------------------

@dataclass(frozen=True)
class ResonatorSetup:
    I_dc_pA: float = 10.0
    target_hz: float = 2.5
    tolerance_hz: float = 0.1
    stop_tolerance_hz: float = 0.05     # early stop once the measured rate is this close
    epochs: int = 40
    seeds: int = 10
    dt_ms: float = 2.0
    window_s: float = 10.0
    lr: float = 0.05
    beta1: float = 0.5
    I_tau_init_pA: tuple = (5.5, 7.0)
    threshold_init_pA: tuple = (1500.0, 3000.0)
    surrogate: str = "fast_sigmoid"
    surrogate_frac: float = 0.1


@dataclass
class ResonatorResult:
    setup: ResonatorSetup
    init: dict
    params: dict
    history: list               # (epoch, loss, rates per seed)
    converged_epoch: np.ndarray  # -1 = not converged
    final_rate: np.ndarray
    seconds: float

    @property
    def success(self) -> np.ndarray:
        ok = np.abs(self.final_rate - self.setup.target_hz) <= self.setup.tolerance_hz + 1e-9
        return ok & (self.converged_epoch >= 0) & (self.converged_epoch <= self.setup.epochs)


def _spike_count(base: NeuronParams, i_tau, thr, n_steps: int, dt: float, spec):
    shape = np.shape(value_of(i_tau))
    st = NeuronState.rest(shape)
    p = replace(base, I_tau=i_tau, spike_threshold=thr)
    count = 0.0
    for _ in range(n_steps):
        st = neuron_step(st, p, None, dt, surrogate=spec)
        count = count + st.spiked
    return count


def run_resonator(setup: ResonatorSetup = ResonatorSetup(), seed: int = 0,
                  neuron: NeuronParams | None = None) -> ResonatorResult:
    """Optimize (I_tau, spike_threshold) of one neuron per seed so that a constant
    ``I_dc`` makes it fire at ``target_hz``. All seeds train side by side as one
    batch of independent neurons (their losses add, so gradients do not mix)."""
    t0 = time.perf_counter()
    base = replace(neuron or NeuronParams(), I_dc=setup.I_dc_pA * PA)
    dt = setup.dt_ms * 1e-3
    n_steps = int(round(setup.window_s / dt))
    rng = _rng(seed, 4)
    init = {"I_tau": rng.uniform(*setup.I_tau_init_pA, setup.seeds) * PA,
            "spike_threshold": rng.uniform(*setup.threshold_init_pA, setup.seeds) * PA}

    def closure(tape, p):
        thr_v = value_of(p["spike_threshold"])
        spec = SurrogateSpec(kind=setup.surrogate, width=setup.surrogate_frac * thr_v,
                             slope=1.0 / (setup.surrogate_frac * thr_v))
        count = _spike_count(base, p["I_tau"], p["spike_threshold"], n_steps, dt, spec)
        return rate_loss(count, setup.window_s, setup.target_hz), value_of(count) / setup.window_s

    def floor_above_gain(theta):
        # keep the threshold above the gain current (log domain)
        theta["spike_threshold"] = np.maximum(theta["spike_threshold"], np.log(1.01 * base.I_g))
        return theta

    res = train_parameters(
        closure, init, setup.epochs, lr=setup.lr, log_domain=("I_tau", "spike_threshold"),
        floor={"I_tau": DEFAULT_CONSTANTS.I_0}, project=floor_above_gain,
        done=lambda r: np.abs(r - setup.target_hz) <= setup.stop_tolerance_hz, betas=(setup.beta1, 0.999))
    final = _spike_count(base, res.params["I_tau"], res.params["spike_threshold"], n_steps, dt,
                         None) / setup.window_s
    conv = res.converged_epoch if res.converged_epoch is not None else np.full(setup.seeds, -1)
    return ResonatorResult(setup, init, res.params, res.history, conv, np.asarray(final),
                           time.perf_counter() - t0)


# binary digits ------------------------------------------------------------------

@dataclass(frozen=True)
class DigitsSetup:
    dt_ms: float = 1.0
    epochs: int = 8
    batch: int = 50
    lr: float = 0.05
    init_max: float = 2.0
    init_max_inhibitory: float = 0.5
    stim_ms: float = 50.0
    rest_ms: float = 50.0
    max_rate_hz: float = 100.0
    train_limit: int = 0          # 0 = all
    test_limit: int = 2115
    eval_batch: int = 100
    margin: float = 4.0
    loss_scale: float = 0.5
    C_mem_pF: float = 2.0
    I_tau_pA: float = 10.0
    I_g_pA: float = 500.0
    I_dc_pA: float = 0.5
    threshold_pA: float = 2000.0
    I_w_pA: float = 20.0
    surrogate: str = "fast_sigmoid"
    surrogate_frac: float = 0.1
    qat: QatSpec = QatSpec(enabled=True, fan_in_limit=64, l1_lambda=1e-3, target_fanin=64.0)


@dataclass
class DigitsResult:
    setup: DigitsSetup
    trained: Topology
    deployed: Topology
    netlist: object
    history: list                 # (epoch, mean loss, train accuracy)
    fake_quant_accuracy: float
    deployed_accuracy: float
    n_test: int
    test_split: dict
    deployed_predictions: np.ndarray
    seconds: float


def digits_topology(setup: DigitsSetup, ampa, gaba_a) -> Topology:
    neuron = NeuronParams(C_mem=setup.C_mem_pF * PA, I_tau=setup.I_tau_pA * PA,
                          I_g=setup.I_g_pA * PA, I_dc=setup.I_dc_pA * PA,
                          spike_threshold=setup.threshold_pA * PA)
    syn = {k: SynapseParams(k, I_w=setup.I_w_pA * PA) for k in ("ampa", "gaba_a")}
    return Topology([Population("input", 256), Population("output", 2, neuron)],
                    [Projection("input", "output", "ampa", ampa),
                     Projection("input", "output", "gaba_a", gaba_a)],
                    syn, fan_in_limit=setup.qat.fan_in_limit)


def _protocol(setup: DigitsSetup) -> TrialProtocol:
    return TrialProtocol(setup.stim_ms, setup.rest_ms, setup.max_rate_hz)


def evaluate_digits(topology: Topology, data: DigitSet, setup: DigitsSetup, seed: int,
                    weight_transform=None) -> np.ndarray:
    """Predictions for every sample (Poisson input keyed by sample index)."""
    preds = []
    dt = setup.dt_ms * 1e-3
    for a in range(0, len(data), setup.eval_batch):
        idx = np.arange(a, min(a + setup.eval_batch, len(data)))
        p, _, _ = classify_batch(topology, data.x[idx], _protocol(setup), dt, seed, indices=idx,
                                 weight_transform=weight_transform)
        preds.append(p)
    return np.concatenate(preds)


def train_digits(setup: DigitsSetup, train: DigitSet, seed: int = 0):
    """QAT training of the 256 -> 2 readout; returns (weights dict, history)."""
    dt = setup.dt_ms * 1e-3
    prot = _protocol(setup)
    rng = _rng(seed, 5)
    W = {"ampa": rng.uniform(0, setup.init_max, (2, 256)),
         "gaba_a": rng.uniform(0, setup.init_max_inhibitory, (2, 256))}
    opt = Adam(setup.lr)
    spec = SurrogateSpec.for_threshold(setup.threshold_pA * PA, setup.surrogate,
                                       setup.surrogate_frac, detach_reset=True)
    transform = fake_quantize_forward if setup.qat.enabled else None
    rest = int(round(setup.rest_ms * 1e-3 / dt))
    history = []
    for epoch in range(setup.epochs):
        order = _rng(seed, 6, epoch).permutation(len(train))
        losses, correct = [], 0
        for b in range(0, len(order), setup.batch):
            idx = order[b:b + setup.batch]
            tape = Tape()
            wa, wg = tape.var(W["ampa"]), tape.var(W["gaba_a"])
            topo = digits_topology(setup, wa, wg)
            x = classification_inputs(train.x[idx], prot, dt, seed + 1 + epoch, indices=idx)
            eng = Engine(topo, dt, len(idx), surrogate=spec, weight_transform=transform)
            count = 0.0
            for t in range(x.shape[0]):
                s = eng.step({"input": x[t]})["output"]
                if t >= rest:
                    count = count + s
            loss = class_margin_loss(count, train.labels[idx], setup.loss_scale, setup.margin)
            if setup.qat.l1_lambda or setup.qat.l2_lambda:
                loss = loss + fanin_regularizer([wa, wg], setup.qat) * (1.0 / len(order))
            lv = float(value_of(loss))
            if not np.isfinite(lv):
                raise TrainingDiverged(epoch)
            losses.append(lv)
            correct += int(np.sum(np.argmax(value_of(count), axis=1) == train.labels[idx]))
            g = tape.backward(loss)
            W = opt.step(W, {"ampa": g[wa], "gaba_a": g[wg]})
            mats = [W["ampa"], W["gaba_a"]]
            mats = project_fanin(mats, setup.qat.fan_in_limit) if setup.qat.enabled else \
                [np.maximum(m, 0.0) for m in mats]
            W = dict(zip(("ampa", "gaba_a"), mats))
        history.append((epoch, float(np.mean(losses)), correct / len(order)))
        log.info("digits epoch %d loss %.4f train acc %.4f", epoch, history[-1][1], history[-1][2])
    return W, history


def run_binary_digits(setup: DigitsSetup = DigitsSetup(), seed: int = 0, data_dir=None,
                      table: CalibrationTable | None = None) -> DigitsResult:
    t0 = time.perf_counter()
    table = table or default_calibration()
    train = load_digits("train", data_dir)
    test = load_digits("test", data_dir)
    if setup.train_limit:
        train = train.stratified(setup.train_limit)
    test = test.stratified(setup.test_limit)
    W, history = train_digits(setup, train, seed)
    trained = digits_topology(setup, W["ampa"], W["gaba_a"])
    eval_seed = seed + 10_000
    fq = evaluate_digits(trained, test, setup, eval_seed, weight_transform=ad.round_half_away)
    deployed, net = deploy(trained, table)
    dp = evaluate_digits(deployed, test, setup, eval_seed)
    split = {int(c): int(np.sum(test.labels == c)) for c in (0, 1)}
    return DigitsResult(setup, trained, deployed, net, history,
                        float(np.mean(fq == test.labels)), float(np.mean(dp == test.labels)),
                        len(test), split, dp, time.perf_counter() - t0)


# local-rule teaching --------------------------------------------------------

@dataclass(frozen=True)
class LocalRuleSetup:
    n: int = 50
    dt_ms: float = 1.0
    free_s: float = 4.0
    teach_s: float = 20.0
    test_s: float = 4.0
    block_s: float = 0.5
    input_hi_hz: float = 40.0
    input_lo_hz: float = 2.0
    teacher_hi_hz: float = 50.0
    teacher_lo_hz: float = 5.0
    w_teacher_hidden: float = 1.0
    w_teacher_output: float = 2.0
    init_in: float = 0.5
    init_out: float = 0.5
    lr_out: float = 1e-5
    lr_hidden: float = 1e-5
    trace_tau_s: float = 0.1
    w_max: float = 4.0
    seeds: int = 10
    ratio_required: float = 2.0
    C_mem_pF: float = 2.0
    I_tau_pA: float = 10.0
    I_g_pA: float = 500.0
    I_dc_pA: float = 0.5
    threshold_pA: float = 2000.0
    I_w_pA: float = 20.0


@dataclass
class LocalRuleRun:
    seed: int
    test_rates: np.ndarray        # [class, group] mean rate (Hz) of each output group
    phases: dict                  # phase name -> list[SpikeEvent] (only if recorded)
    weights: dict

    @property
    def ratios(self) -> tuple[float, float]:
        r = self.test_rates
        return (r[0, 0] / max(r[1, 0], 1e-12), r[1, 1] / max(r[0, 1], 1e-12))


def local_rule_topology(setup: LocalRuleSetup, rng: np.random.Generator) -> Topology:
    n, h = setup.n, setup.n // 2
    neuron = NeuronParams(C_mem=setup.C_mem_pF * PA, I_tau=setup.I_tau_pA * PA,
                          I_g=setup.I_g_pA * PA, I_dc=setup.I_dc_pA * PA,
                          spike_threshold=setup.threshold_pA * PA)
    w_in = rng.uniform(0, setup.init_in, (n, n))
    w_out = rng.uniform(0, setup.init_out, (n, n))
    t_hid = np.zeros((n, 2))
    t_hid[:h, 0] = t_hid[h:, 1] = setup.w_teacher_hidden
    t_out = np.zeros((n, 2))
    t_out[:h, 0] = t_out[h:, 1] = setup.w_teacher_output
    return Topology(
        [Population("input", n), Population("teacher", 2), Population("hidden", n, neuron),
         Population("output", n, neuron)],
        [Projection("input", "hidden", "ampa", w_in), Projection("teacher", "hidden", "ampa", t_hid),
         Projection("hidden", "output", "ampa", w_out), Projection("teacher", "output", "ampa", t_out)],
        {"ampa": SynapseParams("ampa", I_w=setup.I_w_pA * PA)}, fan_in_limit=10 ** 6)


def run_local_rule_seed(setup: LocalRuleSetup, seed: int, record: bool = False) -> LocalRuleRun:
    """Free phase (no teacher, no learning), alternating teaching with online
    updates, then a test phase with both teachers at the low rate."""
    rng = _rng(seed, 7)
    topo = local_rule_topology(setup, rng)
    dt = setup.dt_ms * 1e-3
    n, h = setup.n, setup.n // 2
    eng = Engine(topo, dt, 1)
    p_in = topo.projection("input", "hidden", "ampa")
    p_out = topo.projection("hidden", "output", "ampa")
    rule = ThreeFactorRule(w_max=setup.w_max)
    spec = SurrogateSpec.for_threshold(setup.threshold_pA * PA, "fast_sigmoid")
    decay = np.exp(-dt / setup.trace_tau_s)
    tr = {k: np.zeros(n) for k in ("input", "hidden", "output")}
    tr["teacher"] = np.zeros(2)
    group_a = np.arange(n) < h
    phases = {}
    clock = [0]

    def block(cls: int, duration: float, mode: str, events: list | None):
        rates = np.where(group_a == (cls == 0), setup.input_hi_hz, setup.input_lo_hz)
        if mode == "teach":
            trate = np.where(np.arange(2) == cls, setup.teacher_hi_hz, setup.teacher_lo_hz)
        elif mode == "test":
            trate = np.full(2, setup.teacher_lo_hz)
        else:
            trate = np.zeros(2)
        counts = np.zeros(n)
        for _ in range(int(round(duration / dt))):
            x = rng.random(n) < rates * dt
            te = rng.random(2) < trate * dt
            out = eng.step({"input": x[None], "teacher": te[None]})
            hs, os_ = np.asarray(out["hidden"][0]), np.asarray(out["output"][0])
            for key, s in (("input", x), ("hidden", hs), ("output", os_), ("teacher", te)):
                tr[key] = tr[key] * decay + s / setup.trace_tau_s
            counts += os_
            if events is not None:
                t = clock[0] * dt
                for pop, s in (("hidden", hs), ("output", os_)):
                    events.extend(SpikeEvent(t, pop, int(i)) for i in np.flatnonzero(s >= 0.5))
            if mode == "teach":
                teach = np.repeat(tr["teacher"], [h, n - h])
                thr = setup.threshold_pA * PA
                local_rule_step(rule, p_out.weights, tr["hidden"], value_of(eng.state["output"].I_mem)[0],
                                thr, teach, tr["output"], setup.lr_out, spec)
                local_rule_step(rule, p_in.weights, tr["input"], value_of(eng.state["hidden"].I_mem)[0],
                                thr, teach, tr["hidden"], setup.lr_hidden, spec)
                eng.refresh_weights()
            clock[0] += 1
        return counts / duration

    n_blocks = lambda d: int(round(d / setup.block_s))  # noqa: E731
    for name, dur, mode in (("free", setup.free_s, "free"), ("teach", setup.teach_s, "teach")):
        ev = [] if record else None
        for k in range(n_blocks(dur)):
            block(k % 2, setup.block_s, mode, ev)
        if record:
            phases[name] = ev
    ev = [] if record else None
    rates = np.zeros((2, 2))
    nb = n_blocks(setup.test_s)
    for k in range(nb):
        c = block(k % 2, setup.block_s, "test", ev)
        rates[k % 2] += np.array([c[group_a].mean(), c[~group_a].mean()]) / (nb / 2)
    if record:
        phases["test"] = ev
    return LocalRuleRun(seed, rates, phases, {"input_hidden": p_in.weights.copy(),
                                              "hidden_output": p_out.weights.copy()})


def _local_rule_job(args):
    setup, seed, record = args
    return run_local_rule_seed(setup, seed, record)


@dataclass
class LocalRuleResult:
    setup: LocalRuleSetup
    runs: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> list[bool]:
        return [min(r.ratios) >= self.setup.ratio_required for r in self.runs]


def run_local_rule(setup: LocalRuleSetup = LocalRuleSetup(), seed: int = 0,
                   record_first: bool = True) -> LocalRuleResult:
    t0 = time.perf_counter()
    jobs = [(setup, seed + k, record_first and k == 0) for k in range(setup.seeds)]
    runs = parallel_map(_local_rule_job, jobs)
    return LocalRuleResult(setup, runs, time.perf_counter() - t0)
