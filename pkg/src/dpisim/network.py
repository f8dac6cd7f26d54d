"""Populations, projections and the synchronous time-stepped engine.

Every connection has a one-step transmission delay: spikes emitted (or
injected by a source) at step ``t-1`` drive the synapses at step ``t``.
A weight ``W[post, pre]`` counts identical base-weight synapses; the drive
into a DPI synapse is ``sum_pre W * spike_pre`` scaled by ``pulse_width/dt``
so that one spike injects the same charge for any ``dt``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateSpec, value_of
from .dpi_core import (DEFAULT_CONSTANTS, SYNAPSE_KINDS, NeuronParams, NeuronState,
                       PhysicalConstants, SynapseParams, neuron_step, synapse_update)
from .hw_model import MismatchSpec, mismatch_neuron_params, mismatch_synapse_params

PA = 1e-12


@dataclass
class Population:
    """A group of neurons, or a spike source when ``params`` is None."""

    name: str
    size: int
    params: NeuronParams | None = None

    @property
    def is_source(self) -> bool:
        return self.params is None


@dataclass
class Projection:
    pre: str
    post: str
    kind: str
    weights: np.ndarray  # shape (post.size, pre.size)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in SYNAPSE_KINDS:
            raise ValueError(f"unknown synapse kind {self.kind!r}")


@dataclass
class Topology:
    populations: list[Population]
    projections: list[Projection]
    synapses: dict[str, SynapseParams] = field(default_factory=dict)
    fan_in_limit: int = 64

    def __post_init__(self):
        names = [p.name for p in self.populations]
        if len(set(names)) != len(names):
            raise ValueError("duplicate population names")
        for proj in self.projections:
            pre, post = self.population(proj.pre), self.population(proj.post)
            if post.is_source:
                raise ValueError(f"projection into source population {post.name!r}")
            if np.shape(value_of(proj.weights)) != (post.size, pre.size):
                raise ValueError(f"{proj.pre}->{proj.post} {proj.kind}: weight shape "
                                 f"{np.shape(value_of(proj.weights))} != {(post.size, pre.size)}")
            if proj.kind not in self.synapses:
                self.synapses[proj.kind] = SynapseParams(kind=proj.kind)

    def population(self, name: str) -> Population:
        for p in self.populations:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def sources(self) -> list[Population]:
        return [p for p in self.populations if p.is_source]

    @property
    def neurons(self) -> list[Population]:
        return [p for p in self.populations if not p.is_source]

    def projection(self, pre: str, post: str, kind: str) -> Projection:
        for p in self.projections:
            if (p.pre, p.post, p.kind) == (pre, post, kind.lower()):
                return p
        raise KeyError((pre, post, kind))

    def fan_in(self, post: str) -> np.ndarray:
        """Total synapse count per neuron of ``post`` across all kinds and sources."""
        total = np.zeros(self.population(post).size)
        for p in self.projections:
            if p.post == post:
                total = total + np.asarray(value_of(p.weights)).sum(axis=1)
        return total

    def with_weights(self, transform: Callable) -> "Topology":
        return replace(self, projections=[replace(p, weights=transform(p.weights))
                                          for p in self.projections],
                       synapses=dict(self.synapses))


@dataclass(frozen=True, order=True)
class SpikeEvent:
    time: float
    population: str
    neuron_id: int


@dataclass
class SimResult:
    dt: float
    n_steps: int
    spikes: list[SpikeEvent]
    counts: dict[str, np.ndarray]
    traces: dict | None = None
    spike_trains: dict | None = None

    def rate(self, population: str, start: float = 0.0, stop: float | None = None) -> np.ndarray:
        """Mean firing rate (Hz) per neuron in a window."""
        stop = self.n_steps * self.dt if stop is None else stop
        train = self.spike_trains[population]
        a, b = int(round(start / self.dt)), int(round(stop / self.dt))
        return train[a:b].sum(axis=0) / (stop - start)


class Engine:
    """Batched synchronous simulator over a :class:`Topology`.

    State arrays have shape ``(batch, n)``. Parameters and weights may be
    Vars; pass ``surrogate`` to make spikes differentiable.
    """

    def __init__(self, topology: Topology, dt: float, batch: int = 1,
                 consts: PhysicalConstants = DEFAULT_CONSTANTS,
                 surrogate: SurrogateSpec | None = None, pulse_width: float = 1e-3,
                 mismatch: MismatchSpec | None = None,
                 weight_transform: Callable | None = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.topology = topology
        self.dt = dt
        self.batch = batch
        self.consts = consts
        self.surrogate = surrogate
        self.drive_scale = pulse_width / dt
        self.params = {}
        self.syn_params = {}
        for pop in topology.neurons:
            p = pop.params
            if mismatch is not None:
                p = mismatch_neuron_params(p, mismatch, pop.size, consts, label=pop.name)
            self.params[pop.name] = p
        self.groups = {}
        for proj in topology.projections:
            self.groups.setdefault((proj.post, proj.kind), []).append(proj)
        for (post, kind) in self.groups:
            sp = topology.synapses[kind]
            if mismatch is not None:
                sp = mismatch_synapse_params(sp, mismatch, topology.population(post).size, consts,
                                             label=f"{post}/{kind}")
            self.syn_params[(post, kind)] = sp
        self.weight_transform = weight_transform
        self.reset()

    def effective_weights(self, proj: Projection):
        w = proj.weights
        return self.weight_transform(w) if self.weight_transform is not None else w

    def reset(self):
        I0 = self.consts.I_0
        B = self.batch
        self.state = {pop.name: NeuronState.rest((B, pop.size), self.consts)
                      for pop in self.topology.neurons}
        self.i_syn = {key: np.full((B, self.topology.population(key[0]).size), I0)
                      for key in self.groups}
        self.last_spikes = {pop.name: np.zeros((B, pop.size)) for pop in self.topology.populations}
        self._wt = {id(p): ad.transpose(self.effective_weights(p)) for p in self.topology.projections}

    def refresh_weights(self):
        """Re-read projection weights (call after modifying them in place)."""
        self._wt = {id(p): ad.transpose(self.effective_weights(p)) for p in self.topology.projections}

    def step(self, source_spikes: Mapping[str, np.ndarray]):
        """Advance one step. ``source_spikes[name]`` has shape ``(batch, size)`` for
        each source population and is delivered at the next step."""
        dt = self.dt
        for (post, kind), projs in self.groups.items():
            drive = None
            for proj in projs:
                d = ad.matmul(self.last_spikes[proj.pre], self._wt[id(proj)])
                drive = d if drive is None else drive + d
            self.i_syn[(post, kind)] = synapse_update(self.i_syn[(post, kind)],
                                                      self.syn_params[(post, kind)],
                                                      drive * self.drive_scale, dt, self.consts)
        new_spikes = {}
        for pop in self.topology.neurons:
            syn = {kind: self.i_syn[(pop.name, kind)] for (post, kind) in self.groups
                   if post == pop.name}
            nmda_thr = None
            if "nmda" in syn:
                nmda_thr = self.syn_params[(pop.name, "nmda")].nmda_gate_threshold
            st = neuron_step(self.state[pop.name], self.params[pop.name], syn, dt, self.consts,
                             surrogate=self.surrogate, nmda_threshold=nmda_thr)
            self.state[pop.name] = st
            new_spikes[pop.name] = st.spiked
        for pop in self.topology.sources:
            s = source_spikes.get(pop.name)
            new_spikes[pop.name] = np.zeros((self.batch, pop.size)) if s is None else \
                np.asarray(s, dtype=float)
        self.last_spikes = new_spikes
        return new_spikes


def simulate(topology: Topology, inputs: Mapping[str, np.ndarray] | np.ndarray | None,
             duration: float, dt: float, record_traces: Sequence[str] = (),
             mismatch: MismatchSpec | None = None,
             consts: PhysicalConstants = DEFAULT_CONSTANTS, pulse_width: float = 1e-3,
             record_sources: bool = False, weight_transform: Callable | None = None) -> SimResult:
    """Run the network once (batch of one) and record spikes and optional traces.

    ``inputs`` maps source population name to a boolean ``(channels, steps)``
    array; a bare array is taken as the ``input`` population.
    """
    n_steps = int(round(duration / dt))
    if inputs is None:
        inputs = {}
    elif isinstance(inputs, np.ndarray):
        inputs = {"input": inputs}
    for name, arr in inputs.items():
        pop = topology.population(name)
        if not pop.is_source:
            raise ValueError(f"{name!r} is not a source population")
        if arr.shape[0] != pop.size:
            raise ValueError(f"{name}: {arr.shape[0]} channels, population has {pop.size}")
        if arr.shape[1] < n_steps:
            raise ValueError(f"{name}: {arr.shape[1]} steps < {n_steps}")
    eng = Engine(topology, dt, 1, consts, pulse_width=pulse_width, mismatch=mismatch,
                 weight_transform=weight_transform)
    pops = topology.populations if record_sources else topology.neurons
    trains = {p.name: np.zeros((n_steps, p.size), dtype=bool) for p in topology.populations}
    traces = {}
    for name in record_traces:
        pop = topology.population(name)
        traces[name] = {"I_mem": np.empty((n_steps, pop.size)), "I_ahp": np.empty((n_steps, pop.size))}
        for (post, kind) in eng.groups:
            if post == name:
                traces[name][f"I_syn_{kind}"] = np.empty((n_steps, pop.size))
    for t in range(n_steps):
        src = {name: arr[:, t][None, :] for name, arr in inputs.items()}
        spikes = eng.step(src)
        for name, s in spikes.items():
            trains[name][t] = np.asarray(value_of(s))[0] >= 0.5
        for name, tr in traces.items():
            st = eng.state[name]
            tr["I_mem"][t] = value_of(st.I_mem)[0]
            tr["I_ahp"][t] = value_of(st.I_ahp)[0]
            for key in tr:
                if key.startswith("I_syn_"):
                    tr[key][t] = value_of(eng.i_syn[(name, key[6:])])[0]
    events = []
    order = {p.name: i for i, p in enumerate(topology.populations)}
    for pop in pops:
        steps, ids = np.nonzero(trains[pop.name])
        events.extend((t, order[pop.name], int(i)) for t, i in zip(steps, ids))
    events.sort()
    names = [p.name for p in topology.populations]
    spikes = [SpikeEvent(t * dt, names[o], i) for t, o, i in events]
    counts = {name: tr.sum(axis=0) for name, tr in trains.items()}
    return SimResult(dt, n_steps, spikes, counts, traces or None, trains)


# input encoding -------------------------------------------------------------

def _rng(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


def encode_poisson(values, max_rate: float, duration: float, dt: float, seed=0) -> np.ndarray:
    """Bernoulli(rate*dt) spike trains, ``rate = intensity * max_rate``; shape (channels, steps)."""
    values = np.asarray(values, dtype=float)
    if np.any(values < 0) or np.any(values > 1):
        raise ValueError("intensities must lie in [0, 1]")
    if max_rate * dt > 1:
        raise ValueError("max_rate * dt > 1: time step too coarse for the rate")
    n_steps = int(round(duration / dt))
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    p = values[:, None] * (max_rate * dt)
    return rng.random((values.size, n_steps)) < p


def encode_rates(rates, duration: float, dt: float, rng: np.random.Generator) -> np.ndarray:
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise ValueError("rates must be >= 0")
    n_steps = int(round(duration / dt))
    return rng.random((rates.size, n_steps)) < (rates[:, None] * dt)


# classification protocol ---------------------------------------------------

@dataclass(frozen=True)
class TrialProtocol:
    stim_ms: float = 50.0
    rest_ms: float = 50.0
    max_rate: float = 100.0


def predict_from_counts(stim_counts, rest_counts) -> np.ndarray:
    """argmax of (stimulus count - rest baseline); ties go to the lowest neuron id."""
    score = np.asarray(stim_counts) - np.asarray(rest_counts)
    return np.argmax(score, axis=-1)


def classification_inputs(samples: np.ndarray, protocol: TrialProtocol, dt: float, seed: int,
                          indices: Sequence[int] | None = None) -> np.ndarray:
    """Rest-then-stimulus Poisson input; shape (steps, batch, channels)."""
    samples = np.atleast_2d(samples)
    rest = int(round(protocol.rest_ms * 1e-3 / dt))
    stim = int(round(protocol.stim_ms * 1e-3 / dt))
    indices = range(len(samples)) if indices is None else indices
    out = np.zeros((rest + stim, len(samples), samples.shape[1]), dtype=bool)
    for b, (x, idx) in enumerate(zip(samples, indices)):
        train = encode_poisson(x, protocol.max_rate, protocol.stim_ms * 1e-3, dt, _rng(seed, idx))
        out[rest:, b] = train.T
    return out


def classify_batch(topology: Topology, samples: np.ndarray, protocol: TrialProtocol, dt: float,
                   seed: int, readout: str = "output", indices=None,
                   weight_transform=None, consts: PhysicalConstants = DEFAULT_CONSTANTS,
                   pulse_width: float = 1e-3, mismatch: MismatchSpec | None = None):
    """Run the rest/stimulus protocol on a batch; returns (predictions, stim_counts, rest_counts)."""
    x = classification_inputs(samples, protocol, dt, seed, indices)
    rest = int(round(protocol.rest_ms * 1e-3 / dt))
    eng = Engine(topology, dt, x.shape[1], consts, pulse_width=pulse_width,
                 weight_transform=weight_transform, mismatch=mismatch)
    n_out = topology.population(readout).size
    stim_counts = np.zeros((x.shape[1], n_out))
    rest_counts = np.zeros((x.shape[1], n_out))
    src_name = topology.sources[0].name
    for t in range(x.shape[0]):
        s = np.asarray(value_of(eng.step({src_name: x[t]})[readout])) >= 0.5
        if t < rest:
            rest_counts += s
        else:
            stim_counts += s
    return predict_from_counts(stim_counts, rest_counts), stim_counts, rest_counts


def run_classification_trial(topology: Topology, sample, protocol: TrialProtocol = TrialProtocol(),
                             dt: float = 1e-3, seed: int = 0, readout: str = "output", **kw) -> int:
    pred, _, _ = classify_batch(topology, np.asarray(sample)[None, :], protocol, dt, seed,
                                readout, **kw)
    return int(pred[0])


# CSV output -----------------------------------------------------------------

SPIKE_HEADER = ("time_s", "population", "neuron_id")


def spikes_to_csv(spikes: Sequence[SpikeEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPIKE_HEADER)
    for ev in spikes:
        w.writerow([f"{ev.time:.6f}", ev.population, ev.neuron_id])
    return buf.getvalue()


def traces_to_csv(result: SimResult, population: str) -> str:
    tr = result.traces[population]
    syn_keys = sorted(k for k in tr if k.startswith("I_syn_"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "neuron_id", "I_mem_pA", "I_ahp_pA"] + [f"{k}_pA" for k in syn_keys])
    n_steps, n = tr["I_mem"].shape
    for t in range(n_steps):
        for i in range(n):
            row = [f"{t * result.dt:.6f}", i, f"{tr['I_mem'][t, i] / PA:.6f}",
                   f"{tr['I_ahp'][t, i] / PA:.6f}"]
            row += [f"{tr[k][t, i] / PA:.6f}" for k in syn_keys]
            w.writerow(row)
    return buf.getvalue()
