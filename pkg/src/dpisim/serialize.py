"""Checkpoint files: topology, parameters, weights and seeds as JSON text."""

from __future__ import annotations

import json
from dataclasses import asdict, fields

import numpy as np

from .autodiff import value_of
from .dpi_core import AhpParams, FeedbackParams, NeuronParams, SynapseParams
from .network import Population, Projection, Topology

CHECKPOINT_FORMAT = "dpi-checkpoint v1"


class CheckpointError(ValueError):
    pass


def _plain(x):
    x = value_of(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def neuron_params_to_dict(p: NeuronParams) -> dict:
    d = {}
    for f in fields(p):
        v = getattr(p, f.name)
        if f.name == "ahp":
            d["ahp"] = None if v is None else {k: _plain(x) for k, x in asdict(v).items()}
        elif f.name == "feedback":
            d["feedback"] = {k: _plain(x) for k, x in asdict(v).items()}
        else:
            d[f.name] = _plain(v)
    return d


def _arr(v):
    return np.asarray(v, dtype=float) if isinstance(v, list) else v


def neuron_params_from_dict(d: dict) -> NeuronParams:
    d = dict(d)
    ahp = d.pop("ahp", None)
    fb = d.pop("feedback", None)
    known = {f.name for f in fields(NeuronParams)}
    unknown = set(d) - known
    if unknown:
        raise CheckpointError(f"unknown neuron parameters {sorted(unknown)}")
    kw = {k: _arr(v) for k, v in d.items()}
    if ahp is not None:
        kw["ahp"] = AhpParams(**{k: _arr(v) for k, v in ahp.items()})
    if fb is not None:
        kw["feedback"] = FeedbackParams(**fb)
    return NeuronParams(**kw)


def synapse_params_to_dict(p: SynapseParams) -> dict:
    return {k: _plain(v) for k, v in asdict(p).items()}


def topology_to_dict(topo: Topology) -> dict:
    return {
        "fan_in_limit": topo.fan_in_limit,
        "populations": [{"name": p.name, "size": p.size,
                         "params": None if p.params is None else neuron_params_to_dict(p.params)}
                        for p in topo.populations],
        "synapses": {k: synapse_params_to_dict(v) for k, v in sorted(topo.synapses.items())},
        "projections": [{"pre": p.pre, "post": p.post, "kind": p.kind,
                         "weights": _plain(np.asarray(value_of(p.weights), dtype=float))}
                        for p in topo.projections],
    }


def topology_from_dict(d: dict) -> Topology:
    try:
        pops = [Population(p["name"], int(p["size"]),
                           None if p["params"] is None else neuron_params_from_dict(p["params"]))
                for p in d["populations"]]
        syn = {k: SynapseParams(**v) for k, v in d["synapses"].items()}
        projs = [Projection(p["pre"], p["post"], p["kind"], np.asarray(p["weights"], dtype=float))
                 for p in d["projections"]]
        return Topology(pops, projs, syn, int(d["fan_in_limit"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed topology: {exc}") from exc


def dumps_checkpoint(topo: Topology, meta: dict) -> str:
    body = {"format": CHECKPOINT_FORMAT, "meta": meta, "topology": topology_to_dict(topo)}
    return json.dumps(body, indent=1, sort_keys=True) + "\n"


def loads_checkpoint(text: str) -> tuple[Topology, dict]:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a checkpoint: {exc}") from exc
    if body.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {body.get('format')!r}")
    return topology_from_dict(body["topology"]), body.get("meta", {})
