"""Hardware netlists: integer synapse counts plus bias codes.

Text format (one record per line, ``#`` starts a comment)::

    dpi-netlist v1
    fan_in_limit 64
    population <name> <size> source|neuron
    param <population> <field> <value|none>          # non-bias neuron constants
    bias <population> <neuron_id> <BIAS> <coarse> <fine> <current_pA>
    synparam <kind> <field> <value|none>
    synbias <kind> <BIAS> <coarse> <fine> <current_pA>
    proj <pre> <post> <kind>                          # declared even when empty
    conn <pre> <post> <kind> <pre_id> <post_id> <count>

Currents printed next to codes are informational (3 decimals); importing
recomputes them from the calibration table, so a deployed network and its
reimported netlist simulate with identical parameters.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import value_of
from .dpi_core import SYNAPSE_KINDS, AhpParams, FeedbackParams, NeuronParams, SynapseParams
from .hw_model import BiasCode, CalibrationError, CalibrationTable
from .learn import quantize_rows
from .network import Population, Projection, Topology

VERSION = "dpi-netlist v1"
PA = 1e-12

NEURON_BIASES = (("I_tau", "IF_TAU"), ("I_g", "IF_GAIN"), ("I_dc", "IF_DC"),
                 ("spike_threshold", "IF_THR"))
AHP_BIASES = (("I_tau_ahp", "IF_AHP_TAU"), ("I_g_ahp", "IF_AHP_GAIN"), ("I_w_ahp", "IF_AHP_W"))
NEURON_CONSTANTS = ("C_mem", "reset_current", "t_refractory", "ahp_pulse_width")
SYN_BIASES = (("I_tau", "TAU"), ("I_g", "GAIN"), ("I_w", "WEIGHT"))
SYN_CONSTANTS = ("C_syn", "nmda_gate_threshold")


class NetlistError(ValueError):
    """Invalid netlist; ``code`` is one of the E_* identifiers below."""

    CODES = ("E_SYNTAX", "E_VERSION", "E_DANGLING", "E_FANIN", "E_BIAS_RANGE", "E_COUNT",
             "E_DUPLICATE")

    def __init__(self, code: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{code}: {where}{message}")
        self.code = code
        self.line = line


class ExportError(ValueError):
    """The checkpoint cannot be deployed (parameter outside the calibration range)."""


@dataclass
class Netlist:
    fan_in_limit: int = 64
    populations: list = field(default_factory=list)          # (name, size, is_source)
    params: dict = field(default_factory=dict)                # pop -> {field: float|None}
    biases: dict = field(default_factory=dict)                # (pop, id, BIAS) -> BiasCode
    syn_params: dict = field(default_factory=dict)            # kind -> {field: float|None}
    syn_biases: dict = field(default_factory=dict)            # (kind, BIAS) -> BiasCode
    projections: list = field(default_factory=list)           # (pre, post, kind)
    connections: list = field(default_factory=list)           # (pre, post, kind, i, j, count)

    def population_sizes(self) -> dict:
        return {name: size for name, size, _ in self.populations}

    def fan_in(self) -> dict:
        """``(post, post_id) -> total synapse count``."""
        out = {}
        for _, post, _, _, j, n in self.connections:
            out[(post, j)] = out.get((post, j), 0) + n
        return out


# export ---------------------------------------------------------------------

def _fmt(v) -> str:
    return "none" if v is None else repr(float(v))


def _per_neuron(value, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value_of(value), dtype=float), (n,))


def deploy(topology: Topology, table: CalibrationTable,
           fan_in_limit: int | None = None) -> tuple[Topology, Netlist]:
    """Integer weights within the fan-in budget and biases snapped to codes.

    Returns the deployed topology (what the hardware would run) and its netlist.
    """
    limit = topology.fan_in_limit if fan_in_limit is None else fan_in_limit
    # shared per-neuron budget over every projection into a population
    new_w = {}
    for pop in topology.neurons:
        projs = [p for p in topology.projections if p.post == pop.name]
        if not projs:
            continue
        counts = quantize_rows([np.asarray(value_of(p.weights), dtype=float) for p in projs], limit)
        for p, c in zip(projs, counts):
            new_w[id(p)] = c
    net = Netlist(fan_in_limit=limit)
    pops = []
    for pop in topology.populations:
        net.populations.append((pop.name, pop.size, pop.is_source))
        if pop.is_source:
            pops.append(pop)
            continue
        p = pop.params
        consts = {k: getattr(p, k) for k in NEURON_CONSTANTS}
        consts["alpha"] = p.feedback.alpha
        consts["I_g_fb"] = p.feedback.I_g_fb
        consts["ahp"] = 0.0 if p.ahp is None else 1.0
        if p.ahp is not None:
            consts["C_ahp"] = p.ahp.C_ahp
        net.params[pop.name] = {k: (None if v is None else float(value_of(v)))
                                for k, v in consts.items()}
        snapped = {}
        pairs = NEURON_BIASES + (AHP_BIASES if p.ahp is not None else ())
        for attr, bias in pairs:
            src = p.ahp if attr.endswith("_ahp") else p
            vals = _per_neuron(getattr(src, attr), pop.size)
            cur = np.empty(pop.size)
            for i, v in enumerate(vals):
                try:
                    code = table.current_to_code(bias, float(v))
                except CalibrationError as exc:
                    raise ExportError(f"{pop.name}[{i}] {attr}: {exc}") from None
                net.biases[(pop.name, i, bias)] = code
                cur[i] = table.code_to_current(bias, code)
            snapped[attr] = float(cur[0]) if np.all(cur == cur[0]) else cur
        ahp = None
        if p.ahp is not None:
            ahp = replace(p.ahp, **{a: snapped[a] for a, _ in AHP_BIASES})
        params = replace(p, ahp=ahp, **{a: snapped[a] for a, _ in NEURON_BIASES})
        pops.append(Population(pop.name, pop.size, params))
    syn = {}
    for kind, sp in sorted(topology.synapses.items()):
        net.syn_params[kind] = {k: (None if getattr(sp, k) is None else float(getattr(sp, k)))
                                for k in SYN_CONSTANTS}
        snapped = {}
        for attr, suffix in SYN_BIASES:
            bias = f"{kind.upper()}_{suffix}"
            try:
                code = table.current_to_code(bias, float(value_of(getattr(sp, attr))))
            except CalibrationError as exc:
                raise ExportError(f"synapse {kind} {attr}: {exc}") from None
            net.syn_biases[(kind, bias)] = code
            snapped[attr] = table.code_to_current(bias, code)
        syn[kind] = replace(sp, **snapped)
    projs = []
    for p in topology.projections:
        w = new_w[id(p)]
        projs.append(Projection(p.pre, p.post, p.kind, w.astype(float)))
        net.projections.append((p.pre, p.post, p.kind))
        for j, i in zip(*np.nonzero(w)):
            net.connections.append((p.pre, p.post, p.kind, int(i), int(j), int(w[j, i])))
    deployed = Topology(pops, projs, syn, limit)
    return deployed, net


def dumps(net: Netlist, table: CalibrationTable) -> str:
    out = io.StringIO()
    w = out.write
    w(VERSION + "\n")
    w(f"fan_in_limit {net.fan_in_limit}\n")
    for name, size, is_source in net.populations:
        w(f"population {name} {size} {'source' if is_source else 'neuron'}\n")
    for name, size, is_source in net.populations:
        if is_source:
            continue
        for k, v in net.params[name].items():
            w(f"param {name} {k} {_fmt(v)}\n")
        for i in range(size):
            for bias in sorted(b for (pn, j, b) in net.biases if pn == name and j == i):
                code = net.biases[(name, i, bias)]
                cur = table.code_to_current(bias, code) / PA
                w(f"bias {name} {i} {bias} {code.coarse} {code.fine} {cur:.3f}\n")
    for kind in sorted(net.syn_params):
        for k, v in net.syn_params[kind].items():
            w(f"synparam {kind} {k} {_fmt(v)}\n")
        for (kd, bias), code in sorted(net.syn_biases.items()):
            if kd == kind:
                cur = table.code_to_current(bias, code) / PA
                w(f"synbias {kind} {bias} {code.coarse} {code.fine} {cur:.3f}\n")
    for pre, post, kind in net.projections:
        w(f"proj {pre} {post} {kind}\n")
    for pre, post, kind, i, j, n in net.connections:
        w(f"conn {pre} {post} {kind} {i} {j} {n}\n")
    return out.getvalue()


# import + validation ----------------------------------------------------------

def _num(tok: str, lineno: int, integer: bool = False):
    try:
        if tok == "none" and not integer:
            return None
        return int(tok) if integer else float(tok)
    except ValueError:
        raise NetlistError("E_SYNTAX", f"bad number {tok!r}", lineno) from None


def _code(c: str, f: str, lineno: int) -> BiasCode:
    coarse, fine = _num(c, lineno, True), _num(f, lineno, True)
    try:
        return BiasCode(coarse, fine)
    except ValueError as exc:
        raise NetlistError("E_BIAS_RANGE", str(exc), lineno) from None


def loads(text: str, table: CalibrationTable) -> Netlist:
    """Parse and validate; raises :class:`NetlistError` on the first problem."""
    lines = text.splitlines()
    body = [(n, ln.split("#", 1)[0].split()) for n, ln in enumerate(lines, start=1)]
    body = [(n, toks) for n, toks in body if toks]
    if not body or " ".join(body[0][1]) != VERSION:
        raise NetlistError("E_VERSION", f"expected header '{VERSION}'", body[0][0] if body else 1)
    net = Netlist()
    sizes = {}
    seen_conn = set()
    limit_seen = False

    def need_pop(name, lineno, neuron=False):
        if name not in sizes:
            raise NetlistError("E_DANGLING", f"undeclared population {name!r}", lineno)
        if neuron and dict((p[0], p[2]) for p in net.populations)[name]:
            raise NetlistError("E_DANGLING", f"{name!r} is a source population", lineno)

    def need_id(name, i, lineno):
        if not 0 <= i < sizes[name]:
            raise NetlistError("E_DANGLING", f"{name}[{i}] out of range (size {sizes[name]})",
                               lineno)

    def check_current(bias, code, printed, lineno):
        try:
            cur = table.code_to_current(bias, code)
        except CalibrationError as exc:
            raise NetlistError("E_BIAS_RANGE", str(exc), lineno) from None
        if printed is None or abs(cur / PA - printed) > 5e-4 + 1e-9 * abs(printed):
            raise NetlistError("E_BIAS_RANGE", f"{bias} {code}: listed current {printed} pA does "
                               f"not match calibration {cur / PA:.3f} pA", lineno)

    for lineno, toks in body[1:]:
        key, args = toks[0], toks[1:]
        if key == "fan_in_limit" and len(args) == 1:
            net.fan_in_limit = _num(args[0], lineno, True)
            if net.fan_in_limit < 1:
                raise NetlistError("E_SYNTAX", "fan_in_limit must be >= 1", lineno)
            limit_seen = True
        elif key == "population" and len(args) == 3:
            name, size, kind = args[0], _num(args[1], lineno, True), args[2]
            if kind not in ("source", "neuron") or size < 1:
                raise NetlistError("E_SYNTAX", "population needs a size >= 1 and source|neuron",
                                   lineno)
            if name in sizes:
                raise NetlistError("E_DUPLICATE", f"population {name!r} declared twice", lineno)
            sizes[name] = size
            net.populations.append((name, size, kind == "source"))
        elif key == "param" and len(args) == 3:
            need_pop(args[0], lineno, neuron=True)
            net.params.setdefault(args[0], {})[args[1]] = _num(args[2], lineno)
        elif key == "bias" and len(args) == 6:
            need_pop(args[0], lineno, neuron=True)
            i = _num(args[1], lineno, True)
            need_id(args[0], i, lineno)
            code = _code(args[3], args[4], lineno)
            check_current(args[2], code, _num(args[5], lineno), lineno)
            if (args[0], i, args[2]) in net.biases:
                raise NetlistError("E_DUPLICATE", f"bias {args[2]} of {args[0]}[{i}] repeated",
                                   lineno)
            net.biases[(args[0], i, args[2])] = code
        elif key == "synparam" and len(args) == 3:
            if args[0] not in SYNAPSE_KINDS:
                raise NetlistError("E_SYNTAX", f"unknown synapse kind {args[0]!r}", lineno)
            net.syn_params.setdefault(args[0], {})[args[1]] = _num(args[2], lineno)
        elif key == "synbias" and len(args) == 5:
            if args[0] not in SYNAPSE_KINDS:
                raise NetlistError("E_SYNTAX", f"unknown synapse kind {args[0]!r}", lineno)
            code = _code(args[2], args[3], lineno)
            check_current(args[1], code, _num(args[4], lineno), lineno)
            net.syn_biases[(args[0], args[1])] = code
        elif key == "proj" and len(args) == 3:
            need_pop(args[0], lineno)
            need_pop(args[1], lineno, neuron=True)
            if args[2] not in SYNAPSE_KINDS:
                raise NetlistError("E_SYNTAX", f"unknown synapse kind {args[2]!r}", lineno)
            if tuple(args) in net.projections:
                raise NetlistError("E_DUPLICATE", "projection declared twice", lineno)
            net.projections.append(tuple(args))
        elif key == "conn" and len(args) == 6:
            pre, post, kind = args[0], args[1], args[2]
            if (pre, post, kind) not in net.projections:
                raise NetlistError("E_DANGLING", f"connection on undeclared projection "
                                   f"{pre}->{post} {kind}", lineno)
            i, j, n = (_num(a, lineno, True) for a in args[3:])
            need_id(pre, i, lineno)
            need_id(post, j, lineno)
            if n < 1:
                raise NetlistError("E_COUNT", f"synapse count {n} < 1", lineno)
            if (pre, post, kind, i, j) in seen_conn:
                raise NetlistError("E_DUPLICATE", "connection listed twice", lineno)
            seen_conn.add((pre, post, kind, i, j))
            net.connections.append((pre, post, kind, i, j, n))
        else:
            raise NetlistError("E_SYNTAX", f"unrecognized record {' '.join(toks)!r}", lineno)
    if not limit_seen:
        raise NetlistError("E_SYNTAX", "missing fan_in_limit record")
    _check_complete(net)
    for (post, j), total in sorted(net.fan_in().items()):
        if total > net.fan_in_limit:
            raise NetlistError("E_FANIN", f"{post}[{j}] has fan-in {total} > {net.fan_in_limit}")
    return net


def _check_complete(net: Netlist):
    for name, size, is_source in net.populations:
        if is_source:
            continue
        if name not in net.params:
            raise NetlistError("E_SYNTAX", f"population {name!r} has no param records")
        missing = [k for k in NEURON_CONSTANTS + ("alpha", "I_g_fb", "ahp") if k not in net.params[name]]
        if missing:
            raise NetlistError("E_SYNTAX", f"population {name!r} lacks params {missing}")
        biases = NEURON_BIASES + (AHP_BIASES if net.params[name]["ahp"] else ())
        for i in range(size):
            for _, bias in biases:
                if (name, i, bias) not in net.biases:
                    raise NetlistError("E_DANGLING", f"{name}[{i}] has no {bias} code")
    kinds = {p[2] for p in net.projections}
    for kind in kinds:
        if kind not in net.syn_params:
            raise NetlistError("E_DANGLING", f"synapse kind {kind!r} used but not parameterized")
        for _, suffix in SYN_BIASES:
            if (kind, f"{kind.upper()}_{suffix}") not in net.syn_biases:
                raise NetlistError("E_DANGLING", f"synapse kind {kind!r} lacks {suffix} code")


def validate(text: str, table: CalibrationTable) -> list[str]:
    """Empty list if the netlist is valid, else ``[error code, message]``."""
    try:
        loads(text, table)
    except NetlistError as exc:
        return [exc.code, str(exc)]
    return []


def to_topology(net: Netlist, table: CalibrationTable) -> Topology:
    """Rebuild the deployed network (integer weights, calibrated currents)."""
    pops = []
    for name, size, is_source in net.populations:
        if is_source:
            pops.append(Population(name, size))
            continue
        c = net.params[name]

        def currents(bias):
            vals = np.array([table.code_to_current(bias, net.biases[(name, i, bias)])
                             for i in range(size)])
            return float(vals[0]) if np.all(vals == vals[0]) else vals

        kw = {attr: currents(bias) for attr, bias in NEURON_BIASES}
        ahp = None
        if c["ahp"]:
            ahp = AhpParams(C_ahp=c["C_ahp"], **{attr: currents(bias) for attr, bias in AHP_BIASES})
        pops.append(Population(name, size, NeuronParams(
            C_mem=c["C_mem"], reset_current=c["reset_current"], t_refractory=c["t_refractory"],
            ahp_pulse_width=c["ahp_pulse_width"], ahp=ahp,
            feedback=FeedbackParams(alpha=c["alpha"], I_g_fb=c["I_g_fb"]), **kw)))
    sizes = net.population_sizes()
    mats = {key: np.zeros((sizes[key[1]], sizes[key[0]])) for key in net.projections}
    for pre, post, kind, i, j, n in net.connections:
        mats[(pre, post, kind)][j, i] = n
    projs = [Projection(pre, post, kind, mats[(pre, post, kind)])
             for pre, post, kind in net.projections]
    syn = {}
    for kind, c in net.syn_params.items():
        kw = {attr: table.code_to_current(f"{kind.upper()}_{suffix}",
                                          net.syn_biases[(kind, f"{kind.upper()}_{suffix}")])
              for attr, suffix in SYN_BIASES}
        syn[kind] = SynapseParams(kind=kind, C_syn=c["C_syn"],
                                  nmda_gate_threshold=c["nmda_gate_threshold"], **kw)
    return Topology(pops, projs, syn, net.fan_in_limit)
