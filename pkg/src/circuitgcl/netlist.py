"""Netlist and parasitic ingestion: SPICE/SPF subsets to labeled circuit graphs.

The grammars cover connectivity only, not simulation.  Netlist cards: M/R/C
devices, V/I sources (register their nets, no device node), X subcircuit
instantiation with flattening, .subckt/.ends, .param (ignored with a warning),
.end, full-line * comments, + continuations.  The parasitic subset reads
"*|NET name value" ground-capacitance totals and "Cname a b value" coupling
lines.  Both grammars are documented with worked examples in the README.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
import re

import numpy as np

from . import _binio
from ._errors import (
    ContractError,
    GraphFormatError,
    NetlistParseError,
    UnknownNameError,
)

logger = logging.getLogger(__name__)

NET = "net"
DEVICE = "device"
PIN = "pin"
NODE_KINDS = (NET, DEVICE, PIN)

DEVICE_PIN = "device_pin"
NET_PIN = "net_pin"
STRUCT_KINDS = (DEVICE_PIN, NET_PIN)

PIN_NET = "pin_net"
PIN_PIN = "pin_pin"
NET_NET = "net_net"
CANDIDATE_KINDS = (PIN_NET, PIN_PIN, NET_NET)

# supply/ground names collapse to one shared node each, case-insensitive
GLOBAL_NETS = ("0", "gnd", "vdd")

REGRESSION = "regression"
CLASSIFICATION = "classification"

_NODE_CODE = {NET: 0, DEVICE: 1, PIN: 2}
_STRUCT_CODE = {DEVICE_PIN: 0, NET_PIN: 1}
_CAND_CODE = {PIN_NET: 0, PIN_PIN: 1, NET_NET: 2}
_NODE_FROM_CODE = {v: k for k, v in _NODE_CODE.items()}
_STRUCT_FROM_CODE = {v: k for k, v in _STRUCT_CODE.items()}
_CAND_FROM_CODE = {v: k for k, v in _CAND_CODE.items()}

_GRAPH_MAGIC = b"CGC1"
_GRAPH_VERSION = 1

_MOS_TERMINALS = ("d", "g", "s", "b")
_TWO_TERMINALS = ("1", "2")


@dataclass(frozen=True)
class CircuitNode:
    id: int
    kind: str
    name: str


@dataclass(frozen=True)
class StructEdge:
    """Structural edge; `a` is the device or net side, `b` is the pin."""

    a: int
    b: int
    kind: str


@dataclass(frozen=True)
class CandidateEdge:
    """Possible coupling pair; `label` is the capacitance in farads if known."""

    a: int
    b: int
    kind: str
    label: float | None = None


def candidate_kind(kind_a, kind_b):
    """Coupling edge kind for a pair of endpoint node kinds."""
    if kind_a == NET and kind_b == NET:
        return NET_NET
    if kind_a == PIN and kind_b == PIN:
        return PIN_PIN
    if {kind_a, kind_b} == {NET, PIN}:
        return PIN_NET
    raise ContractError(f"no coupling between {kind_a} and {kind_b} nodes")


class CircuitGraph:
    """Heterogeneous net/device/pin graph with optional capacitance labels.

    Structural edges carry connectivity; candidate edges mark possible
    coupling pairs and never contribute to adjacency.  Instances are built
    by the parsers or the synthesizer and treated as immutable afterwards.
    """

    def __init__(self, nodes=None, struct_edges=None, candidate_edges=None,
                 node_ground_caps=None):
        self.nodes = list(nodes or [])
        self.struct_edges = list(struct_edges or [])
        self.candidate_edges = list(candidate_edges or [])
        self.node_ground_caps = dict(node_ground_caps or {})
        self._by_name = None

    @property
    def n_nodes(self):
        return len(self.nodes)

    def node(self, node_id):
        if not 0 <= node_id < len(self.nodes):
            raise ContractError(f"node id {node_id} out of range")
        return self.nodes[node_id]

    def find(self, name, kind=None):
        """Node id for `name`, or None.  `kind` narrows the namespace."""
        if self._by_name is None:
            self._by_name = {(n.kind, n.name): n.id for n in self.nodes}
        if kind is not None:
            return self._by_name.get((kind, name))
        for k in NODE_KINDS:
            hit = self._by_name.get((k, name))
            if hit is not None:
                return hit
        return None

    def labeled_candidates(self):
        return [e for e in self.candidate_edges if e.label is not None]

    def summary(self):
        node_counts = {k: 0 for k in NODE_KINDS}
        for nd in self.nodes:
            node_counts[nd.kind] += 1
        struct_counts = {k: 0 for k in STRUCT_KINDS}
        for e in self.struct_edges:
            struct_counts[e.kind] += 1
        cand_counts = {k: 0 for k in CANDIDATE_KINDS}
        labeled = 0
        for e in self.candidate_edges:
            cand_counts[e.kind] += 1
            if e.label is not None:
                labeled += 1
        return {
            "nodes": node_counts,
            "struct_edges": struct_counts,
            "candidate_edges": cand_counts,
            "labeled_candidates": labeled,
            "ground_caps": len(self.node_ground_caps),
        }

    def __eq__(self, other):
        if not isinstance(other, CircuitGraph):
            return NotImplemented
        return (self.nodes == other.nodes
                and self.struct_edges == other.struct_edges
                and self.candidate_edges == other.candidate_edges
                and self.node_ground_caps == other.node_ground_caps)

    __hash__ = None

    def __repr__(self):
        return (f"CircuitGraph(nodes={len(self.nodes)}, "
                f"struct={len(self.struct_edges)}, "
                f"candidates={len(self.candidate_edges)})")

    def validate(self):
        """Check every structural invariant; returns self."""
        seen_names = set()
        for i, nd in enumerate(self.nodes):
            if nd.id != i:
                raise ContractError(f"node ids must be dense, got {nd.id} at index {i}")
            if nd.kind not in NODE_KINDS:
                raise ContractError(f"unknown node kind {nd.kind!r}")
            key = (nd.kind, nd.name)
            if key in seen_names:
                raise ContractError(f"duplicate {nd.kind} name {nd.name!r}")
            seen_names.add(key)
        n = len(self.nodes)
        pin_tally = {}
        struct_pairs = set()
        for e in self.struct_edges:
            if not (0 <= e.a < n and 0 <= e.b < n):
                raise ContractError(f"struct edge references missing node: {e}")
            ka, kb = self.nodes[e.a].kind, self.nodes[e.b].kind
            if e.kind == DEVICE_PIN:
                ok = ka == DEVICE and kb == PIN
            elif e.kind == NET_PIN:
                ok = ka == NET and kb == PIN
            else:
                raise ContractError(f"unknown struct edge kind {e.kind!r}")
            if not ok:
                raise ContractError(f"{e.kind} edge must join {e.kind.split('_')[0]} to pin, got {ka}-{kb}")
            struct_pairs.add((min(e.a, e.b), max(e.a, e.b)))
            slot = pin_tally.setdefault(e.b, [0, 0])
            slot[0 if e.kind == DEVICE_PIN else 1] += 1
        for nd in self.nodes:
            if nd.kind == PIN and pin_tally.get(nd.id) != [1, 1]:
                raise ContractError(f"pin {nd.name!r} must have exactly one device and one net edge")
        cand_pairs = set()
        for e in self.candidate_edges:
            if not (0 <= e.a < n and 0 <= e.b < n):
                raise ContractError(f"candidate edge references missing node: {e}")
            if e.a == e.b:
                raise ContractError("candidate edge endpoints must differ")
            if candidate_kind(self.nodes[e.a].kind, self.nodes[e.b].kind) != e.kind:
                raise ContractError(f"candidate kind {e.kind!r} does not match endpoints")
            key = (min(e.a, e.b), max(e.a, e.b))
            if key in struct_pairs:
                raise ContractError("candidate edge duplicates a structural connection")
            if key in cand_pairs:
                raise ContractError("duplicate candidate edge pair")
            cand_pairs.add(key)
            if e.label is not None and not (np.isfinite(e.label) and e.label > 0.0):
                raise ContractError(f"labels must be positive and finite, got {e.label!r}")
        for net_id, v in self.node_ground_caps.items():
            if not (0 <= net_id < n) or self.nodes[net_id].kind != NET:
                raise ContractError(f"ground cap key {net_id} is not a net node")
            if not (np.isfinite(v) and v > 0.0):
                raise ContractError(f"ground caps must be positive and finite, got {v!r}")
        return self

    # ---- serialization ----

    def to_json_dict(self):
        return {
            "version": _GRAPH_VERSION,
            "nodes": [[nd.id, nd.kind, nd.name] for nd in self.nodes],
            "struct_edges": [[e.a, e.b, e.kind] for e in self.struct_edges],
            "candidate_edges": [[e.a, e.b, e.kind, e.label] for e in self.candidate_edges],
            "ground_caps": {str(k): self.node_ground_caps[k]
                            for k in sorted(self.node_ground_caps)},
        }

    def to_json(self, indent=None):
        separators = (",", ":") if indent is None else None
        return json.dumps(self.to_json_dict(), indent=indent, separators=separators)

    @staticmethod
    def from_json_dict(doc):
        try:
            version = doc["version"]
            if version != _GRAPH_VERSION:
                raise GraphFormatError(f"unsupported graph version {version!r}")
            nodes = [CircuitNode(id=int(i), kind=str(k), name=str(nm))
                     for i, k, nm in doc["nodes"]]
            struct_edges = [StructEdge(a=int(a), b=int(b), kind=str(k))
                            for a, b, k in doc["struct_edges"]]
            candidate_edges = [
                CandidateEdge(a=int(a), b=int(b), kind=str(k),
                              label=None if lbl is None else float(lbl))
                for a, b, k, lbl in doc["candidate_edges"]]
            ground = {int(k): float(v) for k, v in doc["ground_caps"].items()}
        except GraphFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"malformed graph document: {exc}") from None
        return CircuitGraph(nodes, struct_edges, candidate_edges, ground).validate()

    @staticmethod
    def from_json(text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"invalid json: {exc}") from None
        return CircuitGraph.from_json_dict(doc)

    def to_bytes(self):
        sections = []
        w = _binio.ByteWriter()
        w.u32(len(self.nodes))
        for nd in self.nodes:
            w.u8(_NODE_CODE[nd.kind])
            w.text(nd.name)
        sections.append(w.getvalue())
        w = _binio.ByteWriter()
        w.u32(len(self.struct_edges))
        for e in self.struct_edges:
            w.u32(e.a).u32(e.b).u8(_STRUCT_CODE[e.kind])
        sections.append(w.getvalue())
        w = _binio.ByteWriter()
        w.u32(len(self.candidate_edges))
        for e in self.candidate_edges:
            w.u32(e.a).u32(e.b).u8(_CAND_CODE[e.kind])
            w.u8(0 if e.label is None else 1)
            w.f64(0.0 if e.label is None else e.label)
        sections.append(w.getvalue())
        w = _binio.ByteWriter()
        w.u32(len(self.node_ground_caps))
        for net_id in sorted(self.node_ground_caps):
            w.u32(net_id).f64(self.node_ground_caps[net_id])
        sections.append(w.getvalue())

        out = _binio.ByteWriter()
        for s in sections:
            out.u32(len(s))
            out.raw(s)
        return _binio.frame(_GRAPH_MAGIC, _GRAPH_VERSION, out.getvalue())

    @staticmethod
    def from_bytes(data):
        version, payload = _binio.unframe(data, _GRAPH_MAGIC)
        if version != _GRAPH_VERSION:
            raise GraphFormatError(f"unsupported graph version {version}", offset=4)
        outer = _binio.ByteReader(payload, base=8)

        r = outer.sub(outer.u32("section length"), "node section")
        nodes = []
        for i in range(r.u32("node count")):
            code = r.u8("node kind")
            if code not in _NODE_FROM_CODE:
                raise GraphFormatError(f"unknown node kind code {code}", offset=r.offset - 1)
            nodes.append(CircuitNode(id=i, kind=_NODE_FROM_CODE[code], name=r.text("node name")))
        r.expect_end()

        r = outer.sub(outer.u32("section length"), "struct section")
        struct_edges = []
        for _ in range(r.u32("struct edge count")):
            a, b = r.u32("edge"), r.u32("edge")
            code = r.u8("struct kind")
            if code not in _STRUCT_FROM_CODE:
                raise GraphFormatError(f"unknown struct kind code {code}", offset=r.offset - 1)
            struct_edges.append(StructEdge(a=a, b=b, kind=_STRUCT_FROM_CODE[code]))
        r.expect_end()

        r = outer.sub(outer.u32("section length"), "candidate section")
        candidate_edges = []
        for _ in range(r.u32("candidate edge count")):
            a, b = r.u32("edge"), r.u32("edge")
            code = r.u8("candidate kind")
            if code not in _CAND_FROM_CODE:
                raise GraphFormatError(f"unknown candidate kind code {code}", offset=r.offset - 1)
            has_label = r.u8("label flag")
            value = r.f64("label")
            candidate_edges.append(CandidateEdge(
                a=a, b=b, kind=_CAND_FROM_CODE[code],
                label=value if has_label else None))
        r.expect_end()

        r = outer.sub(outer.u32("section length"), "ground cap section")
        ground = {}
        for _ in range(r.u32("ground cap count")):
            net_id = r.u32("net id")
            ground[net_id] = r.f64("ground cap")
        r.expect_end()

        outer.expect_end()
        return CircuitGraph(nodes, struct_edges, candidate_edges, ground).validate()


class GraphBuilder:
    """Incremental construction helper used by the parsers and the synthesizer."""

    def __init__(self):
        self._nodes = []
        self._net_ids = {}
        self._device_ids = {}
        self._pin_ids = {}
        self._struct = []
        self._candidates = []
        self._cand_slot = {}
        self._ground = {}

    def _add(self, kind, name):
        node = CircuitNode(id=len(self._nodes), kind=kind, name=name)
        self._nodes.append(node)
        return node.id

    def net(self, name):
        nid = self._net_ids.get(name)
        if nid is None:
            nid = self._add(NET, name)
            self._net_ids[name] = nid
        return nid

    def has_device(self, name):
        return name in self._device_ids

    def device(self, name):
        if name in self._device_ids:
            raise ContractError(f"duplicate device name {name!r}")
        did = self._add(DEVICE, name)
        self._device_ids[name] = did
        return did

    def pin(self, device_id, terminal, net_id):
        name = f"{self._nodes[device_id].name}.{terminal}"
        if name in self._pin_ids:
            raise ContractError(f"duplicate pin name {name!r}")
        pid = self._add(PIN, name)
        self._pin_ids[name] = pid
        self._struct.append(StructEdge(a=device_id, b=pid, kind=DEVICE_PIN))
        self._struct.append(StructEdge(a=net_id, b=pid, kind=NET_PIN))
        return pid

    def coupling(self, a, b, label=None):
        """Add or merge a candidate pair; repeated labeled pairs add up."""
        if a == b:
            raise ContractError("coupling endpoints must differ")
        kind = candidate_kind(self._nodes[a].kind, self._nodes[b].kind)
        key = (min(a, b), max(a, b))
        slot = self._cand_slot.get(key)
        if slot is None:
            self._cand_slot[key] = len(self._candidates)
            self._candidates.append(CandidateEdge(a=key[0], b=key[1], kind=kind, label=label))
            return
        old = self._candidates[slot]
        if label is not None:
            merged = label if old.label is None else old.label + label
            self._candidates[slot] = CandidateEdge(a=old.a, b=old.b, kind=old.kind, label=merged)

    def ground_cap(self, net_id, value):
        if self._nodes[net_id].kind != NET:
            raise ContractError("ground capacitance attaches to nets only")
        self._ground[net_id] = self._ground.get(net_id, 0.0) + value

    def build(self):
        return CircuitGraph(self._nodes, self._struct, self._candidates, self._ground).validate()


# ---- SPICE-subset parsing ----

_VALUE_RE = re.compile(r"([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)([a-z]*)", re.IGNORECASE)
_SI_SUFFIX = {"t": 1e12, "g": 1e9, "k": 1e3, "m": 1e-3,
              "u": 1e-6, "n": 1e-9, "p": 1e-12, "f": 1e-15, "a": 1e-18}


def parse_si_value(token):
    """Parse a SPICE-style number such as 2.5, 1k, 10meg, or 0.3pF."""
    m = _VALUE_RE.fullmatch(token)
    if m is None:
        raise ValueError(f"not a numeric value: {token!r}")
    x = float(m.group(1))
    suffix = m.group(2).lower()
    if not suffix:
        return x
    if suffix.startswith("meg"):
        return x * 1e6
    if suffix[0] in _SI_SUFFIX:
        return x * _SI_SUFFIX[suffix[0]]
    raise ValueError(f"unknown unit suffix on {token!r}")


def _logical_cards(text):
    """Split into (line_number, tokens) cards, folding + continuations."""
    cards = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        if line.startswith("+"):
            if not cards:
                raise NetlistParseError("continuation with no card to continue",
                                        line=lineno, token="+")
            cards[-1][1].extend(line[1:].split())
            continue
        cards.append((lineno, line.split()))
    return cards


@dataclass
class _SubcktDef:
    name: str
    ports: tuple
    cards: list
    line: int


def _split_subckts(cards):
    subckts = {}
    top = []
    current = None
    for lineno, tokens in cards:
        head = tokens[0].lower()
        if head == ".subckt":
            if current is not None:
                raise NetlistParseError("nested .subckt definitions are not supported",
                                        line=lineno, token=tokens[0])
            if len(tokens) < 2:
                raise NetlistParseError(".subckt needs a name", line=lineno, token=tokens[0])
            name = tokens[1]
            ports = tuple(tokens[2:])
            if len(set(ports)) != len(ports):
                raise NetlistParseError("duplicate port name in .subckt",
                                        line=lineno, token=name)
            for p in ports:
                if p.lower() in GLOBAL_NETS:
                    raise NetlistParseError("port name collides with a global net",
                                            line=lineno, token=p)
            key = name.lower()
            if key in subckts:
                raise NetlistParseError(f"duplicate .subckt name {name!r}",
                                        line=lineno, token=name)
            current = _SubcktDef(name=name, ports=ports, cards=[], line=lineno)
            subckts[key] = current
        elif head == ".ends":
            if current is None:
                raise NetlistParseError(".ends without matching .subckt",
                                        line=lineno, token=tokens[0])
            current = None
        elif current is not None:
            if head == ".end":
                raise NetlistParseError(".end inside .subckt body",
                                        line=lineno, token=tokens[0])
            current.cards.append((lineno, tokens))
        else:
            top.append((lineno, tokens))
    if current is not None:
        raise NetlistParseError(f"unterminated .subckt {current.name!r}",
                                line=current.line, token=current.name)
    return top, subckts


class _Emitter:
    """Walks card lists, flattening X instances into the builder."""

    def __init__(self, builder, subckts):
        self.b = builder
        self.subckts = subckts

    def run(self, cards, prefix, binding, stack):
        for lineno, tokens in cards:
            head = tokens[0]
            low = head.lower()
            if low.startswith("."):
                if low == ".param":
                    logger.warning("line %d: .param is ignored (topology-only parser)", lineno)
                    continue
                if low == ".end":
                    return
                raise NetlistParseError(f"unsupported directive {head!r}",
                                        line=lineno, token=head)
            if len(head) < 2:
                raise NetlistParseError("instance name needs a suffix after the card letter",
                                        line=lineno, token=head)
            letter = low[0]
            if letter == "m":
                self._mos(lineno, tokens, prefix, binding)
            elif letter in ("r", "c"):
                self._two_terminal(lineno, tokens, prefix, binding)
            elif letter in ("v", "i"):
                self._source(lineno, tokens, prefix, binding)
            elif letter == "x":
                self._instantiate(lineno, tokens, prefix, binding, stack)
            else:
                raise NetlistParseError(f"unsupported card {head!r}", line=lineno, token=head)

    def _net(self, name, prefix, binding, lineno):
        if "=" in name:
            raise NetlistParseError("expected a net name", line=lineno, token=name)
        low = name.lower()
        if low in GLOBAL_NETS:
            return self.b.net(low)
        if name in binding:
            return binding[name]
        return self.b.net(prefix + name)

    def _device(self, name, prefix, lineno):
        full = prefix + name
        if self.b.has_device(full):
            raise NetlistParseError(f"duplicate device name {full!r}",
                                    line=lineno, token=name)
        return self.b.device(full)

    def _mos(self, lineno, tokens, prefix, binding):
        if len(tokens) < 6 or "=" in tokens[5]:
            raise NetlistParseError("MOS card needs 4 nets and a model",
                                    line=lineno, token=tokens[0])
        dev = self._device(tokens[0], prefix, lineno)
        for term, net_name in zip(_MOS_TERMINALS, tokens[1:5]):
            self.b.pin(dev, term, self._net(net_name, prefix, binding, lineno))

    def _two_terminal(self, lineno, tokens, prefix, binding):
        if len(tokens) < 4:
            raise NetlistParseError("card needs 2 nets and a value",
                                    line=lineno, token=tokens[0])
        try:
            parse_si_value(tokens[3])
        except ValueError:
            raise NetlistParseError(f"bad value {tokens[3]!r}",
                                    line=lineno, token=tokens[3]) from None
        dev = self._device(tokens[0], prefix, lineno)
        for term, net_name in zip(_TWO_TERMINALS, tokens[1:3]):
            self.b.pin(dev, term, self._net(net_name, prefix, binding, lineno))

    def _source(self, lineno, tokens, prefix, binding):
        # sources contribute their nets only, no device node
        if len(tokens) < 3:
            raise NetlistParseError("source card needs 2 nets",
                                    line=lineno, token=tokens[0])
        for net_name in tokens[1:3]:
            self._net(net_name, prefix, binding, lineno)

    def _instantiate(self, lineno, tokens, prefix, binding, stack):
        conn = [t for t in tokens[1:] if "=" not in t]
        if not conn:
            raise NetlistParseError("X card needs a subcircuit name",
                                    line=lineno, token=tokens[0])
        sub_name = conn[-1]
        ports = conn[:-1]
        sub = self.subckts.get(sub_name.lower())
        if sub is None:
            raise UnknownNameError("unknown subcircuit", name=sub_name)
        if len(ports) != len(sub.ports):
            raise NetlistParseError(
                f"{tokens[0]} connects {len(ports)} ports, {sub.name!r} declares {len(sub.ports)}",
                line=lineno, token=sub_name)
        if sub_name.lower() in stack:
            raise NetlistParseError(f"recursive instantiation of {sub.name!r}",
                                    line=lineno, token=sub_name)
        outer_ids = [self._net(p, prefix, binding, lineno) for p in ports]
        child_binding = dict(zip(sub.ports, outer_ids))
        child_prefix = prefix + tokens[0] + "/"
        self.run(sub.cards, child_prefix, child_binding, stack + (sub_name.lower(),))


def parse_netlist(text):
    """Parse a SPICE-subset netlist into a flattened CircuitGraph."""
    cards = _logical_cards(text)
    top, subckts = _split_subckts(cards)
    builder = GraphBuilder()
    _Emitter(builder, subckts).run(top, "", {}, ())
    return builder.build()


# ---- SPF-subset parsing ----

def _spf_net(g, name):
    nid = g.find(name, NET)
    if nid is None:
        raise UnknownNameError("unknown net", name=name)
    return nid


def _spf_node(g, name):
    nid = g.find(name, NET)
    if nid is None:
        nid = g.find(name, PIN)
    if nid is None:
        raise UnknownNameError("unknown net or pin", name=name)
    return nid


def _cap_value(token, lineno):
    try:
        value = parse_si_value(token)
    except ValueError:
        raise NetlistParseError(f"bad capacitance value {token!r}",
                                line=lineno, token=token) from None
    if not (np.isfinite(value) and value > 0.0):
        raise ContractError(f"capacitance must be positive, got {token!r}")
    return value


def parse_spf_labels(text, g):
    """Attach parasitic ground and coupling capacitances to a parsed graph.

    "*|NET name value" lines accumulate into node_ground_caps; coupling
    cards "Cname a b value" become labeled candidate edges whose kind
    follows from the endpoint kinds.  Repeated pairs add up.
    """
    pair_slot = {(min(e.a, e.b), max(e.a, e.b)): i
                 for i, e in enumerate(g.candidate_edges)}
    struct_pairs = {(min(e.a, e.b), max(e.a, e.b)) for e in g.struct_edges}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("*|"):
            tokens = line[2:].split()
            if not tokens:
                raise NetlistParseError("empty directive", line=lineno, token="*|")
            word = tokens[0].upper()
            if word == "GROUND_NET":
                if len(tokens) != 2:
                    raise NetlistParseError("GROUND_NET needs one net name",
                                            line=lineno, token=tokens[0])
                _spf_net(g, tokens[1])
            elif word == "NET":
                if len(tokens) != 3:
                    raise NetlistParseError("NET needs a name and a value",
                                            line=lineno, token=tokens[0])
                net_id = _spf_net(g, tokens[1])
                value = _cap_value(tokens[2], lineno)
                g.node_ground_caps[net_id] = g.node_ground_caps.get(net_id, 0.0) + value
            else:
                raise NetlistParseError(f"unsupported directive {tokens[0]!r}",
                                        line=lineno, token=tokens[0])
            continue
        if line.startswith("*"):
            continue
        tokens = line.split()
        head = tokens[0]
        if head.lower() == ".end":
            break
        if head[0].lower() != "c" or len(head) < 2:
            raise NetlistParseError(f"unsupported card {head!r}", line=lineno, token=head)
        if len(tokens) < 4:
            raise NetlistParseError("coupling card needs two nodes and a value",
                                    line=lineno, token=head)
        a = _spf_node(g, tokens[1])
        b = _spf_node(g, tokens[2])
        if a == b:
            raise NetlistParseError("coupling endpoints must differ",
                                    line=lineno, token=tokens[2])
        value = _cap_value(tokens[3], lineno)
        kind = candidate_kind(g.nodes[a].kind, g.nodes[b].kind)
        key = (min(a, b), max(a, b))
        if key in struct_pairs:
            raise NetlistParseError("coupling duplicates a structural connection",
                                    line=lineno, token=tokens[2])
        slot = pair_slot.get(key)
        if slot is None:
            pair_slot[key] = len(g.candidate_edges)
            g.candidate_edges.append(CandidateEdge(a=key[0], b=key[1], kind=kind, label=value))
        else:
            old = g.candidate_edges[slot]
            label = value if old.label is None else old.label + value
            g.candidate_edges[slot] = CandidateEdge(a=old.a, b=old.b, kind=old.kind, label=label)
    return g.validate()


# ---- label handling ----

@dataclass(frozen=True)
class LabelSpec:
    """Target policy: farad range, log min-max normalization, class bins."""

    mode: str = REGRESSION
    lo: float = 1e-21
    hi: float = 1e-15
    n_classes: int = 5

    def __post_init__(self):
        if self.mode not in (REGRESSION, CLASSIFICATION):
            raise ContractError(f"unknown label mode {self.mode!r}")
        if not (0.0 < self.lo < self.hi):
            raise ContractError("label range needs 0 < lo < hi")
        if self.n_classes < 2:
            raise ContractError("need at least 2 classes")


def in_range_mask(values, spec=None):
    """Boolean mask of values inside [lo, hi]; the upstream filter."""
    spec = spec or LabelSpec()
    v = np.asarray(values, dtype=np.float64)
    return (v >= spec.lo) & (v <= spec.hi)


def normalize_labels(values, spec=None):
    """Map farads in [lo, hi] onto [0, 1] with log10 min-max scaling."""
    spec = spec or LabelSpec()
    v = np.asarray(values, dtype=np.float64)
    if v.size:
        if not np.all(np.isfinite(v)):
            raise ContractError("labels must be finite")
        if v.min() < spec.lo or v.max() > spec.hi:
            raise ContractError("values outside the label range; filter first")
    lo = np.log10(spec.lo)
    hi = np.log10(spec.hi)
    return (np.log10(v) - lo) / (hi - lo)


def denormalize_labels(normalized, spec=None):
    """Inverse of normalize_labels, back to farads."""
    spec = spec or LabelSpec()
    v = np.asarray(normalized, dtype=np.float64)
    lo = np.log10(spec.lo)
    hi = np.log10(spec.hi)
    return np.power(10.0, v * (hi - lo) + lo)


def bin_ground_caps(normalized, n_classes=5):
    """Equal-width class bins over [0, 1]; 1.0 lands in the top class."""
    if n_classes < 2:
        raise ContractError("need at least 2 classes")
    v = np.asarray(normalized, dtype=np.float64)
    if v.size:
        if not np.all(np.isfinite(v)):
            raise ContractError("labels must be finite")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ContractError("normalized labels must lie in [0, 1]")
    return np.minimum(np.floor(v * n_classes).astype(np.int64), n_classes - 1)


def coupling_dataset(g):
    """Labeled coupling pairs as (int array [m, 2], farad values [m])."""
    pairs, values = [], []
    for e in g.candidate_edges:
        if e.label is not None:
            pairs.append((e.a, e.b))
            values.append(e.label)
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.float64)
    return np.asarray(pairs, dtype=np.int64), np.asarray(values, dtype=np.float64)


def ground_cap_dataset(g):
    """Net ground caps as (net id array [m], farad values [m]), sorted by id."""
    ids = sorted(g.node_ground_caps)
    values = [g.node_ground_caps[i] for i in ids]
    return np.asarray(ids, dtype=np.int64), np.asarray(values, dtype=np.float64)
