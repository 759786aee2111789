"""Seeded synthetic circuit generator with topology-derived capacitance labels.

Circuits are assembled from a small standard-cell library, wired by
preferential attachment so a few nets grow large fan-outs, and emitted as
netlist plus parasitic text that the regular parsers ingest.  Labels follow
a fixed rule of local topology, so they are learnable from structure alone:

  coupling exponent  = LABEL_BASE + LABEL_SHARED * s + LABEL_DEGREE * m + noise
  ground exponent    = GCAP_BASE + GCAP_DEGREE * d + noise

where s counts devices shared by the endpoint nets, m is the smaller
structural degree of the two endpoints, d is the net's pin count, and the
exponent is a base-10 farad exponent clamped to the label range.  The skewed
fan-out distribution makes both label families long-tailed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._errors import ContractError
from .netlist import (
    GLOBAL_NETS,
    NET,
    NET_PIN,
    parse_netlist,
    parse_spf_labels,
)

_CELLS = {
    "inverter": (
        ("in", "out"),
        ("M1 out in 0 0 nch",
         "M2 out in vdd vdd pch"),
    ),
    "nand": (
        ("a", "b", "out"),
        ("M1 out a vdd vdd pch",
         "M2 out b vdd vdd pch",
         "M3 out a mid 0 nch",
         "M4 mid b 0 0 nch"),
    ),
    "sram_bitcell": (
        ("bl", "blb", "wl"),
        ("M1 q qb vdd vdd pch",
         "M2 q qb 0 0 nch",
         "M3 qb q vdd vdd pch",
         "M4 qb q 0 0 nch",
         "M5 bl wl q 0 nch",
         "M6 blb wl qb 0 nch"),
    ),
    "analog_pair": (
        ("inp", "inn", "outp", "outn", "tail"),
        ("M1 outn inp tail 0 nch",
         "M2 outp inn tail 0 nch",
         "R1 vdd outn 10k",
         "R2 vdd outp 10k"),
    ),
}

CELL_NAMES = tuple(sorted(_CELLS))

DEFAULT_CELL_MIX = (("inverter", 0.4), ("nand", 0.3),
                    ("sram_bitcell", 0.2), ("analog_pair", 0.1))

# probability that a port reuses an existing net instead of minting one;
# reuse picks proportionally to past use, which grows hub nets
_REUSE_PROB = 0.45

# fixed, documented label-rule constants (base-10 farad exponents)
LABEL_BASE = -21.05
LABEL_SHARED = 0.52
LABEL_DEGREE = 0.26
GCAP_BASE = -21.3
GCAP_DEGREE = 0.38
EXPO_LO = -21.0
EXPO_HI = -15.0
VALUE_LO = 1e-21
VALUE_HI = 1e-15


@dataclass(frozen=True)
class SynthConfig:
    n_cells: int = 200
    cell_mix: tuple = DEFAULT_CELL_MIX
    coupling_density: float = 0.6
    noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_cells < 1:
            raise ContractError("n_cells must be at least 1")
        if not 0.0 < self.coupling_density <= 1.0:
            raise ContractError("coupling_density must lie in (0, 1]")
        if self.noise_sigma < 0.0:
            raise ContractError("noise_sigma must be nonnegative")
        if not self.cell_mix:
            raise ContractError("cell_mix must not be empty")
        total = 0.0
        for entry in self.cell_mix:
            if len(entry) != 2:
                raise ContractError("cell_mix entries are (name, weight) pairs")
            name, weight = entry
            if name not in _CELLS:
                raise ContractError(f"unknown cell {name!r}; choose from {CELL_NAMES}")
            if weight < 0.0:
                raise ContractError("cell weights must be nonnegative")
            total += weight
        if total <= 0.0:
            raise ContractError("cell weights must sum to a positive value")


def _subckt_lines(kind):
    ports, body = _CELLS[kind]
    return [f".subckt {kind} {' '.join(ports)}", *body, ".ends"]


@lru_cache(maxsize=None)
def cell_profile(kind):
    """Node counts one instance of `kind` contributes (nets exclude ports/globals)."""
    if kind not in _CELLS:
        raise ContractError(f"unknown cell {kind!r}")
    ports = _CELLS[kind][0]
    probe = "\n".join(_subckt_lines(kind) + [f"X0 {' '.join(f'p{i}' for i in range(len(ports)))} {kind}", ""])
    g = parse_netlist(probe)
    counts = {"device": 0, "pin": 0, "net": 0}
    for nd in g.nodes:
        counts[nd.kind] += 1
    port_or_global = len(ports) + sum(1 for n in GLOBAL_NETS if g.find(n, NET) is not None)
    return {
        "ports": len(ports),
        "devices": counts["device"],
        "pins": counts["pin"],
        "internal_nets": counts["net"] - port_or_global,
    }


def _mix_probs(cfg):
    names = tuple(name for name, _ in cfg.cell_mix)
    weights = np.array([w for _, w in cfg.cell_mix], dtype=np.float64)
    return names, weights / weights.sum()


def _wire_netlist(cfg, rng):
    names, probs = _mix_probs(cfg)
    used_kinds = set()
    instance_lines = []
    usage = []
    fresh = 0
    for i in range(cfg.n_cells):
        kind = names[int(rng.choice(len(names), p=probs))]
        used_kinds.add(kind)
        bound = []
        for j in range(len(_CELLS[kind][0])):
            # first port of every later cell ties into the existing design
            reuse = bool(usage) and ((j == 0 and i > 0) or rng.random() < _REUSE_PROB)
            if reuse:
                name = usage[int(rng.integers(0, len(usage)))]
            else:
                name = f"w{fresh}"
                fresh += 1
            usage.append(name)
            bound.append(name)
        instance_lines.append(f"X{i} {' '.join(bound)} {kind}")
    lines = [f"* synthetic circuit: cells={cfg.n_cells} seed={cfg.seed}"]
    for kind in sorted(used_kinds):
        lines.extend(_subckt_lines(kind))
    lines.extend(instance_lines)
    return "\n".join(lines) + "\n"


def _structure_maps(g):
    pin_net, pin_dev = {}, {}
    deg = [0] * g.n_nodes
    for e in g.struct_edges:
        deg[e.a] += 1
        deg[e.b] += 1
        if e.kind == NET_PIN:
            pin_net[e.b] = e.a
        else:
            pin_dev[e.b] = e.a
    dev_pins = {}
    for pid in sorted(pin_dev):
        dev_pins.setdefault(pin_dev[pid], []).append(pid)
    net_devs = {}
    for pid in sorted(pin_net):
        net_devs.setdefault(pin_net[pid], set()).add(pin_dev[pid])
    return pin_net, dev_pins, net_devs, deg


def _candidate_pool(pin_net, dev_pins, global_ids):
    """Deterministic coupling-pair pool: pairs co-located at a device."""
    pool = {}
    for dev in sorted(dev_pins):
        pins = dev_pins[dev]
        nets = sorted({pin_net[p] for p in pins} - global_ids)
        for i in range(len(nets)):
            for j in range(i + 1, len(nets)):
                pool[(nets[i], nets[j])] = None
        sig_pins = [p for p in pins if pin_net[p] not in global_ids]
        for i in range(len(sig_pins)):
            for j in range(i + 1, len(sig_pins)):
                a, b = sig_pins[i], sig_pins[j]
                if pin_net[a] != pin_net[b]:
                    pool[(min(a, b), max(a, b))] = None
        for p in sig_pins:
            for nid in nets:
                if nid != pin_net[p]:
                    pool[(min(p, nid), max(p, nid))] = None
    return sorted(pool)


def _clamped_value(expo):
    expo = min(max(expo, EXPO_LO), EXPO_HI)
    return min(max(10.0 ** expo, VALUE_LO), VALUE_HI)


def _spf_text(cfg, g, rng):
    pin_net, dev_pins, net_devs, deg = _structure_maps(g)
    global_ids = {g.find(n, NET) for n in GLOBAL_NETS}
    global_ids.discard(None)

    lines = []
    if g.find("0", NET) is not None:
        lines.append("*|GROUND_NET 0")
    for nid in sorted(net_devs):
        if nid in global_ids:
            continue
        expo = GCAP_BASE + GCAP_DEGREE * deg[nid] + cfg.noise_sigma * rng.standard_normal()
        lines.append(f"*|NET {g.nodes[nid].name} {_clamped_value(expo):.17e}")

    k = 0
    for a, b in _candidate_pool(pin_net, dev_pins, global_ids):
        if rng.random() >= cfg.coupling_density:
            continue
        net_a = a if g.nodes[a].kind == NET else pin_net[a]
        net_b = b if g.nodes[b].kind == NET else pin_net[b]
        shared = len(net_devs.get(net_a, set()) & net_devs.get(net_b, set()))
        m = min(deg[a], deg[b])
        expo = (LABEL_BASE + LABEL_SHARED * shared + LABEL_DEGREE * m
                + cfg.noise_sigma * rng.standard_normal())
        lines.append(f"C{k} {g.nodes[a].name} {g.nodes[b].name} {_clamped_value(expo):.17e}")
        k += 1
    return "\n".join(lines) + "\n"


def synth_texts(cfg):
    """Deterministic (netlist_text, spf_text) pair for the config."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    netlist_text = _wire_netlist(cfg, rng)
    g = parse_netlist(netlist_text)
    return netlist_text, _spf_text(cfg, g, rng)


def synth_generate(cfg):
    """Generate a labeled CircuitGraph; identical config gives identical bytes."""
    netlist_text, spf_text = synth_texts(cfg)
    return parse_spf_labels(spf_text, parse_netlist(netlist_text))
