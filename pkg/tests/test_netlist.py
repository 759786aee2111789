"""Netlist/SPF parsing, label transforms, and graph serialization tests."""

import logging

import numpy as np
import pytest

from circuitgcl._errors import (
    ContractError,
    GraphFormatError,
    NetlistParseError,
    UnknownNameError,
)
from circuitgcl.netlist import (
    CircuitGraph,
    DEVICE,
    GraphBuilder,
    LabelSpec,
    NET,
    PIN,
    bin_ground_caps,
    coupling_dataset,
    denormalize_labels,
    ground_cap_dataset,
    in_range_mask,
    normalize_labels,
    parse_netlist,
    parse_si_value,
    parse_spf_labels,
)

MOS_CARD = "M1 n1 n2 0 0 nch\n"

GOLDEN_NETLIST = """\
* two inverters driving a shared node, plus passives
.subckt inv in out
M1 out in 0 0 nch
M2 out in vdd vdd pch
.ends
X1 a b inv
X2 b c inv
R1 a c 1k
C1 b 0 2f
V1 vdd 0 1.8
"""

# hand-counted: devices X1/M1 X1/M2 X2/M1 X2/M2 R1 C1 = 6
# nets a b c 0 vdd = 5; pins 4 MOS terminals x4 + 2 + 2 = 20
GOLDEN_COUNTS = {"device": 6, "net": 5, "pin": 20}


def kind_counts(g):
    out = {NET: 0, DEVICE: 0, PIN: 0}
    for nd in g.nodes:
        out[nd.kind] += 1
    return out


def assert_pin_invariant(g):
    tally = {}
    for e in g.struct_edges:
        slot = tally.setdefault(e.b, {"device_pin": 0, "net_pin": 0})
        slot[e.kind] += 1
    for nd in g.nodes:
        if nd.kind == PIN:
            assert tally[nd.id] == {"device_pin": 1, "net_pin": 1}


class TestParseNetlist:
    def test_mos_card_counts(self):
        g = parse_netlist(MOS_CARD)
        assert kind_counts(g) == {NET: 3, DEVICE: 1, PIN: 4}
        kinds = [e.kind for e in g.struct_edges]
        assert kinds.count("device_pin") == 4
        assert kinds.count("net_pin") == 4
        assert g.candidate_edges == []
        g.validate()

    def test_mos_pin_names_and_wiring(self):
        g = parse_netlist(MOS_CARD)
        dev = g.find("M1", DEVICE)
        for term, net_name in zip("dgsb", ["n1", "n2", "0", "0"]):
            pid = g.find(f"M1.{term}", PIN)
            assert pid is not None
            net_id = g.find(net_name, NET)
            pairs = {(e.a, e.b, e.kind) for e in g.struct_edges}
            assert (dev, pid, "device_pin") in pairs
            assert (net_id, pid, "net_pin") in pairs

    def test_empty_text_empty_graph(self):
        g = parse_netlist("")
        assert g.n_nodes == 0
        assert g.struct_edges == [] and g.candidate_edges == []

    def test_comments_and_blank_lines_only(self):
        g = parse_netlist("* nothing here\n\n   \n* more\n")
        assert g.n_nodes == 0

    def test_too_few_terminals_is_parse_error_at_line_1(self):
        with pytest.raises(NetlistParseError) as exc:
            parse_netlist("M1 n1 n2\n")
        assert exc.value.line == 1

    def test_error_carries_line_and_token(self):
        text = "R1 a b 1k\nC1 a b 2f\nQ1 x y z bjt\n"
        with pytest.raises(NetlistParseError) as exc:
            parse_netlist(text)
        assert exc.value.line == 3
        assert exc.value.token == "Q1"

    def test_continuation_lines_fold_into_card(self):
        g = parse_netlist("M1 n1 n2\n+ 0 0 nch\n")
        assert kind_counts(g) == {NET: 3, DEVICE: 1, PIN: 4}

    def test_continuation_without_card(self):
        with pytest.raises(NetlistParseError):
            parse_netlist("+ 0 0 nch\n")

    def test_rc_cards(self):
        g = parse_netlist("R1 a b 1k\nC1 a b 2f\n")
        assert kind_counts(g) == {NET: 2, DEVICE: 2, PIN: 4}
        assert_pin_invariant(g)

    def test_bad_value_is_parse_error(self):
        with pytest.raises(NetlistParseError) as exc:
            parse_netlist("R1 a b foo\n")
        assert exc.value.token == "foo"

    def test_sources_register_nets_only(self):
        g = parse_netlist("V1 vdd 0 1.8\nI1 bias 0 1u\n")
        assert kind_counts(g) == {NET: 3, DEVICE: 0, PIN: 0}
        assert g.find("bias", NET) is not None

    def test_param_ignored_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="circuitgcl.netlist"):
            g = parse_netlist(".param scale=1.0\nM1 n1 n2 0 0 nch\n")
        assert g.n_nodes == 8
        assert any(".param" in r.message for r in caplog.records)

    def test_trailing_device_params_ignored(self):
        g = parse_netlist("M1 n1 n2 0 0 nch l=1u w=2u\nR1 a b 1k tc1=0.1\n")
        assert kind_counts(g) == {NET: 5, DEVICE: 2, PIN: 6}

    def test_golden_counts(self):
        g = parse_netlist(GOLDEN_NETLIST)
        assert kind_counts(g) == {NET: GOLDEN_COUNTS["net"],
                                  DEVICE: GOLDEN_COUNTS["device"],
                                  PIN: GOLDEN_COUNTS["pin"]}
        assert_pin_invariant(g)
        assert g.find("X1/M1", DEVICE) is not None
        assert g.find("X2/M2.s", PIN) is not None

    def test_flattening_binds_ports_to_outer_nets(self):
        g = parse_netlist(GOLDEN_NETLIST)
        b = g.find("b", NET)
        x1_out_pin = g.find("X1/M1.d", PIN)
        wired = {(e.a, e.b) for e in g.struct_edges if e.kind == "net_pin"}
        assert (b, x1_out_pin) in wired

    def test_nested_instances_build_hierarchical_names(self):
        text = """\
.subckt unit p q
M1 p q 0 0 nch
.ends
.subckt pair x y
Xi x y unit
Xj y x unit
.ends
X1 a b pair
"""
        g = parse_netlist(text)
        assert g.find("X1/Xi/M1", DEVICE) is not None
        assert g.find("X1/Xj/M1.g", PIN) is not None

    def test_inner_nets_get_prefixed_names(self):
        text = """\
.subckt buf in out
M1 mid in 0 0 nch
M2 out mid 0 0 nch
.ends
X5 p q buf
"""
        g = parse_netlist(text)
        assert g.find("X5/mid", NET) is not None
        assert g.find("mid", NET) is None

    def test_unknown_subckt_is_reference_error(self):
        with pytest.raises(UnknownNameError) as exc:
            parse_netlist("X1 a b nosuch\n")
        assert exc.value.name == "nosuch"

    def test_port_count_mismatch(self):
        text = ".subckt inv in out\nM1 out in 0 0 nch\n.ends\nX1 a inv\n"
        with pytest.raises(NetlistParseError) as exc:
            parse_netlist(text)
        assert exc.value.line == 4

    def test_recursive_subckt_rejected(self):
        text = ".subckt loop a\nX1 a loop\n.ends\nX0 n loop\n"
        with pytest.raises(NetlistParseError) as exc:
            parse_netlist(text)
        assert "recursive" in str(exc.value)

    def test_global_nets_shared_case_insensitive(self):
        g = parse_netlist("M1 a b GND gnd nch\nM2 c d Gnd VDD pch\n")
        assert g.find("gnd", NET) is not None
        assert g.find("GND", NET) is None
        assert kind_counts(g)[NET] == 6  # a b c d gnd vdd

    def test_globals_shared_across_subckt_scopes(self):
        text = ".subckt inv in out\nM1 out in 0 0 nch\n.ends\nX1 a b inv\nM9 a b 0 0 nch\n"
        g = parse_netlist(text)
        zeros = [nd for nd in g.nodes if nd.kind == NET and nd.name == "0"]
        assert len(zeros) == 1

    def test_duplicate_device_is_parse_error(self):
        with pytest.raises(NetlistParseError):
            parse_netlist("R1 a b 1k\nR1 c d 2k\n")

    def test_end_stops_parsing(self):
        g = parse_netlist("R1 a b 1k\n.end\nR2 c d 1k\n")
        assert kind_counts(g)[DEVICE] == 1

    def test_unterminated_subckt(self):
        with pytest.raises(NetlistParseError):
            parse_netlist(".subckt inv in out\nM1 out in 0 0 nch\n")

    def test_ends_without_subckt(self):
        with pytest.raises(NetlistParseError):
            parse_netlist(".ends\n")

    def test_unsupported_directive(self):
        with pytest.raises(NetlistParseError):
            parse_netlist(".include lib.sp\n")


class TestParseSiValue:
    def test_plain_and_scientific(self):
        assert parse_si_value("2.5") == 2.5
        assert parse_si_value("3e-17") == 3e-17
        assert parse_si_value("-4.0") == -4.0

    def test_suffixes(self):
        assert parse_si_value("1k") == pytest.approx(1e3)
        assert parse_si_value("10MEG") == pytest.approx(1e7)
        assert parse_si_value("2pF") == pytest.approx(2e-12)
        assert parse_si_value("0.5f") == pytest.approx(0.5e-15)
        assert parse_si_value("3u") == pytest.approx(3e-6)

    def test_rejects_garbage(self):
        for bad in ("foo", "1..2", "", "k1", "1e"):
            with pytest.raises(ValueError):
                parse_si_value(bad)


class TestParseSpf:
    def graph(self):
        return parse_netlist("M1 n1 n2 0 0 nch\nM2 n2 n3 0 0 nch\n")

    def test_net_net_coupling_line(self):
        g = self.graph()
        parse_spf_labels("Cc1 n1 n2 2e-18\n", g)
        assert len(g.candidate_edges) == 1
        e = g.candidate_edges[0]
        assert e.kind == "net_net"
        assert e.label == pytest.approx(2e-18)
        ids = {g.nodes[e.a].name, g.nodes[e.b].name}
        assert ids == {"n1", "n2"}

    def test_empty_spf_leaves_graph_unchanged(self):
        g = self.graph()
        before = (list(g.candidate_edges), dict(g.node_ground_caps))
        parse_spf_labels("", g)
        assert (g.candidate_edges, g.node_ground_caps) == before

    def test_unknown_name_is_reference_error(self):
        with pytest.raises(UnknownNameError) as exc:
            parse_spf_labels("Cc1 nX n2 2e-18\n", self.graph())
        assert exc.value.name == "nX"

    def test_negative_capacitance_is_value_error(self):
        with pytest.raises(ValueError):
            parse_spf_labels("Cc1 n1 n2 -2e-18\n", self.graph())

    def test_zero_capacitance_rejected(self):
        with pytest.raises(ContractError):
            parse_spf_labels("Cc1 n1 n2 0\n", self.graph())

    def test_ground_cap_directive(self):
        g = self.graph()
        parse_spf_labels("*|NET n1 3e-17\n", g)
        assert g.node_ground_caps[g.find("n1", NET)] == pytest.approx(3e-17)

    def test_ground_net_directive_checks_name(self):
        g = self.graph()
        parse_spf_labels("*|GROUND_NET 0\n", g)
        with pytest.raises(UnknownNameError):
            parse_spf_labels("*|GROUND_NET nowhere\n", self.graph())

    def test_pin_endpoint_coupling(self):
        g = self.graph()
        parse_spf_labels("Cx M1.d n3 1e-18\n", g)
        assert g.candidate_edges[0].kind == "pin_net"

    def test_pin_pin_coupling(self):
        g = self.graph()
        parse_spf_labels("Cx M1.g M2.g 1.5e-18\n", g)
        assert g.candidate_edges[0].kind == "pin_pin"

    def test_duplicate_pairs_sum(self):
        g = self.graph()
        parse_spf_labels("Cc1 n1 n2 2e-18\nCc2 n2 n1 1e-18\n", g)
        assert len(g.candidate_edges) == 1
        assert g.candidate_edges[0].label == pytest.approx(3e-18)

    def test_repeated_ground_cap_sums(self):
        g = self.graph()
        parse_spf_labels("*|NET n1 1e-17\n*|NET n1 2e-17\n", g)
        assert g.node_ground_caps[g.find("n1", NET)] == pytest.approx(3e-17)

    def test_coupling_to_own_net_rejected(self):
        # M1.d connects to n1 structurally
        with pytest.raises(NetlistParseError):
            parse_spf_labels("Cx M1.d n1 1e-18\n", self.graph())

    def test_unsupported_card_reports_line(self):
        with pytest.raises(NetlistParseError) as exc:
            parse_spf_labels("* ok comment\nR1 n1 n2 5\n", self.graph())
        assert exc.value.line == 2

    def test_end_stops_parsing(self):
        g = self.graph()
        parse_spf_labels("Cc1 n1 n2 2e-18\n.end\nCc2 n1 n3 5e-18\n", g)
        assert len(g.candidate_edges) == 1

    def test_comments_skipped(self):
        g = self.graph()
        parse_spf_labels("* plain comment\nCc1 n1 n2 2e-18\n", g)
        assert len(g.candidate_edges) == 1

    def test_candidate_edges_never_touch_adjacency_counts(self):
        g = self.graph()
        n_struct = len(g.struct_edges)
        parse_spf_labels("Cc1 n1 n3 2e-18\n", g)
        assert len(g.struct_edges) == n_struct


class TestLabels:
    def test_normalize_endpoints_and_midpoint(self):
        out = normalize_labels([1e-21, 1e-15, 1e-18])
        assert out == pytest.approx([0.0, 1.0, 0.5])

    def test_normalize_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            normalize_labels([1e-22])
        with pytest.raises(ContractError):
            normalize_labels([1e-14])

    def test_normalize_round_trip(self):
        rng = np.random.default_rng(7)
        v = 10.0 ** rng.uniform(-21, -15, size=64)
        back = denormalize_labels(normalize_labels(v))
        assert np.allclose(back, v, rtol=1e-10)

    def test_in_range_mask(self):
        mask = in_range_mask([1e-22, 1e-21, 1e-18, 1e-15, 1e-14])
        assert mask.tolist() == [False, True, True, True, False]

    def test_bin_examples(self):
        assert bin_ground_caps([0.45])[0] == 2
        assert bin_ground_caps([0.0])[0] == 0
        assert bin_ground_caps([1.0])[0] == 4

    def test_bin_edges(self):
        vals = [0.0, 0.199, 0.2, 0.399, 0.4, 0.6, 0.799, 0.8, 0.999, 1.0]
        assert bin_ground_caps(vals).tolist() == [0, 0, 1, 1, 2, 3, 3, 4, 4, 4]

    def test_bin_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            bin_ground_caps([-0.01])
        with pytest.raises(ContractError):
            bin_ground_caps([1.01])

    def test_bin_other_class_counts(self):
        assert bin_ground_caps([0.5], n_classes=2)[0] == 1
        assert bin_ground_caps([0.49], n_classes=2)[0] == 0

    def test_label_spec_validation(self):
        with pytest.raises(ContractError):
            LabelSpec(lo=1e-15, hi=1e-21)
        with pytest.raises(ContractError):
            LabelSpec(n_classes=1)
        with pytest.raises(ContractError):
            LabelSpec(mode="ranking")

    def test_dataset_helpers(self):
        g = parse_netlist("M1 n1 n2 0 0 nch\n")
        parse_spf_labels("Cc1 n1 n2 2e-18\n*|NET n1 3e-17\n", g)
        pairs, values = coupling_dataset(g)
        assert pairs.shape == (1, 2)
        assert values[0] == pytest.approx(2e-18)
        ids, caps = ground_cap_dataset(g)
        assert ids.tolist() == [g.find("n1", NET)]
        assert caps[0] == pytest.approx(3e-17)


class TestSerialization:
    def labeled_graph(self):
        g = parse_netlist(GOLDEN_NETLIST)
        parse_spf_labels("Cc1 a b 2e-18\nCx X1/M1.d c 1e-19\n*|NET a 3e-17\n", g)
        return g

    def test_json_round_trip(self):
        g = self.labeled_graph()
        assert CircuitGraph.from_json(g.to_json()) == g

    def test_json_field_order_stable(self):
        g = self.labeled_graph()
        keys = list(g.to_json_dict().keys())
        assert keys == ["version", "nodes", "struct_edges", "candidate_edges", "ground_caps"]
        assert g.to_json() == g.to_json()

    def test_json_rejects_unknown_version(self):
        doc = self.labeled_graph().to_json_dict()
        doc["version"] = 99
        with pytest.raises(GraphFormatError):
            CircuitGraph.from_json_dict(doc)

    def test_json_rejects_garbage(self):
        with pytest.raises(GraphFormatError):
            CircuitGraph.from_json("{not json")
        with pytest.raises(GraphFormatError):
            CircuitGraph.from_json('{"version": 1}')

    def test_binary_round_trip(self):
        g = self.labeled_graph()
        assert CircuitGraph.from_bytes(g.to_bytes()) == g

    def test_binary_round_trip_empty(self):
        g = CircuitGraph()
        assert CircuitGraph.from_bytes(g.to_bytes()) == g

    def test_binary_deterministic(self):
        g = self.labeled_graph()
        assert g.to_bytes() == self.labeled_graph().to_bytes()

    def test_truncated_bytes_rejected(self):
        data = self.labeled_graph().to_bytes()
        with pytest.raises(GraphFormatError):
            CircuitGraph.from_bytes(data[: len(data) // 2])

    def test_bad_magic_rejected_at_offset_zero(self):
        data = b"XXXX" + self.labeled_graph().to_bytes()[4:]
        with pytest.raises(GraphFormatError) as exc:
            CircuitGraph.from_bytes(data)
        assert exc.value.offset == 0

    def test_corrupted_payload_fails_checksum(self):
        data = bytearray(self.labeled_graph().to_bytes())
        data[20] ^= 0xFF
        with pytest.raises(GraphFormatError):
            CircuitGraph.from_bytes(bytes(data))

    def test_unlabeled_candidate_survives_round_trips(self):
        b = GraphBuilder()
        n1, n2 = b.net("n1"), b.net("n2")
        d = b.device("M1")
        b.pin(d, "d", n1)
        b.pin(d, "g", n2)
        # a MOS pin invariant needs device+net edges per pin only; two pins suffice
        b.coupling(n1, n2, label=None)
        g = b.build()
        assert CircuitGraph.from_bytes(g.to_bytes()).candidate_edges[0].label is None
        assert CircuitGraph.from_json(g.to_json()).candidate_edges[0].label is None


class TestValidation:
    def test_validate_catches_bad_ground_cap_key(self):
        g = parse_netlist(MOS_CARD)
        g.node_ground_caps[g.find("M1", DEVICE)] = 1e-17
        with pytest.raises(ContractError):
            g.validate()

    def test_validate_catches_nonpositive_label(self):
        g = parse_netlist(MOS_CARD)
        n1, n2 = g.find("n1", NET), g.find("n2", NET)
        from circuitgcl.netlist import CandidateEdge

        g.candidate_edges.append(CandidateEdge(a=n1, b=n2, kind="net_net", label=-1e-18))
        with pytest.raises(ContractError):
            g.validate()

    def test_builder_rejects_device_coupling(self):
        b = GraphBuilder()
        n1 = b.net("n1")
        d = b.device("M1")
        with pytest.raises(ContractError):
            b.coupling(n1, d)
