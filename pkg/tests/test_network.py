import json

import numpy as np
import pytest

from acrestore.errors import CaseFormatError, CaseValidationError
from acrestore.network import (
    Bus,
    Line,
    Network,
    admittance_of,
    bundled_case,
    load_case,
    network_from_dict,
    save_case,
    validate,
)


def _two_bus(**line):
    spec = {"from": 1, "to": 2, "r": 0.01, "x": 0.1, "b_charge": 0.0}
    spec.update(line)
    return {
        "base_mva": 100.0,
        "buses": [
            {"id": 1, "kind": "slack", "pd": 0.0, "qd": 0.0, "gs": 0.0, "bs": 0.0},
            {"id": 2, "kind": "pq", "pd": 0.5, "qd": 0.2, "gs": 0.0, "bs": 0.0},
        ],
        "lines": [spec],
    }


def test_minimal_case(case2):
    assert (case2.n_bus, case2.n_line, case2.n_state) == (2, 1, 3)
    assert case2.slack == 0


def test_pjm5_shape(case5):
    assert (case5.n_bus, case5.n_line) == (5, 6)
    assert len(case5.generator_buses()) == 3
    assert validate(case5) == []


def test_case14_shape(case14):
    assert (case14.n_bus, case14.n_line) == (14, 20)
    assert validate(case14) == []


def test_series_admittance_reciprocal():
    net = network_from_dict(_two_bus())
    y, ysh = admittance_of(net, 0, "forward")
    # 1/(0.01 + 0.1j) = (0.01 - 0.1j) / 0.0101
    assert y == pytest.approx(complex(0.01 / 0.0101, -0.1 / 0.0101), abs=1e-12)
    assert y.real == pytest.approx(0.9901, abs=1e-4)
    assert y.imag == pytest.approx(-9.9010, abs=1e-4)
    assert ysh == 0


def test_purely_reactive_line():
    net = network_from_dict(_two_bus(r=0.0, x=1.0))
    assert admittance_of(net, 0)[0] == pytest.approx(-1j)


def test_reverse_equals_forward_on_symmetric_line(case5):
    for k in range(case5.n_line):
        assert admittance_of(case5, k, "forward") == admittance_of(case5, k, "reverse")
        assert admittance_of(case5, k) == admittance_of(case5, k)


def test_charging_split_per_end():
    net = network_from_dict(_two_bus(b_charge=0.04))
    assert admittance_of(net, 0, "forward")[1] == pytest.approx(0.02j)
    assert admittance_of(net, 0, "reverse")[1] == pytest.approx(0.02j)


def test_admittance_errors(case2):
    with pytest.raises(IndexError):
        admittance_of(case2, 1)
    with pytest.raises(ValueError):
        admittance_of(case2, 0, "sideways")


def test_asymmetric_override():
    net = network_from_dict(_two_bus(g_from=1.0, b_from=-10.0, g_to=1.2, b_to=-9.0))
    assert admittance_of(net, 0, "forward")[0] == 1 - 10j
    assert admittance_of(net, 0, "reverse")[0] == 1.2 - 9j


def test_partial_override_rejected():
    with pytest.raises(CaseFormatError, match="g_from, b_from, g_to, b_to"):
        network_from_dict(_two_bus(g_from=1.0))


def test_two_slacks_rejected():
    data = _two_bus()
    data["buses"][1]["kind"] = "slack"
    with pytest.raises(CaseValidationError, match="multiple slack buses"):
        network_from_dict(data)


def test_no_slack_rejected():
    data = _two_bus()
    data["buses"][0]["kind"] = "pq"
    with pytest.raises(CaseValidationError, match="no slack bus"):
        network_from_dict(data)


def test_duplicate_id_rejected():
    data = _two_bus()
    data["buses"][1]["id"] = 1
    with pytest.raises(CaseValidationError, match="duplicate id"):
        network_from_dict(data)


def test_isolated_bus_single_violation():
    data = _two_bus()
    data["buses"].append({"id": 3, "kind": "pq", "pd": 0.0, "qd": 0.0, "gs": 0.0, "bs": 0.0})
    net = network_from_dict(data, check=False)
    problems = validate(net)
    assert len(problems) == 1 and "disconnected component" in problems[0]


def test_dangling_reference_single_violation():
    data = _two_bus(to=9)
    net = network_from_dict(data, check=False)
    problems = validate(net)
    assert len(problems) == 1 and "dangling bus reference" in problems[0]


def test_field_context_in_format_errors():
    data = _two_bus()
    data["buses"][1]["pd"] = "lots"
    with pytest.raises(CaseFormatError, match=r"buses\[1\]\.pd"):
        network_from_dict(data)


def test_json_syntax_error_has_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"buses": [\n  {"id": 1,,}\n]}')
    with pytest.raises(CaseFormatError, match="line 2"):
        load_case(p)


@pytest.mark.parametrize("name", ["case2", "case5", "case14"])
def test_round_trip_bit_identical(tmp_path, name):
    net = load_case(bundled_case(name))
    p = tmp_path / "c.json"
    save_case(net, p)
    again = load_case(p)
    assert again.to_dict() == net.to_dict()
    assert again.fingerprint() == net.fingerprint()
    for a, b in zip(net.lines, again.lines):
        assert (a.y_series_from, a.y_series_to, a.y_shunt_from, a.y_shunt_to) == (
            b.y_series_from,
            b.y_series_to,
            b.y_shunt_from,
            b.y_shunt_to,
        )
    # a second save is byte-identical
    q = tmp_path / "d.json"
    save_case(again, q)
    assert p.read_bytes() == q.read_bytes()


def test_round_trip_with_asymmetric_shunt(tmp_path):
    data = _two_bus(gsh_from=0.01, bsh_from=0.02, gsh_to=0.0, bsh_to=0.03)
    net = network_from_dict(data)
    p = tmp_path / "c.json"
    save_case(net, p)
    again = load_case(p)
    assert again.lines[0].y_shunt_from == complex(0.01, 0.02)
    assert again.lines[0].y_shunt_to == complex(0.0, 0.03)


def test_fingerprint_tracks_content_and_shunt_flag(case5):
    changed = case5.with_demand(*(2 * d for d in case5.demand()))
    assert changed.fingerprint() != case5.fingerprint()
    assert case5.with_bus_shunt_in_h(False).fingerprint() != case5.fingerprint()


def test_external_ids_preserved():
    data = _two_bus()
    data["buses"][0]["id"], data["buses"][1]["id"] = 10, 20
    data["lines"][0].update({"from": 10, "to": 20})
    net = network_from_dict(data)
    assert net.bus_ids == [10, 20]
    assert net.index_of(20) == 1
    with pytest.raises(KeyError):
        net.index_of(30)


def test_ybus_matches_line_sum(case14):
    Y = case14.ybus()
    assert np.allclose(Y, Y.T)  # symmetric lines, no taps
    # row sums equal the total shunt at each bus
    shunt = np.array([complex(b.g_shunt, b.b_shunt) for b in case14.buses], dtype=complex)
    for ln in case14.lines:
        shunt[ln.from_bus] += ln.y_shunt_from
        shunt[ln.to_bus] += ln.y_shunt_to
    assert np.allclose(Y.sum(axis=1), shunt)


def test_bundled_files_are_per_unit_json():
    data = json.loads(bundled_case("case14").read_text())
    assert data["base_mva"] == 100.0
    assert max(b["pd"] for b in data["buses"]) < 1.0


def test_network_is_immutable(case2):
    with pytest.raises(Exception):
        case2.base_mva = 10.0
    with pytest.raises(ValueError):
        case2.line_arrays()["i"][0] = 1


def test_manual_construction():
    net = Network(
        (Bus(1, "slack"), Bus(2, "pq", 0.1, 0.05)),
        (Line.from_impedance(0, 1, 0.0, 0.2),),
    )
    assert validate(net) == []
    assert admittance_of(net, 0)[0] == pytest.approx(-5j)
