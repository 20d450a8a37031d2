"""Immutable grid data model and case-file I/O.

All electrical quantities are per-unit on ``base_mva``; angles are radians.
Buses are indexed densely in file order, the external ids are kept on each
:class:`Bus` and exposed through :meth:`Network.index_of`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import CaseFormatError, CaseValidationError

BusKind = Literal["slack", "pv", "pq"]
BUS_KINDS = ("slack", "pv", "pq")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float = 0.0
    q_demand: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    # nominal dispatch data, used only to build power flow setpoints
    p_gen: float = 0.0
    v_set: float = 1.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    y_series_from: complex
    y_series_to: complex
    y_shunt_from: complex = 0j
    y_shunt_to: complex = 0j
    r: float | None = None
    x: float | None = None

    @classmethod
    def from_impedance(cls, from_bus: int, to_bus: int, r: float, x: float, b_charge: float = 0.0) -> Line:
        y = 1.0 / complex(r, x)
        ysh = complex(0.0, b_charge / 2.0)
        return cls(from_bus, to_bus, y, y, ysh, ysh, r=r, x=x)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    # include V^2 * conj(Y_shunt) in the bus injection channels of h(x)
    bus_shunt_in_h: bool = True
    _index: dict = field(default=None, init=False, repr=False, compare=False)
    _cache: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})
        object.__setattr__(self, "_cache", {})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_state(self) -> int:
        return 2 * self.n_bus - 1

    @property
    def slack(self) -> int:
        slacks = [k for k, b in enumerate(self.buses) if b.kind == "slack"]
        if len(slacks) != 1:
            raise ValueError(f"network has {len(slacks)} slack buses")
        return slacks[0]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def index_of(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus id {bus_id}") from None

    def kinds(self) -> np.ndarray:
        return np.array([b.kind for b in self.buses])

    def generator_buses(self) -> list[int]:
        return [k for k, b in enumerate(self.buses) if b.kind in ("slack", "pv")]

    def demand(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.p_demand for b in self.buses]), np.array([b.q_demand for b in self.buses]))

    def with_demand(self, p_demand, q_demand) -> Network:
        buses = tuple(
            replace(b, p_demand=float(p), q_demand=float(q)) for b, p, q in zip(self.buses, p_demand, q_demand)
        )
        return replace(self, buses=buses)

    def with_bus_shunt_in_h(self, flag: bool) -> Network:
        return replace(self, bus_shunt_in_h=flag)

    def line_arrays(self) -> dict[str, np.ndarray]:
        """Per-direction line data stacked as ``[forward lines, reverse lines]``.

        Also carries ``incidence``, the N x 2E matrix summing directed flows
        into their sending bus. The arrays are cached; treat them as read-only.
        """
        if "lines" in self._cache:
            return self._cache["lines"]
        fb = np.array([ln.from_bus for ln in self.lines], dtype=int)
        tb = np.array([ln.to_bus for ln in self.lines], dtype=int)
        ys = np.array([ln.y_series_from for ln in self.lines] + [ln.y_series_to for ln in self.lines], dtype=complex)
        ysh = np.array([ln.y_shunt_from for ln in self.lines] + [ln.y_shunt_to for ln in self.lines], dtype=complex)
        i = np.concatenate([fb, tb])
        incidence = np.zeros((self.n_bus, i.size))
        incidence[i, np.arange(i.size)] = 1.0
        out = {"i": i, "j": np.concatenate([tb, fb]), "y": ys, "ysh": ysh, "incidence": incidence}
        for a in out.values():
            a.setflags(write=False)
        self._cache["lines"] = out
        return out

    def ybus(self) -> np.ndarray:
        """Dense bus admittance matrix, always including bus shunts."""
        n = self.n_bus
        Y = np.zeros((n, n), dtype=complex)
        for ln in self.lines:
            f, t = ln.from_bus, ln.to_bus
            Y[f, f] += ln.y_series_from + ln.y_shunt_from
            Y[f, t] -= ln.y_series_from
            Y[t, t] += ln.y_series_to + ln.y_shunt_to
            Y[t, f] -= ln.y_series_to
        for k, b in enumerate(self.buses):
            Y[k, k] += complex(b.g_shunt, b.b_shunt)
        return Y

    def to_dict(self) -> dict:
        return {
            "base_mva": self.base_mva,
            "buses": [_bus_to_dict(b) for b in self.buses],
            "lines": [_line_to_dict(self, ln) for ln in self.lines],
        }

    def fingerprint(self) -> str:
        payload = self.to_dict()
        payload["bus_shunt_in_h"] = self.bus_shunt_in_h
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _bus_to_dict(b: Bus) -> dict:
    d = {"id": b.id, "kind": b.kind, "pd": b.p_demand, "qd": b.q_demand, "gs": b.g_shunt, "bs": b.b_shunt}
    if b.p_gen != 0.0:
        d["pg"] = b.p_gen
    if b.v_set != 1.0:
        d["vm"] = b.v_set
    return d


def _line_to_dict(net: Network, ln: Line) -> dict:
    d = {"from": net.buses[ln.from_bus].id, "to": net.buses[ln.to_bus].id}
    if ln.r is not None:
        d["r"], d["x"] = ln.r, ln.x
    symmetric_charge = ln.y_shunt_from == ln.y_shunt_to and ln.y_shunt_from.real == 0.0
    d["b_charge"] = 2.0 * ln.y_shunt_from.imag if symmetric_charge else 0.0
    d.update(
        g_from=ln.y_series_from.real,
        b_from=ln.y_series_from.imag,
        g_to=ln.y_series_to.real,
        b_to=ln.y_series_to.imag,
    )
    if not symmetric_charge:
        d.update(
            gsh_from=ln.y_shunt_from.real,
            bsh_from=ln.y_shunt_from.imag,
            gsh_to=ln.y_shunt_to.real,
            bsh_to=ln.y_shunt_to.imag,
        )
    return d


def admittance_of(network: Network, line_index: int, direction: str = "forward") -> tuple[complex, complex]:
    """Series and shunt admittance of a line as seen from one of its ends."""
    if not 0 <= line_index < network.n_line:
        raise IndexError(f"line index {line_index} out of range [0, {network.n_line})")
    ln = network.lines[line_index]
    if direction == "forward":
        return ln.y_series_from, ln.y_shunt_from
    if direction == "reverse":
        return ln.y_series_to, ln.y_shunt_to
    raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")


def validate(network: Network) -> list[str]:
    """Return a list of invariant violations; empty when the network is valid."""
    out = []
    seen = set()
    for b in network.buses:
        if b.id in seen:
            out.append(f"bus {b.id}: duplicate id")
        seen.add(b.id)
        if b.kind not in BUS_KINDS:
            out.append(f"bus {b.id}: unknown kind {b.kind!r}")
    n_slack = sum(b.kind == "slack" for b in network.buses)
    if n_slack == 0:
        out.append("no slack bus")
    elif n_slack > 1:
        out.append("multiple slack buses")

    n = network.n_bus
    dangling = False
    for k, ln in enumerate(network.lines):
        if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
            out.append(f"line {k}: dangling bus reference")
            dangling = True
            continue
        if ln.from_bus == ln.to_bus:
            out.append(f"line {k}: from_bus equals to_bus")
        for y in (ln.y_series_from, ln.y_series_to):
            if not np.isfinite(y) or y == 0:
                out.append(f"line {k}: series admittance must be finite and nonzero")
                break

    if n and not dangling:
        adj = [[] for _ in range(n)]
        for ln in network.lines:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        reached = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in reached:
                    reached.add(nb)
                    stack.append(nb)
        if len(reached) < n:
            missing = sorted(network.buses[k].id for k in range(n) if k not in reached)
            out.append(f"disconnected component: buses {missing} unreachable from bus {network.buses[0].id}")
    return out


def _num(obj: dict, key: str, where: str, default=None) -> float:
    if key not in obj:
        if default is None:
            raise CaseFormatError(f"{where}: missing field {key!r}")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise CaseFormatError(f"{where}.{key}: expected number, got {v!r}")
    return float(v)


def network_from_dict(data: dict, *, check: bool = True) -> Network:
    if not isinstance(data, dict):
        raise CaseFormatError("case: top level must be an object")
    for key in ("buses", "lines"):
        if not isinstance(data.get(key), list):
            raise CaseFormatError(f"case: {key!r} must be an array")
    base = _num(data, "base_mva", "case", default=100.0)

    buses = []
    for k, raw in enumerate(data["buses"]):
        where = f"buses[{k}]"
        if not isinstance(raw, dict):
            raise CaseFormatError(f"{where}: expected object")
        if "id" not in raw or isinstance(raw["id"], bool) or not isinstance(raw["id"], int):
            raise CaseFormatError(f"{where}.id: expected integer")
        kind = raw.get("kind")
        if kind not in BUS_KINDS:
            raise CaseFormatError(f"{where}.kind: expected one of {BUS_KINDS}, got {kind!r}")
        buses.append(
            Bus(
                id=raw["id"],
                kind=kind,
                p_demand=_num(raw, "pd", where, 0.0),
                q_demand=_num(raw, "qd", where, 0.0),
                g_shunt=_num(raw, "gs", where, 0.0),
                b_shunt=_num(raw, "bs", where, 0.0),
                p_gen=_num(raw, "pg", where, 0.0),
                v_set=_num(raw, "vm", where, 1.0),
            )
        )
    index = {}
    for k, b in enumerate(buses):
        index.setdefault(b.id, k)

    lines = []
    for k, raw in enumerate(data["lines"]):
        where = f"lines[{k}]"
        if not isinstance(raw, dict):
            raise CaseFormatError(f"{where}: expected object")
        ends = []
        for key in ("from", "to"):
            if key not in raw or isinstance(raw[key], bool) or not isinstance(raw[key], int):
                raise CaseFormatError(f"{where}.{key}: expected integer bus id")
            # unknown ids become -1 so validate() reports them
            ends.append(index.get(raw[key], -1))
        f, t = ends
        charge = _num(raw, "b_charge", where, 0.0)
        r = _num(raw, "r", where, float("nan")) if "r" in raw else None
        x = _num(raw, "x", where, float("nan")) if "x" in raw else None
        override = [key in raw for key in ("g_from", "b_from", "g_to", "b_to")]
        if any(override):
            if not all(override):
                raise CaseFormatError(f"{where}: admittance override needs all of g_from, b_from, g_to, b_to")
            y_from = complex(_num(raw, "g_from", where), _num(raw, "b_from", where))
            y_to = complex(_num(raw, "g_to", where), _num(raw, "b_to", where))
        else:
            if r is None or x is None:
                raise CaseFormatError(f"{where}: needs r and x, or an explicit admittance override")
            if r == 0.0 and x == 0.0:
                raise CaseFormatError(f"{where}: zero impedance")
            y_from = y_to = 1.0 / complex(r, x)
        sh_keys = ("gsh_from", "bsh_from", "gsh_to", "bsh_to")
        if any(key in raw for key in sh_keys):
            sh = [_num(raw, key, where, 0.0) for key in sh_keys]
            ysh_from, ysh_to = complex(sh[0], sh[1]), complex(sh[2], sh[3])
        else:
            ysh_from = ysh_to = complex(0.0, charge / 2.0)
        lines.append(Line(f, t, y_from, y_to, ysh_from, ysh_to, r=r, x=x))

    net = Network(tuple(buses), tuple(lines), base)
    if check:
        problems = validate(net)
        if problems:
            raise CaseValidationError(problems)
    return net


def load_case(path) -> Network:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return network_from_dict(data)


def save_case(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network.to_dict(), indent=1) + "\n", encoding="utf-8")


def bundled_case(name: str) -> Path:
    """Path of a case file shipped with the package (``case2``, ``case5``, ``case14``)."""
    p = Path(__file__).parent / "data" / "cases" / f"{name.removesuffix('.json')}.json"
    if not p.exists():
        raise FileNotFoundError(p)
    return p
