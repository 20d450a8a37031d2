"""AC power flow measurement function h(x), its Jacobian, and Newton power flow.

The state is ``x = [theta (non-slack buses), V (all buses)]`` with ``n = 2N - 1``.
Measurement channels are described by a :class:`MeasurementLayout`; internally
every layout is a gather from the "full" vector

    [V (N), P (N), Q (N), Pf (2E), Qf (2E), theta (N)]

where the 2E directed flows are all forward line ends followed by all reverse
line ends.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import PowerFlowError, SingularJacobianError
from .network import Network

QUANTITIES = ("V", "P", "Q", "Pf", "Qf", "theta")
FLOW_QUANTITIES = ("Pf", "Qf")
DIRECTIONS = ("forward", "reverse")


@dataclass(frozen=True, eq=False)
class StateVector:
    angles: np.ndarray
    magnitudes: np.ndarray
    slack_index: int

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        v = np.asarray(self.magnitudes, dtype=float)
        if a.shape != (v.size - 1,):
            raise ValueError(f"expected {v.size - 1} angles for {v.size} magnitudes, got {a.shape}")
        if not 0 <= self.slack_index < v.size:
            raise ValueError(f"slack index {self.slack_index} out of range")
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "magnitudes", v)

    @property
    def n_bus(self) -> int:
        return self.magnitudes.size

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.angles, self.magnitudes])

    @classmethod
    def from_array(cls, x, slack_index: int) -> StateVector:
        x = np.asarray(x, dtype=float)
        n_bus = (x.size + 1) // 2
        return cls(x[: n_bus - 1], x[n_bus - 1 :], slack_index)

    @classmethod
    def flat(cls, network: Network) -> StateVector:
        return cls(np.zeros(network.n_bus - 1), np.ones(network.n_bus), network.slack)

    @classmethod
    def from_bus_values(cls, theta_full, magnitudes, slack_index: int) -> StateVector:
        """Build from per-bus angles; the slack angle is subtracted first."""
        theta_full = np.asarray(theta_full, dtype=float)
        theta_full = theta_full - theta_full[slack_index]
        return cls(np.delete(theta_full, slack_index), magnitudes, slack_index)

    def full_angles(self) -> np.ndarray:
        return np.insert(self.angles, self.slack_index, 0.0)

    def is_valid(self) -> bool:
        return bool(np.all(self.magnitudes > 0) and np.all(np.isfinite(self.to_array())))

    def to_json(self, network: Network) -> dict:
        return {
            "angles_deg": np.degrees(self.full_angles()).tolist(),
            "magnitudes": self.magnitudes.tolist(),
            "slack": network.buses[self.slack_index].id,
            "bus_ids": network.bus_ids,
        }

    @classmethod
    def from_json(cls, data: dict, network: Network) -> StateVector:
        ids = data.get("bus_ids", network.bus_ids)
        order = [ids.index(b) for b in network.bus_ids]
        theta = np.radians(np.asarray(data["angles_deg"], dtype=float))[order]
        vm = np.asarray(data["magnitudes"], dtype=float)[order]
        slack = network.index_of(data["slack"])
        if slack != network.slack:
            raise ValueError(f"state uses slack bus {data['slack']}, network slack is {network.buses[network.slack].id}")
        return cls.from_bus_values(theta, vm, slack)


@dataclass(frozen=True)
class Channel:
    """One measured quantity.

    ``location`` is an internal bus index for V/P/Q/theta and a
    ``(line_index, direction)`` pair for Pf/Qf.
    """

    quantity: str
    location: int | tuple[int, str]
    source: str = "default"

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise ValueError(f"unknown quantity {self.quantity!r}")
        if self.quantity in FLOW_QUANTITIES:
            line, direction = self.location
            if direction not in DIRECTIONS:
                raise ValueError(f"unknown line direction {direction!r}")
            object.__setattr__(self, "location", (int(line), direction))
        else:
            object.__setattr__(self, "location", int(self.location))

    @property
    def key(self) -> tuple[str, str]:
        """Channel-class key ``(source, quantity)``."""
        return (self.source, self.quantity)


@dataclass(frozen=True)
class MeasurementLayout:
    channels: tuple[Channel, ...]
    _cache: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "_cache", {})

    def __len__(self) -> int:
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    @property
    def sources(self) -> list[str]:
        return list(dict.fromkeys(c.source for c in self.channels))

    def full_index(self, network: Network) -> np.ndarray:
        """Row of the full vector that each channel gathers."""
        key = (network.n_bus, network.n_line, network.slack)
        idx = self._cache.get(key)
        if idx is None:
            idx = _full_index(self.channels, *key)
            idx.setflags(write=False)
            self._cache[key] = idx
        return idx

    def class_masks(self) -> dict[tuple[str, str], np.ndarray]:
        keys = [c.key for c in self.channels]
        return {k: np.array([kk == k for kk in keys]) for k in dict.fromkeys(keys)}

    def quantity_mask(self, quantity: str) -> np.ndarray:
        return np.array([c.quantity == quantity for c in self.channels])

    def concat(self, other: MeasurementLayout) -> MeasurementLayout:
        return MeasurementLayout(self.channels + other.channels)

    def relabel(self, source: str) -> MeasurementLayout:
        return MeasurementLayout(tuple(Channel(c.quantity, c.location, source) for c in self.channels))

    def to_json(self, network: Network) -> list[dict]:
        return [channel_to_json(c, network) for c in self.channels]

    def fingerprint(self) -> str:
        blob = json.dumps([[c.source, c.quantity, c.location] for c in self.channels], separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def channel_to_json(c: Channel, network: Network) -> dict:
    if c.quantity in FLOW_QUANTITIES:
        loc = {"line": c.location[0], "direction": c.location[1]}
    else:
        loc = network.buses[c.location].id
    return {"quantity": c.quantity, "location": loc}


def channel_from_json(d: dict, network: Network, source: str) -> Channel:
    q = d["quantity"]
    loc = d["location"]
    if q in FLOW_QUANTITIES:
        if isinstance(loc, dict):
            loc = (loc["line"], loc.get("direction", "forward"))
        line, _ = loc
        if not 0 <= int(line) < network.n_line:
            raise ValueError(f"channel {q}: unknown line {line}")
        return Channel(q, tuple(loc), source)
    return Channel(q, network.index_of(loc), source)


def _full_index(channels, n_bus: int, n_line: int, slack: int) -> np.ndarray:
    base = {"V": 0, "P": n_bus, "Q": 2 * n_bus, "Pf": 3 * n_bus, "Qf": 3 * n_bus + 2 * n_line, "theta": 3 * n_bus + 4 * n_line}
    out = np.empty(len(channels), dtype=int)
    for k, c in enumerate(channels):
        if c.quantity in FLOW_QUANTITIES:
            line, direction = c.location
            if not 0 <= line < n_line:
                raise ValueError(f"channel {k}: line {line} out of range")
            out[k] = base[c.quantity] + line + (n_line if direction == "reverse" else 0)
        else:
            if not 0 <= c.location < n_bus:
                raise ValueError(f"channel {k}: bus {c.location} out of range")
            if c.quantity == "theta" and c.location == slack:
                raise ValueError("theta channels may not include the slack bus")
            out[k] = base[c.quantity] + c.location
    return out


def standard_layout(network: Network, source: str = "default", quantities=QUANTITIES) -> MeasurementLayout:
    """Every channel of the given quantities, ordered in [V; P; Q; Pf; Qf; theta] blocks."""
    chans = []
    slack = network.slack
    for q in QUANTITIES:
        if q not in quantities:
            continue
        if q in FLOW_QUANTITIES:
            for d in DIRECTIONS:
                chans.extend(Channel(q, (ell, d), source) for ell in range(network.n_line))
        elif q == "theta":
            chans.extend(Channel(q, k, source) for k in range(network.n_bus) if k != slack)
        else:
            chans.extend(Channel(q, k, source) for k in range(network.n_bus))
    return MeasurementLayout(tuple(chans))


def _unpack(network: Network, x):
    x = x.to_array() if isinstance(x, StateVector) else np.asarray(x, dtype=float)
    n_bus = network.n_bus
    if x.size != 2 * n_bus - 1:
        raise ValueError(f"state has {x.size} entries, network needs {2 * n_bus - 1}")
    theta = np.insert(x[: n_bus - 1], network.slack, 0.0)
    return theta, x[n_bus - 1 :]


def _bus_shunt(network: Network) -> tuple[np.ndarray, np.ndarray]:
    if not network.bus_shunt_in_h:
        z = np.zeros(network.n_bus)
        return z, z
    return (np.array([b.g_shunt for b in network.buses]), np.array([b.b_shunt for b in network.buses]))


def evaluate_full(network: Network, x) -> np.ndarray:
    theta, vm = _unpack(network, x)
    la = network.line_arrays()
    i, j = la["i"], la["j"]
    g, b = la["y"].real, la["y"].imag
    gsh, bsh = la["ysh"].real, la["ysh"].imag
    a = theta[i] - theta[j]
    c, s = np.cos(a), np.sin(a)
    vi, vj = vm[i], vm[j]
    vv = vi * vj
    pf = vi**2 * (g + gsh) - vv * (g * c + b * s)
    qf = -(vi**2) * (b + bsh) - vv * (g * s - b * c)
    gs, bs = _bus_shunt(network)
    A = la["incidence"]
    p = A @ pf + vm**2 * gs
    q = A @ qf - vm**2 * bs
    return np.concatenate([vm, p, q, pf, qf, theta])


def jacobian_full(network: Network, x) -> np.ndarray:
    """Jacobian of :func:`evaluate_full` with respect to x (slack angle column removed)."""
    theta, vm = _unpack(network, x)
    n_bus, n_line = network.n_bus, network.n_line
    la = network.line_arrays()
    i, j = la["i"], la["j"]
    g, b = la["y"].real, la["y"].imag
    gsh, bsh = la["ysh"].real, la["ysh"].imag
    a = theta[i] - theta[j]
    c, s = np.cos(a), np.sin(a)
    vi, vj = vm[i], vm[j]
    vv = vi * vj
    gcbs = g * c + b * s
    gsbc = g * s - b * c

    n_dir = 2 * n_line
    rows = np.arange(n_dir)
    # columns: [theta (all N), V (all N)]
    dpf = np.zeros((n_dir, 2 * n_bus))
    dqf = np.zeros((n_dir, 2 * n_bus))
    dpf[rows, i] = vv * gsbc
    dpf[rows, j] = -vv * gsbc
    dpf[rows, n_bus + i] = 2 * vi * (g + gsh) - vj * gcbs
    dpf[rows, n_bus + j] = -vi * gcbs
    dqf[rows, i] = -vv * gcbs
    dqf[rows, j] = vv * gcbs
    dqf[rows, n_bus + i] = -2 * vi * (b + bsh) - vj * gsbc
    dqf[rows, n_bus + j] = -vi * gsbc

    gs, bs = _bus_shunt(network)
    A = la["incidence"]
    dp = A @ dpf
    dq = A @ dqf
    diag = np.arange(n_bus)
    dp[diag, n_bus + diag] += 2 * vm * gs
    dq[diag, n_bus + diag] -= 2 * vm * bs

    dv = np.zeros((n_bus, 2 * n_bus))
    dv[diag, n_bus + diag] = 1.0
    dth = np.zeros((n_bus, 2 * n_bus))
    dth[diag, diag] = 1.0
    full = np.vstack([dv, dp, dq, dpf, dqf, dth])
    return np.delete(full, network.slack, axis=1)


def evaluate_h(network: Network, x, layout: MeasurementLayout) -> np.ndarray:
    """Measurement function h(x) for the channels of ``layout``."""
    return evaluate_full(network, x)[layout.full_index(network)]


def jacobian_H(network: Network, x, layout: MeasurementLayout) -> np.ndarray:
    """Analytic m x n Jacobian of :func:`evaluate_h`."""
    return jacobian_full(network, x)[layout.full_index(network)]


def injections_ybus(network: Network, x) -> np.ndarray:
    """Complex bus injections V * conj(Ybus V).

    Built from the bus admittance matrix rather than line-by-line flows, so it
    serves as an independent re-check of the P/Q channels of h(x).
    """
    theta, vm = _unpack(network, x)
    v = vm * np.exp(1j * theta)
    s = v * np.conj(network.ybus() @ v)
    if not network.bus_shunt_in_h:
        ysh = np.array([complex(bb.g_shunt, bb.b_shunt) for bb in network.buses])
        s = s - vm**2 * np.conj(ysh)
    return s


@dataclass(frozen=True, eq=False)
class PowerFlowSpec:
    """Fixed quantities of a conventional power flow problem.

    Per-bus arrays; which entries are enforced follows the bus kinds: P at
    non-slack buses, Q at PQ buses, V at slack and PV buses.
    """

    p_inj: np.ndarray
    q_inj: np.ndarray
    v_set: np.ndarray

    @classmethod
    def nominal(cls, network: Network) -> PowerFlowSpec:
        return cls(
            np.array([b.p_gen - b.p_demand for b in network.buses]),
            np.array([-b.q_demand for b in network.buses]),
            np.array([b.v_set if b.kind != "pq" else 1.0 for b in network.buses]),
        )


@dataclass(frozen=True, eq=False)
class PowerFlowResult:
    state: StateVector
    iterations: int
    mismatch: float


def _pf_layout(network: Network) -> tuple[MeasurementLayout, np.ndarray, np.ndarray]:
    kinds = network.kinds()
    p_bus = np.flatnonzero(kinds != "slack")
    q_bus = np.flatnonzero(kinds == "pq")
    chans = [Channel("P", int(k), "pf") for k in p_bus] + [Channel("Q", int(k), "pf") for k in q_bus]
    return MeasurementLayout(tuple(chans)), p_bus, q_bus


def power_flow_mismatch(network: Network, x, spec: PowerFlowSpec) -> np.ndarray:
    """Fixed-injection mismatch ``spec - h(x)`` for P at non-slack and Q at PQ buses."""
    layout, p_bus, q_bus = _pf_layout(network)
    target = np.concatenate([spec.p_inj[p_bus], spec.q_inj[q_bus]])
    return target - evaluate_h(network, x, layout)


def solve_power_flow(
    network: Network, spec: PowerFlowSpec, x0: StateVector | None = None, tol: float = 1e-6, max_iter: int = 50
) -> PowerFlowResult:
    """Newton-Raphson power flow in polar coordinates.

    Raises :class:`PowerFlowError` (with the best iterate attached) when the
    mismatch does not reach ``tol`` within ``max_iter`` iterations.
    """
    n_bus = network.n_bus
    layout, p_bus, q_bus = _pf_layout(network)
    target = np.concatenate([spec.p_inj[p_bus], spec.q_inj[q_bus]])
    x = (x0 or StateVector.flat(network)).to_array().copy()
    gen = np.flatnonzero(network.kinds() != "pq")
    x[n_bus - 1 + gen] = spec.v_set[gen]
    cols = np.concatenate([np.arange(n_bus - 1), n_bus - 1 + q_bus])

    best, best_mis = x.copy(), np.inf
    for it in range(max_iter + 1):
        mis = target - evaluate_h(network, x, layout)
        norm = np.max(np.abs(mis)) if mis.size else 0.0
        if not np.isfinite(norm):
            break
        if norm < best_mis:
            best, best_mis = x.copy(), norm
        if norm <= tol:
            return PowerFlowResult(StateVector.from_array(x, network.slack), it, float(norm))
        if it == max_iter:
            break
        J = jacobian_H(network, x, layout)[:, cols]
        try:
            dx = np.linalg.solve(J, mis)
        except np.linalg.LinAlgError:
            raise SingularJacobianError(
                f"singular power flow Jacobian at iteration {it}",
                condition=float(np.linalg.cond(J)),
                best=StateVector.from_array(best, network.slack),
                mismatch=float(best_mis),
                iterations=it,
            ) from None
        x[cols] += dx
    raise PowerFlowError(
        f"power flow did not converge in {max_iter} iterations (best mismatch {best_mis:.3e})",
        best=StateVector.from_array(best, network.slack),
        mismatch=float(best_mis),
        iterations=max_iter,
    )
