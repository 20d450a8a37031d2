"""Weighted least squares restoration of AC-feasible states.

A simplified OPF solution is treated as a measurement vector ``z`` and the
state ``x`` minimising ``sum_i sigma_i * (z_i + b_i - h_i(x))**2`` is found by
Gauss-Newton iterations on the normal equations. Every physical quantity of
the restored point is ``h(x_R)``, so it satisfies the AC power flow equations
by construction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import FingerprintMismatch, UnobservableError
from .network import Network
from .powerflow import (
    MeasurementLayout,
    StateVector,
    channel_from_json,
    channel_to_json,
    evaluate_h,
    jacobian_H,
)

log = logging.getLogger(__name__)

SIGMA_MIN = 1e-8


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    values: np.ndarray
    present: np.ndarray
    layout: MeasurementLayout
    network_fingerprint: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.present, dtype=bool)
        if v.shape != (len(self.layout),) or p.shape != v.shape:
            raise ValueError(f"values/present must have length {len(self.layout)}")
        # absent slots carry no information; pin them to 0 so stored bytes are stable
        v = np.where(p, v, 0.0)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "present", p)

    def __len__(self) -> int:
        return len(self.layout)

    @property
    def sources(self) -> list[str]:
        return self.layout.sources

    @property
    def n_present(self) -> int:
        return int(self.present.sum())

    def select_source(self, label: str) -> MeasurementSet:
        keep = np.array([c.source == label for c in self.layout])
        if not keep.any():
            raise KeyError(f"no source {label!r} in measurement set")
        layout = MeasurementLayout(tuple(c for c, k in zip(self.layout, keep) if k))
        return MeasurementSet(self.values[keep], self.present[keep], layout, self.network_fingerprint)

    def to_json(self, network: Network) -> dict:
        sources = []
        for label in self.sources:
            chans = []
            for c, v, p in zip(self.layout, self.values, self.present):
                if c.source == label:
                    d = channel_to_json(c, network)
                    d["value"] = float(v)
                    d["present"] = bool(p)
                    chans.append(d)
            sources.append({"label": label, "channels": chans})
        return {"network_fingerprint": self.network_fingerprint, "sources": sources}

    @classmethod
    def from_json(cls, data: dict, network: Network) -> MeasurementSet:
        """Parse and re-reference a measurement set.

        Angles are radians. If a source reports the slack-bus
        angle, all of its angles are shifted so the slack sits at zero and the
        slack channel is dropped.
        """
        fp = data.get("network_fingerprint")
        if fp is not None and fp != network.fingerprint():
            raise FingerprintMismatch(f"measurement set is for network {fp}, got {network.fingerprint()}")
        slack_id = network.buses[network.slack].id
        chans, values, present = [], [], []
        for src in data["sources"]:
            label = src["label"]
            raw = src["channels"]
            shift = 0.0
            for d in raw:
                if d["quantity"] == "theta" and d["location"] == slack_id and d.get("present", True):
                    shift = float(d["value"])
                    warnings.warn(
                        f"source {label!r}: slack-bus angle re-referenced to 0 and dropped", stacklevel=2
                    )
            for d in raw:
                if d["quantity"] == "theta" and d["location"] == slack_id:
                    continue
                c = channel_from_json(d, network, label)
                v = float(d["value"])
                if c.quantity == "theta":
                    v -= shift
                chans.append(c)
                values.append(v)
                present.append(bool(d.get("present", True)))
        return cls(np.array(values), np.array(present, dtype=bool), MeasurementLayout(tuple(chans)), network.fingerprint())


@dataclass(frozen=True, eq=False)
class RestorationParams:
    sigma: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if s.shape != b.shape or s.ndim != 1:
            raise ValueError("sigma and bias must be vectors of equal length")
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("weights must be finite and strictly positive")
        object.__setattr__(self, "sigma", np.maximum(s, SIGMA_MIN))
        object.__setattr__(self, "bias", b)

    @classmethod
    def unit(cls, m: int) -> RestorationParams:
        return cls(np.ones(m), np.zeros(m))

    def __len__(self) -> int:
        return self.sigma.size


@dataclass(frozen=True, eq=False)
class RestorationResult:
    x_r: StateVector
    iterations: int
    final_step_norm: float
    objective: float
    residuals: np.ndarray
    converged: bool
    regularized: bool = False
    history: list = field(default_factory=list, repr=False)

    def to_json(self, network: Network) -> dict:
        return {
            "x_R": self.x_r.to_json(network),
            "J": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_step_norm": self.final_step_norm,
            "regularized": self.regularized,
            "residuals": self.residuals.tolist(),
        }


def _check(z_set: MeasurementSet, params: RestorationParams):
    if len(params) != len(z_set):
        raise ValueError(f"parameters have {len(params)} entries, measurement set has {len(z_set)}")


def residual(network: Network, z_set: MeasurementSet, params: RestorationParams, x) -> np.ndarray:
    """``z + b - h(x)`` on every slot; absent slots are zero."""
    _check(z_set, params)
    e = z_set.values + params.bias - evaluate_h(network, x, z_set.layout)
    return np.where(z_set.present, e, 0.0)


def objective_J(network: Network, z_set: MeasurementSet, params: RestorationParams, x) -> float:
    e = residual(network, z_set, params, x)
    return float(np.sum(params.sigma * e * e))


def normal_solve(H: np.ndarray, sigma: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``(H^T diag(sigma) H) y = rhs`` for one or many right-hand sides.

    Returns ``(y, regularized)``. A tiny Tikhonov shift is added only when
    Cholesky fails on a numerically full-rank matrix; true rank deficiency
    raises :class:`UnobservableError`.
    """
    n = H.shape[1]
    G = H.T @ (sigma[:, None] * H)
    try:
        return cho_solve(cho_factor(G), rhs), False
    except LinAlgError:
        rank = np.linalg.matrix_rank(np.sqrt(sigma)[:, None] * H)
        if rank < n:
            raise UnobservableError(
                f"weighted normal matrix is rank deficient: {n - rank} unobservable direction(s)", n - rank
            ) from None
    lam = 1e-10 * np.trace(G) / n
    log.warning("normal matrix not positive definite; adding Tikhonov shift %.3e", lam)
    return cho_solve(cho_factor(G + lam * np.eye(n)), rhs), True


def restore(
    network: Network,
    z_set: MeasurementSet,
    params: RestorationParams,
    x0: StateVector | None = None,
    eps: float = 1e-6,
    max_iter: int = 50,
    damped: bool = False,
) -> RestorationResult:
    """Newton-Raphson weighted least squares restoration.

    Iterates ``dx = (H^T S H)^-1 H^T S (z + b - h(x))`` until
    ``max|dx| <= eps``. At least one step is always taken. With ``damped``
    the step is halved while it increases the objective.
    """
    _check(z_set, params)
    n = network.n_state
    rows = z_set.present
    if z_set.n_present < n:
        raise UnobservableError(
            f"{z_set.n_present} measurements present, state has {n} entries", n - z_set.n_present
        )
    layout = z_set.layout
    target = (z_set.values + params.bias)[rows]
    sigma = params.sigma[rows]
    if x0 is None:
        x0 = initial_state_from(z_set, network)
    x = x0.to_array().astype(float, copy=True)

    def cost(xx):
        e = target - evaluate_h(network, xx, layout)[rows]
        return float(np.sum(sigma * e * e))

    regularized = False
    step_norm = np.inf
    history = []
    converged = False
    k = 0
    while k < max_iter:
        e = target - evaluate_h(network, x, layout)[rows]
        H = jacobian_H(network, x, layout)[rows]
        dx, reg = normal_solve(H, sigma, H.T @ (sigma * e))
        regularized |= reg
        if damped:
            j0 = float(np.sum(sigma * e * e))
            t = 1.0
            while t > 1e-6 and cost(x + t * dx) > j0:
                t *= 0.5
            dx = t * dx
        x = x + dx
        k += 1
        step_norm = float(np.max(np.abs(dx)))
        history.append(step_norm)
        if not np.all(np.isfinite(x)):
            break
        if step_norm <= eps:
            converged = True
            break

    x_r = StateVector.from_array(x, network.slack)
    res = np.zeros(len(z_set))
    res[rows] = target - evaluate_h(network, x, layout)[rows]
    return RestorationResult(
        x_r=x_r,
        iterations=k,
        final_step_norm=step_norm,
        objective=float(np.sum(params.sigma[rows] * res[rows] ** 2)),
        residuals=res,
        converged=converged,
        regularized=regularized,
        history=history,
    )


def combine_sources(sets: list[MeasurementSet]) -> MeasurementSet:
    """Stack measurement sets from several simplified solutions.

    Source labels are made distinct by suffixing repeats with ``#k``.
    """
    if not sets:
        raise ValueError("combine_sources needs at least one measurement set")
    fps = {s.network_fingerprint for s in sets}
    if len(fps) > 1:
        raise FingerprintMismatch(f"measurement sets reference different networks: {sorted(map(str, fps))}")
    chans, values, present = [], [], []
    used: set[str] = set()
    for s in sets:
        rename = {}
        for label in s.sources:
            new, k = label, 2
            while new in used:
                new, k = f"{label}#{k}", k + 1
            rename[label] = new
        used.update(rename.values())
        chans.extend(type(c)(c.quantity, c.location, rename[c.source]) for c in s.layout)
        values.append(s.values)
        present.append(s.present)
    return MeasurementSet(
        np.concatenate(values), np.concatenate(present), MeasurementLayout(tuple(chans)), sets[0].network_fingerprint
    )


def initial_state_from(z_set: MeasurementSet, network: Network, fallback: str = "flat") -> StateVector:
    """Warm start from the V and theta channels, flat start elsewhere."""
    if fallback != "flat":
        raise ValueError(f"unsupported fallback {fallback!r}")
    vm = np.ones(network.n_bus)
    theta = np.zeros(network.n_bus)
    have_v = np.zeros(network.n_bus, dtype=bool)
    have_t = np.zeros(network.n_bus, dtype=bool)
    for c, v, p in zip(z_set.layout, z_set.values, z_set.present):
        if not p:
            continue
        if c.quantity == "V" and not have_v[c.location] and v > 0:
            vm[c.location], have_v[c.location] = v, True
        elif c.quantity == "theta" and not have_t[c.location]:
            theta[c.location], have_t[c.location] = v, True
    theta[network.slack] = 0.0
    return StateVector(np.delete(theta, network.slack), vm, network.slack)
