"""Finite-difference self checks of the analytic derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network
from .powerflow import MeasurementLayout, StateVector, evaluate_h, jacobian_H, standard_layout
from .restoration import MeasurementSet, RestorationParams, restore
from .seeding import make_rng
from .sensitivity import fd_sensitivity_oracle, sensitivities

JACOBIAN_TOL = 1e-6
SENSITIVITY_TOL = 1e-4
# measurement noise of check instances; the fixed-Jacobian error grows with it
CHECK_NOISE = 3e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    worst: str

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


def random_state(network: Network, rng: np.random.Generator, angle_spread: float = 0.3) -> StateVector:
    """Random operating point: angles within +-spread rad, magnitudes in [0.9, 1.1]."""
    theta = rng.uniform(-angle_spread, angle_spread, network.n_bus - 1)
    vm = rng.uniform(0.9, 1.1, network.n_bus)
    return StateVector(theta, vm, network.slack)


def fd_jacobian(network: Network, x: StateVector, layout: MeasurementLayout, step: float = 1e-6) -> np.ndarray:
    """Central differences of evaluate_h, one column per state entry."""
    x0 = x.to_array()
    cols = []
    for k in range(x0.size):
        d = np.zeros_like(x0)
        d[k] = step
        cols.append((evaluate_h(network, x0 + d, layout) - evaluate_h(network, x0 - d, layout)) / (2 * step))
    return np.column_stack(cols)


def jacobian_check(network: Network, n_states: int = 20, seed: int = 0, jacobian=jacobian_H) -> CheckResult:
    """Worst ``|analytic - FD| / (1 + |FD|)`` over random states and all channels."""
    layout = standard_layout(network)
    rng = make_rng(seed, "check.jacobian")
    worst, where = 0.0, ""
    for s in range(n_states):
        x = random_state(network, rng)
        fd = fd_jacobian(network, x, layout)
        err = np.abs(jacobian(network, x, layout) - fd) / (1 + np.abs(fd))
        i, k = np.unravel_index(np.argmax(err), err.shape)
        if err[i, k] > worst:
            c = layout.channels[i]
            worst, where = float(err[i, k]), f"state {s}, channel {c.quantity}@{c.location}, column {k}"
    return CheckResult("jacobian", worst, JACOBIAN_TOL, where)


def sensitivity_instance(network: Network, seed: int, noise: float = CHECK_NOISE):
    """Converged restoration problem with noisy exact measurements and random weights.

    The analytic sensitivities hold H fixed, so their deviation from finite
    differences scales with the residual; ``noise`` sets that scale.
    """
    rng = make_rng(seed, "check.instance")
    x_star = random_state(network, rng, angle_spread=0.1)
    layout = standard_layout(network)
    z = evaluate_h(network, x_star, layout) + noise * rng.standard_normal(len(layout))
    z_set = MeasurementSet(z, np.ones(len(layout), dtype=bool), layout, network.fingerprint())
    params = RestorationParams(rng.uniform(0.5, 2.0, len(layout)), np.zeros(len(layout)))
    res = restore(network, z_set, params, x_star, eps=1e-10, max_iter=100)
    return z_set, params, res


def sensitivity_check(
    network: Network, seed: int = 0, noise: float = CHECK_NOISE, entries: int | None = None
) -> list[CheckResult]:
    """Relative error ``max|A - FD| / max|FD|`` of the bias and diagonal-weight sensitivities.

    The error is normalised by the largest finite-difference entry of the
    whole matrix. Per-column normalisation is not meaningful for weights: a
    column scales with its own residual, which can be arbitrarily close to
    zero, while the fixed-Jacobian approximation error does not.
    """
    z_set, params, res = sensitivity_instance(network, seed, noise)
    if not res.converged:
        return [CheckResult("sensitivity", float("inf"), SENSITIVITY_TOL, "restoration did not converge")]
    bundle = sensitivities(network, z_set, params, res.x_r)
    cols = list(bundle.columns)
    if entries is not None and entries < len(cols):
        cols = sorted(make_rng(seed, "check.entries").choice(cols, entries, replace=False).tolist())
    pos = [list(bundle.columns).index(j) for j in cols]
    out = []
    for which, mat in (("bias", bundle.dx_dbias), ("sigma", bundle.dx_dsigma)):
        fd = np.column_stack([fd_sensitivity_oracle(network, z_set, params, which, j, x0=res.x_r) for j in cols])
        diff = np.abs(mat[:, pos] - fd)
        scale = np.max(np.abs(fd))
        err = float(diff.max() / scale) if scale > 0 else float(diff.max())
        j = cols[int(np.argmax(diff.max(axis=0)))]
        c = z_set.layout.channels[j]
        out.append(CheckResult(f"sensitivity[{which}]", err, SENSITIVITY_TOL, f"{which} column {j} ({c.quantity}@{c.location})"))
    return out
