"""Derivatives of the restored state with respect to weights and biases.

All formulas are evaluated at a converged restoration ``x_R`` with the
Jacobian held fixed, using ``K = (H^T S H)^-1 H^T`` and the weighted residual
``e = z + b - h(x_R)``:

* bias:            dx/db       = K S
* diagonal weight: dx/dsigma_j = r_j K[:, j],  r = e - H K S e
* full weight:     dx/dvec(S)  = r^T kron K    (n x m^2)

Absent channels are dropped first, so every matrix has one column per
present slot; ``SensitivityBundle.columns`` maps them back to layout slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .network import Network
from .powerflow import StateVector, evaluate_h, jacobian_H
from .restoration import MeasurementSet, RestorationParams, initial_state_from, normal_solve, restore

FULL_FORM_MAX_M = 200
FD_STEP = {"sigma": 1e-5, "bias": 1e-6}


@dataclass(frozen=True, eq=False)
class SensitivityBundle:
    dx_dsigma: np.ndarray
    dx_dbias: np.ndarray
    evaluated_at: StateVector
    residual_norm: float
    columns: np.ndarray


def _pieces(network: Network, z_set: MeasurementSet, params: RestorationParams, x_r: StateVector):
    rows = z_set.present
    H = jacobian_H(network, x_r, z_set.layout)[rows]
    sigma = params.sigma[rows]
    e = (z_set.values + params.bias - evaluate_h(network, x_r, z_set.layout))[rows]
    K, _ = normal_solve(H, sigma, H.T)
    return H, sigma, e, K


def _weighted_residual(H, sigma, e, K):
    return e - H @ (K @ (sigma * e))


def dxr_dbias(network: Network, z_set: MeasurementSet, params: RestorationParams, x_r: StateVector) -> np.ndarray:
    """n x m' matrix ``(H^T S H)^-1 H^T S``."""
    _, sigma, _, K = _pieces(network, z_set, params, x_r)
    return K * sigma


def dxr_dsigma_diag(network: Network, z_set: MeasurementSet, params: RestorationParams, x_r: StateVector) -> np.ndarray:
    """n x m' matrix whose column j is dx_R / dsigma_j."""
    H, sigma, e, K = _pieces(network, z_set, params, x_r)
    return K * _weighted_residual(H, sigma, e, K)


def dxr_dsigma_full(network: Network, z_set: MeasurementSet, params: RestorationParams, x_r: StateVector) -> np.ndarray:
    """n x m'^2 Kronecker form over every entry of the weight matrix.

    Reference path only; column ``i + j*m'`` is the derivative with respect to
    entry (i, j), so the diagonal lives at columns ``j*(m'+1)``.
    """
    m = z_set.n_present
    if m > FULL_FORM_MAX_M:
        raise ValueError(f"full Kronecker form limited to {FULL_FORM_MAX_M} channels, got {m}")
    H, sigma, e, K = _pieces(network, z_set, params, x_r)
    return np.kron(_weighted_residual(H, sigma, e, K)[None, :], K)


def sensitivities(network: Network, z_set: MeasurementSet, params: RestorationParams, x_r: StateVector) -> SensitivityBundle:
    H, sigma, e, K = _pieces(network, z_set, params, x_r)
    return SensitivityBundle(
        dx_dsigma=K * _weighted_residual(H, sigma, e, K),
        dx_dbias=K * sigma,
        evaluated_at=x_r,
        residual_norm=float(np.max(np.abs(e))) if e.size else 0.0,
        columns=np.flatnonzero(z_set.present),
    )


def fd_sensitivity_oracle(
    network: Network,
    z_set: MeasurementSet,
    params: RestorationParams,
    which: str,
    entry: int,
    step: float | None = None,
    eps: float = 1e-10,
    x0: StateVector | None = None,
) -> np.ndarray:
    """Central difference of the restored state for one parameter slot.

    ``entry`` indexes the layout (not the present-only columns). Both
    perturbed restorations run to ``eps``.
    """
    if which not in FD_STEP:
        raise ValueError(f"which must be 'sigma' or 'bias', got {which!r}")
    if not z_set.present[entry]:
        raise ValueError(f"slot {entry} is absent")
    step = FD_STEP[which] if step is None else step
    x0 = x0 or initial_state_from(z_set, network)
    out = []
    for sign in (1.0, -1.0):
        sigma, bias = params.sigma.copy(), params.bias.copy()
        (sigma if which == "sigma" else bias)[entry] += sign * step
        res = restore(network, z_set, RestorationParams(sigma, bias), x0, eps=eps, max_iter=200)
        if not res.converged:
            raise ConvergenceError(f"restoration did not converge at {which}[{entry}] {sign * step:+g}")
        out.append(res.x_r.to_array())
    return (out[0] - out[1]) / (2 * step)
