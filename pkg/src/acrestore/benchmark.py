"""Comparison methods and loss reports on the test split.

Four methods are evaluated per source:

``initial``       the simplified V and theta taken as they are (no feasibility)
``benchmark_pv``  power flow with generator V and PV-bus P fixed from the source
``se_init``       restoration with unit weights and zero bias
``se_opt``        restoration with trained weights and biases
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AcRestoreError
from .network import Network
from .powerflow import PowerFlowSpec, StateVector, evaluate_full, injections_ybus, solve_power_flow
from .restoration import (
    MeasurementSet,
    RestorationParams,
    RestorationResult,
    combine_sources,
    initial_state_from,
    restore,
)
from .scenarios import ScenarioDataset
from .training import TrainedParameters

log = logging.getLogger(__name__)

METHODS = ("initial", "benchmark_pv", "se_init", "se_opt")
FEASIBILITY_TOL = 1e-6


def _first_present(z_set: MeasurementSet, quantity: str, n_bus: int) -> tuple[np.ndarray, np.ndarray]:
    vals = np.zeros(n_bus)
    have = np.zeros(n_bus, dtype=bool)
    for c, v, p in zip(z_set.layout, z_set.values, z_set.present):
        if p and c.quantity == quantity and not have[c.location]:
            vals[c.location], have[c.location] = v, True
    return vals, have


def restore_initial(z_set: MeasurementSet, network: Network) -> StateVector | None:
    """The simplified V and theta as a state, or None when either is missing."""
    vm, have_v = _first_present(z_set, "V", network.n_bus)
    th, have_t = _first_present(z_set, "theta", network.n_bus)
    have_t[network.slack] = True
    if not (have_v.all() and have_t.all()):
        return None
    th[network.slack] = 0.0
    return StateVector(np.delete(th, network.slack), vm, network.slack)


def benchmark_spec(network: Network, z_set: MeasurementSet, demand_network: Network | None = None) -> PowerFlowSpec:
    """Power flow setpoints for the fixed-PV benchmark.

    V at generator buses and P at PV buses come from ``z_set``; PQ-bus
    demand comes from ``demand_network`` (the scenario's loads), which
    defaults to ``network``.
    """
    kinds = network.kinds()
    gen = network.generator_buses()
    pv = np.flatnonzero(kinds == "pv")
    vm, have_v = _first_present(z_set, "V", network.n_bus)
    p, have_p = _first_present(z_set, "P", network.n_bus)
    missing = [f"V at bus {network.buses[k].id}" for k in gen if not have_v[k]]
    missing += [f"P at bus {network.buses[k].id}" for k in pv if not have_p[k]]
    if missing:
        raise ValueError("benchmark needs " + ", ".join(missing))
    base = PowerFlowSpec.nominal(demand_network or network)
    p_inj = base.p_inj.copy()
    p_inj[pv] = p[pv]
    v_set = base.v_set.copy()
    v_set[gen] = vm[gen]
    return PowerFlowSpec(p_inj, base.q_inj.copy(), v_set)


def restore_benchmark_pv(
    network: Network, z_set: MeasurementSet, demand_network: Network | None = None, tol: float = 1e-9
) -> RestorationResult:
    """Fixed-PV power flow benchmark; raises PowerFlowError on non-convergence."""
    spec = benchmark_spec(network, z_set, demand_network)
    x0 = initial_state_from(z_set, network)
    try:
        pf = solve_power_flow(network, spec, x0, tol=tol)
    except AcRestoreError:
        log.debug("benchmark power flow from the simplified start failed; retrying flat")
        pf = solve_power_flow(network, spec, None, tol=tol)
    return RestorationResult(
        x_r=pf.state,
        iterations=pf.iterations,
        final_step_norm=float("nan"),
        objective=float("nan"),
        residuals=np.zeros(0),
        converged=True,
    )


def feasibility_residual(network: Network, x: StateVector, p_reported=None, q_reported=None) -> float:
    """``max |S_ybus(x) - S_reported|`` over buses.

    By default the reported injections are the P/Q channels of ``h(x)``, which
    is what any state-derived solution reports.
    """
    s = injections_ybus(network, x)
    n = network.n_bus
    full = evaluate_full(network, x)
    p = full[n : 2 * n] if p_reported is None else np.asarray(p_reported)
    q = full[2 * n : 3 * n] if q_reported is None else np.asarray(q_reported)
    return float(max(np.max(np.abs(s.real - p)), np.max(np.abs(s.imag - q))))


def _benchmark_residual(network: Network, x: StateVector, spec: PowerFlowSpec) -> float:
    # fixed setpoints must be met; slack P and PV Q are free outputs
    s = injections_ybus(network, x)
    kinds = network.kinds()
    gen = kinds != "pq"
    err = [np.abs(s.real - spec.p_inj)[kinds != "slack"], np.abs(s.imag - spec.q_inj)[~gen]]
    err.append(np.abs(x.magnitudes - spec.v_set)[gen])
    return float(max(np.max(e) if e.size else 0.0 for e in err))


def _initial_residual(network: Network, x: StateVector, z_set: MeasurementSet) -> float:
    p, have_p = _first_present(z_set, "P", network.n_bus)
    q, have_q = _first_present(z_set, "Q", network.n_bus)
    s = injections_ybus(network, x)
    err = np.concatenate([np.abs(s.real - p)[have_p], np.abs(s.imag - q)[have_q]])
    return float(err.max()) if err.size else float("nan")


@dataclass
class MethodReport:
    method: str
    source: str
    scenario_ids: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    feasible: list[bool] = field(default_factory=list)
    failures: list[int] = field(default_factory=list)
    available: bool = True

    @property
    def aggregate(self) -> float:
        """Sum of per-scenario contributions, i.e. the batch loss over the test split."""
        return float(sum(v for v in self.losses if np.isfinite(v)))

    @property
    def n_ok(self) -> int:
        return sum(1 for v in self.losses if np.isfinite(v))

    def to_json(self) -> dict:
        finite = [r for r in self.residuals if np.isfinite(r)]
        return {
            "method": self.method,
            "source": self.source,
            "available": self.available,
            "loss": self.aggregate if self.available else None,
            "scenarios": self.n_ok,
            "failures": self.failures,
            "all_feasible": bool(self.feasible) and all(self.feasible),
            "max_residual": max(finite) if finite else None,
        }


def _run_one(method, network, z, x_ac, params, demand_net, eps):
    n = network.n_state
    if method == "initial":
        x = restore_initial(z, network)
        if x is None:
            return None
        res = _initial_residual(network, x, z)
        feasible = False
    elif method == "benchmark_pv":
        r = restore_benchmark_pv(network, z, demand_net)
        x = r.x_r
        res = _benchmark_residual(network, x, benchmark_spec(network, z, demand_net))
        feasible = res <= FEASIBILITY_TOL
    else:
        r = restore(network, z, params, initial_state_from(z, network), eps=eps)
        if not r.converged:
            raise AcRestoreError(f"restoration did not converge in {r.iterations} iterations")
        x = r.x_r
        res = feasibility_residual(network, x)
        feasible = res <= FEASIBILITY_TOL
    d = x.to_array() - x_ac.to_array()
    return float(d @ d) / n, res, feasible


def _source_sets(dataset: ScenarioDataset, label: str, sid: int) -> MeasurementSet:
    parts = label.split("+")
    sets = [dataset.z_sets[sid][p] for p in parts]
    return sets[0] if len(sets) == 1 else combine_sources(sets)


def evaluate_methods(
    dataset: ScenarioDataset,
    network: Network,
    trained: dict[str, TrainedParameters] | TrainedParameters | None = None,
    sources: list[str] | None = None,
    combine: list[list[str]] | None = None,
    methods=METHODS,
    eps: float = 1e-6,
    threads: int = 1,
) -> list[MethodReport]:
    """Run every method on every test scenario for each source label.

    ``trained`` maps a source label (``"a+b"`` for combinations) to its
    parameters; a single object is used for every label whose layout it
    matches. Labels without parameters report ``se_opt`` as unavailable.
    Per-scenario failures are recorded, not raised.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    ids = dataset.ids("test")
    if not ids:
        raise ValueError("dataset has an empty test split")
    labels = list(sources) if sources else dataset.sources
    labels += ["+".join(c) for c in (combine or [])]
    demand_nets = {s.scenario_id: s.apply(network) for s in dataset.scenarios}
    reports = []
    for label in labels:
        z_by_id = {sid: _source_sets(dataset, label, sid) for sid in ids}
        m = len(next(iter(z_by_id.values())))
        tp = trained.get(label) if isinstance(trained, dict) else trained
        if tp is not None and tp.layout_fingerprint != next(iter(z_by_id.values())).layout.fingerprint():
            tp = None
        for method in methods:
            rep = MethodReport(method, label)
            if method == "se_opt" and tp is None:
                rep.available = False
                reports.append(rep)
                continue
            params = tp.params if method == "se_opt" else RestorationParams.unit(m)

            def one(sid):
                if sid not in dataset.truth:
                    return sid, "no ground truth"
                try:
                    return sid, _run_one(method, network, z_by_id[sid], dataset.truth[sid], params, demand_nets[sid], eps)
                except (AcRestoreError, ValueError, np.linalg.LinAlgError) as exc:
                    return sid, str(exc)

            if threads > 1:
                with ThreadPoolExecutor(threads) as pool:
                    outcomes = list(pool.map(one, ids))
            else:
                outcomes = [one(sid) for sid in ids]
            for sid, out in sorted(outcomes):
                if out is None:
                    rep.available = False
                    break
                rep.scenario_ids.append(sid)
                if isinstance(out, str):
                    log.warning("%s/%s scenario %d failed: %s", label, method, sid, out)
                    rep.failures.append(sid)
                    rep.losses.append(float("nan"))
                    rep.residuals.append(float("nan"))
                    rep.feasible.append(False)
                else:
                    rep.losses.append(out[0])
                    rep.residuals.append(out[1])
                    rep.feasible.append(bool(out[2]))
            if not rep.available:
                rep.scenario_ids, rep.losses, rep.residuals, rep.feasible = [], [], [], []
            reports.append(rep)
    return reports


def write_csv(reports: list[MethodReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "source", "scenario", "loss", "feasible", "residual"])
        for rep in reports:
            for sid, loss, ok, res in zip(rep.scenario_ids, rep.losses, rep.feasible, rep.residuals):
                w.writerow([rep.method, rep.source, sid, repr(loss), int(ok), repr(res)])


def write_json(reports: list[MethodReport], path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in reports], indent=1) + "\n", encoding="utf-8")


def format_table(reports: list[MethodReport]) -> str:
    """Methods as rows, sources as columns, test-split loss in each cell."""
    sources = list(dict.fromkeys(r.source for r in reports))
    methods = list(dict.fromkeys(r.method for r in reports))
    cell = {(r.method, r.source): r for r in reports}
    width = max(12, *(len(s) + 2 for s in sources))
    lines = ["method".ljust(14) + "".join(s.rjust(width) for s in sources)]
    for meth in methods:
        row = meth.ljust(14)
        for s in sources:
            r = cell.get((meth, s))
            if r is None or not r.available:
                txt = "n/a"
            else:
                txt = f"{r.aggregate:.3e}" + ("*" if r.failures else "")
            row += txt.rjust(width)
        lines.append(row)
    if any(r.failures for r in reports):
        lines.append("* some scenarios failed and are excluded")
    return "\n".join(lines)
