"""Scenario datasets: load sampling, ground truth, synthetic simplified solutions, persistence.

Ground-truth states come from a dispatched power flow rather than a true OPF
solve. Training only needs target states, not their optimality, but losses
are therefore not comparable with published OPF-based numbers.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CaseFormatError, FingerprintMismatch, PowerFlowError
from .network import Network, load_case
from .powerflow import QUANTITIES, PowerFlowSpec, StateVector, evaluate_h, solve_power_flow, standard_layout
from .restoration import MeasurementSet
from .seeding import make_rng

log = logging.getLogger(__name__)

MULTIPLIER_FLOOR = 0.1
TRUTH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LoadScenario:
    scenario_id: int
    multipliers: np.ndarray
    q_multipliers: np.ndarray | None = None

    @property
    def q_mult(self) -> np.ndarray:
        return self.multipliers if self.q_multipliers is None else self.q_multipliers

    def apply(self, network: Network) -> Network:
        pd, qd = network.demand()
        return network.with_demand(pd * self.multipliers, qd * self.q_mult)

    def to_json(self) -> dict:
        d = {"scenario_id": self.scenario_id, "multipliers": self.multipliers.tolist()}
        if self.q_multipliers is not None:
            d["q_multipliers"] = self.q_multipliers.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> LoadScenario:
        q = d.get("q_multipliers")
        return cls(int(d["scenario_id"]), np.asarray(d["multipliers"], float), None if q is None else np.asarray(q, float))


def generate_scenarios(
    network: Network, count: int, std: float = 0.1, seed: int = 0, independent_pq: bool = False
) -> list[LoadScenario]:
    """Per-bus demand multipliers ``1 + N(0, std)``, truncated below at 0.1."""
    if std < 0:
        raise ValueError("std must be non-negative")
    rng = make_rng(seed, "scenarios")
    n = network.n_bus
    draws = rng.normal(0.0, std, size=(count, 2 if independent_pq else 1, n))
    mult = np.maximum(1.0 + draws, MULTIPLIER_FLOOR)
    return [
        LoadScenario(k, mult[k, 0], mult[k, 1] if independent_pq else None)
        for k in range(count)
    ]


def proportional_dispatch(network: Network, scenario: LoadScenario) -> PowerFlowSpec:
    """Scale nominal PV generation with total active demand; the slack takes the losses."""
    nominal = PowerFlowSpec.nominal(network)
    pd, qd = network.demand()
    total = pd.sum()
    factor = float(pd @ scenario.multipliers / total) if total > 0 else 1.0
    pg = np.array([b.p_gen for b in network.buses])
    return PowerFlowSpec(pg * factor - pd * scenario.multipliers, -qd * scenario.q_mult, nominal.v_set)


def ground_truth_states(
    network: Network, scenarios: list[LoadScenario], dispatch_rule=proportional_dispatch, threads: int = 1
) -> dict[int, StateVector]:
    """Converged power flow state per scenario id; failures are dropped and logged."""

    def one(sc):
        try:
            return solve_power_flow(sc.apply(network), dispatch_rule(network, sc), tol=TRUTH_TOL).state
        except PowerFlowError as exc:
            log.warning("scenario %d dropped: %s", sc.scenario_id, exc)
            return None

    with ThreadPoolExecutor(max(1, threads)) as pool:
        states = list(pool.map(one, scenarios))
    return {sc.scenario_id: st for sc, st in zip(scenarios, states) if st is not None}


@dataclass(frozen=True)
class ClassCorruption:
    additive_bias: float = 0.0
    noise_std: float = 0.0
    drop: bool = False

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class CorruptionSpec:
    """Synthetic corruption per source label and quantity.

    Angles (bias and noise) are in radians, everything else per-unit.
    Quantities not listed for a source are reported exactly.
    """

    sources: dict[str, dict[str, ClassCorruption]]

    @property
    def labels(self) -> list[str]:
        return list(self.sources)

    def to_json(self) -> dict:
        return {
            "sources": {
                label: {
                    q: {"bias": c.additive_bias, "noise_std": c.noise_std, "drop": c.drop} for q, c in classes.items()
                }
                for label, classes in self.sources.items()
            }
        }

    @classmethod
    def from_json(cls, data: dict) -> CorruptionSpec:
        if not isinstance(data, dict) or not isinstance(data.get("sources"), dict):
            raise CaseFormatError("corruption spec: expected {'sources': {label: {quantity: {...}}}}")
        out = {}
        for label, classes in data["sources"].items():
            parsed = {}
            for q, c in classes.items():
                if q not in QUANTITIES:
                    raise CaseFormatError(f"corruption spec {label}.{q}: unknown quantity")
                parsed[q] = ClassCorruption(
                    float(c.get("bias", 0.0)), float(c.get("noise_std", 0.0)), bool(c.get("drop", False))
                )
            out[label] = parsed
        return cls(out)

    @classmethod
    def load(cls, path) -> CorruptionSpec:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def synthesize_simplified(
    network: Network, x_ac: StateVector, spec: CorruptionSpec, seed: int, source: str | None = None, scenario_id: int = 0
) -> MeasurementSet:
    """Stand-in simplified solution: ``h(x_ac) + bias + N(0, std)`` per channel class."""
    if source is None:
        if len(spec.sources) != 1:
            raise ValueError("spec has several sources; pass source=")
        source = spec.labels[0]
    classes = spec.sources[source]
    layout = standard_layout(network, source)
    exact = evaluate_h(network, x_ac, layout)
    noise = make_rng(seed, "corrupt", source, scenario_id).standard_normal(len(layout))
    q = np.array([c.quantity for c in layout])
    bias = np.zeros(len(layout))
    std = np.zeros(len(layout))
    present = np.ones(len(layout), dtype=bool)
    for quantity, c in classes.items():
        sel = q == quantity
        bias[sel] = c.additive_bias
        std[sel] = c.noise_std
        present[sel] = not c.drop
    return MeasurementSet(exact + bias + std * noise, present, layout, network.fingerprint())


@dataclass(eq=False)
class ScenarioDataset:
    network: Network
    scenarios: list[LoadScenario]
    truth: dict[int, StateVector]
    z_sets: dict[int, dict[str, MeasurementSet]]
    split: dict[int, str]
    provenance: dict = field(default_factory=dict)

    @property
    def network_fingerprint(self) -> str:
        return self.network.fingerprint()

    @property
    def sources(self) -> list[str]:
        first = next(iter(self.z_sets.values()), {})
        return list(first)

    def ids(self, split: str | None = None) -> list[int]:
        return [s.scenario_id for s in self.scenarios if split is None or self.split[s.scenario_id] == split]

    def scenario(self, scenario_id: int) -> LoadScenario:
        for s in self.scenarios:
            if s.scenario_id == scenario_id:
                return s
        raise KeyError(scenario_id)

    def check(self) -> None:
        for s in self.scenarios:
            sid = s.scenario_id
            if sid not in self.truth or not self.z_sets.get(sid) or self.split.get(sid) not in ("train", "test"):
                raise ValueError(f"scenario {sid} lacks truth, measurements, or split tag")

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "truth").mkdir(parents=True, exist_ok=True)
        _write_json(out / "case.json", self.network.to_dict())
        _write_json(
            out / "scenarios.json",
            [dict(s.to_json(), split=self.split[s.scenario_id]) for s in self.scenarios],
        )
        for sid, st in self.truth.items():
            _write_json(out / "truth" / f"{sid}.json", st.to_json(self.network))
        for sid, sets in self.z_sets.items():
            for label, zs in sets.items():
                d = out / "sources" / label
                d.mkdir(parents=True, exist_ok=True)
                _write_json(d / f"{sid}.json", zs.to_json(self.network))
        manifest = dict(
            self.provenance,
            network_fingerprint=self.network_fingerprint,
            bus_shunt_in_h=self.network.bus_shunt_in_h,
            sources=self.sources,
        )
        _write_json(out / "manifest.json", manifest)

    @classmethod
    def load(cls, in_dir) -> ScenarioDataset:
        d = Path(in_dir)
        if not (d / "manifest.json").exists():
            raise FileNotFoundError(d / "manifest.json")
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        network = load_case(d / "case.json").with_bus_shunt_in_h(bool(manifest.get("bus_shunt_in_h", True)))
        if manifest.get("network_fingerprint") not in (None, network.fingerprint()):
            raise FingerprintMismatch("dataset manifest does not match its case.json")
        rows = json.loads((d / "scenarios.json").read_text(encoding="utf-8"))
        scenarios = [LoadScenario.from_json(r) for r in rows]
        split = {int(r["scenario_id"]): r["split"] for r in rows}
        truth = {
            s.scenario_id: StateVector.from_json(_read_json(d / "truth" / f"{s.scenario_id}.json"), network)
            for s in scenarios
            if (d / "truth" / f"{s.scenario_id}.json").exists()
        }
        z_sets: dict[int, dict[str, MeasurementSet]] = {s.scenario_id: {} for s in scenarios}
        for label in manifest.get("sources", []):
            for s in scenarios:
                p = d / "sources" / label / f"{s.scenario_id}.json"
                z_sets[s.scenario_id][label] = MeasurementSet.from_json(_read_json(p), network)
        provenance = {k: v for k, v in manifest.items() if k not in ("network_fingerprint", "bus_shunt_in_h", "sources")}
        ds = cls(network, scenarios, truth, z_sets, split, provenance)
        ds.check()
        return ds


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def split_ids(ids: list[int], train_fraction: float, seed: int) -> dict[int, str]:
    """Deterministic disjoint train/test assignment."""
    order = make_rng(seed, "split").permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    return {ids[k]: ("train" if rank < n_train else "test") for rank, k in enumerate(order)}


def build_dataset(
    network: Network,
    count: int,
    std: float,
    seed: int,
    spec: CorruptionSpec,
    train_fraction: float = 0.8,
    independent_pq: bool = False,
    threads: int = 1,
) -> ScenarioDataset:
    scenarios = generate_scenarios(network, count, std, seed, independent_pq)
    truth = ground_truth_states(network, scenarios, threads=threads)
    kept = [s for s in scenarios if s.scenario_id in truth]

    def corrupt(sc):
        return {
            label: synthesize_simplified(network, truth[sc.scenario_id], spec, seed, label, sc.scenario_id)
            for label in spec.labels
        }

    with ThreadPoolExecutor(max(1, threads)) as pool:
        z_sets = dict(zip((s.scenario_id for s in kept), pool.map(corrupt, kept)))
    provenance = {
        "kind": "synthetic",
        "seed": seed,
        "count": count,
        "std": std,
        "independent_pq": independent_pq,
        "train_fraction": train_fraction,
        "dropped": sorted(set(s.scenario_id for s in scenarios) - set(truth)),
        "corruption": spec.to_json(),
    }
    return ScenarioDataset(
        network, kept, truth, z_sets, split_ids([s.scenario_id for s in kept], train_fraction, seed), provenance
    )


def export_external(dataset: ScenarioDataset, path, sources: list[str] | None = None) -> None:
    """Write measurement sets in the external import format."""
    sources = sources or dataset.sources
    rows = []
    for sid in dataset.ids():
        blocks = [dataset.z_sets[sid][label].to_json(dataset.network)["sources"][0] for label in sources]
        rows.append({"scenario_id": sid, "sources": blocks})
    _write_json(Path(path), {"network_fingerprint": dataset.network_fingerprint, "scenarios": rows})


def import_external(network: Network, path, known_ids=None) -> dict[str, dict[int, MeasurementSet]]:
    """Read externally produced simplified solutions, keyed by source then scenario id."""
    try:
        data = _read_json(Path(path))
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("scenarios"), list):
        raise CaseFormatError(f"{path}: expected an object with a 'scenarios' array")
    fp = data.get("network_fingerprint")
    if fp != network.fingerprint():
        raise FingerprintMismatch(f"{path}: built for network {fp}, expected {network.fingerprint()}")
    known = None if known_ids is None else set(known_ids)
    out: dict[str, dict[int, MeasurementSet]] = {}
    for k, row in enumerate(data["scenarios"]):
        try:
            sid = int(row["scenario_id"])
            blocks = row["sources"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseFormatError(f"{path}: scenarios[{k}] malformed: {exc}") from exc
        if known is not None and sid not in known:
            raise KeyError(f"{path}: unknown scenario id {sid}")
        for block in blocks:
            try:
                zs = MeasurementSet.from_json({"network_fingerprint": fp, "sources": [block]}, network)
            except (KeyError, TypeError, ValueError) as exc:
                raise CaseFormatError(f"{path}: scenarios[{k}] source {block.get('label')!r}: {exc}") from exc
            out.setdefault(block["label"], {})[sid] = zs
    return out


def standard_suite() -> CorruptionSpec:
    """Two-source synthetic suite used by the acceptance tests and the CLI default.

    ``socp_like`` has no angles and accurate magnitudes; ``lpac_like`` has
    accurate angles and flows but systematically offset magnitudes. Biases go
    up to 0.02 p.u., noise standard deviations span 1e-4 to 1e-2.
    """
    C = ClassCorruption
    return CorruptionSpec(
        {
            "socp_like": {
                "V": C(0.02, 1e-4),
                "P": C(0.0, 1e-3),
                "Q": C(-0.01, 1e-2),
                "Pf": C(0.005, 1e-3),
                "Qf": C(0.01, 1e-2),
                "theta": C(drop=True),
            },
            "lpac_like": {
                "V": C(-0.01, 2e-3),
                "P": C(0.0, 1e-4),
                "Q": C(0.02, 2e-3),
                "Pf": C(0.0, 1e-4),
                "Qf": C(-0.02, 2e-3),
                "theta": C(0.002, 1e-3),
            },
        }
    )


def dataset_networks(dataset: ScenarioDataset) -> dict[int, Network]:
    """Scenario-specific networks (demand scaled) keyed by scenario id."""
    return {s.scenario_id: s.apply(dataset.network) for s in dataset.scenarios}
