"""Offline learning of restoration weights and biases with Adam.

The loss over a batch of scenarios is ``(1/n) * sum_i ||x_R(i) - x_AC(i)||^2``
(normalised by the state size only), and its gradients are assembled from the
per-scenario sensitivities in :mod:`acrestore.sensitivity`.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import AcRestoreError, FingerprintMismatch, TrainingError
from .network import Network
from .powerflow import StateVector
from .restoration import (
    SIGMA_MIN,
    MeasurementSet,
    RestorationParams,
    combine_sources,
    initial_state_from,
    restore,
)
from .scenarios import ScenarioDataset
from .seeding import make_rng
from .sensitivity import sensitivities

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AdamState:
    m_first: np.ndarray
    tau_second: np.ndarray
    step_count: int = 0
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if self.step_count < 0 or self.eta <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid Adam hyperparameters")

    @classmethod
    def fresh(cls, size: int, eta=0.01, beta1=0.9, beta2=0.999, eps_adam=1e-8) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0, eta, beta1, beta2, eps_adam)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and parameters."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m_first.shape or np.shape(params) != grad.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    k = state.step_count + 1
    m = state.beta1 * state.m_first + (1 - state.beta1) * grad
    tau = state.beta2 * state.tau_second + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**k)
    gamma = tau / (1 - state.beta2**k)
    new = np.asarray(params, dtype=float) - state.eta * m_hat / (np.sqrt(gamma) + state.eps_adam)
    return replace(state, m_first=m, tau_second=tau, step_count=k), new


@dataclass(frozen=True, eq=False)
class Sample:
    """One training scenario: simplified solution and its true state."""

    scenario_id: int
    z_set: MeasurementSet
    x_ac: StateVector
    x0: StateVector | None = None


@dataclass
class TrainingConfig:
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 32
    max_iter: int = 200
    sigma_init: float | list = 1.0
    bias_init: float | list = 0.0
    seed: int = 0
    restore_eps: float = 1e-10
    restore_max_iter: int = 50
    # learning rate for the bias branch; None means use eta
    eta_bias: float | None = None
    threads: int = 1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(eq=False)
class TrainedParameters:
    sigma_opt: np.ndarray
    bias_opt: np.ndarray
    loss_history: list[float]
    network_fingerprint: str
    layout_fingerprint: str
    sources: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    batch_sizes: list[int] = field(default_factory=list)

    @property
    def params(self) -> RestorationParams:
        return RestorationParams(self.sigma_opt, self.bias_opt)

    def to_json(self) -> dict:
        return {
            "sigma": self.sigma_opt.tolist(),
            "bias": self.bias_opt.tolist(),
            "layout_fingerprint": self.layout_fingerprint,
            "network_fingerprint": self.network_fingerprint,
            "sources": self.sources,
            "config": self.config,
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_json(cls, d: dict) -> TrainedParameters:
        return cls(
            np.asarray(d["sigma"], float),
            np.asarray(d["bias"], float),
            list(d.get("loss_history", [])),
            d["network_fingerprint"],
            d["layout_fingerprint"],
            list(d.get("sources", [])),
            dict(d.get("config", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> TrainedParameters:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            # loss_per_scenario is loss / batch size, reported for readability only
            w.writerow(["iteration", "loss", "loss_per_scenario"])
            sizes = self.batch_sizes or [0] * len(self.loss_history)
            for k, (loss, s) in enumerate(zip(self.loss_history, sizes), start=1):
                w.writerow([k, repr(loss), repr(loss / s) if s else ""])

    def check_compatible(self, network: Network, z_set: MeasurementSet) -> None:
        if self.network_fingerprint != network.fingerprint():
            raise FingerprintMismatch(
                f"parameters trained for network {self.network_fingerprint}, got {network.fingerprint()}"
            )
        if self.layout_fingerprint != z_set.layout.fingerprint():
            raise FingerprintMismatch("parameters were trained for a different measurement layout")


def dataset_samples(dataset: ScenarioDataset, sources: list[str] | None = None, split: str | None = "train") -> list[Sample]:
    """Pair each scenario's (combined) simplified solution with its true state."""
    labels = list(sources) if sources else dataset.sources
    out = []
    for sid in dataset.ids(split):
        if sid not in dataset.truth:
            continue
        sets = [dataset.z_sets[sid][label] for label in labels]
        z = sets[0] if len(sets) == 1 else combine_sources(sets)
        out.append(Sample(sid, z, dataset.truth[sid]))
    return out


def loss_F(x_r_batch, x_ac_batch, n: int) -> float:
    """``(1/n) * ||X_R - X_AC||^2`` over stacked state vectors."""
    if len(x_r_batch) != len(x_ac_batch):
        raise ValueError(f"batch length mismatch: {len(x_r_batch)} vs {len(x_ac_batch)}")
    total = 0.0
    for xr, xa in zip(x_r_batch, x_ac_batch):
        d = _arr(xr) - _arr(xa)
        total += float(d @ d)
    return total / n


def _arr(x) -> np.ndarray:
    return x.to_array() if isinstance(x, StateVector) else np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class _Terms:
    x_r: np.ndarray
    g_sigma: np.ndarray
    g_bias: np.ndarray
    loss: float


def _scenario_terms(network: Network, sample: Sample, params: RestorationParams, eps: float, max_iter: int) -> _Terms:
    x0 = sample.x0 or initial_state_from(sample.z_set, network)
    res = restore(network, sample.z_set, params, x0, eps=eps, max_iter=max_iter)
    if not res.converged:
        raise AcRestoreError(f"restoration did not converge ({res.iterations} iterations)")
    n = network.n_state
    diff = res.x_r.to_array() - sample.x_ac.to_array()
    sens = sensitivities(network, sample.z_set, params, res.x_r)
    m = len(sample.z_set)
    g_sigma = np.zeros(m)
    g_bias = np.zeros(m)
    g_sigma[sens.columns] = (2.0 / n) * (sens.dx_dsigma.T @ diff)
    g_bias[sens.columns] = (2.0 / n) * (sens.dx_dbias.T @ diff)
    return _Terms(res.x_r.to_array(), g_sigma, g_bias, float(diff @ diff) / n)


def _batch_terms(network, batch, params, eps=1e-10, max_iter=50, threads=1):
    def one(sample):
        try:
            return _scenario_terms(network, sample, params, eps, max_iter)
        except AcRestoreError as exc:
            log.warning("scenario %s: %s", sample.scenario_id, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, batch))
    return [one(s) for s in batch]


def grad_sigma(batch: list[Sample], network: Network, params: RestorationParams, restore_eps: float = 1e-10) -> np.ndarray:
    """Gradient of the batch loss with respect to the weights."""
    terms = _batch_terms(network, batch, params, restore_eps)
    if any(t is None for t in terms):
        raise AcRestoreError("restoration failed for part of the batch")
    return np.sum([t.g_sigma for t in terms], axis=0)


def grad_bias(batch: list[Sample], network: Network, params: RestorationParams, restore_eps: float = 1e-10) -> np.ndarray:
    """Gradient of the batch loss with respect to the biases."""
    terms = _batch_terms(network, batch, params, restore_eps)
    if any(t is None for t in terms):
        raise AcRestoreError("restoration failed for part of the batch")
    return np.sum([t.g_bias for t in terms], axis=0)


def batch_loss(batch: list[Sample], network: Network, params: RestorationParams, restore_eps: float = 1e-10) -> float:
    """Loss of the restored batch under ``params`` (restores every scenario)."""
    results = []
    for s in batch:
        r = restore(network, s.z_set, params, s.x0 or initial_state_from(s.z_set, network), eps=restore_eps)
        results.append(r.x_r)
    return loss_F(results, [s.x_ac for s in batch], network.n_state)


def _broadcast(value, m: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(m, float(arr))
    if arr.shape != (m,):
        raise ValueError(f"initial parameter vector has shape {arr.shape}, layout needs ({m},)")
    return arr.copy()


def train(
    dataset: ScenarioDataset | list[Sample],
    network: Network,
    config: TrainingConfig,
    sources: list[str] | None = None,
) -> TrainedParameters:
    """Mini-batch Adam on weights and biases (independent Adam states).

    ``dataset`` is either a :class:`ScenarioDataset` (its training split is
    used, with ``sources`` combined in the given order) or a list of samples.

    Batches are drawn without replacement from a generator keyed by
    ``(seed, iteration)`` and reduced in scenario-id order, so results are
    reproducible regardless of thread count.
    """
    if isinstance(dataset, ScenarioDataset):
        if dataset.network_fingerprint != network.fingerprint():
            raise FingerprintMismatch("dataset was built for a different network")
        samples = dataset_samples(dataset, sources)
    else:
        samples = list(dataset)
    if not samples:
        raise TrainingError("no training samples")
    layout = samples[0].z_set.layout
    fp = layout.fingerprint()
    if any(s.z_set.layout.fingerprint() != fp for s in samples):
        raise TrainingError("training samples use different measurement layouts")
    if config.batch_size > len(samples):
        raise TrainingError(f"batch size {config.batch_size} exceeds {len(samples)} training samples")
    m = len(layout)
    sigma = np.maximum(_broadcast(config.sigma_init, m), SIGMA_MIN)
    bias = _broadcast(config.bias_init, m)
    eta_b = config.eta if config.eta_bias is None else config.eta_bias
    st_sigma = AdamState.fresh(m, config.eta, config.beta1, config.beta2, config.eps_adam)
    st_bias = AdamState.fresh(m, eta_b, config.beta1, config.beta2, config.eps_adam)
    ordered = sorted(samples, key=lambda s: s.scenario_id)
    history, sizes = [], []

    for k in range(1, config.max_iter + 1):
        rng = make_rng(config.seed, "train.batch", k)
        pick = np.sort(rng.choice(len(ordered), size=config.batch_size, replace=False))
        batch = [ordered[i] for i in pick]
        params = RestorationParams(sigma, bias)
        terms = _batch_terms(network, batch, params, config.restore_eps, config.restore_max_iter, config.threads)
        ok = [t for t in terms if t is not None]
        failed = [s.scenario_id for s, t in zip(batch, terms) if t is None]
        if len(failed) * 2 > len(batch):
            raise TrainingError(f"iteration {k}: {len(failed)}/{len(batch)} restorations failed (scenarios {failed})")
        q_sigma = np.zeros(m)
        q_bias = np.zeros(m)
        loss = 0.0
        for t in ok:
            q_sigma += t.g_sigma
            q_bias += t.g_bias
            loss += t.loss
        history.append(loss)
        sizes.append(len(ok))
        st_sigma, sigma = adam_step(st_sigma, sigma, q_sigma)
        st_bias, bias = adam_step(st_bias, bias, q_bias)
        sigma = np.maximum(sigma, SIGMA_MIN)
        log.debug("iteration %d: loss %.6e (%d scenarios)", k, loss, len(ok))

    return TrainedParameters(
        sigma,
        bias,
        history,
        network.fingerprint(),
        fp,
        layout.sources,
        # thread count never changes the result, so it is not part of the record
        {k: v for k, v in asdict(config).items() if k != "threads"},
        sizes,
    )
