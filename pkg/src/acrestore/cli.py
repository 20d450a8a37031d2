"""Command-line front end: ``acrestore {gen,train,restore,eval,check}``.

Exit codes: 0 success, 2 input error, 3 non-convergence, 4 fingerprint
mismatch, 5 check failure. Every invocation writes a ``run.json`` manifest
next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .benchmark import METHODS, evaluate_methods, format_table, write_csv, write_json
from .diagnostics import CHECK_NOISE, jacobian_check, sensitivity_check
from .errors import (
    AcRestoreError,
    CaseFormatError,
    CaseValidationError,
    ConvergenceError,
    FingerprintMismatch,
    PowerFlowError,
    TrainingError,
    UnobservableError,
)
from .network import load_case
from .powerflow import jacobian_H
from .restoration import MeasurementSet, RestorationParams, initial_state_from, restore
from .scenarios import CorruptionSpec, ScenarioDataset, build_dataset, standard_suite
from .seeding import default_seed
from .sensitivity import sensitivities
from .training import TrainedParameters, TrainingConfig, train

log = logging.getLogger("acrestore")

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_FINGERPRINT, EXIT_CHECK = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and p.name != "run.json":
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, args, inputs: dict[str, Path], outputs: list[str], extra=None) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "command": args.command,
        "flags": flags,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": sorted(outputs),
        "versions": {"acrestore": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _load_network(path: Path, no_shunt: bool = False):
    net = load_case(_existing(path, "case file"))
    return net.with_bus_shunt_in_h(False) if no_shunt else net


def _load_dataset(path: Path) -> ScenarioDataset:
    if not (_existing(path, "dataset directory") / "manifest.json").exists():
        raise InputError(f"not a dataset directory (no manifest.json): {path}")
    return ScenarioDataset.load(path)


def _float_list(text: str):
    parts = [float(t) for t in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def cmd_gen(args) -> int:
    net = _load_network(args.case, args.no_bus_shunt_in_h)
    if args.count < 1:
        raise InputError("--count must be >= 1")
    spec = CorruptionSpec.load(_existing(args.corruption_spec, "corruption spec")) if args.corruption_spec else standard_suite()
    ds = build_dataset(
        net, args.count, args.std, args.seed, spec, args.train_fraction, args.independent_pq, args.threads
    )
    ds.save(args.out)
    inputs = {"case": args.case}
    if args.corruption_spec:
        inputs["corruption_spec"] = args.corruption_spec
    n_train, n_test = len(ds.ids("train")), len(ds.ids("test"))
    _write_manifest(args.out, args, inputs, ["case.json", "scenarios.json", "manifest.json", "truth/", "sources/"],
                    {"seed": args.seed, "scenarios": {"train": n_train, "test": n_test, "dropped": ds.provenance["dropped"]}})
    print(f"wrote {len(ds.scenarios)} scenarios ({n_train} train / {n_test} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_dataset(args.dataset)
    sources = args.sources.split(",") if args.sources else ds.sources
    missing = [s for s in sources if s not in ds.sources]
    if missing:
        raise InputError(f"dataset has no source(s) {missing}; available: {ds.sources}")
    try:
        cfg = TrainingConfig(
            eta=args.eta,
            beta1=args.beta1,
            beta2=args.beta2,
            eps_adam=args.eps_adam,
            batch_size=args.batch,
            max_iter=args.iters,
            sigma_init=_float_list(args.sigma_init),
            bias_init=_float_list(args.bias_init),
            seed=args.seed,
            restore_eps=args.restore_eps,
            eta_bias=args.eta_bias,
            threads=args.threads,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    n_train = len(ds.ids("train"))
    if cfg.batch_size > n_train:
        raise InputError(f"--batch {cfg.batch_size} exceeds the {n_train} training scenarios")
    tp = train(ds, ds.network, cfg, sources)
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    tp.save(out)
    loss_csv = out.with_suffix(".loss.csv")
    tp.write_loss_csv(loss_csv)
    _write_manifest(out.parent, args, {"dataset": args.dataset}, [out.name, loss_csv.name], {"seed": args.seed})
    print(f"loss {tp.loss_history[0]:.6e} -> {tp.loss_history[-1]:.6e} after {cfg.max_iter} iterations; wrote {out}")
    return EXIT_OK


def _dump_sensitivities(path: Path, bundle) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "state", "slot", "value"])
        for kind, mat in (("sigma", bundle.dx_dsigma), ("bias", bundle.dx_dbias)):
            for i in range(mat.shape[0]):
                for k, slot in enumerate(bundle.columns):
                    w.writerow([kind, i, int(slot), repr(float(mat[i, k]))])


def cmd_restore(args) -> int:
    net = _load_network(args.case, args.no_bus_shunt_in_h)
    data = json.loads(_existing(args.measurements, "measurement file").read_text(encoding="utf-8"))
    z = MeasurementSet.from_json(data, net)
    inputs = {"case": args.case, "measurements": args.measurements}
    if args.params:
        tp = TrainedParameters.load(_existing(args.params, "parameter file"))
        tp.check_compatible(net, z)
        params = tp.params
        inputs["params"] = args.params
    else:
        params = RestorationParams.unit(len(z))
    res = restore(net, z, params, initial_state_from(z, net), eps=args.eps, max_iter=args.max_iter, damped=args.damped)
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res.to_json(net), indent=1) + "\n", encoding="utf-8")
    outputs = [out.name]
    if args.dump_sens:
        _dump_sensitivities(args.dump_sens, sensitivities(net, z, params, res.x_r))
        outputs.append(str(args.dump_sens))
    _write_manifest(out.parent, args, inputs, outputs)
    status = "converged" if res.converged else "did NOT converge"
    print(f"{status} in {res.iterations} iterations, J = {res.objective:.6e}; wrote {out}")
    return EXIT_OK if res.converged else EXIT_CONVERGENCE


def cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset)
    if not ds.ids("test"):
        raise InputError(f"dataset {args.dataset} has an empty test split")
    trained = {}
    for p in args.params or []:
        tp = TrainedParameters.load(_existing(p, "parameter file"))
        if tp.network_fingerprint != ds.network_fingerprint:
            raise FingerprintMismatch(f"{p} was trained for network {tp.network_fingerprint}, dataset uses {ds.network_fingerprint}")
        trained["+".join(tp.sources)] = tp
    methods = METHODS if args.methods == "all" else tuple(args.methods.split(","))
    bad = set(methods) - set(METHODS)
    if bad:
        raise InputError(f"unknown method(s) {sorted(bad)}; choose from {', '.join(METHODS)}")
    combine = [c.split(",") for c in args.combine or []]
    for c in combine:
        missing = [s for s in c if s not in ds.sources]
        if missing:
            raise InputError(f"--combine names unknown source(s) {missing}")
    sources = args.sources.split(",") if args.sources else None
    reports = evaluate_methods(ds, ds.network, trained, sources, combine, methods, eps=args.eps, threads=args.threads)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_csv(reports, out / "report.csv")
    write_json(reports, out / "report.json")
    table = format_table(reports)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    inputs = {"dataset": args.dataset}
    inputs.update({f"params[{k}]": p for k, p in enumerate(args.params or [])})
    _write_manifest(out, args, inputs, ["report.csv", "report.json", "report.txt"])
    if args.table:
        print(table)
    else:
        print(f"wrote {out / 'report.csv'}, {out / 'report.json'}")
    return EXIT_OK


def _broken_jacobian(network, x, layout):
    H = jacobian_H(network, x, layout).copy()
    H[0, 0] += 1e-3
    return H


def cmd_check(args) -> int:
    net = _load_network(args.case, args.no_bus_shunt_in_h)
    run_grad = args.grad or not args.sens
    run_sens = args.sens or not args.grad
    results = []
    if run_grad:
        jac = _broken_jacobian if args.break_jacobian else jacobian_H
        results.append(jacobian_check(net, args.states, args.seed, jacobian=jac))
    if run_sens:
        results.extend(sensitivity_check(net, args.seed, args.noise, args.entries))
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        print(f"{mark} {r.name:<20} max rel error {r.max_error:.3e} (tol {r.tolerance:g}) worst: {r.worst}")
    failed = [r for r in results if not r.passed]
    _write_manifest(args.out, args, {"case": args.case}, [],
                    {"results": [{"name": r.name, "max_error": r.max_error, "passed": r.passed} for r in results]})
    if failed:
        worst = max(failed, key=lambda r: r.max_error / r.tolerance)
        print(f"check failed: {worst.name} at {worst.worst}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    threads = os.cpu_count() or 1
    seed = default_seed()
    p = argparse.ArgumentParser(prog="acrestore", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, shunt=False):
        sp.add_argument("--threads", type=int, default=threads, help="scenario worker pool size (default: %(default)s)")
        if shunt:
            sp.add_argument("--no-bus-shunt-in-h", action="store_true",
                            help="leave bus shunt terms out of the injection channels of h(x)")

    g = sub.add_parser("gen", help="generate a synthetic scenario dataset")
    g.add_argument("case", type=Path)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--std", type=float, default=0.1, help="load multiplier standard deviation")
    g.add_argument("--seed", type=int, default=seed)
    g.add_argument("--corruption-spec", type=Path, help="JSON corruption spec (default: built-in two-source suite)")
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--independent-pq", action="store_true", help="draw separate multipliers for reactive demand")
    g.add_argument("--out", type=Path, required=True)
    common(g, shunt=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="learn weights and biases on a dataset's training split")
    t.add_argument("dataset", type=Path)
    t.add_argument("--sources", help="comma-separated source labels to combine (default: all)")
    t.add_argument("--eta", type=float, default=0.01)
    t.add_argument("--eta-bias", type=float, default=None, help="learning rate for biases (default: --eta)")
    t.add_argument("--beta1", type=float, default=0.9)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--eps-adam", type=float, default=1e-8)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--iters", type=int, default=200)
    t.add_argument("--sigma-init", default="1.0", help="scalar or comma-separated vector")
    t.add_argument("--bias-init", default="0.0", help="scalar or comma-separated vector")
    t.add_argument("--restore-eps", type=float, default=1e-10)
    t.add_argument("--seed", type=int, default=seed)
    t.add_argument("--out", type=Path, required=True, help="parameter JSON; loss history goes to <out>.loss.csv")
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore one measurement set")
    r.add_argument("case", type=Path)
    r.add_argument("measurements", type=Path)
    r.add_argument("--params", type=Path, help="trained parameters (default: unit weights, zero bias)")
    r.add_argument("--eps", type=float, default=1e-6)
    r.add_argument("--max-iter", type=int, default=50)
    r.add_argument("--damped", action="store_true", help="halve steps that increase the objective")
    r.add_argument("--dump-sens", type=Path, help="write sensitivity matrices as CSV")
    r.add_argument("--out", type=Path, required=True)
    common(r, shunt=True)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="compare methods on a dataset's test split")
    e.add_argument("dataset", type=Path)
    e.add_argument("--params", type=Path, nargs="*", help="trained parameter files, matched to sources by label")
    e.add_argument("--methods", default="all", help=f"'all' or a comma list of {', '.join(METHODS)}")
    e.add_argument("--sources", help="comma-separated single sources to report (default: all)")
    e.add_argument("--combine", action="append", help="comma-separated sources to merge (repeatable)")
    e.add_argument("--eps", type=float, default=1e-6)
    e.add_argument("--table", action="store_true", help="print the text table")
    e.add_argument("--out", type=Path, required=True)
    common(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="finite-difference checks of the analytic derivatives")
    c.add_argument("case", type=Path)
    c.add_argument("--grad", action="store_true", help="check the measurement Jacobian")
    c.add_argument("--sens", action="store_true", help="check the restoration sensitivities")
    c.add_argument("--seed", type=int, default=seed)
    c.add_argument("--states", type=int, default=20, help="random states for the Jacobian check")
    c.add_argument("--entries", type=int, default=None, help="sensitivity columns to sample (default: all)")
    c.add_argument("--noise", type=float, default=CHECK_NOISE, help="measurement noise of the sensitivity instance")
    c.add_argument("--out", type=Path, default=Path("."), help="directory for run.json")
    c.add_argument("--break-jacobian", action="store_true", help=argparse.SUPPRESS)
    common(c, shunt=True)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except FingerprintMismatch as exc:
        print(f"error: fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ConvergenceError, PowerFlowError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except CaseValidationError as exc:
        print("error: invalid case:\n  " + "\n  ".join(exc.violations), file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, CaseFormatError, UnobservableError, AcRestoreError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
