"""Command line front end: gen, merge, diagnose, eval, compare.

Exit codes: 0 success, 1 a merging method failed, 2 usage or configuration
error (argparse errors included), 3 numerical failure (non-finite values in
an objective or solve).  All reports are deterministic for a fixed config
and seed: no timestamps, floats written with shortest round-trip repr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .baselines import baseline_delta
from .bundles import (
    BundleFormatError,
    ModelBundle,
    gen_linear_tasks,
    gen_relu_tasks,
    gen_shared_direction_instance,
    load_bundle,
    load_network,
    save_bundle,
    save_network,
    validate_shared_direction_bundle,
)
from .multilayer import (
    LayerMergeRecord,
    MergeReport,
    basis_fraction,
    hybrid_refine,
    layer_basis,
    sequential_merge,
)
from .networks import apply_merged_residual, forward
from .qp import (
    NumericalError,
    build_diagonal_qp,
    build_general_basis_qp,
    calibration_mse,
    linearized_delta_objective,
    merge_geometry,
    merged_delta_from_coefficients,
    objective_value,
    solve_unconstrained,
)
from .subspaces import (
    energy_matrix,
    optimal_basis,
    output_projector,
    captured_energy_pointwise,
)

EXIT_OK = 0
EXIT_METHOD = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

BASELINES = ("soup", "ta", "dare", "ties", "fisher")
QP_METHODS = ("qp-diag", "qp-basis")
LAMBDA_GRID = (0.25, 0.5, 0.75, 1.0)


class MethodFailure(Exception):
    """A merging method could not produce a usable result."""


def _parse_ints(text):
    try:
        return [int(part) for part in str(text).split(",") if part != ""]
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_floats(text):
    try:
        return [float(part) for part in str(text).split(",") if part != ""]
    except ValueError as exc:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from exc


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _select_layers(bundle: ModelBundle, spec: str):
    available = bundle.layers_with_updates
    if spec == "all":
        return available
    chosen = sorted(set(_parse_ints(spec)))
    missing = [l for l in chosen if l not in available]
    if missing:
        raise ValueError(
            f"no residual updates at layer(s) {missing}; bundle has {available}"
        )
    return chosen


def _fisher_diagonals(bundle: ModelBundle, layer: int):
    """Per-task Fisher diagonals for layer N from each task's calibration.

    Surrogate for honest Fisher information: squared gradients of the
    squared-error loss with respect to layer N's weights, summed over the
    task's calibration samples.  grad_j = 2 L_j^T b_j u_j^T.
    """
    fishers = []
    for cs in bundle.calibration:
        geom = merge_geometry(bundle.base, layer, cs)
        total = np.zeros(bundle.base.layer_shape(layer))
        for j in range(len(cs)):
            g = 2.0 * np.outer(
                geom.downstream[j].matrix.T @ geom.residuals[j],
                geom.hidden_inputs[j],
            )
            total += g * g
        fishers.append(total)
    return fishers


def _task_mse_columns(task_ids, task_mse):
    return [task_mse.get(t) for t in task_ids]


def _report_rows(report: MergeReport, task_ids, task_mse):
    rows = []
    for rec in report.steps:
        rows.append(
            [report.method, rec.layer_index, rec.objective_after, report.final_mse]
            + _task_mse_columns(task_ids, task_mse)
            + [rec.captured_fraction]
        )
    return rows


def _report_json(report: MergeReport, task_ids, task_mse):
    return {
        "method": report.method,
        "final_mse": report.final_mse,
        "task_mse": {str(t): task_mse.get(t) for t in task_ids},
        "baseline_mse": report.baseline_mse,
        "layers": [
            {
                "layer": rec.layer_index,
                "basis": rec.basis_id,
                "objective_before": rec.objective_before,
                "objective_after": rec.objective_after,
                "fraction": rec.captured_fraction,
                "coefficients": [[float(v) for v in row] for row in rec.coefficients],
            }
            for rec in report.steps
        ],
    }


def _baseline_params(args, method, layer):
    params = {}
    if method == "ta":
        lam = _parse_floats(args.lam)
        params["lambdas"] = lam[0] if len(lam) == 1 else lam
    elif method == "dare":
        params["keep_prob"] = args.keep_prob
        params["seed"] = args.seed + layer
    elif method == "ties":
        params["density"] = args.density
    return params


def cmd_gen(args) -> int:
    if args.kind == "linear":
        dims = _parse_ints(args.dims or "8,6,5")
        if len(dims) != 3:
            raise ValueError("linear bundles take --dims input,hidden,output")
        merge_layers = _parse_ints(args.merge_layer or "1")
        bundle = gen_linear_tasks(
            dims=tuple(dims),
            n_layers=args.n_layers,
            merge_layer=merge_layers if len(merge_layers) > 1 else merge_layers[0],
            n_tasks=args.tasks,
            n_samples=args.n_calib if args.n_calib is not None else 20,
            delta_scale=args.delta_scale,
            noise=args.noise,
            seed=args.seed,
        )
    elif args.kind == "shared-direction":
        bundle = gen_shared_direction_instance(
            sigmas=_parse_floats(args.sigmas or "1,2"),
            r=args.r,
            c=args.c,
            input_dim=args.input_dim,
            n_samples=args.n_calib if args.n_calib is not None else 12,
            target_task=args.target_task,
            orth_scale=args.orth_scale,
            seed=args.seed,
        )
        validate_shared_direction_bundle(bundle)
        print("assumption validators passed (shared direction, isometry)")
    elif args.kind == "relu":
        dims = _parse_ints(args.dims or "16,12,8,4")
        bundle = gen_relu_tasks(
            dims=tuple(dims),
            merge_layer=int(args.merge_layer or "2"),
            n_tasks=args.tasks,
            n_samples=args.n_calib if args.n_calib is not None else 100,
            n_train=args.n_train,
            train_steps=args.train_steps,
            learning_rate=args.learning_rate,
            input_noise=args.input_noise,
            seed=args.seed,
        )
    else:
        raise ValueError(f"unknown bundle kind {args.kind!r}")
    save_bundle(bundle, args.out)
    n_total = sum(len(cs) for cs in bundle.calibration)
    print(
        f"wrote {args.out}: {bundle.base.depth} layers, "
        f"{len(bundle.task_ids)} tasks, updates at {bundle.layers_with_updates}, "
        f"{n_total} calibration samples, seed {args.seed}"
    )
    return EXIT_OK


def _run_baseline_merge(bundle, layers, method, args, calib):
    current = bundle.base
    records = []
    for layer in layers:
        params = _baseline_params(args, method, layer)
        if method == "fisher":
            params["fishers"] = _fisher_diagonals(bundle, layer)
        delta = baseline_delta(method, bundle.residuals[layer], params)
        if not np.all(np.isfinite(delta)):
            raise NumericalError(f"{method} produced non-finite weights at layer {layer}")
        before, _ = calibration_mse(current, calib)
        current = apply_merged_residual(current, layer, delta)
        after, _ = calibration_mse(current, calib)
        n = len(calib)
        records.append(
            LayerMergeRecord(
                layer_index=layer,
                basis_id=method,
                objective_before=before * n,
                objective_after=after * n,
                coefficients=np.zeros((0, 0)),
            )
        )
    pooled, per_task = calibration_mse(current, calib)
    return current, MergeReport(method, records, pooled, per_task)


def cmd_merge(args) -> int:
    bundle = load_bundle(args.bundle)
    layers = _select_layers(bundle, args.layers)
    calib = bundle.pooled_calibration()
    method = args.method

    if args.mode == "hybrid" and method != "qp-diag":
        raise ValueError("--mode hybrid refines with qp-diag; pick --method qp-diag")

    if method in BASELINES:
        merged, report = _run_baseline_merge(bundle, layers, method, args, calib)
    elif method == "qp-diag":
        deltas_by_layer = {l: bundle.residuals[l] for l in layers}
        if args.mode == "hybrid":
            init_params = {}
            if args.init_method == "ta":
                lam = _parse_floats(args.lam)
                init_params["lambdas"] = lam[0] if len(lam) == 1 else lam
            elif args.init_method == "dare":
                init_params = {"keep_prob": args.keep_prob, "seed": args.seed}
            elif args.init_method == "ties":
                init_params = {"density": args.density}
            elif args.init_method == "fisher":
                init_params = {
                    "fishers": {l: _fisher_diagonals(bundle, l) for l in bundle.layers_with_updates}
                }
            all_deltas = {l: bundle.residuals[l] for l in bundle.layers_with_updates}
            merged, report = hybrid_refine(
                bundle.base,
                all_deltas,
                calib,
                init_method=args.init_method,
                refine_layers=layers,
                init_params=init_params,
                solver=args.solver,
                lo=args.lo,
                hi=args.hi,
                steps=args.steps,
                step_size=args.step_size,
            )
        else:
            merged, report = sequential_merge(
                bundle.base,
                deltas_by_layer,
                calib,
                solver=args.solver,
                lo=args.lo,
                hi=args.hi,
                steps=args.steps,
                step_size=args.step_size,
            )
    elif method == "qp-basis":
        deltas_by_layer = {l: bundle.residuals[l] for l in layers}
        merged, report = sequential_merge(
            bundle.base,
            deltas_by_layer,
            calib,
            solver=args.solver,
            lo=args.lo,
            hi=args.hi,
            steps=args.steps,
            step_size=args.step_size,
            basis_kind=args.basis,
            basis_p=args.p,
            basis_seed=args.seed,
        )
    else:
        raise ValueError(f"unknown method {method!r}")

    if not all(np.all(np.isfinite(W)) for W in merged.layers):
        raise NumericalError("merged model contains non-finite weights")

    if args.out:
        save_network(merged, args.out)
    task_ids = bundle.task_ids
    if args.report:
        if args.format == "csv":
            header = ["method", "layer", "objective", "mse"] + [
                f"task_mse_{t}" for t in task_ids
            ] + ["fraction"]
            _write_csv(args.report, header, _report_rows(report, task_ids, report.task_mse))
        else:
            with open(args.report, "w") as fh:
                json.dump(_report_json(report, task_ids, report.task_mse), fh, indent=1, sort_keys=True)
                fh.write("\n")
    print(f"{report.method}: final calibration mse {report.final_mse!r}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    bundle = load_bundle(args.bundle)
    available = bundle.layers_with_updates
    if args.layer is not None:
        layer = args.layer
        if layer not in available:
            raise ValueError(f"no residual updates at layer {layer}; bundle has {available}")
    elif len(available) == 1:
        layer = available[0]
    else:
        raise ValueError(f"bundle has updates at {available}; pick one with --layer")

    calib = bundle.pooled_calibration()
    deltas = bundle.residuals[layer]
    geometry = merge_geometry(bundle.base, layer, calib)
    S = energy_matrix(geometry.residuals)
    c = bundle.base.output_dim
    r = deltas[0].delta.shape[0]
    n = len(calib)
    p_cap = min(r, c)
    p_max = args.p_max if args.p_max is not None else p_cap
    if p_max > p_cap:
        print(f"note: clipping p to {p_cap} (min of layer dim {r}, output dim {c})")
        p_max = p_cap
    if p_max < 1:
        raise ValueError("p range is empty")

    chains = []
    for kind, label in (("eigen", "eigen"), ("standard", "standard"), ("svd", "svd")):
        basis = layer_basis(kind, p_max, args.seed, deltas, geometry)
        chains.append((label, basis))
    for i in range(args.random_seeds):
        seed = args.seed + i
        basis = layer_basis("random", p_max, seed, deltas, geometry)
        chains.append((f"random({seed})", basis))

    opt_relaxed = {}
    for p in range(1, min(p_max, c) + 1):
        P_opt = output_projector(np.eye(c), optimal_basis(S, p))
        opt_relaxed[p] = S.total_energy - float(np.einsum("ij,ji->", S.S, P_opt))

    rows = []
    for label, chain in chains:
        for p in range(1, chain.p + 1):
            Q = chain.prefix(p)
            if geometry.fixed_downstream:
                P_model = output_projector(geometry.downstream[0].matrix, Q)
                captured = float(np.einsum("ij,ji->", S.S, P_model))
            else:
                projectors = [output_projector(d.matrix, Q) for d in geometry.downstream]
                captured = captured_energy_pointwise(geometry.residuals, projectors)
            fraction = 1.0 if S.total_energy == 0 else captured / S.total_energy
            relaxed = S.total_energy - captured
            gap = relaxed - opt_relaxed[min(p, c)]
            qp = build_general_basis_qp(bundle.base, deltas, calib, Q, geometry=geometry)
            qp_mse = objective_value(qp, solve_unconstrained(qp)) / n
            rows.append([label, p, fraction, relaxed, qp_mse, gap])

    header = ["basis", "p", "fraction", "relaxed_loss", "qp_mse", "gap"]
    if args.out:
        _write_csv(args.out, header, rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(_fmt(v) for v in row))
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_network(args.model)
    bundle = load_bundle(args.bundle)
    calib = bundle.pooled_calibration()
    pooled, per_task = calibration_mse(net, calib)
    metrics = {
        "mse": pooled,
        "task_mse": {str(t): v for t, v in per_task.items()},
        "n_samples": len(calib),
    }
    targets = calib.targets
    one_hot = bool(
        np.all((targets == 0.0) | (targets == 1.0))
        and np.all(targets.sum(axis=1) == 1.0)
    )
    if one_hot:
        hits = 0
        for j in range(len(calib)):
            pred = forward(net, calib.inputs[j])
            hits += int(np.argmax(pred) == np.argmax(targets[j]))
        metrics["accuracy"] = hits / len(calib)
    text = json.dumps(metrics, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    bundle = load_bundle(args.bundle)
    available = bundle.layers_with_updates
    if args.layer is not None:
        layer = args.layer
        if layer not in available:
            raise ValueError(f"no residual updates at layer {layer}; bundle has {available}")
    elif len(available) == 1:
        layer = available[0]
    else:
        raise ValueError(f"bundle has updates at {available}; pick one with --layer")

    calib = bundle.pooled_calibration()
    deltas = bundle.residuals[layer]
    geometry = merge_geometry(bundle.base, layer, calib)
    task_ids = bundle.task_ids
    n = len(calib)
    r = deltas[0].delta.shape[0]
    c = bundle.base.output_dim
    p = args.p if args.p is not None else min(r, c)

    specs = [("base", {}), ("soup", {})]
    for lam in _parse_floats(args.lambda_grid):
        specs.append((f"ta({_fmt(lam)})", {"kind": "ta", "lambdas": lam}))
    specs.append(("dare", {"kind": "dare"}))
    specs.append(("ties", {"kind": "ties"}))
    specs.append(("fisher", {"kind": "fisher"}))
    specs.append(("qp-diag", {"kind": "qp-diag"}))
    specs.append((f"qp-basis(eigen,{p})", {"kind": "qp-basis"}))

    rows = []
    objectives = {}
    any_failed = False
    for name, spec in specs:
        kind = spec.get("kind", name)
        try:
            if name == "base":
                delta = np.zeros(deltas[0].delta.shape)
            elif kind == "soup" or name == "soup":
                delta = baseline_delta("soup", deltas, {})
            elif kind == "ta":
                delta = baseline_delta("ta", deltas, {"lambdas": spec["lambdas"]})
            elif kind == "dare":
                delta = baseline_delta(
                    "dare", deltas, {"keep_prob": args.keep_prob, "seed": args.seed + layer}
                )
            elif kind == "ties":
                delta = baseline_delta("ties", deltas, {"density": args.density})
            elif kind == "fisher":
                delta = baseline_delta(
                    "fisher", deltas, {"fishers": _fisher_diagonals(bundle, layer)}
                )
            elif kind == "qp-diag":
                qp = build_diagonal_qp(bundle.base, deltas, calib, geometry=geometry)
                delta = merged_delta_from_coefficients(deltas, solve_unconstrained(qp))
            elif kind == "qp-basis":
                basis = layer_basis("eigen", p, args.seed, deltas, geometry)
                qp = build_general_basis_qp(bundle.base, deltas, calib, basis, geometry=geometry)
                delta = merged_delta_from_coefficients(
                    deltas, solve_unconstrained(qp), basis=basis
                )
            else:
                raise MethodFailure(f"unknown method {name!r}")
            if not np.all(np.isfinite(delta)):
                raise NumericalError(f"{name} produced non-finite weights")
            objective = linearized_delta_objective(
                bundle.base, layer, delta, calib, geometry=geometry
            )
            merged = apply_merged_residual(bundle.base, layer, delta)
            mse, per_task = calibration_mse(merged, calib)
            objectives[name] = objective
            rows.append(
                [name, layer, objective, mse]
                + _task_mse_columns(task_ids, per_task)
                + ["ok"]
            )
        except NumericalError:
            raise
        except Exception as exc:  # a single method failing should not kill the table
            any_failed = True
            rows.append([name, layer, None, None] + [None] * len(task_ids) + ["failed"])
            print(f"method {name} failed: {exc}", file=sys.stderr)

    header = ["method", "layer", "objective", "mse"] + [
        f"task_mse_{t}" for t in task_ids
    ] + ["status"]
    if args.out:
        _write_csv(args.out, header, rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(_fmt(v) for v in row))

    if "qp-diag" in objectives:
        tol = 1e-8 * max(1.0, objectives.get("base", 1.0))
        feasible = [
            name
            for name in objectives
            if name == "base"
            or name == "soup"
            or name.startswith("ta(")
            or name in ("dare", "ties")
        ]
        for name in feasible:
            if objectives["qp-diag"] > objectives[name] + tol:
                print(
                    f"dominance violated: qp-diag objective {objectives['qp-diag']!r} "
                    f"> {name} objective {objectives[name]!r}",
                    file=sys.stderr,
                )
                return EXIT_METHOD
    return EXIT_METHOD if any_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeqp",
        description="Merge task-specific weight updates by solving small QPs "
        "over calibration data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic model bundle")
    p_gen.add_argument("--kind", choices=("linear", "shared-direction", "relu"), default="linear")
    p_gen.add_argument("--out", required=True, help="bundle JSON path")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--dims", help="comma dims: linear d,r,c / relu d,h1,...,c")
    p_gen.add_argument("--n-layers", type=int, default=2, help="linear: layer count")
    p_gen.add_argument("--merge-layer", help="layer index (linear allows a comma list)")
    p_gen.add_argument("--tasks", type=int, default=3)
    p_gen.add_argument("--n-calib", type=int, default=None,
                       help="calibration samples per task (generator default when omitted)")
    p_gen.add_argument("--delta-scale", type=float, default=0.5)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--sigmas", help="shared-direction strengths, e.g. 1,2")
    p_gen.add_argument("--r", type=int, default=4)
    p_gen.add_argument("--c", type=int, default=6)
    p_gen.add_argument("--input-dim", type=int, default=5)
    p_gen.add_argument("--target-task", type=int, default=0)
    p_gen.add_argument("--orth-scale", type=float, default=0.1)
    p_gen.add_argument("--n-train", type=int, default=60)
    p_gen.add_argument("--train-steps", type=int, default=25)
    p_gen.add_argument("--learning-rate", type=float, default=0.05)
    p_gen.add_argument("--input-noise", type=float, default=0.3)
    p_gen.set_defaults(func=cmd_gen)

    p_merge = sub.add_parser("merge", help="merge a bundle's task updates")
    p_merge.add_argument("--bundle", required=True)
    p_merge.add_argument(
        "--method",
        required=True,
        choices=BASELINES + QP_METHODS,
    )
    p_merge.add_argument("--layers", default="all", help="all or comma list, e.g. 1,2")
    p_merge.add_argument("--mode", choices=("sequential", "hybrid"), default="sequential")
    p_merge.add_argument("--init-method", choices=BASELINES, default="soup",
                         help="hybrid mode: baseline applied before refinement")
    p_merge.add_argument("--lambda", dest="lam", default="1.0", help="ta weights")
    p_merge.add_argument("--keep-prob", type=float, default=0.5)
    p_merge.add_argument("--density", type=float, default=0.5)
    p_merge.add_argument("--seed", type=int, default=0)
    p_merge.add_argument("--basis", choices=("eigen", "standard", "svd", "random"),
                         default="eigen", help="qp-basis direction family")
    p_merge.add_argument("--p", type=int, default=None, help="qp-basis direction count")
    p_merge.add_argument("--solver", choices=("box", "exact"), default="box")
    p_merge.add_argument("--lo", type=float, default=0.0)
    p_merge.add_argument("--hi", type=float, default=1.0)
    p_merge.add_argument("--steps", type=int, default=500)
    p_merge.add_argument("--step-size", type=float, default=1e-2)
    p_merge.add_argument("--out", help="merged model JSON path")
    p_merge.add_argument("--report", help="report path")
    p_merge.add_argument("--format", choices=("csv", "json"), default="csv")
    p_merge.set_defaults(func=cmd_merge)

    p_diag = sub.add_parser("diagnose", help="captured-energy sweep across bases")
    p_diag.add_argument("--bundle", required=True)
    p_diag.add_argument("--layer", type=int, default=None)
    p_diag.add_argument("--p-max", type=int, default=None)
    p_diag.add_argument("--random-seeds", type=int, default=5,
                        help="number of random-basis chains")
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--out", help="CSV path (stdout when omitted)")
    p_diag.set_defaults(func=cmd_diagnose)

    p_eval = sub.add_parser("eval", help="evaluate a model on bundle calibration data")
    p_eval.add_argument("--model", required=True, help="network JSON path")
    p_eval.add_argument("--bundle", required=True)
    p_eval.add_argument("--out", help="metrics JSON path (stdout when omitted)")
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="one table: baselines vs QP merges")
    p_cmp.add_argument("--bundle", required=True)
    p_cmp.add_argument("--layer", type=int, default=None)
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.add_argument("--lambda-grid", default="0.25,0.5,0.75,1.0")
    p_cmp.add_argument("--keep-prob", type=float, default=0.5)
    p_cmp.add_argument("--density", type=float, default=0.5)
    p_cmp.add_argument("--p", type=int, default=None, help="qp-basis direction count")
    p_cmp.add_argument("--out", help="CSV path (stdout when omitted)")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MethodFailure as exc:
        print(f"method failure: {exc}", file=sys.stderr)
        return EXIT_METHOD
    except (BundleFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
