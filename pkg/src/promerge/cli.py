"""Command-line surface: suite generation, fine-tuning, merging, evaluation,
sweeps, hardness constructions and embedding dumps.

Exit codes: 0 success, 1 usage/config problems, 2 numeric failure or
divergence, 3 a hardness proof clause failed numerically. Every output file
records the invoking configuration and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, hardness, merge as merge_mod, nn
from .checkpoint import (
    CheckpointFormatError,
    IncompatibleWeightsError,
    load_weights,
    save,
    task_vector,
)
from .harness import SuiteSpec
from .merge import DivergenceError, MergeConfig
from .tensor import NonFiniteError, Tensor


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors (2 is reserved)."""

    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(1)


_PRESETS = (
    "documented presets (all overridable): coefficient training uses learning "
    "rates from {0.1, 0.01} and epochs from {50, 100, 200}; fixed/initial "
    "coefficients default to 0.3 when merging more than two models and are "
    "searched from {0.5, 1.0} for two."
)


def _build_parser() -> _Parser:
    parser = _Parser(prog="promerge", description=__doc__, epilog=_PRESETS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="write a synthetic task-suite spec")
    p.add_argument("--out", required=True, help="output suite spec path (JSON)")
    p.add_argument("--tasks", type=int, default=4, help="number of tasks")
    p.add_argument("--dim", type=int, default=16, help="input dimension")
    p.add_argument("--classes", type=int, default=3, help="classes per task")
    p.add_argument("--train", type=int, default=256, help="training samples per task")
    p.add_argument("--test", type=int, default=256, help="test samples per task")
    p.add_argument("--shots", type=int, default=64, help="validation shots per task")
    p.add_argument("--noise", type=float, default=0.35, help="cluster noise scale")
    p.add_argument("--shared", type=float, default=0.7,
                   help="fraction of each class mean drawn from shared prototypes")
    p.add_argument("--scale", type=float, default=2.0, help="class-mean scale")
    p.add_argument("--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("finetune", help="train the base model and per-task experts")
    p.add_argument("--suite", required=True, help="suite spec path")
    p.add_argument("--out-dir", required=True, help="directory for checkpoints")
    p.add_argument("--hidden", type=int, default=16, help="hidden width")
    p.add_argument("--epochs", type=int, default=40, help="expert epochs")
    p.add_argument("--pretrain-epochs", type=int, default=5, help="pooled base epochs")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--floor", type=float, default=0.9, help="expert accuracy floor")
    p.add_argument("--pretrain-mode", default="pooled", choices=harness.PRETRAIN_MODES,
                   help="how the shared base model is trained")
    p.add_argument("--seed", type=int, default=0, help="training seed")

    p = sub.add_parser("merge", help="merge experts with one method")
    p.add_argument("--suite", required=True, help="suite spec path")
    p.add_argument("--experts-dir", required=True, help="directory from finetune")
    p.add_argument("--method", required=True, choices=merge_mod.METHODS)
    p.add_argument("--out", required=True, help="merged checkpoint path")
    p.add_argument("--coeffs-out", help="write trained coefficients (JSON)")
    p.add_argument("--history-out", help="write loss history (JSON)")
    p.add_argument("--granularity", default="elementwise", choices=merge_mod.GRANULARITIES)
    p.add_argument("--input-mode", default="dual", choices=merge_mod.INPUT_MODES)
    p.add_argument("--coeff", type=float, default=None,
                   help="initial/fixed coefficient (default: 1.0/0.5/0.3 by task count)")
    p.add_argument("--lr", type=float, default=0.01, help="coefficient learning rate")
    p.add_argument("--epochs", type=int, default=50, help="training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--shots", type=int, default=None,
                   help="validation shots to use (default: all in suite)")
    p.add_argument("--seed", type=int, default=0, help="training seed")

    p = sub.add_parser("eval", help="score a checkpoint on a suite")
    p.add_argument("--suite", required=True, help="suite spec path")
    p.add_argument("--checkpoint", required=True, help="weights to score")
    p.add_argument("--hidden", type=int, default=16, help="hidden width")
    p.add_argument("--out", help="also write metrics JSON here")

    p = sub.add_parser("sweep", help="run a cross-product experiment from a config file")
    p.add_argument("--config", required=True, help="sweep config path (JSON)")
    p.add_argument("--out-dir", required=True, help="directory for report.json/report.csv")

    p = sub.add_parser("hardness", help="run an adversarial construction")
    p.add_argument("--theorem", type=int, required=True, choices=(1, 2))
    p.add_argument("--merger", default="task-arith",
                   choices=sorted(set(hardness.REGRESSOR_MERGERS) | set(hardness.CLASSIFIER_MERGERS)))
    p.add_argument("--coeff", type=float, default=0.5, help="merger coefficient")
    p.add_argument("--C", type=float, default=10.0, help="target merged loss")
    p.add_argument("--eps", type=float, default=1e-10, help="expert loss tolerance")
    p.add_argument("--copies", type=int, default=1,
                   help="adversarial point copies (classification only)")
    p.add_argument("--dim", type=int, default=3, help="regressor dimension (regression only)")
    p.add_argument("--w1", help="comma-separated first expert weights (regression only)")
    p.add_argument("--w2", help="comma-separated second expert weights (regression only)")
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("dump-embeddings", help="write final-layer embeddings CSV")
    p.add_argument("--suite", required=True, help="suite spec path")
    p.add_argument("--checkpoint", required=True, help="weights to embed with")
    p.add_argument("--hidden", type=int, default=16, help="hidden width")
    p.add_argument("--out", required=True, help="output CSV path")

    return parser


def _config_echo(args: argparse.Namespace) -> dict:
    skip = {"command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def _load_suite(path: str):
    spec = harness.load_suite_spec(path)
    return harness.generate_suite(spec)


def cmd_gen_tasks(args) -> int:
    spec = SuiteSpec(
        num_tasks=args.tasks, input_dim=args.dim, classes=args.classes,
        train_per_task=args.train, test_per_task=args.test, shots=args.shots,
        noise=args.noise, shared_fraction=args.shared, mean_scale=args.scale,
        seed=args.seed,
    )
    spec.validate()
    harness.save_suite_spec(spec, args.out)
    print(f"wrote suite spec to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    suite = _load_suite(args.suite)
    layers = harness.default_layers(suite.spec, hidden=args.hidden)
    theta_0, experts = harness.finetune_experts(
        layers, suite,
        epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
        pretrain_epochs=args.pretrain_epochs, batch_size=args.batch_size,
        accuracy_floor=args.floor, pretrain_mode=args.pretrain_mode,
    )
    meta = {"command": "finetune", "seed": str(args.seed),
            "config": json.dumps(_config_echo(args), sort_keys=True)}
    os.makedirs(args.out_dir, exist_ok=True)
    theta0_path = os.path.join(args.out_dir, "theta0.ckpt")
    save(theta_0, theta0_path, meta=meta)
    expert_paths = []
    accuracies = []
    for index, expert in enumerate(experts):
        path = os.path.join(args.out_dir, f"expert_{index}.ckpt")
        save(expert, path, meta=meta)
        expert_paths.append(os.path.basename(path))
        task = suite.tasks[index]
        accuracies.append(harness.evaluate_accuracy(layers, expert, task.test_x, task.test_y))
    _write_json(os.path.join(args.out_dir, "experts.json"), {
        "format": "promerge-experts v1",
        "config": _config_echo(args),
        "seed": args.seed,
        "hidden": args.hidden,
        "theta0": "theta0.ckpt",
        "experts": expert_paths,
        "test_accuracies": accuracies,
    })
    for index, acc in enumerate(accuracies):
        print(f"expert {index}: test accuracy {acc:.4f}")
    print(f"wrote checkpoints to {args.out_dir}")
    return 0


def _load_experts(experts_dir: str):
    manifest_path = os.path.join(experts_dir, "experts.json")
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    if manifest.get("format") != "promerge-experts v1":
        raise UsageError(f"{manifest_path} is not an experts manifest")
    theta_0 = load_weights(os.path.join(experts_dir, manifest["theta0"]))
    experts = [load_weights(os.path.join(experts_dir, p)) for p in manifest["experts"]]
    return theta_0, experts, int(manifest.get("hidden", 32))


def cmd_merge(args) -> int:
    suite = _load_suite(args.suite)
    theta_0, experts, hidden = _load_experts(args.experts_dir)
    layers = harness.default_layers(suite.spec, hidden=hidden)
    task_vectors = [
        task_vector(expert, theta_0, source_task=f"task{i}")
        for i, expert in enumerate(experts)
    ]
    config = MergeConfig(
        method=args.method, granularity=args.granularity, input_mode=args.input_mode,
        init_coefficient=args.coeff, learning_rate=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
    )
    config.validate()
    shots = args.shots if args.shots is not None else suite.spec.shots
    validation = suite.validation_inputs(shots)
    coeffs, history = merge_mod.run_method(theta_0, task_vectors, layers, validation, config)
    merged = merge_mod.materialize(theta_0, task_vectors, coeffs)

    meta = {"command": "merge", "seed": str(args.seed),
            "config": json.dumps(_config_echo(args), sort_keys=True)}
    save(merged, args.out, meta=meta)
    print(f"wrote merged checkpoint to {args.out}")
    if args.coeffs_out:
        _write_json(args.coeffs_out, {
            "config": _config_echo(args), "seed": args.seed,
            "coefficients": coeffs.to_json_dict(),
        })
        print(f"wrote coefficients to {args.coeffs_out}")
    if args.history_out:
        _write_json(args.history_out, {
            "config": _config_echo(args), "seed": args.seed,
            "loss_history": history,
        })
        print(f"wrote loss history to {args.history_out}")
    return 0


def cmd_eval(args) -> int:
    suite = _load_suite(args.suite)
    layers = harness.default_layers(suite.spec, hidden=args.hidden)
    weights = load_weights(args.checkpoint)
    if weights.arch_fingerprint != nn.architecture_fingerprint(layers):
        raise UsageError(
            "checkpoint architecture does not match the suite's default model; "
            "pass the right --hidden"
        )
    per_task = harness.per_task_accuracy(layers, weights, suite)
    for index, acc in enumerate(per_task):
        print(f"task {index}: accuracy {acc:.4f}")
    mean_acc = float(np.mean(per_task))
    print(f"mean accuracy {mean_acc:.4f}")
    if args.out:
        _write_json(args.out, {
            "config": _config_echo(args),
            "per_task_accuracy": per_task,
            "mean_accuracy": mean_acc,
        })
    return 0


_SWEEP_KEYS = {
    "format", "suite", "methods", "granularities", "input_modes", "shots",
    "seeds", "learning_rate", "epochs", "batch_size", "init_coefficient",
    "direct_learning_rate", "finetune_epochs", "finetune_learning_rate",
    "hidden", "accuracy_floor", "pretrain_mode",
}


def cmd_sweep(args) -> int:
    with open(args.config) as handle:
        payload = json.load(handle)
    unknown = set(payload) - _SWEEP_KEYS
    if unknown:
        raise UsageError(f"unknown sweep config keys: {sorted(unknown)}")
    if payload.get("format") != "promerge-sweep v1":
        raise UsageError("sweep config must declare format 'promerge-sweep v1'")
    if "suite" not in payload:
        raise UsageError("sweep config needs a 'suite' section")
    spec = SuiteSpec.from_json_dict(payload["suite"])
    kwargs = {}
    for key in ("methods", "granularities", "input_modes", "seeds",
                "learning_rate", "epochs", "batch_size", "init_coefficient",
                "direct_learning_rate", "finetune_epochs",
                "finetune_learning_rate", "hidden", "accuracy_floor",
                "pretrain_mode"):
        if key in payload:
            kwargs[key] = payload[key]
    if "shots" in payload:
        kwargs["shots_list"] = payload["shots"]
    report = harness.run_experiment(spec, **kwargs)

    os.makedirs(args.out_dir, exist_ok=True)
    _write_json(os.path.join(args.out_dir, "report.json"), report.to_json_dict())
    csv_path = os.path.join(args.out_dir, "report.csv")
    header = "# config: " + json.dumps(payload, sort_keys=True) + "\n"
    with open(csv_path, "w") as handle:
        handle.write(header + report.to_csv_text())
    failures = [c for c in report.cells if c.error]
    for cell in failures:
        print(f"cell {cell.method}/{cell.granularity}/{cell.input_mode} "
              f"shots={cell.shots} seed={cell.seed} failed: {cell.error}")
    print(f"wrote report to {args.out_dir} ({len(report.cells)} cells, "
          f"{len(failures)} failed)")
    return 0


def _parse_vector(text: str, dim: int, flag: str) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise UsageError(f"{flag} must be comma-separated numbers") from None
    if values.shape[0] != dim:
        raise UsageError(f"{flag} must have {dim} entries")
    return values


def cmd_hardness(args) -> int:
    if args.theorem == 1:
        if args.merger not in hardness.REGRESSOR_MERGERS:
            raise UsageError(f"merger {args.merger!r} is not defined for regression")
        if args.dim < 2:
            raise UsageError("--dim must be at least 2")
        w1 = np.zeros(args.dim)
        w1[0] = 1.0
        w2 = np.zeros(args.dim)
        w2[1] = 1.0
        if args.w1:
            w1 = _parse_vector(args.w1, args.dim, "--w1")
        if args.w2:
            w2 = _parse_vector(args.w2, args.dim, "--w2")
        merger = hardness.REGRESSOR_MERGERS[args.merger](args.coeff)
        instance = hardness.run_theorem1(
            hardness.LinearRegressor(Tensor(w1)),
            hardness.LinearRegressor(Tensor(w2)),
            merger, args.C, args.eps,
        )
        report = instance.report
    else:
        merger = hardness.CLASSIFIER_MERGERS[args.merger](args.coeff)
        instance = hardness.construct_theorem2_instance(merger, args.C, copies=args.copies)
        report = instance.report

    report = {"config": _config_echo(args), **report}
    if args.out:
        _write_json(args.out, report)
    ok = hardness.report_all_pass(report)
    for name, clause in report["clauses"].items():
        status = "pass" if clause["pass"] else "FAIL"
        print(f"{name}: {status} (value={clause['value']:.6g} "
              f"{clause['op']} {clause['threshold']:.6g})")
    if not ok:
        print("error: hardness: at least one proof clause failed numerically",
              file=sys.stderr)
        return 3
    return 0


def cmd_dump_embeddings(args) -> int:
    suite = _load_suite(args.suite)
    layers = harness.default_layers(suite.spec, hidden=args.hidden)
    weights = load_weights(args.checkpoint)
    rows = harness.dump_final_embeddings(layers, weights, suite)
    width = len(rows[0][2]) if rows else 0
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as handle:
        handle.write("# config: " + json.dumps(_config_echo(args), sort_keys=True) + "\n")
        handle.write("task,label," + ",".join(f"e{i}" for i in range(width)) + "\n")
        for task, label, emb in rows:
            handle.write(f"{task},{label}," + ",".join(f"{v:.12g}" for v in emb) + "\n")
    print(f"wrote {len(rows)} embeddings to {args.out}")
    return 0


_COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "finetune": cmd_finetune,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "hardness": cmd_hardness,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 2
    except hardness.InfeasibleDataError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 2
    except hardness.DegenerateMergerError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 2
    except harness.FinetuneError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 2
    except (UsageError, CheckpointFormatError, IncompatibleWeightsError,
            ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
