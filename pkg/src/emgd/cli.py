"""Command-line front end: solve | run-toy | run-pcl | build-splits | report.

Data goes to stdout or files under --out, diagnostics go to stderr. Exit
codes: 0 success, 1 input error, 2 solver non-convergence (solve), 3 mid-run
numeric failure (run-pcl, reported with the failing tick). Config documents
are parsed strictly: unknown keys are rejected by name. All randomness flows
from the single top-level seed through named substreams, so identical
configs produce byte-identical outputs. EMGD_LOG selects stderr verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment, rehearsal, solver, streams
from .errors import EmgdError, ConfigError, NumericError
from .net import Network

log = logging.getLogger("emgd")


def _configure_logging() -> None:
    level = os.environ.get("EMGD_LOG", "warning").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _check_keys(doc: dict, allowed, context: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown field: {context}.{sorted(unknown)[0]}")


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


_SYNTH_KEYS = {"num_classes", "input_dim", "samples_per_class", "test_per_class",
               "noise_sigma"}
_IDX_KEYS = {"train_images", "train_labels", "test_images", "test_labels"}


def _build_dataset(doc: dict, seed: int) -> streams.Dataset:
    _check_keys(doc, {"synthetic", "idx"}, "dataset")
    if ("synthetic" in doc) == ("idx" in doc):
        raise ConfigError("dataset needs exactly one of: synthetic, idx")
    if "synthetic" in doc:
        spec = doc["synthetic"]
        _check_keys(spec, _SYNTH_KEYS, "dataset.synthetic")
        return streams.synthetic_dataset(
            num_classes=int(spec.get("num_classes", 12)),
            input_dim=int(spec.get("input_dim", 32)),
            samples_per_class=int(spec.get("samples_per_class", 50)),
            test_per_class=int(spec.get("test_per_class", 20)),
            noise_sigma=float(spec.get("noise_sigma", 0.1)),
            seed=seed,
        )
    spec = doc["idx"]
    _check_keys(spec, _IDX_KEYS, "dataset.idx")
    for key in _IDX_KEYS:
        if key not in spec:
            raise ConfigError(f"dataset.idx missing field: {key}")
    train_x, train_y = streams.load_idx(spec["train_images"], spec["train_labels"])
    test_x, test_y = streams.load_idx(spec["test_images"], spec["test_labels"])
    return streams.Dataset(train_x, train_y, test_x, test_y)


_SPLIT_KEYS = {"num_tasks", "label_bounds", "overlap", "serial", "batch_size", "epochs"}


def _build_split(doc: dict, dataset: streams.Dataset, seed: int, serial_flag: bool,
                 overlap_flag):
    _check_keys(doc, _SPLIT_KEYS, "split")
    batch_size = int(doc.get("batch_size", 128))
    epochs = int(doc.get("epochs", 1))
    bounds = doc.get("label_bounds", [2, 15])
    specs, timeline = streams.build_parallel_split(
        dataset,
        num_tasks=int(doc.get("num_tasks", 3)),
        label_bounds=(int(bounds[0]), int(bounds[1])),
        seed=seed,
        overlap_fraction=float(overlap_flag if overlap_flag is not None
                               else doc.get("overlap", 0.0)),
        batch_size=batch_size,
        epochs=epochs,
        serial=bool(serial_flag or doc.get("serial", False)),
    )
    return specs, timeline, batch_size, epochs


_RUN_KEYS = {"method", "editing", "gamma", "gamma_heads", "temperature",
             "capacity_per_class", "eta_edit", "edit_iterations", "fd_eps",
             "clamp", "freeze_finished_heads", "memory_batch_size", "eval_every",
             "eval_mode", "tol", "max_iter", "snapshot_buffer"}
_NET_KEYS = {"hidden", "feature_dim"}
_TOP_KEYS = {"dataset", "split", "manifest", "run", "net", "seed"}


def _run_config(doc: dict, seed: int, batch_size: int, epochs: int,
                method_flag, editing_flag) -> experiment.RunConfig:
    _check_keys(doc, _RUN_KEYS, "run")
    return experiment.RunConfig(
        method=method_flag or doc.get("method", "emgd_gs"),
        editing=editing_flag or doc.get("editing", "none"),
        gamma=float(doc.get("gamma", 0.05)),
        gamma_heads=float(doc.get("gamma_heads", 0.05)),
        batch_size=batch_size,
        epochs=epochs,
        temperature=float(doc.get("temperature", 1.0)),
        eval_every=int(doc.get("eval_every", 0)),
        seed=seed,
        memory_batch_size=(int(doc["memory_batch_size"])
                           if "memory_batch_size" in doc else None),
        capacity_per_class=int(doc.get("capacity_per_class", 5)),
        eta_edit=float(doc.get("eta_edit", 0.05)),
        edit_iterations=int(doc.get("edit_iterations", 1)),
        fd_eps=float(doc.get("fd_eps", 1e-4)),
        clamp=bool(doc.get("clamp", True)),
        freeze_finished_heads=bool(doc.get("freeze_finished_heads", False)),
        tol=float(doc.get("tol", 1e-8)),
        max_iter=int(doc.get("max_iter", 250)),
    )


def _build_net(doc: dict, input_dim: int, seed: int) -> Network:
    _check_keys(doc, _NET_KEYS, "net")
    hidden = [int(h) for h in doc.get("hidden", [100])]
    feature = int(doc.get("feature_dim", 64))
    return Network([input_dim, *hidden, feature],
                   seed=streams.derive_seed(seed, "net-init"))


def cmd_solve(args) -> int:
    try:
        doc = json.loads(sys.stdin.read())
    except json.JSONDecodeError as err:
        print(f"error: request is not valid JSON: {err}", file=sys.stderr)
        return 1
    result = solver.solve_request(doc)
    print(json.dumps(result, sort_keys=True))
    return 0 if result["converged"] else 2


def cmd_run_toy(args) -> int:
    trace = experiment.run_toy(
        method=args.method or "emgd_gs",
        iterations=args.iters,
        step=args.step,
        join_tick=args.join_tick,
        start=(args.start[0], args.start[1]),
        temperature=args.temperature,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "toy_trace.csv").write_text(experiment.toy_trace_csv(trace))
    experiment.dump_json(experiment.toy_summary(trace, args.iters),
                         out / "toy_summary.json")
    log.info("toy run (%s) written to %s", trace.method, out)
    return 0


def cmd_run_pcl(args) -> int:
    doc = _load_config(args.config)
    _check_keys(doc, _TOP_KEYS, "config")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 1234))
    if "dataset" not in doc:
        raise ConfigError("config missing field: dataset")
    dataset = _build_dataset(doc["dataset"], seed)

    if "manifest" in doc:
        manifest = streams.read_manifest(doc["manifest"])
        specs, timeline = streams.specs_from_manifest(manifest, dataset)
        batch_size = int(manifest.get("batch_size", 128))
        epochs = int(manifest.get("epochs", 1))
    else:
        specs, timeline, batch_size, epochs = _build_split(
            doc.get("split", {}), dataset, seed, args.serial, args.overlap
        )

    run_doc = doc.get("run", {})
    cfg = _run_config(run_doc, seed, batch_size, epochs, args.method, args.editing)
    eval_mode = args.eval_mode or run_doc.get("eval_mode", "task")
    eval_mode = {"task-incremental": "task", "class-incremental": "class"}.get(
        eval_mode, eval_mode
    )
    net = _build_net(doc.get("net", {}), dataset.input_dim, seed)
    buffer = rehearsal.MemoryBuffer(cfg.capacity_per_class)

    try:
        result = experiment.run_pcl(specs, timeline, net, buffer, cfg)
    except NumericError as err:
        print(f"error: numeric failure at tick {err.tick}: {err}", file=sys.stderr)
        return 3

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tick_log.csv").write_text(experiment.tick_log_csv(result.tick_rows))
    experiment.dump_json(
        experiment.metrics_document(result, cfg, eval_mode), out / "metrics.json"
    )
    if run_doc.get("snapshot_buffer", False):
        rehearsal.save_buffer_snapshot(result.buffer, out / "buffer_snapshot.bin")
    log.info("run (%s/%s, seed %d) written to %s", cfg.method, cfg.editing, seed, out)
    return 0


def cmd_build_splits(args) -> int:
    # accepts the same document as run-pcl so one config serves both commands
    doc = _load_config(args.config)
    _check_keys(doc, _TOP_KEYS, "config")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 1234))
    if "dataset" not in doc:
        raise ConfigError("config missing field: dataset")
    dataset = _build_dataset(doc["dataset"], seed)
    specs, timeline, batch_size, epochs = _build_split(
        doc.get("split", {}), dataset, seed, args.serial, args.overlap
    )
    manifest = streams.split_manifest(
        specs, timeline, seed, batch_size, epochs, dataset_info=doc["dataset"]
    )
    streams.write_manifest(manifest, args.out)
    log.info("split manifest written to %s", args.out)
    return 0


def _metric_fields(path: Path) -> tuple:
    doc = json.loads(path.read_text())
    for key in ("A_final", "F_final"):
        if key not in doc:
            raise ConfigError(f"incomplete metrics file {path}: missing {key}")
    return (
        str(doc.get("method", "?")),
        str(doc.get("editing", "none")),
        int(doc.get("seed", -1)),
        float(doc["A_final"]),
        float(doc["F_final"]),
    )


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    files = sorted(run_dir.glob("**/metrics*.json"))
    if not files:
        print(f"error: no metrics files under {run_dir}", file=sys.stderr)
        return 1
    rows = [_metric_fields(p) for p in files]

    groups: dict = {}
    for method, editing, seed, a, f in rows:
        groups.setdefault((method, editing), []).append((seed, a, f))

    def spread(values):
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return mean, std

    header = f"{'method':<12} {'editing':<8} {'n':>3}  {'A_final':>17}  {'F_final':>17}"
    print(header)
    print("-" * len(header))
    summary_lines = ["method,editing,n,A_mean,A_std,F_mean,F_std"]
    for (method, editing), entries in sorted(groups.items()):
        a_mean, a_std = spread([a for _, a, _ in entries])
        f_mean, f_std = spread([f for _, _, f in entries])
        print(
            f"{method:<12} {editing:<8} {len(entries):>3}  "
            f"{a_mean:8.4f} ± {a_std:6.4f}  {f_mean:+8.4f} ± {f_std:6.4f}"
        )
        summary_lines.append(
            f"{method},{editing},{len(entries)},{a_mean!r},{a_std!r},{f_mean!r},{f_std!r}"
        )
    rows_lines = ["method,editing,seed,A_final,F_final"]
    rows_lines += [f"{m},{e},{s},{a!r},{f!r}" for m, e, s, a, f in rows]
    (run_dir / "report_summary.csv").write_text("\n".join(summary_lines) + "\n")
    (run_dir / "report_rows.csv").write_text("\n".join(rows_lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emgd",
        description="Elastic multi-gradient descent for parallel continual learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="one-shot combination solve, JSON stdin to stdout")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("run-toy", help="two-function toy experiment")
    p.add_argument("--method", default=None,
                   help="emgd_gmc | emgd_gs | mgda | avg_grad (default emgd_gs)")
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--step", type=float, default=2e-5)
    p.add_argument("--join-tick", type=int, default=500)
    p.add_argument("--start", type=float, nargs=2, default=(3.0, 3.0),
                   metavar=("X", "Y"))
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_run_toy)

    p = sub.add_parser("run-pcl", help="multi-stream training run from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".")
    p.add_argument("--method", default=None)
    p.add_argument("--editing", default=None)
    p.add_argument("--eval-mode", default=None, help="task | class")
    p.add_argument("--serial", action="store_true")
    p.add_argument("--overlap", type=float, default=None)
    p.set_defaults(func=cmd_run_pcl)

    p = sub.add_parser("build-splits", help="write a split manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--serial", action="store_true")
    p.add_argument("--overlap", type=float, default=None)
    p.set_defaults(func=cmd_build_splits)

    p = sub.add_parser("report", help="aggregate metrics files into a table")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmgdError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
