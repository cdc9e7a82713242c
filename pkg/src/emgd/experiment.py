"""End-to-end training over a timeline, the two-function toy problem, and
continual-learning metrics.

Each tick serves one batch per active stream, updates the task heads with
their own gradients, combines the negative backbone gradients into a Pareto
descent direction, applies theta <- theta + gamma * d, and optionally edits
the sampled memory afterwards. Finished tasks feed the rehearsal buffer and
re-enter as the memory stream 0. Accuracy is recorded at every finish tick
and at the final tick, in both task-incremental (true head) and
class-incremental (argmax over all heads) modes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rehearsal, solver, streams
from .errors import (
    ConfigError,
    DegenerateGradientError,
    IncompleteMatrixError,
    NumericError,
)
from .net import (
    Batch,
    Network,
    add_head,
    apply_update,
    backward,
    features,
    head_logits,
)
from .rehearsal import EditConfig, MemoryBuffer
from .streams import TaskCursor, TaskTimeline, substream

log = logging.getLogger("emgd")

METHODS = ("emgd_gmc", "emgd_gs", "mgda", "avg_grad")
EDITING = ("none", "emgd", "gmed")


@dataclass
class RunConfig:
    """Knobs for one training run."""

    method: str = "emgd_gs"
    editing: str = "none"
    gamma: float = 0.05
    gamma_heads: float = 0.05
    batch_size: int = 128
    epochs: int = 1
    temperature: float = 1.0
    eval_every: int = 0
    seed: int = 1234
    memory_batch_size: int | None = None
    capacity_per_class: int = 5
    eta_edit: float = 0.05
    edit_iterations: int = 1
    fd_eps: float = 1e-4
    clamp: bool = True
    freeze_finished_heads: bool = False
    tol: float = 1e-8
    max_iter: int = 250

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, pick one of {METHODS}")
        if self.editing not in EDITING:
            raise ConfigError(f"unknown editing {self.editing!r}, pick one of {EDITING}")
        for name in ("gamma", "gamma_heads", "temperature", "tol"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    def edit_config(self) -> EditConfig:
        return EditConfig(
            eta_edit=self.eta_edit,
            iterations=self.edit_iterations,
            fd_eps=self.fd_eps,
            clamp=self.clamp,
        )


@dataclass
class AccuracyMatrix:
    """Test accuracies a[task, tick] recorded at finish ticks and the end."""

    finish_ticks: dict
    final_tick: int
    entries: dict = field(default_factory=dict)

    def record(self, task_id: int, tick: int, accuracy: float) -> None:
        self.entries[(task_id, tick)] = float(accuracy)

    def at(self, task_id: int, tick: int) -> float:
        try:
            return self.entries[(task_id, tick)]
        except KeyError:
            raise IncompleteMatrixError(
                f"no accuracy recorded for task {task_id} at tick {tick}"
            ) from None

    def tasks(self):
        return sorted(self.finish_ticks)


def compute_metrics(matrix: AccuracyMatrix):
    """Final average accuracy A and forgetting F.

    A averages each task's accuracy at the final tick; F averages the drop
    from each task's accuracy at its own finish tick (negative F means the
    tasks got worse after finishing).
    """
    tasks = matrix.tasks()
    if not tasks:
        raise IncompleteMatrixError("matrix records no tasks")
    final = [matrix.at(t, matrix.final_tick) for t in tasks]
    at_finish = [matrix.at(t, matrix.finish_ticks[t]) for t in tasks]
    a_final = float(np.mean(final))
    f_final = float(np.mean([f - e for f, e in zip(final, at_finish)]))
    return a_final, f_final


# --- toy two-function problem ------------------------------------------------


def toy_f1(x: float, y: float) -> float:
    return float(np.log1p(x * x) + 0.8 * (1.0 - np.exp(x) * np.sin(y)) ** 2)


def toy_f2(x: float, y: float) -> float:
    return float(np.log1p(y * y) + 0.004 * (0.1 + np.exp(y) * np.cos(x)) ** 2)


def toy_grad_f1(x: float, y: float) -> np.ndarray:
    t = np.exp(x) * np.sin(y)
    return np.array(
        [
            2.0 * x / (1.0 + x * x) - 1.6 * (1.0 - t) * np.exp(x) * np.sin(y),
            -1.6 * (1.0 - t) * np.exp(x) * np.cos(y),
        ]
    )


def toy_grad_f2(x: float, y: float) -> np.ndarray:
    t = 0.1 + np.exp(y) * np.cos(x)
    return np.array(
        [
            -0.008 * t * np.exp(y) * np.sin(x),
            2.0 * y / (1.0 + y * y) + 0.008 * t * np.exp(y) * np.cos(x),
        ]
    )


@dataclass
class ToyRow:
    tick: int
    x: float
    y: float
    f1: float
    f2: float
    d_norm: float
    lam: tuple
    sigma: tuple
    margin: float  # min_i <g_i, d> - sigma_i ||d||^2 over the active tasks


@dataclass
class ToyTrace:
    method: str
    start: tuple
    join_tick: int
    f1_init: float
    f2_init: float
    rows: list = field(default_factory=list)

    def f1_at(self, tick: int) -> float:
        return self.f1_init if tick == 0 else self.rows[tick - 1].f1

    def f2_at(self, tick: int) -> float:
        return self.f2_init if tick == 0 else self.rows[tick - 1].f2


def _toy_combine(method, grads, state, temperature, tol, max_iter):
    bundle = solver.GradientBundle(tuple(range(1, len(grads) + 1)), np.stack(grads))
    if method == "avg_grad":
        return solver.avg_grad(bundle), np.ones(len(grads)) / len(grads)
    if method == "mgda":
        return solver.solve_mgda(bundle, tol, max_iter), np.ones(len(grads))
    if method == "emgd_gmc":
        sigma = solver.elastic_factors_gmc(bundle, state)
    else:
        try:
            sigma = solver.elastic_factors_gs(bundle, temperature)
        except DegenerateGradientError:
            sigma = solver.ElasticFactors(np.ones(len(grads)) / len(grads))
    return solver.solve_emgd(bundle, sigma, tol, max_iter), sigma.sigma


def run_toy(
    method: str = "emgd_gs",
    iterations: int = 1500,
    step: float = 2e-5,
    join_tick: int = 500,
    start=(3.0, 3.0),
    temperature: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 250,
) -> ToyTrace:
    """Two synthetic objectives optimized in sequence-then-parallel.

    The first function trains alone until ``join_tick``, then the second
    joins and every update uses the configured combiner. Gradients are
    analytic; the whole run is deterministic.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, pick one of {METHODS}")
    x, y = float(start[0]), float(start[1])
    trace = ToyTrace(method, (x, y), join_tick, toy_f1(x, y), toy_f2(x, y))
    state = solver.ElasticState(temperature=temperature)
    for tick in range(1, iterations + 1):
        grads = [-toy_grad_f1(x, y)]
        if tick > join_tick:
            grads.append(-toy_grad_f2(x, y))
        result, sigma = _toy_combine(method, grads, state, temperature, tol, max_iter)
        d = result.direction
        dd = float(d @ d)
        margin = min(float(g @ d) - float(s) * dd for g, s in zip(grads, sigma))
        x += step * float(d[0])
        y += step * float(d[1])
        trace.rows.append(
            ToyRow(
                tick,
                x,
                y,
                toy_f1(x, y),
                toy_f2(x, y),
                float(np.sqrt(dd)),
                tuple(float(v) for v in result.lam),
                tuple(float(v) for v in sigma),
                margin,
            )
        )
    return trace


@dataclass
class ProbeReport:
    final_direction_norm: float
    min_direction_norm: float
    nonincrease_fraction: float


def convergence_probe(trace_or_rows) -> ProbeReport:
    """Direction-norm summary plus the fraction of ticks where every loss
    that was active at consecutive ticks did not increase."""
    if isinstance(trace_or_rows, ToyTrace):
        rows = [
            {
                "d_norm": r.d_norm,
                "losses": {1: r.f1, 2: r.f2} if r.tick > trace_or_rows.join_tick else {1: r.f1},
            }
            for r in trace_or_rows.rows
        ]
    else:
        rows = trace_or_rows
    if not rows:
        raise IncompleteMatrixError("empty log")
    norms = [r["d_norm"] for r in rows]
    good = total = 0
    for prev, cur in zip(rows, rows[1:]):
        shared = set(prev["losses"]) & set(cur["losses"])
        if not shared:
            continue
        total += 1
        if all(cur["losses"][t] <= prev["losses"][t] + 1e-15 for t in shared):
            good += 1
    return ProbeReport(
        final_direction_norm=float(norms[-1]),
        min_direction_norm=float(min(norms)),
        nonincrease_fraction=(good / total) if total else 1.0,
    )


# --- the full multi-stream loop ----------------------------------------------


def _evaluate(net: Network, specs_by_id: dict, seen: list):
    """Accuracies per seen task: (task-incremental, class-incremental)."""
    task_acc, class_acc = {}, {}
    head_tasks = [t for t in seen if t in net.heads]
    slot_globals = np.asarray(
        [c for t in head_tasks for c in specs_by_id[t].label_set]
    )
    for t in head_tasks:
        spec = specs_by_id[t]
        if spec.test_inputs.shape[0] == 0:
            task_acc[t] = 0.0
            class_acc[t] = 0.0
            continue
        feats = features(net, spec.test_inputs)
        labels_local = spec.to_local(spec.test_labels)
        task_acc[t] = float(
            (head_logits(net, feats, t).argmax(axis=1) == labels_local).mean()
        )
        # class-incremental: argmax over every created head's raw logits; the
        # winning slot must carry the sample's true global class
        stacked = np.hstack([head_logits(net, feats, o) for o in head_tasks])
        winners = slot_globals[stacked.argmax(axis=1)]
        class_acc[t] = float((winners == spec.test_labels).mean())
    return task_acc, class_acc


@dataclass
class PclResult:
    matrix_task: AccuracyMatrix
    matrix_class: AccuracyMatrix
    tick_rows: list
    buffer: MemoryBuffer
    net: Network
    timeline: TaskTimeline


def run_pcl(specs, timeline: TaskTimeline, net: Network, buffer: MemoryBuffer,
            cfg: RunConfig) -> PclResult:
    """Train over the timeline and record accuracies and a tick log.

    Per tick and per active stream: draw a batch, step the head with its own
    gradient, re-read the backbone gradient, then combine all streams'
    negative gradients per ``cfg.method`` and step the backbone. The memory
    stream joins once a task has finished and the buffer holds data; editing
    (when enabled) rewrites the sampled slots after the backbone update. A
    task's training data streams into the buffer at its finish tick.
    """
    specs_by_id = {spec.task_id: spec for spec in specs}
    if set(specs_by_id) != {t for t, _, _ in timeline.entries}:
        raise ConfigError("timeline tasks do not match the provided specs")
    mem_batch_size = cfg.memory_batch_size or cfg.batch_size
    cursors = {
        spec.task_id: TaskCursor(spec, cfg.epochs, cfg.seed) for spec in specs
    }
    rng_sample = substream(cfg.seed, "memory-sample")
    rng_reservoir = substream(cfg.seed, "reservoir")
    state = solver.ElasticState(temperature=cfg.temperature)
    finish_ticks = timeline.finish_ticks()
    matrix_task = AccuracyMatrix(finish_ticks, timeline.final_tick)
    matrix_class = AccuracyMatrix(finish_ticks, timeline.final_tick)
    tick_rows = []
    seen: list = []
    edit_cfg = cfg.edit_config()

    for tick in range(timeline.first_tick, timeline.final_tick + 1):
        active = streams.active_tasks(timeline, tick, any_finished=buffer.occupancy > 0)
        real_tasks = sorted(t for t in active if t != 0)
        for t in real_tasks:
            if t not in seen:
                seen.append(t)
                if t not in net.heads:
                    add_head(net, t, specs_by_id[t].class_count,
                             streams.derive_seed(cfg.seed, "head", t))

        task_ids, grads, losses = [], [], {}
        mem = None
        if 0 in active:
            mem = rehearsal.sample_memory(buffer, mem_batch_size, rng_sample)
            if not cfg.freeze_finished_heads:
                _, _, head_grads = rehearsal.memory_gradient(net, mem)
                apply_update(net, np.zeros(net.backbone_dim), 0.0,
                             {t: (g, cfg.gamma_heads) for t, g in head_grads.items()})
            backbone, loss0, _ = rehearsal.memory_gradient(net, mem)
            task_ids.append(0)
            grads.append(-backbone)
            losses[0] = loss0

        for t in real_tasks:
            batch = streams.next_batch(specs_by_id[t], cfg.batch_size, cursors[t])
            rep = backward(net, batch)
            apply_update(net, np.zeros(net.backbone_dim), 0.0,
                         {t: (rep.head_grad, cfg.gamma_heads)})
            rep = backward(net, batch)  # backbone gradient after the head step
            task_ids.append(t)
            grads.append(-rep.backbone_grad)
            losses[t] = rep.loss

        try:
            bundle = solver.GradientBundle(tuple(task_ids), np.stack(grads))
            if cfg.method == "avg_grad":
                result = solver.avg_grad(bundle)
                sigma = np.ones(bundle.size) / bundle.size
            elif cfg.method == "mgda":
                result = solver.solve_mgda(bundle, cfg.tol, cfg.max_iter)
                sigma = np.ones(bundle.size)
            else:
                if cfg.method == "emgd_gmc":
                    factors = solver.elastic_factors_gmc(bundle, state)
                else:
                    try:
                        factors = solver.elastic_factors_gs(bundle, cfg.temperature)
                    except DegenerateGradientError:
                        factors = solver.ElasticFactors(np.ones(bundle.size) / bundle.size)
                result = solver.solve_emgd(bundle, factors, cfg.tol, cfg.max_iter)
                sigma = factors.sigma
        except NumericError as err:
            raise NumericError(str(err), tick=tick) from None
        if not result.converged:
            log.warning("tick %d: combination solve hit max_iter, using best iterate", tick)
        if not np.all(np.isfinite(result.direction)):
            raise NumericError("non-finite update direction", tick=tick)

        apply_update(net, result.direction, cfg.gamma)

        edit_objective = ""
        if mem is not None and cfg.editing != "none":
            before = rehearsal.editing_objective(net, mem.inputs, mem, result.direction)
            if cfg.editing == "emgd":
                rehearsal.edit_memory_emgd(buffer, net, mem, result.direction, edit_cfg)
            else:
                rehearsal.edit_memory_gmed(buffer, net, mem, result.direction, edit_cfg)
            after = rehearsal.editing_objective(net, mem.inputs, mem, result.direction)
            edit_objective = f"{before:.6e}->{after:.6e}"

        finishing = [t for t, e in finish_ticks.items() if e == tick]
        for t in finishing:
            spec = specs_by_id[t]
            batch = Batch(spec.train_inputs, spec.to_local(spec.train_labels), t)
            rehearsal.insert(buffer, batch, spec.train_labels, rng_reservoir)

        tick_rows.append(
            {
                "tick": tick,
                "active": tuple(task_ids),
                "losses": dict(losses),
                "lambda": tuple(float(v) for v in result.lam),
                "sigma": tuple(float(v) for v in sigma),
                "d_norm": float(np.linalg.norm(result.direction)),
                "edit_objective": edit_objective,
            }
        )

        want_eval = bool(finishing) or tick == timeline.final_tick
        if cfg.eval_every and (tick - timeline.first_tick) % cfg.eval_every == 0:
            want_eval = True
        if want_eval:
            task_acc, class_acc = _evaluate(net, specs_by_id, seen)
            for t, acc in task_acc.items():
                matrix_task.record(t, tick, acc)
            for t, acc in class_acc.items():
                matrix_class.record(t, tick, acc)

    return PclResult(matrix_task, matrix_class, tick_rows, buffer, net, timeline)


# --- serialization ------------------------------------------------------------


def toy_trace_csv(trace: ToyTrace) -> str:
    lines = ["tick,f1,f2,x,y,d_norm,lambda,sigma,margin"]
    for r in trace.rows:
        lam = ";".join(repr(v) for v in r.lam)
        sig = ";".join(repr(v) for v in r.sigma)
        lines.append(
            f"{r.tick},{r.f1!r},{r.f2!r},{r.x!r},{r.y!r},{r.d_norm!r},{lam},{sig},{r.margin!r}"
        )
    return "\n".join(lines) + "\n"


def toy_summary(trace: ToyTrace, iterations: int) -> dict:
    probe = convergence_probe(trace)
    joined = trace.join_tick <= len(trace.rows)
    return {
        "method": trace.method,
        "start": list(trace.start),
        "join_tick": trace.join_tick,
        "iterations": iterations,
        "f1_initial": trace.f1_init,
        "f2_initial": trace.f2_init,
        "f1_at_join": trace.f1_at(trace.join_tick) if joined else None,
        "f2_at_join": trace.f2_at(trace.join_tick) if joined else None,
        "f1_final": trace.rows[-1].f1,
        "f2_final": trace.rows[-1].f2,
        "final_direction_norm": probe.final_direction_norm,
        "min_direction_norm": probe.min_direction_norm,
        "loss_nonincrease_fraction": probe.nonincrease_fraction,
    }


def tick_log_csv(tick_rows) -> str:
    lines = ["tick,active_tasks,losses,lambda,sigma,d_norm,edit_objective"]
    for row in tick_rows:
        active = ";".join(str(t) for t in row["active"])
        losses = ";".join(f"{t}:{row['losses'][t]!r}" for t in row["active"])
        lam = ";".join(repr(v) for v in row["lambda"])
        sig = ";".join(repr(v) for v in row["sigma"])
        lines.append(
            f"{row['tick']},{active},{losses},{lam},{sig},{row['d_norm']!r},{row['edit_objective']}"
        )
    return "\n".join(lines) + "\n"


def metrics_document(result: PclResult, cfg: RunConfig, eval_mode: str = "task") -> dict:
    """Metrics JSON: headline A/F for the chosen mode, both modes nested."""
    if eval_mode not in ("task", "class"):
        raise ConfigError(f"unknown eval mode {eval_mode!r}")
    docs = {}
    for mode, matrix in (("task", result.matrix_task), ("class", result.matrix_class)):
        a_final, f_final = compute_metrics(matrix)
        docs[mode] = {
            "A_final": a_final,
            "F_final": f_final,
            "per_task": {
                str(t): {
                    "at_finish": matrix.at(t, matrix.finish_ticks[t]),
                    "final": matrix.at(t, matrix.final_tick),
                }
                for t in matrix.tasks()
            },
        }
    head = dict(docs[eval_mode])
    head.update(
        {
            "eval_mode": eval_mode,
            "method": cfg.method,
            "editing": cfg.editing,
            "seed": cfg.seed,
            "modes": docs,
        }
    )
    return head


def dump_json(doc: dict, path) -> None:
    from pathlib import Path

    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
