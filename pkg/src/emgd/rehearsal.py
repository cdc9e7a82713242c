"""Class-balanced rehearsal memory with gradient-guided editing.

Finished tasks live on as stored samples replayed through their original
heads (the memory stream, task id 0). Insertion is per-class reservoir
sampling, so each class keeps a uniform subsample of everything it has
streamed. Editing rewrites stored inputs, never labels or task ids: the
elastic variant pushes the memory batch gradient toward the current combined
direction, the loss-difference variant is kept as a comparison arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMemoryError, InvalidInputError
from .net import (
    Batch,
    Network,
    backward,
    edit_direction,
    input_gradient,
    forward,
    write_blob,
    read_blob,
)


@dataclass
class Slot:
    x: np.ndarray
    label: int
    task_id: int
    class_id: int


@dataclass
class EditConfig:
    """Step size and schedule for memory editing."""

    eta_edit: float = 0.05
    iterations: int = 1
    fd_eps: float = 1e-4
    clamp: bool = True

    def __post_init__(self):
        if not (0.0 <= self.eta_edit <= 1.0):
            raise InvalidInputError("eta_edit must lie in [0, 1]")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.fd_eps <= 0:
            raise InvalidInputError("fd_eps must be positive")


@dataclass
class MemoryBatch:
    """Samples drawn from the buffer; per-sample task routing for heads."""

    inputs: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    class_ids: np.ndarray
    slot_indices: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


class MemoryBuffer:
    """Fixed per-class capacity store of finished-task samples."""

    def __init__(self, capacity_per_class: int):
        if capacity_per_class < 1:
            raise InvalidInputError("capacity_per_class must be >= 1")
        self.capacity_per_class = int(capacity_per_class)
        self.slots: list[Slot] = []
        self.seen_counts: dict[int, int] = {}
        self._by_class: dict[int, list[int]] = {}

    @property
    def occupancy(self) -> int:
        return len(self.slots)

    def class_counts(self) -> dict:
        return {c: len(idx) for c, idx in self._by_class.items()}


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def insert(buffer: MemoryBuffer, batch: Batch, class_ids, seed_or_rng) -> None:
    """Stream one batch into the buffer with per-class reservoir sampling.

    ``class_ids`` gives each sample's global class (the batch labels are
    local head indices). While a class has free slots samples are appended;
    afterwards each new sample replaces a uniformly random stored sample of
    its class with probability capacity / seen_count.
    """
    rng = _as_rng(seed_or_rng)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.shape[0] != batch.size:
        raise InvalidInputError("class_ids must match the batch size")
    cap = buffer.capacity_per_class
    for i in range(batch.size):
        c = int(class_ids[i])
        seen = buffer.seen_counts.get(c, 0) + 1
        buffer.seen_counts[c] = seen
        existing = buffer._by_class.setdefault(c, [])
        if len(existing) < cap:
            existing.append(len(buffer.slots))
            buffer.slots.append(
                Slot(batch.inputs[i].copy(), int(batch.labels[i]), batch.task_id, c)
            )
        elif rng.random() < cap / seen:
            victim = existing[int(rng.integers(len(existing)))]
            buffer.slots[victim] = Slot(
                batch.inputs[i].copy(), int(batch.labels[i]), batch.task_id, c
            )


def sample_memory(buffer: MemoryBuffer, batch_size: int, seed_or_rng) -> MemoryBatch:
    """Uniform sample of stored slots (without replacement when possible)."""
    if buffer.occupancy == 0:
        raise EmptyMemoryError("rehearsal buffer is empty")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    rng = _as_rng(seed_or_rng)
    replace = batch_size > buffer.occupancy
    picks = rng.choice(buffer.occupancy, size=batch_size, replace=replace)
    slots = [buffer.slots[int(i)] for i in picks]
    return MemoryBatch(
        inputs=np.stack([s.x for s in slots]),
        labels=np.array([s.label for s in slots], dtype=np.int64),
        task_ids=np.array([s.task_id for s in slots], dtype=np.int64),
        class_ids=np.array([s.class_id for s in slots], dtype=np.int64),
        slot_indices=np.asarray(picks, dtype=np.int64),
    )


def _task_groups(mem: MemoryBatch):
    for task_id in np.unique(mem.task_ids):
        mask = mem.task_ids == task_id
        yield int(task_id), mask


def memory_gradient(net: Network, mem: MemoryBatch):
    """Backbone gradient, loss and per-head gradients of the memory loss.

    The memory loss averages per-sample losses over the whole batch, each
    sample routed through its original task head, so every group contributes
    with weight (group size / batch size).
    """
    backbone = np.zeros(net.backbone_dim)
    head_grads: dict[int, np.ndarray] = {}
    loss = 0.0
    for task_id, mask in _task_groups(mem):
        weight = mask.sum() / mem.size
        rep = backward(net, Batch(mem.inputs[mask], mem.labels[mask], task_id))
        backbone += weight * rep.backbone_grad
        head_grads[task_id] = weight * rep.head_grad
        loss += weight * rep.loss
    return backbone, float(loss), head_grads


def memory_loss(net: Network, inputs, mem: MemoryBatch) -> float:
    loss = 0.0
    for task_id, mask in _task_groups(mem):
        _, group_loss = forward(net, Batch(inputs[mask], mem.labels[mask], task_id))
        loss += mask.sum() / mem.size * group_loss
    return float(loss)


def editing_objective(net: Network, inputs, mem: MemoryBatch, direction_d) -> float:
    """Sum over task groups of ||g_group(x) - d||^2 at the given inputs."""
    d = np.asarray(direction_d, dtype=np.float64)
    total = 0.0
    for task_id, mask in _task_groups(mem):
        rep = backward(net, Batch(inputs[mask], mem.labels[mask], task_id))
        v = -rep.backbone_grad - d
        total += float(v @ v)
    return total


def _write_back(buffer: MemoryBuffer, mem: MemoryBatch, inputs, clamp: bool) -> None:
    if clamp:
        inputs = np.clip(inputs, 0.0, 1.0)
    # a slot sampled twice (replacement) simply takes the last write
    for row, slot_idx in enumerate(mem.slot_indices):
        buffer.slots[int(slot_idx)].x = inputs[row].copy()
    mem.inputs = inputs


def edit_memory_emgd(
    buffer: MemoryBuffer,
    net: Network,
    mem: MemoryBatch,
    direction_d,
    cfg: EditConfig,
) -> None:
    """Move sampled inputs down the gradient of ||g(x) - d||^2.

    Each task group is edited against the shared target direction; inputs
    are clamped back into [0, 1]. Labels, task ids and network parameters
    are never touched.
    """
    d = np.asarray(direction_d, dtype=np.float64)
    inputs = mem.inputs.copy()
    for _ in range(cfg.iterations):
        if cfg.eta_edit == 0.0:
            break
        for task_id, mask in _task_groups(mem):
            batch = Batch(inputs[mask], mem.labels[mask], task_id)
            delta = edit_direction(net, batch, d, cfg.fd_eps)
            inputs[mask] = inputs[mask] - cfg.eta_edit * delta
        if cfg.clamp:
            inputs = np.clip(inputs, 0.0, 1.0)
    _write_back(buffer, mem, inputs, cfg.clamp)


def edit_memory_gmed(
    buffer: MemoryBuffer,
    net: Network,
    mem: MemoryBatch,
    direction_d,
    cfg: EditConfig,
) -> None:
    """Loss-difference editing baseline.

    A look-ahead parameter set theta' = theta + eta * d (one virtual update)
    defines the interference score (loss(x, theta) - loss(x, theta'))^2;
    inputs step down its exact input gradient
    2 (l - l') (grad_x l - grad_x l').
    """
    d = np.asarray(direction_d, dtype=np.float64)
    if d.shape != (net.backbone_dim,):
        raise InvalidInputError("direction dimension mismatch")
    theta = net.flatten_backbone()
    inputs = mem.inputs.copy()
    try:
        for _ in range(cfg.iterations):
            if cfg.eta_edit == 0.0:
                break
            for task_id, mask in _task_groups(mem):
                batch = Batch(inputs[mask], mem.labels[mask], task_id)
                net.set_backbone_flat(theta)
                _, loss_now = forward(net, batch)
                gx_now = input_gradient(net, batch)
                net.set_backbone_flat(theta + cfg.eta_edit * d)
                _, loss_ahead = forward(net, batch)
                gx_ahead = input_gradient(net, batch)
                delta = 2.0 * (loss_now - loss_ahead) * (gx_now - gx_ahead)
                inputs[mask] = inputs[mask] - cfg.eta_edit * delta
            if cfg.clamp:
                inputs = np.clip(inputs, 0.0, 1.0)
    finally:
        net.set_backbone_flat(theta)
    _write_back(buffer, mem, inputs, cfg.clamp)


def save_buffer_snapshot(buffer: MemoryBuffer, path) -> None:
    """Write slot inputs plus a JSON slot manifest in the checkpoint format."""
    header = {
        "kind": "memory-buffer",
        "capacity_per_class": buffer.capacity_per_class,
        "dim": int(buffer.slots[0].x.size) if buffer.slots else 0,
        "seen_counts": {str(c): n for c, n in sorted(buffer.seen_counts.items())},
        "slots": [
            {"task": s.task_id, "class": s.class_id, "label": s.label}
            for s in buffer.slots
        ],
    }
    values = (
        np.concatenate([s.x.ravel() for s in buffer.slots])
        if buffer.slots
        else np.zeros(0)
    )
    write_blob(path, header, values)


def load_buffer_snapshot(path) -> MemoryBuffer:
    header, values = read_blob(path)
    if header.get("kind") != "memory-buffer":
        raise InvalidInputError(f"not a buffer snapshot: {path}")
    buffer = MemoryBuffer(header["capacity_per_class"])
    dim = header["dim"]
    buffer.seen_counts = {int(c): n for c, n in header["seen_counts"].items()}
    for i, meta in enumerate(header["slots"]):
        x = values[i * dim : (i + 1) * dim].copy()
        buffer.slots.append(Slot(x, meta["label"], meta["task"], meta["class"]))
        buffer._by_class.setdefault(meta["class"], []).append(i)
    return buffer
