"""Minimal dense network: shared backbone plus per-task classifier heads.

Everything runs in float64 so finite-difference checks are meaningful. The
backbone maps inputs to a feature vector through tanh layers; each head is a
linear map from the feature space to its task's class logits, trained with
mean softmax cross-entropy. Parameter gradients, input gradients and the
second-order editing direction are all computed here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidInputError,
    TaskExistsError,
    UnknownTaskError,
)

CHECKPOINT_MAGIC = b"EMGD"
CHECKPOINT_VERSION = 1


@dataclass
class Batch:
    """Input rows in [0, 1] with integer class labels local to one task."""

    inputs: np.ndarray
    labels: np.ndarray
    task_id: int

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        if self.inputs.shape[0] < 1:
            raise InvalidInputError("batch must contain at least one sample")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("inputs and labels disagree on batch size")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class GradientReport:
    """Flat positive gradients of the mean batch loss (negation happens
    where gradient bundles are assembled)."""

    backbone_grad: np.ndarray
    head_grad: np.ndarray
    loss: float


def _uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Network:
    """Dense backbone with dynamically added task heads.

    ``layer_sizes`` gives the backbone widths, e.g. (32, 64, 16): input 32,
    one hidden layer of 64, feature dimension 16. Every backbone layer is
    followed by tanh; heads are linear.
    """

    def __init__(self, layer_sizes, seed: int = 0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidInputError("layer_sizes needs >= 2 positive widths")
        rng = np.random.default_rng(seed)
        self.layer_sizes = tuple(sizes)
        self.backbone = [
            (
                _uniform_init(rng, sizes[i], (sizes[i], sizes[i + 1])),
                _uniform_init(rng, sizes[i], (sizes[i + 1],)),
            )
            for i in range(len(sizes) - 1)
        ]
        self.heads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def backbone_dim(self) -> int:
        return sum(W.size + b.size for W, b in self.backbone)

    def head_classes(self, task_id: int) -> int:
        return self.heads[task_id][0].shape[1]

    def flatten_backbone(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.backbone])

    def set_backbone_flat(self, flat: np.ndarray) -> None:
        if flat.shape != (self.backbone_dim,):
            raise InvalidInputError(
                f"expected {self.backbone_dim} backbone parameters, got {flat.shape}"
            )
        pos = 0
        for i, (W, b) in enumerate(self.backbone):
            n = W.size
            newW = flat[pos : pos + n].reshape(W.shape)
            pos += n
            newb = flat[pos : pos + b.size].copy()
            pos += b.size
            self.backbone[i] = (newW, newb)

    def flatten_head(self, task_id: int) -> np.ndarray:
        W, b = self.heads[task_id]
        return np.concatenate([W.ravel(), b])

    def set_head_flat(self, task_id: int, flat: np.ndarray) -> None:
        W, b = self.heads[task_id]
        if flat.shape != (W.size + b.size,):
            raise InvalidInputError("head parameter count mismatch")
        self.heads[task_id] = (flat[: W.size].reshape(W.shape), flat[W.size :].copy())


def add_head(net: Network, task_id: int, num_classes: int, seed: int) -> None:
    """Create a seeded linear head for a new task; existing parameters are
    left untouched."""
    if task_id in net.heads:
        raise TaskExistsError(f"task {task_id} already has a head")
    if num_classes < 1:
        raise InvalidInputError("num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    fan_in = net.feature_dim
    net.heads[task_id] = (
        _uniform_init(rng, fan_in, (fan_in, num_classes)),
        _uniform_init(rng, fan_in, (num_classes,)),
    )


def _forward_pass(net: Network, batch: Batch):
    if batch.task_id not in net.heads:
        raise UnknownTaskError(f"no head for task {batch.task_id}")
    if batch.inputs.shape[1] != net.input_dim:
        raise InvalidInputError(
            f"input dim {batch.inputs.shape[1]} != network input dim {net.input_dim}"
        )
    W_h, b_h = net.heads[batch.task_id]
    if np.any(batch.labels < 0) or np.any(batch.labels >= W_h.shape[1]):
        raise InvalidInputError("label out of range for the task head")
    activations = [batch.inputs]
    for W, b in net.backbone:
        activations.append(np.tanh(activations[-1] @ W + b))
    logits = activations[-1] @ W_h + b_h
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expz.sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(batch.size), batch.labels].mean())
    return activations, probs, loss


def forward(net: Network, batch: Batch):
    """Class probabilities and mean cross-entropy loss for one batch."""
    _, probs, loss = _forward_pass(net, batch)
    return probs, loss


def features(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Backbone output for raw inputs (no head, no loss)."""
    a = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if a.shape[1] != net.input_dim:
        raise InvalidInputError(
            f"input dim {a.shape[1]} != network input dim {net.input_dim}"
        )
    for W, b in net.backbone:
        a = np.tanh(a @ W + b)
    return a


def head_logits(net: Network, feats: np.ndarray, task_id: int) -> np.ndarray:
    """Raw logits of one head on precomputed features; lets callers compare
    scores across heads without per-head softmax renormalization."""
    if task_id not in net.heads:
        raise UnknownTaskError(f"no head for task {task_id}")
    W, b = net.heads[task_id]
    return feats @ W + b


def _backward_pass(net: Network, batch: Batch, want_input_grad: bool):
    activations, probs, loss = _forward_pass(net, batch)
    W_h, _ = net.heads[batch.task_id]
    dlogits = probs.copy()
    dlogits[np.arange(batch.size), batch.labels] -= 1.0
    dlogits /= batch.size
    feats = activations[-1]
    head_grad = np.concatenate([(feats.T @ dlogits).ravel(), dlogits.sum(axis=0)])
    delta = dlogits @ W_h.T
    backbone_parts = []
    for i in range(len(net.backbone) - 1, -1, -1):
        W, _ = net.backbone[i]
        a_out = activations[i + 1]
        dz = delta * (1.0 - a_out * a_out)  # tanh'
        a_in = activations[i]
        backbone_parts.append((a_in.T @ dz, dz.sum(axis=0)))
        delta = dz @ W.T
    backbone_parts.reverse()
    backbone_grad = np.concatenate(
        [np.concatenate([gW.ravel(), gb]) for gW, gb in backbone_parts]
    )
    input_grad = delta if want_input_grad else None
    return GradientReport(backbone_grad, head_grad, loss), input_grad


def backward(net: Network, batch: Batch) -> GradientReport:
    """Positive gradients of the mean batch loss for backbone and head."""
    report, _ = _backward_pass(net, batch, want_input_grad=False)
    return report


def input_gradient(net: Network, batch: Batch) -> np.ndarray:
    """d(mean loss)/d(inputs), same shape as ``batch.inputs``."""
    _, grad = _backward_pass(net, batch, want_input_grad=True)
    return grad


def directional_edit_gradient(input_grad_at, theta: np.ndarray, v: np.ndarray, eps: float):
    """Core of the editing direction: gradient of ||g(x) - d||^2 w.r.t. x.

    ``v = g(x) - d`` in the negative-gradient convention. Since
    dg/dx = -d2(loss)/dtheta dx, the chain rule gives
    grad_x ||v||^2 = 2 * (d2l/dtheta dx)^T (-v), evaluated by a central
    difference of the input gradient through a parameter perturbation along
    u = -v. ``input_grad_at(theta')`` must return the input gradient of the
    loss at parameters ``theta'``.
    """
    norm_v = float(np.linalg.norm(v))
    if norm_v < 1e-12:
        return None
    u = -v / norm_v
    plus = input_grad_at(theta + eps * u)
    minus = input_grad_at(theta - eps * u)
    return (plus - minus) * (norm_v / eps)


def edit_direction(net: Network, batch: Batch, target_d: np.ndarray, fd_eps: float = 1e-4):
    """Gradient of ||g(x) - d||^2 w.r.t. the batch inputs.

    ``g(x)`` is the negative backbone gradient of the batch's mean loss and
    ``target_d`` is the combined update direction, both in the stored
    convention. Returns the zero matrix when the batch gradient already
    matches the target. The second-order term is approximated by a
    directional central difference through the backbone parameters (one
    extra forward-backward pair), scaled relative to the parameter
    magnitude.
    """
    target_d = np.asarray(target_d, dtype=np.float64)
    if target_d.shape != (net.backbone_dim,):
        raise InvalidInputError(
            f"target direction must have backbone dimension {net.backbone_dim}"
        )
    if fd_eps <= 0:
        raise InvalidInputError("fd_eps must be positive")
    report = backward(net, batch)
    v = -report.backbone_grad - target_d
    theta = net.flatten_backbone()
    eps = fd_eps * (1.0 + float(np.sqrt(np.mean(theta * theta))))

    def input_grad_at(theta_prime):
        net.set_backbone_flat(theta_prime)
        return input_gradient(net, batch)

    try:
        delta = directional_edit_gradient(input_grad_at, theta, v, eps)
    finally:
        net.set_backbone_flat(theta)
    if delta is None:
        return np.zeros_like(batch.inputs)
    return delta


def apply_update(
    net: Network,
    backbone_direction: np.ndarray,
    step_gamma: float,
    head_updates: dict | None = None,
) -> None:
    """theta <- theta + gamma * d for the backbone; each listed head is
    decremented by its own step times its gradient."""
    d = np.asarray(backbone_direction, dtype=np.float64)
    if d.shape != (net.backbone_dim,):
        raise InvalidInputError("backbone direction dimension mismatch")
    net.set_backbone_flat(net.flatten_backbone() + step_gamma * d)
    for task_id, (grad, step) in (head_updates or {}).items():
        if task_id not in net.heads:
            raise UnknownTaskError(f"no head for task {task_id}")
        grad = np.asarray(grad, dtype=np.float64)
        flat = net.flatten_head(task_id)
        if grad.shape != flat.shape:
            raise InvalidInputError(f"head {task_id} gradient dimension mismatch")
        net.set_head_flat(task_id, flat - step * grad)


# --- checkpoint container -------------------------------------------------
#
# Layout: magic "EMGD" | u32 version | u32 header length | UTF-8 JSON header
# | little-endian float64 payload. The same container stores buffer
# snapshots, so the reader/writer pair is exposed.


def write_blob(path, header: dict, values: np.ndarray) -> None:
    payload = np.ascontiguousarray(values, dtype="<f8")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload.tobytes())


def read_blob(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated container", offset=len(raw))
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise FormatError("truncated header", offset=len(raw))
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    return header, values


def save_checkpoint(net: Network, path) -> None:
    """Write the network as one flat parameter blob plus a JSON header."""
    header = {
        "layer_sizes": list(net.layer_sizes),
        "heads": {str(t): int(net.head_classes(t)) for t in sorted(net.heads)},
    }
    parts = [net.flatten_backbone()]
    parts += [net.flatten_head(t) for t in sorted(net.heads)]
    write_blob(path, header, np.concatenate(parts))


def load_checkpoint(path) -> Network:
    header, values = read_blob(path)
    net = Network(header["layer_sizes"], seed=0)
    expected = net.backbone_dim
    heads = {int(t): c for t, c in header["heads"].items()}
    for t in sorted(heads):
        expected += (net.feature_dim + 1) * heads[t]
    if values.shape != (expected,):
        raise FormatError(
            f"parameter count {values.size} != expected {expected}", offset=12
        )
    pos = net.backbone_dim
    net.set_backbone_flat(values[:pos].copy())
    for t in sorted(heads):
        add_head(net, t, heads[t], seed=0)
        n = (net.feature_dim + 1) * heads[t]
        net.set_head_flat(t, values[pos : pos + n].copy())
        pos += n
    return net
