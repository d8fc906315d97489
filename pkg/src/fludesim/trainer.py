"""Local training: softmax regression (or a one-hidden-layer MLP) trained by
mini-batch SGD over synthetic class-partitioned shards.

Parameters travel as flat float32 vectors. A local pass walks a fixed shuffled
sample order in segments between checkpoint ticks, and mini-batches never
straddle a tick, so stopping at a tick and resuming later replays exactly the
same arithmetic as an uninterrupted pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fludesim.rng import RngStream


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    n_classes: int
    hidden: int = 0  # 0 selects plain softmax regression

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.hidden:
            return [
                ("w1", (self.dim, self.hidden)),
                ("b1", (self.hidden,)),
                ("w2", (self.hidden, self.n_classes)),
                ("b2", (self.n_classes,)),
            ]
        return [("w", (self.dim, self.n_classes)), ("b", (self.n_classes,))]

    @property
    def size(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes)

    @property
    def nbytes(self) -> int:
        return 4 * self.size

    def unflatten(self, values: np.ndarray) -> dict[str, np.ndarray]:
        if values.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {values.shape}")
        out, pos = {}, 0
        for name, shape in self.shapes:
            n = math.prod(shape)
            out[name] = values[pos : pos + n].reshape(shape)
            pos += n
        return out

    def init(self, seed: int) -> "ModelParams":
        values = np.zeros(self.size, dtype=np.float32)
        if self.hidden:
            gen = RngStream(seed, ("init",)).generator()
            parts = self.unflatten(values)
            parts["w1"][...] = gen.normal(0, math.sqrt(2.0 / self.dim), parts["w1"].shape)
            parts["w2"][...] = gen.normal(0, math.sqrt(1.0 / self.hidden), parts["w2"].shape)
        return ModelParams(values, self)


@dataclass
class ModelParams:
    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.spec.size,):
            raise ValueError("parameter vector does not match the model shape")

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.spec)


@dataclass(frozen=True)
class DataShard:
    features: np.ndarray
    labels: np.ndarray
    class_set: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 32
    learning_rate: float = 0.04
    local_pass_fraction: float = 1.0
    hidden: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.local_pass_fraction <= 1:
            raise ValueError("local_pass_fraction must lie in (0, 1]")

    def pass_length(self, shard_size: int) -> int:
        return max(1, int(round(self.local_pass_fraction * shard_size)))


@dataclass
class SyntheticTask:
    shards: list[DataShard]
    test_features: np.ndarray
    test_labels: np.ndarray
    class_means: np.ndarray
    n_classes: int

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([s.features for s in self.shards]),
            np.concatenate([s.labels for s in self.shards]),
        )


def class_means(n_classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Mutually orthogonal class centres, each pair ``2 * separation`` apart."""
    gen = RngStream(seed, ("class_means",)).generator()
    if dim >= n_classes:
        q, _ = np.linalg.qr(gen.standard_normal((dim, n_classes)))
        directions = q.T
    else:
        directions = gen.standard_normal((n_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * separation * math.sqrt(2.0)


def generate_synthetic_task(
    n_classes: int,
    dim: int,
    n_devices: int,
    samples_per_device: int,
    classes_per_device: int,
    seed: int,
    mean_separation: float = 3.0,
    test_per_class: int = 200,
) -> SyntheticTask:
    if classes_per_device > n_classes:
        raise ValueError("classes_per_device cannot exceed n_classes")
    if classes_per_device < 1 or samples_per_device < 1 or n_devices < 1:
        raise ValueError("task sizes must be positive")
    means = class_means(n_classes, dim, mean_separation, seed)
    shards = []
    for i in range(n_devices):
        gen = RngStream(seed, ("data", i)).generator()
        classes = np.sort(gen.choice(n_classes, size=classes_per_device, replace=False))
        base, extra = divmod(samples_per_device, classes_per_device)
        counts = np.full(classes_per_device, base)
        counts[gen.choice(classes_per_device, size=extra, replace=False)] += 1
        labels = np.repeat(classes, counts)
        feats = means[labels] + gen.standard_normal((samples_per_device, dim))
        shards.append(
            DataShard(feats.astype(np.float32), labels.astype(np.int64), tuple(int(c) for c in classes))
        )
    gen = RngStream(seed, ("test",)).generator()
    test_labels = np.repeat(np.arange(n_classes), test_per_class)
    test_feats = means[test_labels] + gen.standard_normal((len(test_labels), dim))
    return SyntheticTask(shards, test_feats.astype(np.float32), test_labels, means, n_classes)


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(z[np.arange(n), y] - np.log(ez.sum(axis=1))))
    p[np.arange(n), y] -= 1.0
    return loss, p / n


def logits(spec: ModelSpec, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = spec.unflatten(values)
    if spec.hidden:
        h = np.maximum(x @ p["w1"] + p["b1"], 0.0)
        return h @ p["w2"] + p["b2"]
    return x @ p["w"] + p["b"]


def loss_and_grad(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its analytic gradient (float64)."""
    values = np.asarray(values, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    p = spec.unflatten(values)
    grad = np.zeros_like(values)
    g = spec.unflatten(grad)
    if spec.hidden:
        pre = x @ p["w1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        loss, d_out = _softmax_xent(h @ p["w2"] + p["b2"], y)
        g["w2"][...] = h.T @ d_out
        g["b2"][...] = d_out.sum(axis=0)
        d_h = (d_out @ p["w2"].T) * (pre > 0)
        g["w1"][...] = x.T @ d_h
        g["b1"][...] = d_h.sum(axis=0)
    else:
        loss, d_out = _softmax_xent(x @ p["w"] + p["b"], y)
        g["w"][...] = x.T @ d_out
        g["b"][...] = d_out.sum(axis=0)
    return loss, grad


def pass_order(seed: int, device_id: int, pass_round: int, shard_size: int, pass_length: int) -> np.ndarray:
    gen = RngStream(seed, ("order", device_id)).generator(pass_round)
    return gen.permutation(shard_size)[:pass_length]


def tick_positions(total: int, tick: int) -> list[int]:
    return list(range(tick, total, tick)) + [total]


@dataclass
class LocalResult:
    completed: bool
    params: np.ndarray  # final params, or the last checkpointed params when interrupted
    position: int  # pass position reached (== total on completion, last tick otherwise)
    samples_processed: int  # work done this session, including any lost tail
    total: int
    checkpoints: list[int] = field(default_factory=list)


def train_local(
    spec: ModelSpec,
    start: np.ndarray,
    shard: DataShard,
    config: TrainerConfig,
    order: np.ndarray,
    resume_offset: int = 0,
    interruption_fraction: float | None = None,
    tick: int | None = None,
    checkpoint_hook: Callable[[int, np.ndarray], None] | None = None,
) -> LocalResult:
    """Run (the rest of) one local pass starting at ``resume_offset``.

    ``interruption_fraction`` locates the stop point within this session's
    remaining samples; the returned state is the one saved at the last tick
    at or before it. ``checkpoint_hook(position, params)`` fires at every tick
    reached before the pass ends.
    """
    total = len(order)
    if not 0 <= resume_offset < total:
        raise ValueError(f"resume_offset {resume_offset} outside pass of length {total}")
    tick = tick or max(1, math.ceil(total / 10))
    stop = total
    if interruption_fraction is not None:
        remaining = total - resume_offset
        stop = resume_offset + int(math.floor(interruption_fraction * remaining + 1e-9))
        stop = min(stop, total - 1)  # an interruption always loses the upload

    values = np.array(start, dtype=np.float32, copy=True)
    saved = values.copy()
    position = resume_offset
    reached = []
    lr = config.learning_rate
    bs = config.batch_size
    for boundary in tick_positions(total, tick):
        if boundary <= resume_offset:
            continue
        if boundary > stop:
            break
        for lo in range(position, boundary, bs):
            idx = order[lo : min(lo + bs, boundary)]
            _, grad = loss_and_grad(spec, values, shard.features[idx], shard.labels[idx])
            values = (values - lr * grad).astype(np.float32)
        position = boundary
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("non-finite parameters during local training")
        if boundary < total:
            saved = values.copy()
            reached.append(boundary)
            if checkpoint_hook is not None:
                checkpoint_hook(boundary, saved)

    if interruption_fraction is None:
        return LocalResult(True, values, total, total - resume_offset, total, reached)
    last = reached[-1] if reached else resume_offset
    return LocalResult(False, saved if reached else np.array(start, dtype=np.float32), last, stop - resume_offset, total, reached)


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    per_class_accuracy: np.ndarray


def evaluate(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> Evaluation:
    if x.shape[1] != spec.dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model dimension {spec.dim}")
    z = logits(spec, np.asarray(values, dtype=np.float64), np.asarray(x, dtype=np.float64))
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-np.mean(logp[np.arange(len(y)), y]))
    hit = z.argmax(axis=1) == y
    per_class = np.array(
        [hit[y == c].mean() if np.any(y == c) else np.nan for c in range(spec.n_classes)]
    )
    return Evaluation(loss, float(hit.mean()), per_class)


def train_centralized(
    spec: ModelSpec, x: np.ndarray, y: np.ndarray, config: TrainerConfig, epochs: int, seed: int = 0
) -> np.ndarray:
    """Pooled-data SGD; the reference point for how learnable a task is."""
    values = spec.init(seed).values
    gen = RngStream(seed, ("centralized",)).generator()
    for _ in range(epochs):
        order = gen.permutation(len(y))
        for lo in range(0, len(y), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            _, grad = loss_and_grad(spec, values, x[idx], y[idx])
            values = (values - config.learning_rate * grad).astype(np.float32)
    return values
