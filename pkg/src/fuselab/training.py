"""Task-specific fine-tuning under any of the four paradigms.

Linearized paradigms train the tangent model: logits come from a single
dual-number forward pass anchored at the initial trainable parameters,
and the parameter gradient is the anchored network's VJP with the
cross-entropy logit gradient. Nonlinear paradigms run the same VJP at the
current parameters. Either way one optimizer step costs a forward and a
backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoints import Checkpoint, backbone_for
from .errors import ContractError, TrainingDivergedError
from .models import LinearizedState, ModeTag, ModelSpec, forward, forward_linearized, logits_program
from .params import ParamTree
from .tasks import Dataset, Task


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 0.005
    optimizer: str = "adam"  # "sgd" or "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be at least 1")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


def _check_labels(labels: np.ndarray, num_classes: int):
    if labels.size == 0:
        raise ContractError("empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"label out of range [0, {num_classes}): found {labels.min()}..{labels.max()}"
        )


def cross_entropy_loss(logits, labels) -> float:
    """Mean negative log-softmax probability of the true class."""
    arr = logits.array if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] != labels.shape[0]:
        raise ContractError(f"logits {arr.shape} do not match {labels.shape[0]} labels")
    _check_labels(labels, arr.shape[1])
    return float(ad.mean_all(ad.neg(ad.pick_rows(ad.log_softmax(arr), labels))))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def ce_logit_gradient(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the logits."""
    g = _softmax(logits)
    g[np.arange(labels.shape[0]), labels] -= 1.0
    return g / labels.shape[0]


def batch_loss_and_grad(
    spec: ModelSpec,
    theta0: ParamTree,
    anchor_flat: np.ndarray,
    template: ParamTree,
    flat: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Cross-entropy and its gradient w.r.t. the flat trainable vector.

    For linearized paradigms the gradient is taken through the tangent
    model anchored at ``anchor_flat``; otherwise through the network at
    ``flat`` directly.
    """
    f = logits_program(spec, theta0, xs, template)
    if spec.mode.is_linearized:
        value, tangent = ad.jvp(f, anchor_flat, flat - anchor_flat)
        logits = value + tangent
        glogits = ce_logit_gradient(logits, ys)
        g = ad.vjp(f, anchor_flat, glogits)
    else:
        logits = f(flat)
        glogits = ce_logit_gradient(logits, ys)
        g = ad.vjp(f, flat, glogits)
    loss = float(ad.mean_all(ad.neg(ad.pick_rows(ad.log_softmax(logits), ys))))
    return loss, g


class _Batcher:
    """Epoch-shuffled mini-batches from a dedicated shuffling seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.order.size:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, flat: np.ndarray, g: np.ndarray) -> np.ndarray:
        return flat - self.lr * g


class _Adam:
    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, flat: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return flat - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return _Sgd(config.learning_rate)
    return _Adam(config.learning_rate, config.beta1, config.beta2, config.eps)


def finetune(
    spec: ModelSpec,
    theta0: ParamTree,
    init_trainable: ParamTree,
    task: Task,
    config: TrainConfig,
    init_seed: int = 0,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Fine-tune on one task; returns the checkpoint and per-step history.

    History rows are (step, train batch loss, val accuracy). The backbone
    is never touched; for adapter paradigms it stays bit-identical by
    construction. Deterministic given the config's shuffling seed.
    """
    if len(task.train) == 0 or len(task.val) == 0:
        raise ContractError("task splits must be non-empty")
    expected = spec.trainable_shapes()
    if init_trainable.shapes() != expected:
        raise ContractError("init_trainable does not match the mode's trainable set")
    _check_labels(task.train.ys, spec.num_classes)
    if not theta0.equal_bits(backbone_for(spec, int(init_seed))):
        raise ContractError(
            "theta0 does not match init_seed; the checkpoint would not round-trip"
        )

    anchor_flat = init_trainable.flatten()
    flat = anchor_flat.copy()
    batcher = _Batcher(len(task.train), config.batch_size, config.shuffle_seed)
    opt = _make_optimizer(config)
    history: list[tuple[int, float, float]] = []

    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for step in range(config.steps):
            idx = batcher.next()
            xb, yb = task.train.xs[idx], task.train.ys[idx]
            loss, g = batch_loss_and_grad(
                spec, theta0, anchor_flat, init_trainable, flat, xb, yb
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(step)
            flat = opt.step(flat, g)
            val_acc = _accuracy_from_flat(spec, theta0, anchor_flat, init_trainable, flat, task.val)
            history.append((step, loss, val_acc))

    trained = init_trainable.with_flat(flat)
    final_train_loss, _ = batch_loss_and_grad(
        spec, theta0, anchor_flat, init_trainable, flat, task.train.xs, task.train.ys
    )
    metrics = {
        "final_train_loss": float(final_train_loss),
        "final_val_accuracy": history[-1][2],
    }
    ckpt = Checkpoint(
        spec=spec,
        task_id=task.id,
        init_seed=int(init_seed),
        initial=init_trainable,
        trained=trained,
        metrics=metrics,
    )
    return ckpt, history


def _accuracy_from_flat(spec, theta0, anchor_flat, template, flat, dataset: Dataset) -> float:
    f = logits_program(spec, theta0, dataset.xs, template)
    if spec.mode.is_linearized:
        value, tangent = ad.jvp(f, anchor_flat, flat - anchor_flat)
        logits = value + tangent
    else:
        logits = f(flat)
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == dataset.ys))


def evaluate(
    spec: ModelSpec,
    theta0: ParamTree,
    trainable: ParamTree,
    dataset: Dataset,
    mode: ModeTag | None = None,
    anchor: ParamTree | None = None,
) -> float:
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class.

    Linearized paradigms need the tangent anchor (the trainable tree the
    model was linearized around).
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    eval_spec = spec if mode is None else spec.with_mode(mode)
    if eval_spec.mode.is_linearized:
        if anchor is None:
            raise ContractError("linearized evaluation requires the tangent anchor")
        logits = forward_linearized(eval_spec, theta0, LinearizedState(anchor, trainable), dataset.xs)
    else:
        logits = forward(eval_spec, theta0, trainable, dataset.xs)
    preds = np.argmax(logits.array, axis=1)
    return float(np.mean(preds == dataset.ys))


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset) -> float:
    return evaluate(
        ckpt.spec, ckpt.theta0(), ckpt.trained, dataset, anchor=ckpt.initial
    )


def write_metrics_csv(history, path, meta: str = "") -> None:
    """Sidecar with one row per step: step, train loss, val accuracy."""
    lines = [f"# {meta}" if meta else "# fuselab-metrics v1"]
    lines.append("step,train_loss,val_accuracy")
    for step, loss, acc in history:
        lines.append("%d,%.17g,%.17g" % (step, loss, acc))
    Path(path).write_text("\n".join(lines) + "\n")
