"""SGD training loop, learning-rate schedule and layer freezing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import prescale, to_network_layout
from .data import VideoRecord
from .network import Model

log = logging.getLogger(__name__)

FREEZE_POLICIES = ("all", "most", "final")


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 0.01
    lr_min: float = 1e-4
    decay_factor: float = 0.94
    decay_every: int | None = None  # None: two epochs
    momentum: float = 0.9
    weight_decay: float = 4e-5
    batch_size: int = 16
    freeze_policy: str = "all"
    max_steps: int = 1000
    eval_every: int = 50

    def __post_init__(self):
        if self.lr_min > self.lr_initial and self.lr_initial > 0:
            raise ValueError("lr_min must not exceed lr_initial")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay factor must be in (0, 1]")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {self.freeze_policy!r}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("batch size, max steps and eval interval must be positive")

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        """Reduced learning rate and weight decay for adapting a trained model."""
        kw.setdefault("lr_initial", 0.005)
        kw.setdefault("weight_decay", 1e-7)
        return cls(**kw)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_at(step: int, config: TrainConfig, decay_every: int | None = None) -> float:
    """Stepped exponential decay with a floor."""
    every = decay_every or config.decay_every or 1
    lr = config.lr_initial * config.decay_factor ** (step // every)
    return max(config.lr_min, lr) if config.lr_initial > 0 else 0.0


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState, config: TrainConfig, lr: float | None = None,
             trainable: dict[str, bool] | None = None,
             decay: dict[str, bool] | None = None) -> tuple[dict, OptimizerState]:
    """One momentum step, updating ``params`` in place.

    ``v <- momentum * v + (g + weight_decay * w)``, ``w <- w - lr * v``.
    Parameters flagged untrainable are left untouched. Batch-norm scale and
    shift are not decayed unless ``decay`` says otherwise.
    """
    lr = lr_at(state.step, config) if lr is None else lr
    for name, w in params.items():
        if trainable is not None and not trainable.get(name, True):
            continue
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise T.ShapeError(f"gradient for {name} is {g.shape}, parameter is {w.shape}")
        wd = config.weight_decay
        if decay is not None:
            wd = wd if decay.get(name, True) else 0.0
        elif name.endswith((".gamma", ".beta")):
            wd = 0.0
        g = g + wd * w if wd else g
        v = state.velocity.get(name)
        v = g.astype(w.dtype) if v is None else config.momentum * v + g
        state.velocity[name] = v
        w -= (lr * v).astype(w.dtype)
    state.step += 1
    return params, state


def _is_early(name: str) -> bool:
    local = name[len("fuse.column."):] if name.startswith("fuse.column.") else name
    return local.startswith(("stem.", "block0."))


def freeze_mask(model: Model, policy: str) -> dict[str, bool]:
    """Trainable flag per parameter name.

    ``most`` freezes the stem and the first bottleneck stage; ``final``
    trains only the classifier.
    """
    names = list(model.parameters())
    if policy == "all":
        return {n: True for n in names}
    if policy == "most":
        return {n: not _is_early(n) for n in names}
    if policy == "final":
        return {n: n.startswith("classifier.") for n in names}
    raise ValueError(f"unknown freeze policy {policy!r}")


def eval_input(record: VideoRecord, spatial: int, frames: int) -> np.ndarray:
    """Deterministic model input from a record: first ``frames`` frames,
    center square crop, resized, in ``(h, w, f, 1)`` layout."""
    clip = record.clip[:frames]
    return to_network_layout(prescale(clip, spatial))


def predict_logits(model: Model, records: Sequence[VideoRecord], batch_size: int = 32):
    cfg = model.config
    out = []
    for i in range(0, len(records), batch_size):
        x = np.stack([eval_input(r, cfg.spatial, cfg.frames) for r in records[i:i + batch_size]])
        out.append(model.forward(x))
    return np.concatenate(out)


def evaluate(model: Model, dataset: Sequence[VideoRecord]) -> float:
    """Fraction of records whose argmax logit equals the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset)
    labels = np.array([r.label for r in dataset])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass(frozen=True)
class HistoryRow:
    step: int
    lr: float
    loss: float
    eval_accuracy: float

    def line(self) -> str:
        return f"{self.step}\t{self.lr:.6g}\t{self.loss:.6f}\t{self.eval_accuracy:.4f}"


class DivergenceError(RuntimeError):
    pass


def default_input_fn(model: Model) -> Callable[[VideoRecord, np.random.Generator], np.ndarray]:
    cfg = model.config
    return lambda rec, rng: eval_input(rec, cfg.spatial, cfg.frames)


def train(model: Model, dataset: Sequence[VideoRecord], config: TrainConfig,
          augment_fn: Callable | None = None, seed: int = 0,
          eval_dataset: Sequence[VideoRecord] | None = None,
          state: OptimizerState | None = None,
          on_eval: Callable[[HistoryRow], bool | None] | None = None):
    """Train ``model`` in place and return ``(model, history)``.

    ``augment_fn(record, rng)`` maps a record to one ``(h, w, f, 1)`` input.
    History has one row per ``eval_every`` steps; accuracy is measured on
    ``eval_dataset`` (or the training set when absent). ``on_eval`` sees
    each row and ends training early by returning a true value. The
    learning rate follows ``state.step``, so passing a previous run's state
    resumes its schedule.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if any(r.label not in (0, 1) for r in dataset):
        raise ValueError("labels must be 0 or 1")
    rng = np.random.default_rng(seed)
    augment_fn = augment_fn or default_input_fn(model)
    eval_set = eval_dataset if eval_dataset is not None else dataset
    state = state or OptimizerState()
    steps_per_epoch = max(1, math.ceil(len(dataset) / config.batch_size))
    decay_every = config.decay_every or 2 * steps_per_epoch
    trainable = freeze_mask(model, config.freeze_policy)
    params = model.parameters()
    labels = np.array([r.label for r in dataset])

    history: list[HistoryRow] = []
    losses: list[float] = []
    order = np.empty(0, int)
    for step in range(config.max_steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        x = np.stack([augment_fn(dataset[i], rng) for i in idx]).astype(np.float32)
        y = labels[idx]
        logits = model.forward(x, training=True)
        probs, loss = T.softmax_cross_entropy(logits.astype(np.float64), y)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}")
        model.backward(T.softmax_cross_entropy_backward(probs, y).astype(np.float32))
        lr = lr_at(state.step, config, decay_every)
        sgd_step(params, model.gradients(), state, config, lr, trainable)
        losses.append(loss)
        if (step + 1) % config.eval_every == 0 or step + 1 == config.max_steps:
            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise DivergenceError(f"mean loss is {mean_loss} at step {step + 1}")
            row = HistoryRow(step + 1, lr, mean_loss, evaluate(model, eval_set))
            history.append(row)
            losses = []
            log.info(row.line())
            if on_eval and on_eval(row):
                break
    model.clear_state()
    return model, history
