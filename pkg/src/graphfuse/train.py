"""Optimizer, learning-rate schedule, training loop, metrics and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import gtn
from .errors import ConfigError, ShapeError, UsageError
from .functional import softmax_cross_entropy
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    base_lr: float = 1e-3
    lr_min: float = 0.0
    restarts: Tuple[int, ...] = (20, 40)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.restarts = tuple(int(r) for r in self.restarts)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if any(b <= a for a, b in zip(self.restarts, self.restarts[1:])):
            raise ConfigError(f"restart epochs must be strictly increasing, got {self.restarts}")
        if self.restarts and (self.restarts[0] <= 0 or self.restarts[-1] >= self.epochs):
            raise ConfigError(f"restart epochs must lie in (0, {self.epochs}), got {self.restarts}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["restarts"] = list(self.restarts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts at ``cfg.restarts``.

    Within a period starting at epoch ``s`` and ending before ``e`` the rate
    is ``lr_min + (base_lr - lr_min) * (1 + cos(pi * (epoch - s) / (e - s))) / 2``.
    """
    if not 0 <= epoch < cfg.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {cfg.epochs})")
    bounds = (0,) + cfg.restarts + (cfg.epochs,)
    for start, end in zip(bounds, bounds[1:]):
        if start <= epoch < end:
            t_cur, t_i = epoch - start, end - start
            return cfg.lr_min + 0.5 * (cfg.base_lr - cfg.lr_min) * (1 + math.cos(math.pi * t_cur / t_i))
    raise AssertionError("unreachable")


# -- Adam ----------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters with no gradient are treated as having a zero gradient.
    A non-finite gradient aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} entries); step aborted")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)


class Adam:
    """Adam over a model's named parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.state = AdamState()

    def step(self, lr: float) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            lr,
            self.cfg,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, m in self.state.m.items():
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], step: int) -> None:
        self.state = AdamState(step=step)
        for name, p in self.params.items():
            if f"adam.m.{name}" in tensors:
                self.state.m[name] = np.array(tensors[f"adam.m.{name}"], dtype=p.dtype)
                self.state.v[name] = np.array(tensors[f"adam.v.{name}"], dtype=p.dtype)


# -- metrics -------------------------------------------------------------------
@dataclass
class EvalReport:
    top1_accuracy: float
    macro_f1: float
    per_class_accuracy: List[float]
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "top1_accuracy": self.top1_accuracy,
            "macro_f1": self.macro_f1,
            "per_class_accuracy": [None if math.isnan(a) else a for a in self.per_class_accuracy],
            "confusion": self.confusion.astype(int).tolist(),
        }

    def confusion_csv(self) -> str:
        k = self.confusion.shape[0]
        rows = ["true\\pred," + ",".join(str(j) for j in range(k))]
        for i in range(k):
            rows.append(f"{i}," + ",".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(rows) + "\n"


def confusion_matrix(labels: Sequence[int], preds: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
    return conf


def report_from_confusion(conf: np.ndarray) -> EvalReport:
    """Top-1, macro F1 and per-class accuracy from a confusion matrix.

    Classes with neither instances nor predictions are left out of the F1
    mean; a class with only one of the two scores F1 = 0. Per-class accuracy
    of a class without instances is NaN.
    """
    conf = np.asarray(conf)
    total = conf.sum()
    if total == 0:
        raise UsageError("cannot evaluate an empty confusion matrix")
    tp = np.diag(conf).astype(float)
    support = conf.sum(axis=1).astype(float)
    predicted = conf.sum(axis=0).astype(float)
    f1s = []
    for k in range(conf.shape[0]):
        if support[k] == 0 and predicted[k] == 0:
            continue
        p = tp[k] / predicted[k] if predicted[k] else 0.0
        r = tp[k] / support[k] if support[k] else 0.0
        f1s.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, tp / np.where(support > 0, support, 1), np.nan)
    return EvalReport(
        top1_accuracy=float(tp.sum() / total),
        macro_f1=float(np.mean(f1s)),
        per_class_accuracy=[float(a) for a in per_class],
        confusion=conf,
    )


def predict(model, x: np.ndarray, rgb: Optional[np.ndarray] = None, batch_size: int = 64) -> np.ndarray:
    """Logits for every sample, computed in eval mode without graph recording."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for lo in range(0, len(x), batch_size):
                xb = Tensor(x[lo : lo + batch_size], dtype=model.dtype)
                rb = None if rgb is None else Tensor(rgb[lo : lo + batch_size], dtype=model.dtype)
                out.append(model(xb, rb).data)
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, batch_size: int = 64) -> EvalReport:
    """Evaluate ``model`` on a dataset exposing ``x``, ``y`` and optional ``rgb``."""
    if len(dataset.y) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    logits = predict(model, dataset.x, getattr(dataset, "rgb", None), batch_size)
    preds = logits.argmax(axis=1)
    return report_from_confusion(confusion_matrix(dataset.y, preds, model.cfg.num_classes))


# -- training ------------------------------------------------------------------
@dataclass
class TrainResult:
    history: List[dict]
    optimizer: Adam
    epochs_run: int


def train(model, dataset, cfg: TrainConfig, val=None, log_path=None, on_epoch=None) -> TrainResult:
    """Train ``model`` in place with Adam and the cosine warm-restart schedule.

    The sample order of each epoch comes from a generator seeded with
    ``cfg.seed``, so a fixed seed and model initialization reproduce the run.
    Each history record holds epoch, lr, train_loss and train_acc (accuracy
    of the training-mode predictions seen during the epoch), plus val_acc and
    val_f1 when ``val`` is given.
    """
    n = len(dataset.y)
    if n == 0:
        raise UsageError("training set is empty")
    rgb = getattr(dataset, "rgb", None)
    model.check_input(dataset.x.shape, None if rgb is None else rgb.shape)
    labels = np.asarray(dataset.y, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.cfg.num_classes:
        raise ShapeError(f"labels span [{labels.min()}, {labels.max()}] but the model has {model.cfg.num_classes} classes")

    opt = Adam(model.named_parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg)
            model.train()
            order = rng.permutation(n)
            loss_sum, correct = 0.0, 0
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                xb = Tensor(dataset.x[idx], dtype=model.dtype)
                rb = None if rgb is None else Tensor(rgb[idx], dtype=model.dtype)
                opt.zero_grad()
                logits = model(xb, rb)
                loss = softmax_cross_entropy(logits, labels[idx])
                loss.backward()
                opt.step(lr)
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            record = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n, "train_acc": correct / n}
            if val is not None:
                rep = evaluate(model, val)
                record["val_acc"] = rep.top1_accuracy
                record["val_f1"] = rep.macro_f1
            history.append(record)
            logger.info("epoch %d lr %.3g loss %.4f acc %.3f", epoch, lr, record["train_loss"], record["train_acc"])
            if log is not None:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if on_epoch is not None and on_epoch(record) is False:
                return TrainResult(history, opt, epoch + 1)
    finally:
        if log is not None:
            log.close()
    return TrainResult(history, opt, cfg.epochs)


# -- checkpoints -----------------------------------------------------------------
def save_checkpoint(path, model, train_cfg: Optional[TrainConfig] = None, optimizer: Optional[Adam] = None, epoch: int = 0, extra: Optional[dict] = None) -> None:
    """Write parameters, buffers and optimizer moments as GTN tensors in a zip archive."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    manifest = {
        "model_config": model.cfg.to_dict(),
        "epoch": epoch,
        "dtype": str(np.dtype(model.dtype)),
    }
    if train_cfg is not None:
        manifest["train_config"] = train_cfg.to_dict()
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        manifest["adam_step"] = optimizer.state.step
    if extra:
        manifest.update(extra)
    gtn.save_archive(path, tensors, manifest)


def load_checkpoint(path, adjacency=None):
    """Rebuild the model from a checkpoint. Returns ``(model, manifest, tensors)``.

    ``adjacency`` defaults to the stored fixed adjacency buffers.
    """
    from .model import AGCN, ModelConfig

    tensors, manifest = gtn.load_archive(path)
    if manifest is None:
        raise ConfigError(f"{path} has no manifest")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if adjacency is None:
        adjacency = tensors["model.blocks.0.gcn.A"]
    model = AGCN(cfg, adjacency)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, manifest, tensors
