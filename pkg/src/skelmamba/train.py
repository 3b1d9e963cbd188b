"""Optimization recipe, training loop, evaluation and the ablation harness."""

from __future__ import annotations

import dataclasses
import gc
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tn
from .data import Dataset, prepare_arrays
from .errors import ConfigError, DomainError, NumericError, SchemaError
from .model import ModelConfig, SkelMamba
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    weight_decay: float = 5e-4
    warmup_epochs: int = 25
    lr_start: float = 1e-7
    lr_peak: float = 1e-3
    lr_floor: float = 1e-7
    grad_clip: float = 1.0
    label_smoothing: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    dtype: str = "float32"
    modality: str = "joint"

    @classmethod
    def paper(cls, **kw) -> TrainConfig:
        return cls(**{"epochs": 500, "batch_size": 128, **kw})

    def validate(self) -> None:
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}={getattr(self, name)} must be positive")
        for name in ("lr_start", "lr_peak", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}={getattr(self, name)} must be positive")
        if self.weight_decay < 0 or self.lr_floor < 0:
            raise ConfigError("weight decay and lr floor must be non-negative")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs})")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing={self.label_smoothing} must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------- recipe
def label_smooth_ce(logits: Tensor, labels, alpha: float = 0.1) -> Tensor:
    """Mean cross-entropy against ``(1 - alpha) * onehot + alpha / K``."""
    if not 0 <= alpha < 1:
        raise DomainError(f"label smoothing alpha={alpha} outside [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise DomainError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise DomainError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    target = np.full((B, K), alpha / K, dtype=logits.dtype)
    target[np.arange(B), labels] += 1.0 - alpha
    logp = tn.log_softmax(logits, axis=-1)
    return -(logp * target).sum() / B


def lr_at(epoch: int, step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Per-step linear warmup, then cosine annealing over the remaining epochs, never below the floor."""
    pos = epoch + step / steps_per_epoch
    warm = config.warmup_epochs
    if pos < warm:
        lr = config.lr_start + (config.lr_peak - config.lr_start) * pos / warm
    else:
        span = config.epochs - warm
        progress = (pos - warm) / span if span > 0 else 1.0
        lr = config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    return max(lr, config.lr_floor)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grads(params: Sequence[Tensor], threshold: float = 1.0) -> float:
    """Scale all gradients jointly so their global l2 norm is at most ``threshold``; returns the factor."""
    params = list(params)
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericError(f"gradient norm is {norm}")
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(factor)
    return factor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: dict,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    bias_correction: bool = True,
) -> None:
    """One AdamW update in place, with weight decay decoupled from the gradient.

    ``state`` maps ``id(param)`` to :class:`AdamState`. Tensors with
    ``decay=False`` skip the decay term.
    """
    b1, b2 = betas
    for p, g in zip(params, grads):
        if g is None:
            continue
        st = state.get(id(p))
        if st is None:
            st = state[id(p)] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.t += 1
        st.m *= b1
        st.m += (1 - b1) * g
        st.v *= b2
        st.v += (1 - b2) * (g * g)
        if bias_correction:
            mhat = st.m / (1 - b1**st.t)
            vhat = st.v / (1 - b2**st.t)
        else:
            mhat, vhat = st.m, st.v
        if wd and getattr(p, "decay", True):
            p.data *= 1 - lr * wd
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.state: dict = {}

    def step(self, lr: float) -> None:
        c = self.config
        adamw_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            lr,
            c.weight_decay,
            (c.beta1, c.beta2),
            c.adam_eps,
        )


# ------------------------------------------------------------ evaluation
@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    scores: np.ndarray  # class probabilities, (N, K)

    @property
    def predictions(self) -> np.ndarray:
        return self.scores.argmax(axis=-1)


def accuracy_from_confusion(confusion: np.ndarray) -> float:
    confusion = np.asarray(confusion)
    total = confusion.sum()
    return float(np.trace(confusion) / total) if total else 0.0


def predict_scores(model: SkelMamba, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities in BN-eval mode; restores the previous mode afterwards."""
    was_training = model.training
    model.eval()
    dtype = model.token.dtype
    out = []
    try:
        with tn.no_grad():
            for i in range(0, len(X), batch_size):
                logits = model(np.asarray(X[i : i + batch_size], dtype=dtype)).data.astype(np.float64)
                z = logits - logits.max(axis=-1, keepdims=True)
                e = np.exp(z)
                out.append(e / e.sum(axis=-1, keepdims=True))
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))


def evaluate_arrays(model: SkelMamba, X: np.ndarray, y: np.ndarray, batch_size: int = 64) -> EvalResult:
    scores = predict_scores(model, X, batch_size)
    K = model.config.num_classes
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (np.asarray(y), scores.argmax(axis=-1)), 1)
    return EvalResult(accuracy_from_confusion(confusion), confusion, scores)


def evaluate(model: SkelMamba, dataset: Dataset, modality: str = "joint", batch_size: int = 64) -> EvalResult:
    X, y = prepare_arrays(dataset, model.config.T_in, modality, train=False, dtype=model.token.dtype)
    return evaluate_arrays(model, X, y, batch_size)


# -------------------------------------------------------------- training
def _epoch_record(epoch, lr, loss, acc, val_acc, wall_ms, confusion=None) -> dict:
    rec = {
        "epoch": epoch,
        "lr": lr,
        "train_loss": loss,
        "train_acc": acc,
        "val_acc": val_acc,
        "wall_ms": wall_ms,
    }
    if confusion is not None:
        rec["val_confusion"] = confusion
    return rec


def train(
    model: SkelMamba,
    dataset: Dataset,
    config: TrainConfig,
    val_set: Dataset | None = None,
    log_path: str | Path | None = None,
    timestamps: bool = True,
    callback: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run the schedule; returns one metrics record per epoch (also appended to ``log_path``).

    A truthy return from ``callback`` ends training after that epoch.
    """
    config.validate()
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    K = model.config.num_classes
    labels = dataset.labels()
    if labels.max() >= K:
        raise ConfigError(f"dataset label {labels.max()} exceeds model class count {K}")
    dtype = np.dtype(config.dtype)
    if model.token.dtype != dtype:
        model.astype(dtype)
    T = model.config.T_in
    X_fixed = None if config.augment else prepare_arrays(dataset, T, config.modality, dtype=dtype)[0]
    if val_set is not None:
        Xv, yv = prepare_arrays(val_set, T, config.modality, dtype=dtype)

    params = model.parameters()
    opt = AdamW(params, config)
    n = len(dataset)
    steps = math.ceil(n / config.batch_size)
    log = Path(log_path) if log_path else None
    if log is not None:
        log.parent.mkdir(parents=True, exist_ok=True)
        log.write_text("")
    records = []
    model.train()
    gc_was_enabled = gc.isenabled()
    gc.disable()  # the graph is acyclic; reference counting frees it
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            if config.augment:
                X = prepare_arrays(dataset, T, config.modality, train=True, seed=config.seed, epoch=epoch, dtype=dtype)[0]
            else:
                X = X_fixed
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            loss_sum, correct = 0.0, 0
            lr = config.lr_start
            for step in range(steps):
                idx = order[step * config.batch_size : (step + 1) * config.batch_size]
                lr = lr_at(epoch, step, config, steps)
                model.zero_grad()
                try:
                    logits = model(X[idx])
                    loss = label_smooth_ce(logits, labels[idx], config.label_smoothing)
                    if not np.isfinite(loss.item()):
                        raise NumericError(f"loss is {loss.item()}")
                    loss.backward()
                    clip_grads(params, config.grad_clip)
                except NumericError as exc:
                    global_step = epoch * steps + step
                    raise NumericError(f"training diverged at step {global_step} (epoch {epoch}): {exc}") from exc
                opt.step(lr)
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=-1) == labels[idx]).sum())
                del logits, loss
            val_acc, confusion = None, None
            if val_set is not None:
                res = evaluate_arrays(model, Xv, yv)
                val_acc, confusion = res.accuracy, res.confusion.tolist()
            wall = round((time.perf_counter() - t0) * 1000.0, 3) if timestamps else None
            rec = _epoch_record(epoch, lr, loss_sum / n, correct / n, val_acc, wall, confusion)
            records.append(rec)
            if log is not None:
                with log.open("a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback is not None and callback(rec):
                break
    finally:
        if gc_was_enabled:
            gc.enable()
    return records


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -------------------------------------------------------------- ablation
ABLATION_ROWS = ("1d", "c2d", "token", "fusion", "attention")


def stream_variant(base: ModelConfig, streams: str) -> ModelConfig:
    """Keep only the given stream letters out of ``s``, ``m``, ``t``."""
    letters = "".join(ch for ch in "smt" if ch in streams)
    if not letters:
        raise ConfigError(f"stream combination {streams!r} selects nothing")
    return dataclasses.replace(base, streams=letters)


def component_variant(base: ModelConfig, row: str) -> ModelConfig:
    """Cumulative component rows: each adds one element to the previous.

    ``1d``: single-direction scans, no tokens, fixed equal fusion, no channel
    attention; ``c2d``: four-direction scans; ``token``: partition tokens;
    ``fusion``: learnable fusion weights; ``attention``: channel attention
    (the complete layer).
    """
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}; expected one of {ABLATION_ROWS}")
    level = ABLATION_ROWS.index(row)
    return dataclasses.replace(
        base,
        streams="smt",
        scan_mode="c2d" if level >= 1 else "1d",
        use_token=level >= 2,
        learn_fusion=level >= 3,
        use_attention=level >= 4,
    )


@dataclass
class AblationResult:
    name: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))


def run_variant(
    name: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    seeds: Sequence[int],
    log_dir: str | Path | None = None,
) -> AblationResult:
    accs = []
    for seed in seeds:
        model = SkelMamba(model_config, rng=seed)
        cfg = dataclasses.replace(train_config, seed=seed)
        log = Path(log_dir) / f"{name}_seed{seed}.jsonl" if log_dir else None
        train(model, train_set, cfg, log_path=log, timestamps=False)
        accs.append(evaluate(model, test_set, cfg.modality).accuracy)
    return AblationResult(name, accs)


def run_ablation(
    variants: dict[str, ModelConfig],
    train_config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    seeds: Sequence[int] = (0, 1, 2),
    log_dir: str | Path | None = None,
    progress: Callable[[AblationResult], None] | None = None,
) -> list[AblationResult]:
    results = []
    for name, cfg in variants.items():
        res = run_variant(name, cfg, train_config, train_set, test_set, seeds, log_dir)
        results.append(res)
        if progress is not None:
            progress(res)
    return results
