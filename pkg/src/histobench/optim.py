"""Binary cross-entropy loss, Adam, and the epoch loop with early stopping.

All run randomness derives from TrainingConfig.seed through fixed offsets
(SEED_* constants below): batch shuffling, parameter init, dropout masks,
augmentation draws, and the validation split each get their own stream, so
one seed pins the entire run bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, augment_batch, batches, split
from .errors import ParameterError, ShapeError, TrainingDivergedError
from .nn import Network

# sub-seed offsets applied to TrainingConfig.seed
SEED_SHUFFLE = 1
SEED_INIT = 2
SEED_DROPOUT = 3
SEED_AUGMENT = 4
SEED_SPLIT = 5

# validation loss must drop by at least this much to count as improvement
IMPROVEMENT_EPS = 1e-6

_CLAMP = 1e-7


@dataclass
class TrainingConfig:
    learning_rate: float
    epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    augment: bool = True
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ParameterError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ParameterError(f"{name} must be in (0, 1), got {b}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")


def bce_loss(probs, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. probs.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; the
    gradient (p - y) / (p (1 - p)) / b is exact for the clamped loss, so it
    is zero where the clamp is active. Accepts [b] or [b, 1] probs; the
    gradient matches the input shape.
    """
    p = np.asarray(probs, dtype=np.float64)
    flat = p.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if flat.shape != y.shape:
        raise ParameterError(
            f"bce_loss got {flat.size} probabilities and {y.size} labels"
        )
    if flat.size == 0:
        raise ParameterError("bce_loss needs at least one sample")
    pc = np.clip(flat, _CLAMP, 1.0 - _CLAMP)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    grad = (pc - y) / (pc * (1.0 - pc)) / flat.size
    # The loss is computed on the clamped value, so its derivative is zero
    # wherever the clamp is active; keeping the interior-only gradient also
    # stops saturation spikes (~1/clamp) from flooding Adam's second moment.
    grad *= (flat > _CLAMP) & (flat < 1.0 - _CLAMP)
    return loss, grad.reshape(p.shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainingConfig) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for key, theta in params.items():
        g = grads.get(key)
        if g is None:
            raise ParameterError(f"adam_step: missing gradient for {key!r}")
        if g.shape != theta.shape:
            raise ShapeError(
                f"adam_step: gradient for {key!r} has shape {g.shape}, "
                f"parameter has {theta.shape}"
            )
        m = state.m[key]
        v = state.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        theta -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
        }


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = "max_epochs"


def evaluate(net: Network, dataset: LabeledDataset, batch_size: int = 64,
             ) -> tuple[float, np.ndarray]:
    """Inference over the dataset in order; returns (mean BCE loss, scores)."""
    if len(dataset) == 0:
        raise ParameterError("evaluate needs a nonempty dataset")
    chunks = [net.forward(xb).reshape(-1) for xb, _ in batches(dataset, batch_size)]
    scores = np.concatenate(chunks)
    loss, _ = bce_loss(scores, dataset.labels)
    return loss, scores


def _default_val_metrics(net: Network, val_ds: LabeledDataset, batch_size: int,
                         ) -> tuple[float, float]:
    loss, scores = evaluate(net, val_ds, batch_size)
    acc = float(np.mean((scores >= 0.5).astype(np.int64) == val_ds.labels))
    return loss, acc


def train(net: Network, dataset: LabeledDataset, cfg: TrainingConfig,
          log_stream=None, val_metrics_fn=None, adam_state: AdamState | None = None,
          ) -> tuple[Network, TrainHistory]:
    """The full recipe: seeded shuffle, optional flips, forward/backward/
    Adam per batch, early stopping on validation loss with best-weight
    restore.

    ``log_stream`` receives one JSON line per epoch when given.
    ``val_metrics_fn(net, epoch) -> (val_loss, val_accuracy)`` overrides the
    held-out evaluation; it exists so the stopping rule can be driven by a
    forced loss sequence in diagnostics. ``adam_state`` lets a caller resume
    from (and afterwards inspect or persist) the optimizer moments; by
    default a fresh state is used.
    """
    if len(dataset) == 0:
        raise ParameterError("train needs a nonempty dataset")
    train_ds, val_ds = split(dataset, cfg.validation_fraction, cfg.seed + SEED_SPLIT,
                             stratified=True)
    if len(train_ds) == 0 or (len(val_ds) == 0 and val_metrics_fn is None):
        raise ParameterError(
            f"validation_fraction {cfg.validation_fraction} leaves an empty part "
            f"for {len(dataset)} samples"
        )
    shuffle_rng = np.random.default_rng(cfg.seed + SEED_SHUFFLE)
    dropout_rng = np.random.default_rng(cfg.seed + SEED_DROPOUT)
    augment_rng = np.random.default_rng(cfg.seed + SEED_AUGMENT)

    adam = adam_state if adam_state is not None else AdamState.for_params(net.params())
    history = TrainHistory()
    best_params = None
    bad_streak = 0

    for epoch in range(1, cfg.epochs + 1):
        total, seen = 0.0, 0
        for xb, yb in batches(train_ds, cfg.batch_size, shuffle_rng):
            if cfg.augment:
                xb = augment_batch(xb, augment_rng)
            probs = net.forward(xb, training=True, rng=dropout_rng)
            loss, dprobs = bce_loss(probs, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}"
                )
            grads = net.backward(dprobs)
            adam_step(net.params(), grads, adam, cfg)
            total += loss * len(yb)
            seen += len(yb)
        train_loss = total / seen

        if val_metrics_fn is not None:
            val_loss, val_acc = val_metrics_fn(net, epoch)
        else:
            val_loss, val_acc = _default_val_metrics(net, val_ds, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")

        record = EpochRecord(epoch, train_loss, float(val_loss), float(val_acc))
        history.records.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record.to_dict()) + "\n")
            log_stream.flush()

        if history.best_val_loss - val_loss >= IMPROVEMENT_EPS:
            history.best_val_loss = float(val_loss)
            history.best_epoch = epoch
            best_params = net.snapshot_params()
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= cfg.patience:
                history.stop_reason = "early_stopping"
                break
    else:
        history.stop_reason = "max_epochs"

    if best_params is not None:
        net.load_params(best_params)
    net.trained = True
    return net, history
