"""Training loop: SGD with weight decay, early stopping on validation
balanced accuracy, and the augmentation policies used by the benchmark.

Determinism contract: everything random in a run derives from
``TrainConfig.seed`` through fixed child streams (stream 1 shuffles, stream
2 augments; stream 0 is reserved for model init by the caller). Augmentation
draws are consumed in shuffled sample order, flip coin first, then one
translation draw per spatial axis, so two runs with the same seed produce
bitwise-identical histories.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SubsetError, TrainingDivergedError
from .layers import softmax_cross_entropy
from .tensor import Rng

INIT_STREAM = 0
SHUFFLE_STREAM = 1
AUGMENT_STREAM = 2

AUGMENTATIONS = ("none", "flips", "flips+translation")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    augmentation: str = "none"
    translation_max: int = 2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs it)")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(
                f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}"
            )
        if self.translation_max < 0:
            raise ConfigError("translation_max must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_balanced_accuracy: float
    seconds: float
    is_best: bool


@dataclass
class TrainHistory:
    records: list
    stop_iteration: int
    best_epoch: int
    best_val_bacc: float
    param_count: int
    seed: int

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_balanced_accuracy,is_best\n")
            for r in self.records:
                fh.write(
                    f"{r.epoch},{float(r.train_loss)!r},"
                    f"{float(r.val_balanced_accuracy)!r},{int(r.is_best)}\n"
                )

    def write_summary(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("stop_iteration,best_epoch,best_val_bacc,param_count,seed\n")
            fh.write(
                f"{self.stop_iteration},{self.best_epoch},"
                f"{float(self.best_val_bacc)!r},{self.param_count},{self.seed}\n"
            )


@dataclass
class EarlyStopState:
    best_metric: float = float("-inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    snapshot: dict = field(default_factory=dict)

    def update(self, metric, epoch, model):
        """Record `metric`; ties do not count as improvement."""
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.snapshot = model.state()
            return True
        self.epochs_since_improvement = epoch - self.best_epoch
        return False


def sgd_step(params, grads, cfg):
    """In-place p <- p - lr * (g + weight_decay * p) for every named tensor."""
    lr = cfg.learning_rate
    wd = cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        p -= lr * (g + wd * p)
    return params


def balanced_accuracy(predictions, labels, num_classes):
    """Mean per-class recall; classes absent from `labels` are skipped."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("balanced accuracy is undefined on empty input")
    if predictions.shape != labels.shape:
        raise ValueError(
            f"predictions and labels must align, got {predictions.shape} vs {labels.shape}"
        )
    recalls = []
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            continue
        recalls.append(float((predictions[mask] == c).mean()))
    return float(np.mean(recalls))


def augment_flip(x, rng):
    """Flip one sample [C, *spatial] along the horizontal (last) axis
    with probability 0.5."""
    if rng.random() < 0.5:
        return np.ascontiguousarray(x[..., ::-1])
    return x


def augment_translate(x, rng, max_shift):
    """Shift one sample [C, *spatial] by integers drawn uniformly from
    [-max_shift, +max_shift] per spatial axis; vacated entries are zero."""
    spatial = x.shape[1:]
    if any(max_shift >= s for s in spatial):
        raise ValueError(f"max_shift {max_shift} too large for spatial size {spatial}")
    if max_shift == 0:
        return x
    shifts = rng.integers(-max_shift, max_shift, size=len(spatial))
    if not np.any(shifts):
        return x
    out = np.zeros_like(x)
    src = [slice(None)]
    dst = [slice(None)]
    for shift, size in zip(shifts, spatial):
        shift = int(shift)
        if shift >= 0:
            src.append(slice(0, size - shift))
            dst.append(slice(shift, size))
        else:
            src.append(slice(-shift, size))
            dst.append(slice(0, size + shift))
    out[tuple(dst)] = x[tuple(src)]
    return out


def subset_sample(dataset, fraction, rng):
    """Uniform sample without replacement of round(fraction * N) items.

    Raises SubsetError if any class present in the input disappears.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset.labels)
    n_take = int(round(fraction * n))
    indices = rng.permutation(n)[:n_take]
    sampled = dataset.take(indices)
    before = set(np.unique(dataset.labels).tolist())
    after = set(np.unique(sampled.labels).tolist())
    if before != after:
        missing = sorted(before - after)
        raise SubsetError(
            f"subsampling at fraction {fraction} lost class(es) {missing}"
        )
    return sampled


def _augment_batch(images, cfg, rng):
    """Apply the configured augmentation per sample, in batch order."""
    if cfg.augmentation == "none":
        return images
    out = np.empty_like(images)
    translate = cfg.augmentation == "flips+translation"
    for i in range(images.shape[0]):
        sample = augment_flip(images[i], rng)
        if translate:
            sample = augment_translate(sample, rng, cfg.translation_max)
        out[i] = sample
    return out


def evaluate(model, dataset, batch_size=256):
    """Validation balanced accuracy in eval mode (pure, batch-split safe)."""
    predictions = predict_labels(model, dataset.images, batch_size=batch_size)
    return balanced_accuracy(predictions, dataset.labels, model.spec.num_classes)


def predict_labels(model, images, batch_size=256):
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(images[start : start + batch_size], mode="eval")
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def train(model, train_set, val_set, cfg):
    """Run the optimization loop and return its TrainHistory.

    Epochs are 1-based. After each epoch the validation balanced accuracy
    is measured in eval mode; training stops once it has not improved for
    `cfg.patience` consecutive epochs (or at max_epochs), and the weights
    (including batch-norm running statistics) of the best epoch are
    restored before returning.
    """
    shuffle_rng = Rng(cfg.seed).child(SHUFFLE_STREAM)
    augment_rng = Rng(cfg.seed).child(AUGMENT_STREAM)
    n = train_set.images.shape[0]
    state = EarlyStopState()
    records = []
    stop_iteration = 0

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            images = _augment_batch(train_set.images[batch], cfg, augment_rng)
            labels = train_set.labels[batch]
            logits = model.forward(images, mode="train")
            loss, dlogits = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise TrainingDivergedError("training loss is not finite", epoch)
            loss_sum += loss * len(batch)
            model.backward(dlogits)
            sgd_step(model.named_params(), model.named_grads(), cfg)

        val_bacc = evaluate(model, val_set)
        is_best = state.update(val_bacc, epoch, model)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n,
                val_balanced_accuracy=val_bacc,
                seconds=time.perf_counter() - started,
                is_best=is_best,
            )
        )
        stop_iteration = epoch
        if state.epochs_since_improvement >= cfg.patience:
            break

    model.load_state(state.snapshot)
    return TrainHistory(
        records=records,
        stop_iteration=stop_iteration,
        best_epoch=state.best_epoch,
        best_val_bacc=state.best_metric,
        param_count=model.param_count(),
        seed=cfg.seed,
    )
