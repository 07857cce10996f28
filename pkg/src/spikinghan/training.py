"""
Loss, optimiser and the training loop.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from spikinghan import autodiff as ad
from spikinghan.autodiff import Node
from spikinghan.config import ModelConfig, TrainConfig
from spikinghan.data_io import UNLABELED, DatasetBundle
from spikinghan.errors import ConfigError, DivergenceError, NumericError, ShapeError
from spikinghan.metrics import f1_scores, predict
from spikinghan.model import ModelInputs, ModelParams, init_params, model_forward, parameter_count, predict_eval

logger = logging.getLogger(__name__)

LOG_EPS = 1e-8


# region Loss
def masked_cross_entropy(
    y_hat: Node,
    labels: np.ndarray,
    labeled_ids: np.ndarray,
    eps: float = LOG_EPS,
    grad_floor: Optional[float] = None,
) -> Node:
    """
    L = -sum_{i in labeled_ids} ln(max(y_hat[i, y_i], eps)).

    `labels` holds class ids (or one-hot rows); other nodes contribute nothing.
    `grad_floor` bounds the gradient of each term by 1 / grad_floor without changing L.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != y_hat.shape:
            raise ShapeError("One-hot labels do not match the readout", labels.shape, y_hat.shape)
        labels = np.argmax(labels, axis=1)
    labeled_ids = np.asarray(labeled_ids, dtype=np.int64)
    if labeled_ids.size == 0:
        raise ConfigError("Cross-entropy over an empty labeled set")
    targets = labels[labeled_ids]
    if np.any(targets == UNLABELED):
        raise ConfigError("Cross-entropy given an unlabeled node id")

    picked = ad.gather(y_hat, labeled_ids, targets)
    return ad.scale(ad.total(ad.log_clamped(picked, eps, grad_floor)), -1.0)


# endregion


# region Optimiser
@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        tensors = params.tensors()
        return cls(
            m={n: np.zeros_like(p) for n, p in tensors.items()},
            v={n: np.zeros_like(p) for n, p in tensors.items()},
        )


def adam_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ModelParams:
    """
    One bias-corrected Adam update with L2 weight decay added to the gradients.

    Raises:
        NumericError: a non-finite gradient, naming its parameter.
    """
    tensors = params.tensors()
    for name, theta in tensors.items():
        grad = grads.get(name)
        if grad is None or grad.shape != theta.shape:
            raise ShapeError(f"Gradient for '{name}' missing or misshapen", theta.shape)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient for parameter '{name}'")

    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t

    updated = {}
    for name, theta in tensors.items():
        g = grads[name] + weight_decay * theta
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ModelParams.from_tensors(updated)


# endregion


# region Early stopping
class EarlyStopping:
    """
    Stops training once the monitored score has not improved for `patience` epochs.

    Only a strictly higher score counts as an improvement, so ties keep the earlier epoch.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be at least 1, got {patience}")
        self.patience = patience
        self.counter = 0
        self.best_score: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.early_stop = False

    def __call__(self, score: float, epoch: int) -> bool:
        """Record one epoch; returns True when it is the new best."""
        if self.best_score is None or score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.counter = 0
            return True

        self.counter += 1
        logger.debug("EarlyStopping counter: %d out of %d", self.counter, self.patience)
        if self.counter >= self.patience:
            self.early_stop = True
        return False


# endregion


# region Training
@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_micro_f1: float
    val_macro_f1: float


HISTORY_COLUMNS: Tuple[str, ...] = ("epoch", "train_loss", "val_micro_f1", "val_macro_f1")


@dataclass
class Metrics:
    test_micro_f1: float
    test_macro_f1: float
    val_micro_f1: float
    val_macro_f1: float
    best_epoch: int
    epochs_run: int
    param_count: int
    beta: Dict[str, float]
    mean_firing_rate: float
    class_firing_rate: List[float]
    spike_sparsity: float
    train_ms: float = 0.0
    epoch_ms_mean: float = 0.0
    forward_ms: float = 0.0
    loss_history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: Metrics
    history: List[EpochRecord]


def evaluate(
    inputs: ModelInputs,
    params: ModelParams,
    cfg: ModelConfig,
    labels: np.ndarray,
    ids: np.ndarray,
    num_classes: int,
) -> Tuple[float, float]:
    """Micro/Macro-F1 of an eval-mode forward pass restricted to `ids`."""
    y_hat = predict_eval(inputs, params, cfg).y_hat.value
    return f1_scores(predict(y_hat)[ids], labels[ids], num_classes)


def train(
    dataset: DatasetBundle,
    cfg: TrainConfig,
    *,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """
    Full-batch training with Adam and early stopping on validation Micro-F1.

    All randomness (initialisation and dropout) comes from one generator seeded
    with `cfg.seed`, so identical inputs give identical histories.

    Raises:
        ConfigError: missing or empty train/val splits.
        DivergenceError: a non-finite training loss.
    """
    splits = dataset.require_splits()
    if len(splits.train) == 0 or len(splits.val) == 0:
        raise ConfigError("Training needs non-empty train and val splits")

    rng = np.random.default_rng(cfg.seed)
    model_cfg = cfg.model_part()
    # rates are multiples of 1 / T, so a silent target gets the gradient of a single spike
    grad_floor = 1.0 / model_cfg.neuron.time_steps
    inputs = dataset.model_inputs()
    params = init_params(dataset.d_in, dataset.num_classes, model_cfg, rng)
    state = AdamState.zeros_like(params)
    stopper = EarlyStopping(cfg.patience)

    best = params
    history: List[EpochRecord] = []
    epoch_ms: List[float] = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        tick = time.perf_counter()
        result = model_forward(inputs, params, model_cfg, training=True, rng=rng)
        loss = masked_cross_entropy(result.y_hat, dataset.labels, splits.train, grad_floor=grad_floor)
        loss_value = loss.value.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(epoch, loss_value)

        grads = result.tape.backward(loss)
        params = adam_step(
            params,
            grads,
            state,
            cfg.learning_rate,
            betas=cfg.betas,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )

        val_micro, val_macro = evaluate(inputs, params, model_cfg, dataset.labels, splits.val, dataset.num_classes)
        record = EpochRecord(epoch, loss_value, val_micro, val_macro)
        history.append(record)
        epoch_ms.append((time.perf_counter() - tick) * 1000.0)
        logger.info(
            "Epoch %d: loss=%.6f val_micro_f1=%.4f val_macro_f1=%.4f", epoch, loss_value, val_micro, val_macro
        )
        if on_epoch is not None:
            on_epoch(record)

        if stopper(val_micro, epoch):
            best = params
        if stopper.early_stop:
            logger.info("Early stopping at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    train_ms = (time.perf_counter() - start) * 1000.0

    tick = time.perf_counter()
    final = predict_eval(inputs, best, model_cfg)
    forward_ms = (time.perf_counter() - tick) * 1000.0
    predictions = predict(final.y_hat.value)
    test_micro, test_macro = f1_scores(
        predictions[splits.test], dataset.labels[splits.test], dataset.num_classes
    )
    best_record = history[stopper.best_epoch - 1]
    rates = final.trace.firing_rate

    metrics = Metrics(
        test_micro_f1=test_micro,
        test_macro_f1=test_macro,
        val_micro_f1=best_record.val_micro_f1,
        val_macro_f1=best_record.val_macro_f1,
        best_epoch=stopper.best_epoch,
        epochs_run=len(history),
        param_count=parameter_count(dataset.d_in, cfg.hidden_dim, dataset.num_classes, cfg.neuron.kind),
        beta=dict(zip(dataset.metapath_names, final.beta_values.tolist())),
        mean_firing_rate=float(rates.mean()),
        class_firing_rate=rates.mean(axis=0).tolist(),
        spike_sparsity=final.trace.sparsity,
        train_ms=train_ms,
        epoch_ms_mean=float(np.mean(epoch_ms)),
        forward_ms=forward_ms,
        loss_history=[r.train_loss for r in history],
    )
    return TrainResult(params=best, metrics=metrics, history=history)


# endregion
