"""Adam training loop, validation and prediction."""

import csv
import logging
import math
import queue
import threading
import time
from pathlib import Path
from typing import Dict, Final, Iterator, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
import numpy.typing as npt

from histoseg import data, metrics
from histoseg.checkpoint import save_checkpoint
from histoseg.errors import ConfigError, GradientError, NonFiniteLossError
from histoseg.losses import DEFAULT_LOSS, LossComponents, LossConfig, multi_loss
from histoseg.network import OUTPUT_STRIDE, HistoSegNet, NetworkSpec, build
from histoseg.params import ParameterStore
from histoseg.tensor import Tape, Tensor, backward
from histoseg.util import jsonio

__all__ = (
    "TrainConfig",
    "Adam",
    "adam_step",
    "EpochRecord",
    "TrainingLog",
    "TrainResult",
    "ValidationResult",
    "train",
    "train_step",
    "evaluate_model",
    "predict_image",
    "smoothed",
    "LOG_COLUMNS",
)

logger = logging.getLogger(__name__)

LOG_COLUMNS: Final = (
    "epoch",
    "train_loss",
    "bce",
    "focal",
    "dice",
    "val_loss",
    "val_iou",
    "seconds",
)

PathLike = Union[str, Path]


def _non_negative(
    instance: object, attribute: "attr.Attribute[float]", value: float
) -> None:
    if not value >= 0:
        msg = f"{attribute.name} must be non-negative, got {value}"
        raise ConfigError(msg)


def _positive(
    instance: object, attribute: "attr.Attribute[float]", value: float
) -> None:
    if not value > 0:
        msg = f"{attribute.name} must be positive, got {value}"
        raise ConfigError(msg)


def _at_least_one(
    instance: object, attribute: "attr.Attribute[int]", value: int
) -> None:
    if not value >= 1:
        msg = f"{attribute.name} must be at least 1, got {value}"
        raise ConfigError(msg)


def _beta(
    instance: object, attribute: "attr.Attribute[float]", value: float
) -> None:
    if not 0 <= value < 1:
        msg = f"{attribute.name} must be in [0, 1), got {value}"
        raise ConfigError(msg)


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class TrainConfig:
    """Optimizer and loop settings.

    A learning rate of 0 is accepted and leaves trainable parameters
    untouched, which makes it a useful control run.
    """

    learning_rate: float = attr.ib(default=0.01, validator=_non_negative)
    batch_size: int = attr.ib(default=8, validator=_at_least_one)
    epochs: int = attr.ib(default=30, validator=_at_least_one)
    beta1: float = attr.ib(default=0.9, validator=_beta)
    beta2: float = attr.ib(default=0.999, validator=_beta)
    adam_epsilon: float = attr.ib(default=1e-8, validator=_positive)
    seed: int = 0
    augment_flip: bool = False
    augment_rotate: bool = False
    prefetch: int = attr.ib(default=2, validator=_at_least_one)
    loss: LossConfig = DEFAULT_LOSS


def adam_step(store: ParameterStore, config: TrainConfig, t: int) -> None:
    """One bias-corrected Adam update of every trainable tensor in ``store``.

    Moments live in the store's ``m`` and ``v`` slots.
    """
    if t < 1:
        msg = f"Adam step index must be at least 1, got {t}"
        raise ConfigError(msg)

    lr = config.learning_rate
    beta1, beta2 = config.beta1, config.beta2
    correction1 = 1 - beta1**t
    correction2 = 1 - beta2**t
    for name, tensor in store.trainable():
        grad = tensor.grad
        if grad is None:
            msg = f"Parameter {name!r} has no gradient"
            raise GradientError(msg)

        m = store.slot(name, "m")
        v = store.slot(name, "v")
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)


class Adam:
    """Adam optimizer bound to one parameter store."""

    def __init__(self, store: ParameterStore, config: TrainConfig) -> None:
        """Start at step 0 with zero moments."""
        self.store = store
        self.config = config
        self.steps = 0

    def step(self) -> None:
        """Apply one update from the current gradients."""
        self.steps += 1
        adam_step(self.store, self.config, self.steps)


@attr.s(frozen=True, auto_attribs=True)
class EpochRecord:
    """One row of the training log."""

    epoch: int
    train_loss: float
    bce: float
    focal: float
    dice: float
    val_loss: float
    val_iou: float
    seconds: float


@attr.s(auto_attribs=True)
class TrainingLog:
    """Per-epoch records, written as CSV and mirrored JSON."""

    records: List[EpochRecord] = attr.ib(factory=list)

    def append(self, record: EpochRecord) -> None:
        """Add the next epoch; epochs must be contiguous from 1."""
        expected = len(self.records) + 1
        if record.epoch != expected:
            msg = f"Expected epoch {expected}, got {record.epoch}"
            raise ValueError(msg)

        self.records.append(record)

    def to_rows(self) -> List[Dict[str, float]]:
        """Records as dictionaries keyed by column."""
        return [attr.asdict(record) for record in self.records]

    def write_csv(self, path: PathLike) -> None:
        """Write the ``LOG_COLUMNS`` table."""
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.to_rows())

    def write_json(self, path: PathLike) -> None:
        """Write the records as a JSON list."""
        jsonio.dump(path, self.to_rows())


@attr.s(frozen=True, auto_attribs=True)
class ValidationResult:
    """Mean loss and foreground IoU over a sample set."""

    loss: float
    iou: float


@attr.s(frozen=True, auto_attribs=True)
class TrainResult:
    """Outcome of :func:`train`."""

    graph: HistoSegNet
    store: ParameterStore
    log: TrainingLog
    best_epoch: int


def _batches(
    samples: Sequence[data.LabeledSample], size: int
) -> Iterator[Sequence[data.LabeledSample]]:
    for start in range(0, len(samples), size):
        yield samples[start : start + size]


def train_step(
    graph: HistoSegNet,
    optimizer: Adam,
    x: Tensor,
    y: npt.NDArray[np.floating],
    loss: LossConfig = DEFAULT_LOSS,
) -> LossComponents:
    """Forward, multi-loss, backward and one Adam update.

    Raises :class:`NonFiniteLossError` before touching the parameters when
    the loss is not finite.
    """
    graph.store.zero_grad()
    with Tape():
        total, components = multi_loss(y, graph(x, "train"), loss)
        if not math.isfinite(components.total):
            msg = f"Non-finite loss {components.total}"
            raise NonFiniteLossError(msg)

        backward(total)

    optimizer.step()
    return components


def evaluate_model(
    graph: HistoSegNet,
    samples: Sequence[data.LabeledSample],
    *,
    loss: LossConfig = DEFAULT_LOSS,
    batch_size: int = 8,
    threshold: float = 0.5,
) -> ValidationResult:
    """Infer-mode mean loss and mean foreground IoU."""
    if not samples:
        msg = "Cannot evaluate on an empty sample list"
        raise ValueError(msg)

    losses: List[float] = []
    ious: List[float] = []
    for batch in _batches(samples, batch_size):
        x, y = data.to_batch(batch)
        p = graph(x, "infer")
        _, components = multi_loss(y, p, loss)
        losses.extend([components.total] * len(batch))
        masks = metrics.binarize(p, threshold)
        ious.extend(
            metrics.iou(pred[0], sample.mask)
            for pred, sample in zip(masks, batch)
        )

    return ValidationResult(float(np.mean(losses)), float(np.mean(ious)))


def predict_image(
    graph: HistoSegNet, image: "npt.ArrayLike"
) -> npt.NDArray[np.floating]:
    """Foreground probabilities for a full-size H x W x 3 image.

    The image is reflection-padded to a multiple of the output stride and
    the prediction is cropped back to H x W.
    """
    padded, (height, width) = data.pad_to_multiple(image, OUTPUT_STRIDE)
    x = Tensor(padded.transpose(2, 0, 1)[None] / 255.0)
    return graph(x, "infer").data[0, 0, :height, :width]


class _BatchProducer(threading.Thread):
    """Shuffles and prepares training batches ahead of the optimizer."""

    _DONE: Final = object()

    def __init__(
        self,
        samples: Sequence[data.LabeledSample],
        config: TrainConfig,
        rng: np.random.Generator,
    ) -> None:
        """Prepare one epoch of batches from ``samples``."""
        super().__init__(name="histoseg-batches", daemon=True)
        self.samples = samples
        self.config = config
        self.rng = rng
        self.queue: "queue.Queue[object]" = queue.Queue(maxsize=config.prefetch)
        self.stopped = threading.Event()

    def run(self) -> None:
        """Fill the queue, then signal the end of the epoch."""
        try:
            size = self.config.batch_size
            order = self.rng.permutation(len(self.samples))
            for start in range(0, len(order) - size + 1, size):
                batch = [
                    data.augment(
                        self.samples[i],
                        self.rng,
                        flip=self.config.augment_flip,
                        rotate=self.config.augment_rotate,
                    )
                    for i in order[start : start + size]
                ]
                if not self._put(batch):
                    return
        except Exception as e:  # noqa: BLE001
            self._put(e)
        finally:
            self._put(self._DONE)

    def _put(self, item: object) -> bool:
        while not self.stopped.is_set():
            try:
                self.queue.put(item, timeout=0.1)
            except queue.Full:
                continue
            return True
        return False

    def __iter__(self) -> Iterator[List[data.LabeledSample]]:
        """Consume batches until the producer is done."""
        while True:
            item = self.queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item  # type: ignore[misc]

    def stop(self) -> None:
        """Unblock and finish the producer early."""
        self.stopped.set()


def _check_splits(
    train_samples: Sequence[data.LabeledSample],
    val_samples: Sequence[data.LabeledSample],
    config: TrainConfig,
) -> None:
    if not train_samples or not val_samples:
        msg = "Training needs non-empty train and val splits"
        raise ConfigError(msg)

    if len(train_samples) < config.batch_size:
        msg = (
            f"{len(train_samples)} training samples make no full batch of "
            f"{config.batch_size}; the last partial batch is always dropped"
        )
        raise ConfigError(msg)


def train(
    train_samples: Sequence[data.LabeledSample],
    val_samples: Sequence[data.LabeledSample],
    spec: NetworkSpec,
    config: TrainConfig,
    *,
    out_dir: Optional[PathLike] = None,
) -> TrainResult:
    """Train from scratch and keep the model with the best validation IoU.

    With ``out_dir`` set, ``best.ckpt``, ``last.ckpt``, ``log.csv`` and
    ``log.json`` are rewritten after every epoch.
    """
    _check_splits(train_samples, val_samples, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    graph, store = build(spec, config.seed)
    optimizer = Adam(store, config)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    best_iou = -math.inf
    best_epoch = 0
    step = 0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        totals: List[LossComponents] = []
        producer = _BatchProducer(train_samples, config, rng)
        producer.start()
        try:
            for index, batch in enumerate(producer, start=1):
                step += 1
                x, y = data.to_batch(batch)
                try:
                    components = train_step(graph, optimizer, x, y, config.loss)
                except NonFiniteLossError as e:
                    msg = f"{e} at epoch {epoch}, batch {index}, step {step}"
                    raise NonFiniteLossError(msg) from None

                totals.append(components)
                logger.debug(
                    "epoch %d step %d loss %.6f", epoch, step, components.total
                )
        finally:
            producer.stop()
            producer.join()

        validation = evaluate_model(
            graph, val_samples, loss=config.loss, batch_size=config.batch_size
        )
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean([c.total for c in totals])),
            bce=float(np.mean([c.bce for c in totals])),
            focal=float(np.mean([c.focal for c in totals])),
            dice=float(np.mean([c.dice for c in totals])),
            val_loss=validation.loss,
            val_iou=validation.iou,
            seconds=time.perf_counter() - started,
        )
        log.append(record)
        logger.info(
            "epoch %d: train %.4f (bce %.4f focal %.4f dice %.4f) "
            "val %.4f iou %.4f in %.1fs",
            epoch,
            record.train_loss,
            record.bce,
            record.focal,
            record.dice,
            record.val_loss,
            record.val_iou,
            record.seconds,
        )

        improved = record.val_iou > best_iou
        if improved:
            best_iou, best_epoch = record.val_iou, epoch

        if out is not None:
            if improved:
                save_checkpoint(out / "best.ckpt", store)
            save_checkpoint(out / "last.ckpt", store)
            log.write_csv(out / "log.csv")
            log.write_json(out / "log.json")

    return TrainResult(graph, store, log, best_epoch)


def smoothed(values: Sequence[float], window: int = 5) -> Tuple[float, ...]:
    """Trailing moving average, shorter at the start.

    >>> smoothed([1.0, 3.0, 5.0], window=2)
    (1.0, 2.0, 4.0)
    """
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1) : i + 1]
        out.append(sum(chunk) / len(chunk))

    return tuple(out)
