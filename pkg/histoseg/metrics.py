"""Segmentation metrics: object-level F1, dice, IoU and mean IoU.

Masks are 2-D boolean arrays. Every metric is defined as 1.0 when both
masks are empty.
"""

import json
from typing import Any, Dict, Final, Iterable, Tuple, Union

import attr
import numpy as np
import numpy.typing as npt
from scipy import ndimage, optimize
from typing_extensions import Literal, Self, TypeAlias

from histoseg.errors import ConfigError, ShapeError
from histoseg.tensor import Tensor

__all__ = (
    "Mask",
    "LabeledObjects",
    "ObjectMatch",
    "ImageRecord",
    "EvalReport",
    "as_mask",
    "binarize",
    "connected_components",
    "object_f1",
    "dice_score",
    "pixel_f1",
    "iou",
    "mean_iou",
    "miou",
    "evaluate_pair",
)

Mask: TypeAlias = npt.NDArray[np.bool_]
Matching: TypeAlias = Literal["greedy", "optimal"]

EIGHT_CONNECTED: Final = np.ones((3, 3), dtype=bool)
METRIC_NAMES: Final = ("object_f1", "pixel_f1", "dice", "iou", "miou")


def as_mask(array: "npt.ArrayLike") -> Mask:
    """Validate a strictly binary 2-D array and return it as booleans."""
    values = np.asarray(array)
    if values.ndim != 2 or 0 in values.shape:  # noqa: PLR2004
        msg = f"A mask must be a non-empty 2-D array, got shape {values.shape}"
        raise ShapeError(msg)

    if values.dtype != np.bool_:
        if not np.isin(values, (0, 1)).all():
            msg = "A mask must only contain 0 and 1"
            raise ShapeError(msg)
        values = values.astype(bool)

    return values


def _pair(pred: "npt.ArrayLike", gt: "npt.ArrayLike") -> Tuple[Mask, Mask]:
    a, b = as_mask(pred), as_mask(gt)
    if a.shape != b.shape:
        msg = f"Mask extents differ: prediction {a.shape}, ground truth {b.shape}"
        raise ShapeError(msg)

    return a, b


def binarize(
    prob_map: Union[Tensor, "npt.ArrayLike"], threshold: float = 0.5
) -> Mask:
    """Foreground where the probability is at least ``threshold``.

    >>> binarize(np.array([[0.5, 0.49]])).tolist()
    [[True, False]]
    """
    if not 0 < threshold < 1:
        msg = f"threshold must be in (0, 1), got {threshold}"
        raise ConfigError(msg)

    values = prob_map.data if isinstance(prob_map, Tensor) else prob_map
    return np.asarray(values) >= threshold


@attr.s(frozen=True, auto_attribs=True)
class LabeledObjects:
    """Label map (0 background, 1..count objects) with per-object sizes."""

    labels: npt.NDArray[np.int64]
    count: int
    sizes: npt.NDArray[np.int64]


def connected_components(mask: "npt.ArrayLike") -> LabeledObjects:
    """8-connected labeling, labels numbered by row-major first pixel.

    >>> connected_components(np.eye(3, dtype=bool)).count
    1
    """
    binary = as_mask(mask)
    raw, count = ndimage.label(binary, structure=EIGHT_CONNECTED)
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    first, ids = first[ids > 0], ids[ids > 0]
    relabel = np.zeros(count + 1, dtype=np.int64)
    relabel[ids[np.argsort(first, kind="stable")]] = np.arange(1, count + 1)
    labels = relabel[raw]
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return LabeledObjects(labels, int(count), sizes.astype(np.int64))


@attr.s(frozen=True, auto_attribs=True)
class ObjectMatch:
    """Object counts from matching predicted to ground-truth objects."""

    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        """2TP / (2TP + FP + FN), or 1.0 when there are no objects at all."""
        denominator = 2 * self.tp + self.fp + self.fn
        return 1.0 if denominator == 0 else 2 * self.tp / denominator


def _intersections(pred: LabeledObjects, gt: LabeledObjects) -> npt.NDArray[np.int64]:
    """(pred count + 1) x (gt count + 1) pixel overlap counts."""
    width = gt.count + 1
    codes = pred.labels.ravel() * width + gt.labels.ravel()
    counts = np.bincount(codes, minlength=(pred.count + 1) * width)
    return counts.reshape(pred.count + 1, width)


def object_f1(
    pred: "npt.ArrayLike",
    gt: "npt.ArrayLike",
    *,
    threshold: float = 0.5,
    matching: Matching = "greedy",
) -> ObjectMatch:
    """Match predicted objects to ground-truth objects one-to-one.

    A match is a true positive when it covers at least ``threshold`` of the
    ground-truth object's area. ``greedy`` visits predictions in label
    order and pairs each with the unmatched ground-truth object it overlaps
    most (lowest label on ties); a failed pairing is a false positive.
    ``optimal`` maximises the number of true positives instead.
    """
    a, b = _pair(pred, gt)
    if not 0 < threshold <= 1:
        msg = f"overlap threshold must be in (0, 1], got {threshold}"
        raise ConfigError(msg)

    pred_objects, gt_objects = connected_components(a), connected_components(b)
    overlap = _intersections(pred_objects, gt_objects)[1:, 1:]
    eligible = (overlap > 0) & (overlap >= threshold * gt_objects.sizes)

    if matching == "greedy":
        tp = 0
        taken = np.zeros(gt_objects.count, dtype=bool)
        for row, ok in zip(overlap, eligible):
            candidates = np.where(taken, -1, row)
            if gt_objects.count == 0 or candidates.max() <= 0:
                continue

            best = int(np.argmax(candidates))
            if ok[best]:
                taken[best] = True
                tp += 1
    elif matching == "optimal":
        if eligible.size == 0:
            return ObjectMatch(0, pred_objects.count, gt_objects.count)

        rows, cols = optimize.linear_sum_assignment(
            eligible.astype(np.int64), maximize=True
        )
        tp = int(eligible[rows, cols].sum())
    else:
        msg = f"Unknown matching {matching!r}, expected 'greedy' or 'optimal'"
        raise ConfigError(msg)

    return ObjectMatch(tp, pred_objects.count - tp, gt_objects.count - tp)


def dice_score(pred: "npt.ArrayLike", gt: "npt.ArrayLike") -> float:
    """2|A and B| / (|A| + |B|)."""
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0

    return 2 * int((a & b).sum()) / total


def pixel_f1(pred: "npt.ArrayLike", gt: "npt.ArrayLike") -> float:
    """2 / (|A| / |A and B| + |B| / |A and B|), the set form of dice."""
    a, b = _pair(pred, gt)
    size_a, size_b = int(a.sum()), int(b.sum())
    if size_a == size_b == 0:
        return 1.0

    common = int((a & b).sum())
    if common == 0:
        return 0.0

    return 2 / (size_a / common + size_b / common)


def iou(pred: "npt.ArrayLike", gt: "npt.ArrayLike") -> float:
    """|A and B| / |A or B| (Jaccard index)."""
    a, b = _pair(pred, gt)
    union = int((a | b).sum())
    if union == 0:
        return 1.0

    return int((a & b).sum()) / union


def mean_iou(pred: "npt.ArrayLike", gt: "npt.ArrayLike") -> float:
    """Mean of foreground and background IoU for one image."""
    a, b = _pair(pred, gt)
    return (iou(a, b) + iou(~a, ~b)) / 2


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class ImageRecord:
    """Metrics of one predicted mask against its ground truth."""

    name: str
    object_f1: float
    pixel_f1: float
    dice: float
    iou: float
    miou: float
    tp: int
    fp: int
    fn: int

    def metrics(self) -> Dict[str, float]:
        """Metric name -> value."""
        return {name: getattr(self, name) for name in METRIC_NAMES}


def evaluate_pair(
    pred: "npt.ArrayLike",
    gt: "npt.ArrayLike",
    *,
    name: str = "",
    threshold: float = 0.5,
    matching: Matching = "greedy",
) -> ImageRecord:
    """Every metric for one image."""
    a, b = _pair(pred, gt)
    match = object_f1(a, b, threshold=threshold, matching=matching)
    return ImageRecord(
        name=name,
        object_f1=match.f1,
        pixel_f1=pixel_f1(a, b),
        dice=dice_score(a, b),
        iou=iou(a, b),
        miou=mean_iou(a, b),
        tp=match.tp,
        fp=match.fp,
        fn=match.fn,
    )


def miou(records: Iterable[ImageRecord]) -> float:
    """Per-image mean IoU averaged over images."""
    values = [record.miou for record in records]
    if not values:
        msg = "miou needs at least one image"
        raise ValueError(msg)

    return float(np.mean(values))


def _formatted(value: float) -> Dict[str, Any]:
    return {"percent": f"{100 * value:.2f}", "raw": value}


@attr.s(frozen=True, auto_attribs=True)
class EvalReport:
    """Per-image records and their means."""

    records: Tuple[ImageRecord, ...]
    aggregate: Dict[str, float]

    @classmethod
    def from_records(cls, records: Iterable[ImageRecord]) -> Self:
        """Aggregate ``records`` into a report."""
        items = tuple(records)
        if not items:
            msg = "An evaluation report needs at least one image"
            raise ValueError(msg)

        aggregate = {
            name: float(np.mean([getattr(r, name) for r in items]))
            for name in METRIC_NAMES
        }
        for count in ("tp", "fp", "fn"):
            aggregate[count] = float(sum(getattr(r, count) for r in items))

        return cls(items, aggregate)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready document with percentages and raw values."""
        aggregate: Dict[str, Any] = {
            name: _formatted(self.aggregate[name]) for name in METRIC_NAMES
        }
        aggregate.update(
            {k: int(self.aggregate[k]) for k in ("tp", "fp", "fn")}
        )
        per_image = []
        for record in self.records:
            entry: Dict[str, Any] = {"name": record.name}
            entry.update(
                {k: _formatted(v) for k, v in record.metrics().items()}
            )
            entry.update({"tp": record.tp, "fp": record.fp, "fn": record.fn})
            per_image.append(entry)

        return {"aggregate": aggregate, "per_image": per_image}

    def to_json(self) -> str:
        """Serialise :meth:`to_dict`."""
        return json.dumps(self.to_dict(), indent=2)
