"""Binary cross entropy, focal and dice losses and their unweighted sum.

Predictions ``p`` are probabilities; targets ``y`` are 0/1 masks of the same
shape. Only ``p`` receives gradients.

>>> import numpy as np
>>> y, p = Tensor(np.ones(1)), Tensor(np.full(1, 0.5))
>>> round(bce_loss(y, p).item(), 6)
0.693147
>>> round(focal_loss(y, p).item(), 7)
0.0433217
"""

from typing import Final, Tuple, Union

import attr
import numpy as np

from histoseg import ops
from histoseg.errors import ConfigError, ShapeError
from histoseg.tensor import Array, Function, Gradients, Tensor

__all__ = (
    "LossConfig",
    "LossComponents",
    "bce_loss",
    "focal_loss",
    "dice_loss",
    "multi_loss",
    "DICE_SMOOTHING",
)

DICE_SMOOTHING: Final = 1.0
MAX_CLIP_EPSILON: Final = 0.01

Target = Union[Tensor, Array]


def _check_alpha(
    instance: object, attribute: "attr.Attribute[float]", value: float
) -> None:
    if not 0 < value < 1:
        msg = f"alpha must be in (0, 1), got {value}"
        raise ConfigError(msg)


def _check_gamma(
    instance: object, attribute: "attr.Attribute[float]", value: float
) -> None:
    if not value >= 0:
        msg = f"gamma must be non-negative, got {value}"
        raise ConfigError(msg)


def _check_clip(
    instance: object, attribute: "attr.Attribute[float]", value: float
) -> None:
    if not 0 < value <= MAX_CLIP_EPSILON:
        msg = f"clip_epsilon must be in (0, {MAX_CLIP_EPSILON}], got {value}"
        raise ConfigError(msg)


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class LossConfig:
    """Loss hyperparameters.

    With ``focal_alpha_weighting`` off, alpha_t is 1 for every pixel and a
    focal loss with gamma 0 is exactly binary cross entropy.
    """

    alpha: float = attr.ib(default=0.25, validator=_check_alpha)
    gamma: float = attr.ib(default=2.0, validator=_check_gamma)
    clip_epsilon: float = attr.ib(default=1e-7, validator=_check_clip)
    focal_alpha_weighting: bool = True


DEFAULT_LOSS: Final = LossConfig()


@attr.s(frozen=True, auto_attribs=True)
class LossComponents:
    """Scalar values of one multi-loss evaluation, for logging."""

    total: float
    bce: float
    focal: float
    dice: float


def _operands(y: Target, p: Tensor, op: str) -> Array:
    target = y.data if isinstance(y, Tensor) else np.asarray(y)
    if target.shape != p.shape:
        msg = f"{op}: target shape {target.shape} != prediction {p.shape}"
        raise ShapeError(msg)

    return target.astype(p.data.dtype, copy=False)


def _clip(p: Array, epsilon: float) -> Tuple[Array, Array]:
    """Clipped probabilities and the mask where the clip is inactive."""
    clipped = np.clip(p, epsilon, 1.0 - epsilon)
    return clipped, (clipped == p).astype(p.dtype)


class BinaryCrossEntropy(Function):
    """Mean of -(y log p + (1 - y) log(1 - p))."""

    def forward(self, p: Array, *, y: Array, epsilon: float) -> Array:
        """Evaluate the mean loss."""
        self.y = y
        self.pc, self.inside = _clip(p, epsilon)
        losses = -(y * np.log(self.pc) + (1 - y) * np.log1p(-self.pc))
        return np.asarray(losses.mean(), dtype=p.dtype)

    def backward(self, grad: Array) -> Gradients:
        """Zero gradient where the probability was clipped."""
        y, pc = self.y, self.pc
        local = (-(y / pc) + (1 - y) / (1 - pc)) * self.inside
        return (grad * local / y.size,)


class Focal(Function):
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t)."""

    def forward(
        self,
        p: Array,
        *,
        y: Array,
        epsilon: float,
        alpha: float,
        gamma: float,
        weighted: bool,
    ) -> Array:
        """Evaluate the mean loss."""
        pc, self.inside = _clip(p, epsilon)
        self.sign = 2 * y - 1
        self.pt = y * pc + (1 - y) * (1 - pc)
        self.alpha_t = (
            y * alpha + (1 - y) * (1 - alpha) if weighted else np.ones_like(y)
        )
        self.gamma = gamma
        self.log_pt = np.log(self.pt)
        losses = -self.alpha_t * (1 - self.pt) ** gamma * self.log_pt
        return np.asarray(losses.mean(), dtype=p.dtype)

    def backward(self, grad: Array) -> Gradients:
        """Chain through p_t = y p + (1 - y)(1 - p)."""
        pt, gamma = self.pt, self.gamma
        d_pt = self.alpha_t * (
            gamma * (1 - pt) ** (gamma - 1) * self.log_pt
            if gamma
            else np.zeros_like(pt)
        ) - self.alpha_t * (1 - pt) ** gamma / pt
        local = d_pt * self.sign * self.inside
        return (grad * local / pt.size,)


class Dice(Function):
    """Per-sample smoothed dice loss, averaged over the batch."""

    def forward(self, p: Array, *, y: Array) -> Array:
        """Evaluate the batch-mean loss."""
        n = p.shape[0]
        self.shape = p.shape
        self.y = y.reshape(n, -1)
        self.p = p.reshape(n, -1)
        self.intersection = (self.y * self.p).sum(axis=1)
        self.mass = self.y.sum(axis=1) + self.p.sum(axis=1)
        ratio = (2 * self.intersection + DICE_SMOOTHING) / (
            self.mass + DICE_SMOOTHING
        )
        return np.asarray((1 - ratio).mean(), dtype=p.dtype)

    def backward(self, grad: Array) -> Gradients:
        """Quotient rule per sample."""
        n = self.p.shape[0]
        numerator = (2 * self.intersection + DICE_SMOOTHING)[:, None]
        denominator = (self.mass + DICE_SMOOTHING)[:, None]
        local = -(2 * self.y * denominator - numerator) / denominator**2
        return ((grad * local / n).reshape(self.shape),)


def bce_loss(y: Target, p: Tensor, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    """Binary cross entropy, mean-reduced over every pixel of the batch."""
    target = _operands(y, p, "bce_loss")
    return BinaryCrossEntropy.apply(p, y=target, epsilon=cfg.clip_epsilon)


def focal_loss(y: Target, p: Tensor, cfg: LossConfig = DEFAULT_LOSS) -> Tensor:
    """Focal loss with p_t = p where y = 1, else 1 - p."""
    target = _operands(y, p, "focal_loss")
    return Focal.apply(
        p,
        y=target,
        epsilon=cfg.clip_epsilon,
        alpha=cfg.alpha,
        gamma=cfg.gamma,
        weighted=cfg.focal_alpha_weighting,
    )


def dice_loss(y: Target, p: Tensor) -> Tensor:
    """1 - (2 sum(y p) + 1) / (sum(y) + sum(p) + 1) per sample, batch mean.

    The first axis is the batch; everything else is flattened.

    >>> import numpy as np
    >>> round(dice_loss(np.ones((1, 4)), Tensor(np.zeros((1, 4)))).item(), 6)
    0.8
    """
    target = _operands(y, p, "dice_loss")
    if p.ndim < 1:
        msg = "dice_loss needs a leading batch axis"
        raise ShapeError(msg)

    return Dice.apply(p, y=target)


def multi_loss(
    y: Target, p: Tensor, cfg: LossConfig = DEFAULT_LOSS
) -> Tuple[Tensor, LossComponents]:
    """(BCE + focal) + dice, with each component reported for logging."""
    bce = bce_loss(y, p, cfg)
    focal = focal_loss(y, p, cfg)
    dice = dice_loss(y, p)
    total = ops.add(ops.add(bce, focal), dice)
    return total, LossComponents(
        total=total.item(),
        bce=bce.item(),
        focal=focal.item(),
        dice=dice.item(),
    )
