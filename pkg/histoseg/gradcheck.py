"""Central finite-difference gradient checks.

Checks always run in 64-bit precision. Non-scalar outputs are reduced to a
scalar by a fixed random projection so every output element contributes.
"""

import logging
from typing import Callable, Final, List, Optional, Sequence, Tuple

import attr
import numpy as np

from histoseg import blocks, losses, ops
from histoseg.network import NetworkSpec, build
from histoseg.params import ParameterStore
from histoseg.tensor import Array, Tape, Tensor, backward, precision

__all__ = (
    "CheckResult",
    "relative_error",
    "check_gradients",
    "default_suite",
    "run_suite",
    "ELEMENTWISE_TOLERANCE",
    "COMPOSED_TOLERANCE",
)

logger = logging.getLogger(__name__)

FD_EPSILON: Final = 1e-6
ELEMENTWISE_TOLERANCE: Final = 1e-6
COMPOSED_TOLERANCE: Final = 1e-4
ABSOLUTE_FLOOR: Final = 1e-10

LossFn = Callable[[], Tensor]
Case = Callable[[], "CheckResult"]


@attr.s(frozen=True, auto_attribs=True)
class CheckResult:
    """Outcome of one gradient check."""

    name: str
    error: float
    tolerance: float
    entries: int

    @property
    def passed(self) -> bool:
        """Whether the relative error is within tolerance."""
        return self.error < self.tolerance


def relative_error(analytic: Array, numeric: Array) -> float:
    """||a - n|| / (||a|| + ||n||), zero when the difference is negligible.

    >>> relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    0.0
    """
    diff = float(np.linalg.norm(analytic - numeric))
    if diff < ABSOLUTE_FLOOR:
        return 0.0

    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return diff / max(scale, 1e-12)


def _entries(
    tensor: Tensor, limit: Optional[int], rng: np.random.Generator
) -> Array:
    if limit is None or tensor.size <= limit:
        return np.arange(tensor.size)

    return rng.choice(tensor.size, size=limit, replace=False)


def check_gradients(
    name: str,
    loss_fn: LossFn,
    inputs: Sequence[Tensor],
    *,
    tolerance: float = ELEMENTWISE_TOLERANCE,
    entries_per_input: Optional[int] = None,
    seed: int = 0,
) -> CheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic and return a scalar; ``inputs`` must
    already require gradients. Entries are perturbed in place and restored.
    """
    rng = np.random.default_rng(seed)
    for tensor in inputs:
        tensor.zero_grad()

    with Tape():
        backward(loss_fn())

    analytic: List[float] = []
    numeric: List[float] = []
    for tensor in inputs:
        grad = (
            np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        )
        flat = tensor.data.reshape(-1)
        for index in _entries(tensor, entries_per_input, rng):
            original = flat[index]
            flat[index] = original + FD_EPSILON
            upper = loss_fn().item()
            flat[index] = original - FD_EPSILON
            lower = loss_fn().item()
            flat[index] = original
            numeric.append((upper - lower) / (2 * FD_EPSILON))
            analytic.append(float(grad.reshape(-1)[index]))

    error = relative_error(np.asarray(analytic), np.asarray(numeric))
    result = CheckResult(name, error, tolerance, len(analytic))
    logger.debug("gradcheck %s: error %.3g over %d entries", name, error, len(analytic))
    return result


def _projected(fn: Callable[[], Tensor], shape: Tuple[int, ...], seed: int) -> LossFn:
    weights = Tensor(np.random.default_rng(seed).standard_normal(shape))
    return lambda: ops.tensor_sum(ops.mul(fn(), weights))


def _leaf(rng: np.random.Generator, *shape: int, offset: float = 0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    data = rng.standard_normal(shape)
    data += np.sign(data) * 0.1
    return Tensor(data, requires_grad=True)


def _op_cases(seed: int) -> List[Case]:
    rng = np.random.default_rng(seed)

    def conv(stride: int, dilation: int) -> Case:
        x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)

        def fn() -> Tensor:
            return ops.conv2d(x, w, b, stride=stride, dilation=dilation)

        out = fn().shape
        return lambda: check_gradients(
            f"conv2d stride={stride} dilation={dilation}",
            _projected(fn, out, seed),
            [x, w, b],
        )

    def depthwise(stride: int, dilation: int) -> Case:
        x, w = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 3, 1, 3, 3)

        def fn() -> Tensor:
            return ops.depthwise_conv2d(x, w, stride=stride, dilation=dilation)

        out = fn().shape
        return lambda: check_gradients(
            f"depthwise_conv2d stride={stride} dilation={dilation}",
            _projected(fn, out, seed),
            [x, w],
        )

    def batch_norm() -> Case:
        x = _leaf(rng, 3, 2, 4, 4)
        gamma, beta = _leaf(rng, 2, offset=1.0), _leaf(rng, 2)
        stats = ops.RunningStats.create(2)

        def fn() -> Tensor:
            return ops.batch_norm(x, gamma, beta, stats, mode="train")

        return lambda: check_gradients(
            "batch_norm train",
            _projected(fn, x.shape, seed),
            [x, gamma, beta],
        )

    def unary(name: str, op: Callable[[Tensor], Tensor], x: Tensor) -> Case:
        return lambda: check_gradients(
            name, _projected(lambda: op(x), op(x).shape, seed), [x]
        )

    def resize(out_h: int, out_w: int) -> Case:
        x = _leaf(rng, 1, 2, 4, 5)

        def fn() -> Tensor:
            return ops.bilinear_resize(x, out_h, out_w)

        return lambda: check_gradients(
            f"bilinear_resize {out_h}x{out_w}",
            _projected(fn, fn().shape, seed),
            [x],
        )

    def binary(name: str, op: Callable[[Tensor, Tensor], Tensor]) -> Case:
        a, b = _leaf(rng, 2, 3, 2, 2), _leaf(rng, 2, 3, 2, 2)

        def fn() -> Tensor:
            return op(a, b)

        return lambda: check_gradients(
            name, _projected(fn, fn().shape, seed), [a, b]
        )

    def concat() -> Case:
        a, b = _leaf(rng, 2, 1, 3, 3), _leaf(rng, 2, 2, 3, 3)

        def fn() -> Tensor:
            return ops.concat([a, b])

        return lambda: check_gradients(
            "concat", _projected(fn, fn().shape, seed), [a, b]
        )

    def dropout() -> Case:
        x = _leaf(rng, 2, 3, 4, 4)

        def fn() -> Tensor:
            mask_rng = np.random.default_rng(seed)
            return ops.dropout(x, 0.3, mode="train", rng=mask_rng)

        return lambda: check_gradients(
            "dropout train", _projected(fn, x.shape, seed), [x]
        )

    probabilities = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    targets = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)

    def loss(name: str, fn: Callable[[Tensor], Tensor]) -> Case:
        p = Tensor(probabilities.copy(), requires_grad=True)
        return lambda: check_gradients(name, lambda: fn(p), [p])

    return [
        conv(1, 1),
        conv(2, 1),
        conv(1, 2),
        depthwise(1, 2),
        depthwise(2, 1),
        batch_norm(),
        unary("relu", ops.relu, _away_from_zero(rng, 2, 3, 3, 3)),
        unary("sigmoid", ops.sigmoid, _leaf(rng, 2, 3, 3, 3)),
        unary("global_avg_pool", ops.global_avg_pool, _leaf(rng, 2, 3, 3, 4)),
        resize(8, 10),
        resize(3, 2),
        concat(),
        binary("add", ops.add),
        binary("mul", ops.mul),
        unary("mean", ops.mean, _leaf(rng, 2, 3)),
        dropout(),
        loss("bce_loss", lambda p: losses.bce_loss(targets, p)),
        loss("focal_loss", lambda p: losses.focal_loss(targets, p)),
        loss("dice_loss", lambda p: losses.dice_loss(targets, p)),
        loss("multi_loss", lambda p: losses.multi_loss(targets, p)[0]),
    ]


def _store_leaves(store: ParameterStore) -> List[Tensor]:
    return [tensor for _, tensor in store.trainable()]


def _block_cases(seed: int) -> List[Case]:
    rng = np.random.default_rng(seed)

    def quick_attention() -> CheckResult:
        store = ParameterStore()
        layer = blocks.QuickAttentionLayer(store, "qa", 3, rng=rng)
        store["qa.bias"].data[...] = rng.standard_normal(3)
        x = _leaf(rng, 2, 3, 4, 4)

        def fn() -> Tensor:
            return blocks.quick_attention_forward(x, layer)

        return check_gradients(
            "quick attention",
            _projected(fn, x.shape, seed),
            [x, *_store_leaves(store)],
            tolerance=COMPOSED_TOLERANCE,
        )

    def expanded() -> CheckResult:
        store = ParameterStore()
        config = blocks.BlockConfig(1, 3, 3, stride=1, dilation=2, expansion=2)
        block = blocks.ExpandedConvBlock(store, "block", config, rng=rng)
        x = _leaf(rng, 2, 3, 6, 6)

        def fn() -> Tensor:
            return blocks.expanded_conv_forward(x, block, "train")

        return check_gradients(
            "expanded conv block",
            _projected(fn, x.shape, seed),
            [x, *_store_leaves(store)],
            tolerance=COMPOSED_TOLERANCE,
        )

    def aspp() -> CheckResult:
        store = ParameterStore()
        config = blocks.ASPPConfig(3, 4, (1, 2))
        block = blocks.ASPPBlock(store, "aspp", config, rng=rng)
        x = _leaf(rng, 2, 3, 5, 5)

        def fn() -> Tensor:
            return blocks.aspp_forward(x, block, "train")

        return check_gradients(
            "aspp block",
            _projected(fn, fn().shape, seed),
            [x, *_store_leaves(store)],
            tolerance=COMPOSED_TOLERANCE,
            entries_per_input=12,
        )

    return [quick_attention, expanded, aspp]


def network_case(
    seed: int = 0, *, entries_per_input: int = 2
) -> CheckResult:
    """Full reduced-width graph plus multi-loss on one 32x32 image."""
    spec = NetworkSpec(input_size=(32, 32), width_multiplier=0.125)
    graph, store = build(spec, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0, 1, size=(1, 3, 32, 32)))
    y = (rng.random((1, 1, 32, 32)) > 0.5).astype(np.float64)

    def fn() -> Tensor:
        graph.reset_rng(seed)
        return losses.multi_loss(y, graph(x, "train"))[0]

    return check_gradients(
        "network + multi_loss",
        fn,
        _store_leaves(store),
        tolerance=COMPOSED_TOLERANCE,
        entries_per_input=entries_per_input,
        seed=seed,
    )


def default_suite(seed: int = 0, *, network: bool = True) -> List[Case]:
    """Every differentiable operation, block and (optionally) the network.

    Cases must be called inside ``precision("float64")``; :func:`run_suite`
    does that.
    """
    with precision("float64"):
        cases = _op_cases(seed) + _block_cases(seed)

    if network:
        cases.append(lambda: network_case(seed))

    return cases


def run_suite(seed: int = 0, *, network: bool = True) -> List[CheckResult]:
    """Run :func:`default_suite` in 64-bit mode."""
    with precision("float64"):
        results = [case() for case in default_suite(seed, network=network)]

    for result in results:
        logger.info(
            "%-40s %s (error %.2e, tolerance %.0e)",
            result.name,
            "ok" if result.passed else "FAILED",
            result.error,
            result.tolerance,
        )
    return results
