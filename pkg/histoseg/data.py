"""Patch extraction, dataset splits, synthetic data and PNG I/O."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Final, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
import numpy.typing as npt
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from typing_extensions import Self, TypeAlias

from histoseg.errors import ConfigError, DatasetError, ShapeError
from histoseg.tensor import Tensor, get_dtype
from histoseg.util import jsonio
from histoseg.util.threads import max_workers

__all__ = (
    "LabeledSample",
    "SplitManifest",
    "window_origins",
    "extract_patches",
    "reassemble_patches",
    "split",
    "generate_synthetic",
    "load_image",
    "load_mask",
    "save_image",
    "pad_to_multiple",
    "resize_sample",
    "augment",
    "load_dataset",
    "save_dataset",
    "to_batch",
    "MASK_THRESHOLD",
)

logger = logging.getLogger(__name__)

Image8: TypeAlias = npt.NDArray[np.uint8]
Mask: TypeAlias = npt.NDArray[np.bool_]
PathLike = Union[str, Path]

MASK_THRESHOLD: Final = 128
DEFAULT_PATCH: Final = 256
DEFAULT_FRACTIONS: Final = (0.7, 0.2, 0.1)
SPLIT_NAMES: Final = ("train", "val", "test")
FRACTION_TOLERANCE: Final = 1e-9

# Synthetic tissue: dark purple nuclei on a textured pink background.
BACKGROUND_RGB: Final = (230.0, 170.0, 200.0)
NUCLEUS_RGB: Final = (80.0, 40.0, 120.0)
COLOR_JITTER: Final = 20.0
TEXTURE_AMPLITUDE: Final = 20.0
PIXEL_NOISE: Final = 8.0
NUCLEI_RANGE: Final = (3, 8)
AXIS_RANGE: Final = (0.05, 0.15)
CENTER_RANGE: Final = (0.1, 0.9)


def _frozen(array: npt.NDArray[np.generic]) -> npt.NDArray[np.generic]:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_sample(
    instance: "LabeledSample",
    attribute: "attr.Attribute[Mask]",
    value: Mask,
) -> None:
    image = instance.image
    if image.ndim != 3 or image.shape[2] != 3:  # noqa: PLR2004
        msg = f"Sample {instance.name!r}: image must be H x W x 3, got {image.shape}"
        raise ShapeError(msg)

    if value.shape != image.shape[:2]:
        msg = (
            f"Sample {instance.name!r}: mask extents {value.shape} differ "
            f"from image extents {image.shape[:2]}"
        )
        raise ShapeError(msg)


@attr.s(frozen=True, auto_attribs=True, kw_only=True)
class LabeledSample:
    """An RGB image patch with its binary mask.

    Arrays are copied and made read-only so training cannot alter them.
    """

    name: str
    image: Image8 = attr.ib(converter=lambda a: _frozen(np.asarray(a, np.uint8)))
    mask: Mask = attr.ib(
        converter=lambda a: _frozen(np.asarray(a, bool)), validator=_check_sample
    )
    source: str = ""
    origin: Tuple[int, int] = (0, 0)

    @property
    def height(self) -> int:
        """Rows."""
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        """Columns."""
        return int(self.image.shape[1])


def window_origins(extent: int, patch: int, stride: int) -> List[int]:
    """Window starts along one axis; the last window ends at the edge.

    >>> window_origins(1000, 256, 256)
    [0, 256, 512, 744]
    >>> window_origins(512, 256, 256)
    [0, 256]
    """
    if patch < 1 or stride < 1:
        msg = f"patch and stride must be positive, got {patch} and {stride}"
        raise ConfigError(msg)

    if extent < patch:
        msg = f"Image extent {extent} is smaller than the patch size {patch}"
        raise ShapeError(msg)

    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)

    return origins


def extract_patches(
    image: "npt.ArrayLike",
    mask: "npt.ArrayLike",
    patch: int = DEFAULT_PATCH,
    stride: int = DEFAULT_PATCH,
    *,
    source: str = "image",
) -> List[LabeledSample]:
    """Sliding-window crops in row-major order, named ``{source}_{x}_{y}``.

    Images smaller than ``patch`` are rejected rather than padded.
    """
    pixels = np.asarray(image, dtype=np.uint8)
    labels = np.asarray(mask, dtype=bool)
    if pixels.shape[:2] != labels.shape:
        msg = (
            f"{source}: mask extents {labels.shape} differ from image "
            f"extents {pixels.shape[:2]}"
        )
        raise ShapeError(msg)

    height, width = labels.shape
    samples = []
    for y in window_origins(height, patch, stride):
        for x in window_origins(width, patch, stride):
            samples.append(
                LabeledSample(
                    name=f"{source}_{x}_{y}",
                    image=pixels[y : y + patch, x : x + patch],
                    mask=labels[y : y + patch, x : x + patch],
                    source=source,
                    origin=(x, y),
                )
            )

    return samples


def reassemble_patches(
    samples: Sequence[LabeledSample], height: int, width: int
) -> Tuple[Image8, Mask]:
    """Paste patches back at their origins; later patches overwrite."""
    image = np.zeros((height, width, 3), dtype=np.uint8)
    mask = np.zeros((height, width), dtype=bool)
    for sample in samples:
        x, y = sample.origin
        image[y : y + sample.height, x : x + sample.width] = sample.image
        mask[y : y + sample.height, x : x + sample.width] = sample.mask

    return image, mask


@attr.s(frozen=True, auto_attribs=True)
class SplitManifest:
    """Sample names per split, reproducible from ``seed``."""

    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]
    seed: int
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS

    def names(self, split_name: str) -> Tuple[str, ...]:
        """Names in one split."""
        if split_name not in SPLIT_NAMES:
            msg = f"Unknown split {split_name!r}, expected one of {SPLIT_NAMES}"
            raise ConfigError(msg)

        return tuple(getattr(self, split_name))

    def select(
        self, samples: Sequence[LabeledSample], split_name: str
    ) -> List[LabeledSample]:
        """Samples of one split, in manifest order."""
        by_name = {sample.name: sample for sample in samples}
        try:
            return [by_name[name] for name in self.names(split_name)]
        except KeyError as e:
            msg = f"Manifest names sample {e.args[0]!r} which is not loaded"
            raise DatasetError(msg) from None

    def to_dict(self) -> Dict[str, Any]:
        """JSON document."""
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "seed": self.seed,
            "fractions": list(self.fractions),
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        """Inverse of :meth:`to_dict`."""
        try:
            return cls(
                tuple(document["train"]),
                tuple(document["val"]),
                tuple(document["test"]),
                int(document["seed"]),
                tuple(document.get("fractions", DEFAULT_FRACTIONS)),
            )
        except (KeyError, TypeError, ValueError) as e:
            msg = f"Malformed manifest: {e}"
            raise DatasetError(msg) from None


def _split_counts(n: int, fractions: Sequence[float]) -> Tuple[int, int]:
    if not 2 <= len(fractions) <= 3:  # noqa: PLR2004
        msg = f"Expected 2 or 3 split fractions, got {len(fractions)}"
        raise ConfigError(msg)

    if any(f < 0 for f in fractions) or not math.isclose(
        sum(fractions), 1.0, abs_tol=FRACTION_TOLERANCE
    ):
        msg = f"Split fractions must be non-negative and sum to 1, got {fractions}"
        raise ConfigError(msg)

    n_train = min(n, round(fractions[0] * n))
    if len(fractions) == 2:  # noqa: PLR2004
        return n_train, n - n_train

    return n_train, min(n - n_train, round(fractions[1] * n))


def split(
    samples: Sequence[LabeledSample],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SplitManifest:
    """Seeded partition by source image, so patches never straddle splits.

    Two fractions mean (train, val); three mean (train, val, test). Counts
    are rounded per source and the remainder goes to the last split.
    """
    if not samples:
        msg = "Cannot split an empty sample list"
        raise DatasetError(msg)

    sources = list(dict.fromkeys(s.source or s.name for s in samples))
    n_train, n_val = _split_counts(len(sources), fractions)
    order = np.random.default_rng(seed).permutation(len(sources))
    shuffled = [sources[i] for i in order]
    assignment = {
        source: SPLIT_NAMES[0 if i < n_train else 1 if i < n_train + n_val else 2]
        for i, source in enumerate(shuffled)
    }

    groups: Dict[str, List[str]] = {name: [] for name in SPLIT_NAMES}
    for sample in samples:
        groups[assignment[sample.source or sample.name]].append(sample.name)

    return SplitManifest(
        tuple(groups["train"]),
        tuple(groups["val"]),
        tuple(groups["test"]),
        seed,
        tuple(fractions),
    )


def _texture(rng: np.random.Generator, size: int) -> npt.NDArray[np.float64]:
    noise = rng.standard_normal((size, size))
    smooth = ndimage.gaussian_filter(noise, sigma=max(size / 16, 1.0))
    scale = float(np.abs(smooth).max()) or 1.0
    return smooth / scale * TEXTURE_AMPLITUDE


def _render(rng: np.random.Generator, size: int, index: int) -> LabeledSample:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    image = np.empty((size, size, 3))
    image[...] = BACKGROUND_RGB
    image += _texture(rng, size)[..., None]
    mask = np.zeros((size, size), dtype=bool)

    for _ in range(int(rng.integers(NUCLEI_RANGE[0], NUCLEI_RANGE[1] + 1))):
        cy, cx = rng.uniform(*CENTER_RANGE, size=2) * size
        a, b = rng.uniform(*AXIS_RANGE, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = rows - cy, cols - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        inside = u**2 + v**2 <= 1
        color = np.asarray(NUCLEUS_RGB) + rng.uniform(
            -COLOR_JITTER, COLOR_JITTER, size=3
        )
        image[inside] = color
        mask |= inside

    image += rng.normal(0, PIXEL_NOISE, size=image.shape)
    name = f"synth_{index:04d}"
    return LabeledSample(
        name=name,
        image=np.clip(np.rint(image), 0, 255).astype(np.uint8),
        mask=mask,
        source=name,
    )


def generate_synthetic(n: int, size: int, seed: int) -> List[LabeledSample]:
    """Render ``n`` images of random ellipse "nuclei" with exact masks.

    Each sample has 3 to 8 ellipses with per-ellipse colour jitter on a
    smoothly textured background, plus Gaussian pixel noise. The output is
    fully determined by ``seed``.
    """
    if n < 1:
        msg = f"n must be positive, got {n}"
        raise ConfigError(msg)

    if size < 8 or size % 8:  # noqa: PLR2004
        msg = f"Synthetic image size must be a positive multiple of 8, got {size}"
        raise ConfigError(msg)

    rng = np.random.default_rng(seed)
    return [_render(rng, size, i) for i in range(n)]


def load_image(path: PathLike, *, grayscale: bool = False) -> Image8:
    """8-bit pixels of a PNG as H x W x 3 (or H x W with ``grayscale``)."""
    try:
        with Image.open(path) as img:
            img.load()
            converted = img.convert("L" if grayscale else "RGB")
    except (UnidentifiedImageError, OSError) as e:
        msg = f"Cannot read image {path}: {e}"
        raise DatasetError(msg) from e

    return np.asarray(converted, dtype=np.uint8)


def load_mask(path: PathLike) -> Mask:
    """Foreground where the grayscale value is at least 128."""
    return load_image(path, grayscale=True) >= MASK_THRESHOLD


def save_image(path: PathLike, array: "npt.ArrayLike") -> None:
    """Write an RGB, grayscale or boolean (0/255) array as PNG."""
    pixels = np.asarray(array)
    if pixels.dtype == np.bool_:
        pixels = pixels.astype(np.uint8) * 255
    if pixels.ndim == 3 and pixels.shape[2] == 1:  # noqa: PLR2004
        pixels = pixels[..., 0]
    if pixels.dtype != np.uint8:
        msg = f"Cannot save {pixels.dtype} pixels to {path}; expected uint8"
        raise DatasetError(msg)

    Image.fromarray(pixels).save(path, format="PNG")


def pad_to_multiple(
    image: "npt.ArrayLike", multiple: int = 8
) -> Tuple[Image8, Tuple[int, int]]:
    """Reflection-pad bottom/right to a multiple; returns the crop extents.

    >>> padded, (h, w) = pad_to_multiple(np.zeros((999, 1000, 3), np.uint8))
    >>> padded.shape, (h, w)
    ((1000, 1000, 3), (999, 1000))
    """
    pixels = np.asarray(image)
    height, width = pixels.shape[:2]
    pad = [(0, -height % multiple), (0, -width % multiple)]
    pad += [(0, 0)] * (pixels.ndim - 2)
    return np.pad(pixels, pad, mode="reflect"), (height, width)


def resize_sample(sample: LabeledSample, size: Tuple[int, int]) -> LabeledSample:
    """Bilinear resize of the image and nearest-neighbour resize of the mask.

    ``size`` is (height, width).
    """
    height, width = size
    image = Image.fromarray(sample.image).resize(
        (width, height), Image.Resampling.BILINEAR
    )
    mask = Image.fromarray(sample.mask.astype(np.uint8) * 255).resize(
        (width, height), Image.Resampling.NEAREST
    )
    return attr.evolve(
        sample,
        image=np.asarray(image),
        mask=np.asarray(mask) >= MASK_THRESHOLD,
    )


def augment(
    sample: LabeledSample,
    rng: np.random.Generator,
    *,
    flip: bool = False,
    rotate: bool = False,
) -> LabeledSample:
    """Random flips and quarter turns applied to image and mask alike."""
    image, mask = sample.image, sample.mask
    if flip:
        if rng.random() < 0.5:  # noqa: PLR2004
            image, mask = image[:, ::-1], mask[:, ::-1]
        if rng.random() < 0.5:  # noqa: PLR2004
            image, mask = image[::-1], mask[::-1]
    if rotate:
        turns = int(rng.integers(4))
        image, mask = np.rot90(image, turns), np.rot90(mask, turns)

    if image is sample.image:
        return sample

    return attr.evolve(sample, image=image, mask=mask)


def _load_pair(image_path: Path, mask_path: Path) -> LabeledSample:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if mask.shape != image.shape[:2]:
        msg = (
            f"Mask {mask_path} has extents {mask.shape}, image {image_path} "
            f"has {image.shape[:2]}"
        )
        raise DatasetError(msg)

    return LabeledSample(
        name=image_path.stem, image=image, mask=mask, source=image_path.stem
    )


def _source_of(name: str) -> str:
    stem, *rest = name.rsplit("_", 2)
    is_patch = len(rest) == 2 and all(r.isdigit() for r in rest)  # noqa: PLR2004
    return stem if is_patch else name


def load_dataset(root: PathLike) -> Tuple[List[LabeledSample], Optional[SplitManifest]]:
    """Read ``images/*.png`` with the ``masks/*.png`` of the same stem.

    Patch names ``{source}_{x}_{y}`` are grouped by source. The manifest is
    returned when ``manifest.json`` exists.
    """
    base = Path(root)
    image_paths = sorted((base / "images").glob("*.png"))
    if not image_paths:
        msg = f"No images found under {base / 'images'}"
        raise DatasetError(msg)

    mask_paths = []
    for path in image_paths:
        mask_path = base / "masks" / path.name
        if not mask_path.is_file():
            msg = f"No mask for image {path.stem!r} (expected {mask_path})"
            raise DatasetError(msg)
        mask_paths.append(mask_path)

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        loaded = list(pool.map(_load_pair, image_paths, mask_paths))

    samples = [
        attr.evolve(s, source=_source_of(s.name)) for s in loaded
    ]
    manifest_path = base / "manifest.json"
    manifest = (
        SplitManifest.from_dict(jsonio.load(manifest_path))
        if manifest_path.is_file()
        else None
    )
    logger.info("Loaded %d samples from %s", len(samples), base)
    return samples, manifest


def save_dataset(
    root: PathLike,
    samples: Sequence[LabeledSample],
    manifest: Optional[SplitManifest] = None,
) -> None:
    """Write samples (and the manifest) in the layout :func:`load_dataset` reads."""
    base = Path(root)
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)

    def write(sample: LabeledSample) -> None:
        save_image(base / "images" / f"{sample.name}.png", sample.image)
        save_image(base / "masks" / f"{sample.name}.png", sample.mask)

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        list(pool.map(write, samples))

    if manifest is not None:
        jsonio.dump(base / "manifest.json", manifest.to_dict())

    logger.info("Wrote %d samples to %s", len(samples), base)


def to_batch(samples: Sequence[LabeledSample]) -> Tuple[Tensor, npt.NDArray[np.floating]]:
    """Stack samples into an N x 3 x H x W input in [0, 1] and N x 1 x H x W targets."""
    images = np.stack([s.image for s in samples]).astype(get_dtype())
    masks = np.stack([s.mask for s in samples]).astype(get_dtype())
    return Tensor(images.transpose(0, 3, 1, 2) / 255.0), masks[:, None]
