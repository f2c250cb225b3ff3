"""Color-coded dataset ingestion: class maps, binary targets, splits, resizing.

A dataset directory holds ``<root>/images/<id>.<ext>`` and
``<root>/masks/<id>.<ext>`` with matching stems.  Masks are 8-bit RGB images
whose colors encode classes; every pixel belongs to exactly one class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MaskColorError, ValidationError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

DEFAULT_MIN_PIXELS = 100
DEFAULT_CHANNEL_THRESHOLD = 127

# Per-channel normalization applied before encoding, standard pretrained-ViT
# convention.  Configurable through the `encoder.normalization` section.
DEFAULT_PIXEL_MEAN = (123.675, 116.28, 103.53)
DEFAULT_PIXEL_STD = (58.395, 57.12, 57.375)


@dataclass(frozen=True)
class ClassSpec:
    """One segmentation class: two-letter code, readable name, RGB mask color."""

    code: str
    name: str
    color: tuple[int, int, int]


# The conventional 3-bit RGB coding of the 8 underwater classes.  The default
# is a documented config input (`dataset.classes`), not an assumption baked
# into the parser.
DEFAULT_CLASS_MAP = (
    ClassSpec("BW", "Background / waterbody", (0, 0, 0)),
    ClassSpec("HD", "Human divers", (0, 0, 255)),
    ClassSpec("PF", "Aquatic plants and sea-grass", (0, 255, 0)),
    ClassSpec("WR", "Wrecks and ruins", (0, 255, 255)),
    ClassSpec("RO", "Robots and instruments", (255, 0, 0)),
    ClassSpec("RI", "Reefs and invertebrates", (255, 0, 255)),
    ClassSpec("FV", "Fish and vertebrates", (255, 255, 0)),
    ClassSpec("SR", "Sea-floor and rocks", (255, 255, 255)),
)


@dataclass
class ImageRecord:
    """One image plus its color-coded ground-truth mask."""

    image_id: str
    image: np.ndarray  # H x W x 3 uint8
    color_mask: np.ndarray  # H x W x 3 uint8
    original_size: tuple[int, int]  # (H, W)

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.color_mask.shape[:2]:
            raise ValidationError(
                f"image {self.image_id!r}: image shape {self.image.shape[:2]} does "
                f"not match mask shape {self.color_mask.shape[:2]}"
            )
        h, w = self.image.shape[:2]
        if h < 1 or w < 1:
            raise ValidationError(f"image {self.image_id!r}: empty image")


@dataclass
class BinaryTarget:
    """A per-class binary segmentation target for one image."""

    image_id: str
    class_code: str
    mask: np.ndarray  # H x W uint8 in {0, 1}
    pixel_count: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.class_code)


def validate_class_map(class_map: tuple[ClassSpec, ...] | list[ClassSpec]) -> None:
    """Reject class maps with duplicate codes or colors."""
    codes = [c.code for c in class_map]
    if len(set(codes)) != len(codes):
        raise ValidationError(f"class map has duplicate codes: {codes}")
    colors = [tuple(c.color) for c in class_map]
    if len(set(colors)) != len(colors):
        raise ValidationError(f"class map has duplicate colors: {colors}")
    for spec in class_map:
        if len(spec.code) != 2:
            raise ValidationError(f"class code must be two letters, got {spec.code!r}")
        if any(not (0 <= v <= 255) for v in spec.color):
            raise ValidationError(f"class {spec.code}: color {spec.color} out of range")


def _binarized_code(color: tuple[int, int, int], threshold: int) -> int:
    r, g, b = (int(v > threshold) for v in color)
    return (r << 2) | (g << 1) | b


def parse_color_mask(
    color_mask: np.ndarray,
    class_map: tuple[ClassSpec, ...] | list[ClassSpec] = DEFAULT_CLASS_MAP,
    channel_threshold: int = DEFAULT_CHANNEL_THRESHOLD,
) -> dict[str, np.ndarray]:
    """Split an H x W x 3 color mask into one binary mask per class.

    Each RGB channel is binarized at ``channel_threshold`` (strictly greater
    than) and the resulting 3-bit code is matched against the binarized class
    colors.  Every pixel lands in exactly one class; a code outside the map
    raises :class:`MaskColorError` with the offending code and pixel location.
    """
    if not 0 <= channel_threshold <= 255:
        raise ValidationError(f"channel_threshold must be in [0, 255], got {channel_threshold}")
    if color_mask.ndim != 3 or color_mask.shape[2] != 3:
        raise ValidationError(f"color mask must be H x W x 3, got shape {color_mask.shape}")
    validate_class_map(class_map)

    code_to_class: dict[int, str] = {}
    for spec in class_map:
        code = _binarized_code(spec.color, channel_threshold)
        if code in code_to_class:
            raise ValidationError(
                f"classes {code_to_class[code]} and {spec.code} binarize to the same "
                f"3-bit code {code:03b} at threshold {channel_threshold}"
            )
        code_to_class[code] = spec.code

    bits = (color_mask > channel_threshold).astype(np.uint8)
    codes = (bits[..., 0] << 2) | (bits[..., 1] << 1) | bits[..., 2]

    known = np.zeros(8, dtype=bool)
    known[list(code_to_class)] = True
    if not known[codes].all():
        ys, xs = np.nonzero(~known[codes])
        y, x = int(ys[0]), int(xs[0])
        bad = codes[y, x]
        raise MaskColorError(
            f"mask pixel at (row={y}, col={x}) has RGB {tuple(int(v) for v in color_mask[y, x])}, "
            f"binarized code {bad:03b}, which matches no class in the map"
        )

    return {spec.code: (codes == _binarized_code(spec.color, channel_threshold)).astype(np.uint8)
            for spec in class_map}


def paint_color_mask(
    assignments: np.ndarray,
    class_map: tuple[ClassSpec, ...] | list[ClassSpec] = DEFAULT_CLASS_MAP,
) -> np.ndarray:
    """Inverse of :func:`parse_color_mask`: paint class indices as mask colors."""
    if assignments.min() < 0 or assignments.max() >= len(class_map):
        raise ValidationError("assignment index outside the class map")
    palette = np.array([spec.color for spec in class_map], dtype=np.uint8)
    return palette[assignments]


def extract_targets(
    record: ImageRecord,
    class_map: tuple[ClassSpec, ...] | list[ClassSpec] = DEFAULT_CLASS_MAP,
    min_pixels: int = DEFAULT_MIN_PIXELS,
    channel_threshold: int = DEFAULT_CHANNEL_THRESHOLD,
    exclusion_scope: str = "mask",
) -> list[BinaryTarget]:
    """Derive admitted binary targets for one image.

    A class is admitted when its foreground pixel count is at least
    ``min_pixels``.  With ``exclusion_scope="mask"`` the count is taken over
    the whole per-class mask; with ``"component"`` connected components
    smaller than ``min_pixels`` are erased first and the remainder (if any)
    forms the target.
    """
    if min_pixels < 0:
        raise ValidationError(f"min_pixels must be >= 0, got {min_pixels}")
    if exclusion_scope not in ("mask", "component"):
        raise ValidationError(f"exclusion_scope must be 'mask' or 'component', got {exclusion_scope!r}")

    masks = parse_color_mask(record.color_mask, class_map, channel_threshold)
    targets = []
    for spec in class_map:
        mask = masks[spec.code]
        if exclusion_scope == "component":
            mask = _drop_small_components(mask, min_pixels)
        count = int(mask.sum())
        if count >= min_pixels and count > 0:
            targets.append(BinaryTarget(record.image_id, spec.code, mask, count))
    return targets


def _drop_small_components(mask: np.ndarray, min_pixels: int) -> np.ndarray:
    """Erase 4-connected components with fewer than min_pixels foreground pixels."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = np.zeros_like(mask)
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        stack = [(int(sy), int(sx))]
        seen[sy, sx] = True
        component = []
        while stack:
            y, x = stack.pop()
            component.append((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        if len(component) >= min_pixels:
            ys, xs = zip(*component)
            out[list(ys), list(xs)] = 1
    return out


def split_dataset(
    targets: list[BinaryTarget],
    ratio: float = 0.8,
    seed: int = 0,
) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Partition targets into train/test keys, independently per class task.

    Deterministic given ``seed``; every task gets its own seeded shuffle so
    adding a class cannot perturb another class's split.  The train side gets
    ``round(ratio * n)`` targets, clamped so both sides stay nonempty.
    """
    if not 0 < ratio < 1:
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")

    by_class: dict[str, list[str]] = {}
    for t in targets:
        by_class.setdefault(t.class_code, []).append(t.image_id)

    train_keys: list[tuple[str, str]] = []
    test_keys: list[tuple[str, str]] = []
    for code in sorted(by_class):
        ids = sorted(set(by_class[code]))
        if len(ids) < 2:
            raise ValidationError(
                f"task {code}: needs at least 2 targets to form a nonempty split, got {len(ids)}"
            )
        rng = np.random.default_rng([seed, *(ord(c) for c in code)])
        order = rng.permutation(len(ids))
        n_train = int(math.floor(ratio * len(ids) + 0.5))
        n_train = min(max(n_train, 1), len(ids) - 1)
        shuffled = [ids[i] for i in order]
        train_keys.extend((img, code) for img in sorted(shuffled[:n_train]))
        test_keys.extend((img, code) for img in sorted(shuffled[n_train:]))
    return train_keys, test_keys


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear-resize an H x W x 3 uint8 image to side x side."""
    _check_side(side)
    if image.shape[:2] == (side, side):
        return image.copy()
    resized = Image.fromarray(image).resize((side, side), Image.BILINEAR)
    return np.asarray(resized)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor-resize a binary H x W mask to side x side (stays binary)."""
    _check_side(side)
    if mask.shape == (side, side):
        return mask.copy()
    resized = Image.fromarray(mask.astype(np.uint8)).resize((side, side), Image.NEAREST)
    return np.asarray(resized)


def _check_side(side: int) -> None:
    if side < 16 or side % 16 != 0:
        raise ValidationError(
            f"encoder input side must be >= 16 and divisible by 16 (the embedding "
            f"grid would be non-integer), got {side}"
        )


def resize_for_encoder(
    record: ImageRecord,
    side: int,
    target_masks: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Resize an image (bilinear) and its binary targets (nearest) to ``side``.

    Returns the image as float32 in 3 x side x side layout, pixel values still
    0..255; normalization is a separate step.  ``record.original_size`` keeps
    the inverse mapping available at evaluation time.
    """
    image = resize_image(record.image, side)
    chw = image.astype(np.float32).transpose(2, 0, 1)
    masks = {code: resize_mask(m, side) for code, m in (target_masks or {}).items()}
    return chw, masks


def normalize_image(
    image_chw: np.ndarray,
    mean: tuple[float, float, float] = DEFAULT_PIXEL_MEAN,
    std: tuple[float, float, float] = DEFAULT_PIXEL_STD,
) -> np.ndarray:
    """Per-channel (pixel - mean) / std on a 3 x H x W float image."""
    mean_arr = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std_arr = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    return (image_chw.astype(np.float32) - mean_arr) / std_arr


def discover_dataset(root: str | Path) -> list[tuple[str, Path, Path]]:
    """List (image_id, image_path, mask_path) for a dataset directory."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        raise ValidationError(f"no images found: {images_dir} is not a directory")

    masks_by_stem: dict[str, Path] = {}
    if masks_dir.is_dir():
        for p in sorted(masks_dir.iterdir()):
            if p.suffix.lower() in IMAGE_EXTENSIONS:
                masks_by_stem.setdefault(p.stem, p)

    entries = []
    for p in sorted(images_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        mask = masks_by_stem.get(p.stem)
        if mask is None:
            raise ValidationError(f"image {p.stem!r} has no mask under {masks_dir}")
        entries.append((p.stem, p, mask))
    if not entries:
        raise ValidationError(f"no images found under {images_dir}")
    return entries


def load_image_record(image_id: str, image_path: Path, mask_path: Path) -> ImageRecord:
    """Read one image/mask pair into an :class:`ImageRecord`."""
    image = np.asarray(Image.open(image_path).convert("RGB"))
    mask = np.asarray(Image.open(mask_path).convert("RGB"))
    return ImageRecord(image_id, image, mask, image.shape[:2])
