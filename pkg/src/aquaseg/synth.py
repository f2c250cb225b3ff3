"""Synthetic mini-dataset generator: colored shapes over textured water.

Desk-scale stand-in for a real color-coded dataset, used by smoke tests and
CI.  Images get geometric shapes with strong per-class appearance; masks are
painted with the exact class-map colors, so re-parsing recovers the
generator's assignments pixel-exactly.  The first class in the map is treated
as the background; every other class appears in at least two images once
``n_images >= 8`` so each task can be split.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DEFAULT_CLASS_MAP, ClassSpec, paint_color_mask, validate_class_map
from .errors import ValidationError

# Shape extents sit on a 4-pixel grid (the mask head's native granularity at
# a 256 canvas) and guarantee well over the default 100-pixel admission bar.
MIN_SHAPE_SIDE = 48
MAX_SHAPE_SIDE = 96
CELL_MARGIN = 12


def _shape_palette(n: int, seed: int) -> np.ndarray:
    """Saturated, well-separated appearance colors for shape interiors."""
    rng = np.random.default_rng([seed, 0xC0102])
    hues = (np.arange(n) / max(n, 1) + rng.uniform(0, 1 / max(n, 1))) % 1.0
    palette = []
    for h in hues:
        i = int(h * 6) % 6
        f = h * 6 - int(h * 6)
        v, p, q, t = 235, 40, int(235 - f * 195), int(40 + f * 195)
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
        palette.append(rgb)
    return np.array(palette, dtype=np.float32)


def _paint_background(canvas: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = canvas
    top = rng.uniform(10, 40, size=3) + np.array([0.0, 20.0, 60.0])
    bottom = top + rng.uniform(10, 50, size=3)
    ramp = np.linspace(0.0, 1.0, h)[:, None, None]
    image = top[None, None, :] * (1 - ramp) + bottom[None, None, :] * ramp
    image = np.broadcast_to(image, (h, w, 3)).copy()
    image += rng.normal(0.0, 6.0, size=(h, w, 3))
    return image


def _shape_region(
    canvas: tuple[int, int],
    cell: tuple[int, int, int, int],
    kind: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Boolean mask of one shape inside a cell, in full-canvas coordinates."""
    y0, x0, y1, x1 = cell
    inner_h, inner_w = y1 - y0 - 2 * CELL_MARGIN, x1 - x0 - 2 * CELL_MARGIN
    side_h = min(int(rng.integers(MIN_SHAPE_SIDE, MAX_SHAPE_SIDE + 1)), inner_h)
    side_w = min(int(rng.integers(MIN_SHAPE_SIDE, MAX_SHAPE_SIDE + 1)), inner_w)
    side_h, side_w = (side_h // 4) * 4, (side_w // 4) * 4
    oy = y0 + CELL_MARGIN + int(rng.integers(0, inner_h - side_h + 1))
    ox = x0 + CELL_MARGIN + int(rng.integers(0, inner_w - side_w + 1))
    oy, ox = (oy // 4) * 4, (ox // 4) * 4

    region = np.zeros(canvas, dtype=bool)
    if kind == "rect":
        region[oy : oy + side_h, ox : ox + side_w] = True
    else:  # ellipse
        cy, cx = oy + side_h / 2, ox + side_w / 2
        yy, xx = np.mgrid[0 : canvas[0], 0 : canvas[1]]
        region = ((yy - cy) / (side_h / 2)) ** 2 + ((xx - cx) / (side_w / 2)) ** 2 <= 1.0
    return region


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_images: int,
    seed: int,
    class_map: tuple[ClassSpec, ...] | list[ClassSpec] = DEFAULT_CLASS_MAP,
    canvas: tuple[int, int] = (256, 256),
    force: bool = False,
) -> list[str]:
    """Render n_images image/mask pairs into ``out_dir``; returns image ids."""
    if n_images < 2:
        raise ValidationError(f"n_images must be >= 2, got {n_images}")
    validate_class_map(class_map)
    if len(class_map) < 2:
        raise ValidationError("need at least a background class and one shape class")
    h, w = canvas
    if h < 128 or w < 128:
        raise ValidationError(f"canvas must be at least 128x128, got {canvas}")

    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ValidationError(
                f"output directory {out_dir} is not empty (use --force to overwrite)"
            )
        for sub in ("images", "masks"):
            shutil.rmtree(out_dir / sub, ignore_errors=True)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    shape_classes = list(range(1, len(class_map)))
    m = len(shape_classes)
    palette = _shape_palette(m, seed)
    ids = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        image = _paint_background((h, w), rng)
        assignments = np.zeros((h, w), dtype=np.int64)  # background = class 0

        class_picks = [shape_classes[i % m], shape_classes[(i + 3) % m]]
        if rng.uniform() < 0.5:
            class_picks.append(shape_classes[(i + 5) % m])
        class_picks = list(dict.fromkeys(class_picks))

        # Non-overlapping placement on a 2x2 cell grid.
        cells = [
            (0, 0, h // 2, w // 2), (0, w // 2, h // 2, w),
            (h // 2, 0, h, w // 2), (h // 2, w // 2, h, w),
        ]
        cell_order = rng.permutation(4)
        for j, class_idx in enumerate(class_picks):
            cell = cells[cell_order[j]]
            kind = "rect" if rng.uniform() < 0.6 else "ellipse"
            region = _shape_region((h, w), cell, kind, rng)
            color = palette[shape_classes.index(class_idx)]
            texture = rng.normal(0.0, 8.0, size=(h, w, 3))
            image[region] = color[None, :] + texture[region]
            assignments[region] = class_idx

        image = np.clip(image, 0, 255).astype(np.uint8)
        mask = paint_color_mask(assignments, class_map)
        image_id = f"synth_{i:04d}"
        Image.fromarray(image).save(out_dir / "images" / f"{image_id}.png")
        Image.fromarray(mask).save(out_dir / "masks" / f"{image_id}.png")
        ids.append(image_id)
    return ids
