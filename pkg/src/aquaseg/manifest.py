"""Preprocessing manifest: admitted targets, splits, and lazy mask access.

The manifest file is the byte-deterministic source of truth for a run; pixel
data is re-derived on demand from the dataset directory (parsing and resizing
are pure), so masks are never duplicated on disk.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import MaskColorError, MissingArtifactError, ValidationError

MANIFEST_VERSION = 1

Key = tuple[str, str]


@dataclass
class Manifest:
    dataset_root: str
    class_map: list[ds.ClassSpec]
    min_pixels: int
    channel_threshold: int
    exclusion_scope: str
    split_ratio: float
    split_seed: int
    images: dict[str, dict]  # id -> {image, mask, size}
    targets: list[dict]  # {image_id, class_code, pixel_count}
    train_keys: list[Key]
    test_keys: list[Key]
    summary: dict = field(default_factory=dict)

    @property
    def task_order(self) -> list[str]:
        return [spec.code for spec in self.class_map]

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "dataset_root": self.dataset_root,
            "classes": [
                {"code": c.code, "name": c.name, "color": list(c.color)} for c in self.class_map
            ],
            "min_pixels": self.min_pixels,
            "channel_threshold": self.channel_threshold,
            "exclusion_scope": self.exclusion_scope,
            "split": {"ratio": self.split_ratio, "seed": self.split_seed},
            "images": self.images,
            "targets": self.targets,
            "train_keys": [list(k) for k in self.train_keys],
            "test_keys": [list(k) for k in self.test_keys],
            "summary": self.summary,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"manifest not found: {path}", producer="preprocess")
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"{path}: unsupported manifest version {doc.get('version')}")
        class_map = [
            ds.ClassSpec(c["code"], c["name"], tuple(c["color"])) for c in doc["classes"]
        ]
        return cls(
            dataset_root=doc["dataset_root"],
            class_map=class_map,
            min_pixels=doc["min_pixels"],
            channel_threshold=doc["channel_threshold"],
            exclusion_scope=doc["exclusion_scope"],
            split_ratio=doc["split"]["ratio"],
            split_seed=doc["split"]["seed"],
            images=doc["images"],
            targets=doc["targets"],
            train_keys=[tuple(k) for k in doc["train_keys"]],
            test_keys=[tuple(k) for k in doc["test_keys"]],
            summary=doc.get("summary", {}),
        )


def build_manifest(
    dataset_root: str | Path,
    class_map: list[ds.ClassSpec] | tuple[ds.ClassSpec, ...] = ds.DEFAULT_CLASS_MAP,
    min_pixels: int = ds.DEFAULT_MIN_PIXELS,
    channel_threshold: int = ds.DEFAULT_CHANNEL_THRESHOLD,
    exclusion_scope: str = "mask",
    split_ratio: float = 0.8,
    split_seed: int = 0,
    input_side: int | None = None,
) -> Manifest:
    """Parse a dataset directory into admitted targets plus an 80/20-style split.

    When ``input_side`` is given, targets that would vanish under
    nearest-neighbor resizing to the encoder scale are also excluded (they
    could not be box-prompted); the summary counts them separately.
    """
    root = Path(dataset_root)
    entries = ds.discover_dataset(root)

    images: dict[str, dict] = {}
    all_targets: list[ds.BinaryTarget] = []
    n_excluded = 0
    n_unresizable = 0
    per_class: dict[str, int] = {spec.code: 0 for spec in class_map}
    for image_id, image_path, mask_path in entries:
        record = ds.load_image_record(image_id, image_path, mask_path)
        images[image_id] = {
            "image": str(image_path.relative_to(root)),
            "mask": str(mask_path.relative_to(root)),
            "size": list(record.original_size),
        }
        try:
            parsed = ds.parse_color_mask(record.color_mask, class_map, channel_threshold)
            admitted = ds.extract_targets(
                record, class_map, min_pixels, channel_threshold, exclusion_scope
            )
        except MaskColorError as exc:
            raise MaskColorError(f"{mask_path}: {exc}") from exc
        present = sum(1 for m in parsed.values() if m.any())
        n_excluded += present - len(admitted)
        if input_side is not None:
            kept = [t for t in admitted if ds.resize_mask(t.mask, input_side).any()]
            n_unresizable += len(admitted) - len(kept)
            admitted = kept
        for t in admitted:
            per_class[t.class_code] += 1
        all_targets.extend(admitted)

    train_keys, test_keys = ds.split_dataset(all_targets, split_ratio, split_seed)
    targets = sorted(
        (
            {"image_id": t.image_id, "class_code": t.class_code, "pixel_count": t.pixel_count}
            for t in all_targets
        ),
        key=lambda d: (d["image_id"], d["class_code"]),
    )
    summary = {
        "n_images": len(images),
        "n_targets": len(targets),
        "targets_per_class": per_class,
        "n_excluded_small": n_excluded,
        "n_excluded_unresizable": n_unresizable,
        "n_train": len(train_keys),
        "n_test": len(test_keys),
    }
    return Manifest(
        dataset_root=str(root),
        class_map=list(class_map),
        min_pixels=min_pixels,
        channel_threshold=channel_threshold,
        exclusion_scope=exclusion_scope,
        split_ratio=split_ratio,
        split_seed=split_seed,
        images=images,
        targets=targets,
        train_keys=train_keys,
        test_keys=test_keys,
        summary=summary,
    )


class TargetLoader:
    """Lazy, cached access to per-target masks at native and encoder scale."""

    def __init__(self, manifest: Manifest, input_side: int, lru_size: int = 16):
        self.manifest = manifest
        self.root = Path(manifest.dataset_root)
        self.side = input_side
        self._lru_size = lru_size
        self._parsed: OrderedDict[str, dict[str, np.ndarray]] = OrderedDict()
        self._resized: OrderedDict[Key, np.ndarray] = OrderedDict()
        self._admitted = {(t["image_id"], t["class_code"]) for t in manifest.targets}

    def _image_entry(self, image_id: str) -> dict:
        entry = self.manifest.images.get(image_id)
        if entry is None:
            raise ValidationError(f"image {image_id!r} is not in the manifest")
        return entry

    def original_size(self, image_id: str) -> tuple[int, int]:
        size = self._image_entry(image_id)["size"]
        return (int(size[0]), int(size[1]))

    def load_record(self, image_id: str) -> ds.ImageRecord:
        entry = self._image_entry(image_id)
        return ds.load_image_record(
            image_id, self.root / entry["image"], self.root / entry["mask"]
        )

    def _parsed_masks(self, image_id: str) -> dict[str, np.ndarray]:
        if image_id in self._parsed:
            self._parsed.move_to_end(image_id)
            return self._parsed[image_id]
        record = self.load_record(image_id)
        masks = ds.parse_color_mask(
            record.color_mask, self.manifest.class_map, self.manifest.channel_threshold
        )
        self._parsed[image_id] = masks
        if len(self._parsed) > self._lru_size:
            self._parsed.popitem(last=False)
        return masks

    def original_mask(self, key: Key) -> np.ndarray:
        image_id, code = key
        if key not in self._admitted:
            raise ValidationError(f"target {key} is not an admitted manifest target")
        return self._parsed_masks(image_id)[code]

    def resized_mask(self, key: Key) -> np.ndarray:
        if key in self._resized:
            self._resized.move_to_end(key)
            return self._resized[key]
        mask = ds.resize_mask(self.original_mask(key), self.side)
        if not mask.any():
            raise ValidationError(
                f"target {key} became empty at encoder scale {self.side}; it cannot "
                f"be box-prompted (raise min_pixels or the input side)"
            )
        self._resized[key] = mask
        if len(self._resized) > 4 * self._lru_size:
            self._resized.popitem(last=False)
        return mask

    def normalized_image(
        self,
        image_id: str,
        mean: tuple[float, float, float] = ds.DEFAULT_PIXEL_MEAN,
        std: tuple[float, float, float] = ds.DEFAULT_PIXEL_STD,
    ) -> np.ndarray:
        record = self.load_record(image_id)
        chw, _ = ds.resize_for_encoder(record, self.side)
        return ds.normalize_image(chw, mean, std)
