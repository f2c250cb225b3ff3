"""On-disk embedding cache so the frozen encoder runs once per image.

Entry file format (bit-exact):
  magic "AQEMB1" (6 bytes), format version u16 LE, embed_dim u32 LE,
  height u32 LE, width u32 LE, image_id length u32 LE + UTF-8 id bytes,
  payload of embed_dim * height * width 4-byte LE IEEE floats in
  channel-major row-major order, trailing CRC32 of the payload u32 LE.

Index file (``index.tsv``): one line per entry,
``image_id<TAB>relative_path<TAB>crc32hex``.

Writers stage entries under a temporary name and atomically rename, so
parallel precompute workers never interleave bytes; readers are lock-free.
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import OrderedDict
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ImageEmbedding
from .errors import CacheCorruptError, MissingArtifactError, ValidationError

MAGIC = b"AQEMB1"
FORMAT_VERSION = 1
INDEX_NAME = "index.tsv"
_HEADER = struct.Struct("<HIII")  # version, embed_dim, height, width


@dataclass
class EmbeddingCacheEntry:
    """One cached embedding plus the integrity data stored with it."""

    image_id: str
    embed_dim: int
    height: int
    width: int
    values: np.ndarray  # float32, C x H x W
    crc32: int = field(default=0)

    def __post_init__(self) -> None:
        expected = (self.embed_dim, self.height, self.width)
        if tuple(self.values.shape) != expected:
            raise ValidationError(
                f"entry {self.image_id!r}: payload shape {self.values.shape} does not "
                f"match header dims {expected}"
            )

    @classmethod
    def from_embedding(cls, emb: ImageEmbedding) -> "EmbeddingCacheEntry":
        c, h, w = emb.grid.shape
        return cls(emb.image_id, c, h, w, np.ascontiguousarray(emb.grid, dtype=np.float32))


def entry_filename(image_id: str) -> str:
    return f"{image_id}.aqemb"


def write_entry(cache_dir: str | Path, entry: EmbeddingCacheEntry) -> tuple[Path, int]:
    """Serialize an entry atomically; returns (path, payload crc32)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(entry.values, dtype="<f4").tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    id_bytes = entry.image_id.encode("utf-8")

    blob = (
        MAGIC
        + _HEADER.pack(FORMAT_VERSION, entry.embed_dim, entry.height, entry.width)
        + struct.pack("<I", len(id_bytes))
        + id_bytes
        + payload
        + struct.pack("<I", crc)
    )
    path = cache_dir / entry_filename(entry.image_id)
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    entry.crc32 = crc
    return path, crc


def read_entry(path: str | Path) -> EmbeddingCacheEntry:
    """Deserialize and integrity-check one entry file."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"embedding entry not found: {path}", producer="embed")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + _HEADER.size + 8 or not blob.startswith(MAGIC):
        raise CacheCorruptError(f"{path}: not an embedding cache entry (bad magic or truncated)")
    off = len(MAGIC)
    version, embed_dim, height, width = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if version != FORMAT_VERSION:
        raise CacheCorruptError(f"{path}: unsupported format version {version}")
    (id_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    image_id = blob[off : off + id_len].decode("utf-8")
    off += id_len

    n_values = embed_dim * height * width
    payload_end = off + 4 * n_values
    if len(blob) != payload_end + 4:
        raise CacheCorruptError(
            f"{path}: expected {payload_end + 4} bytes for a {embed_dim}x{height}x{width} "
            f"payload, found {len(blob)} (truncated or padded)"
        )
    payload = blob[off:payload_end]
    (stored_crc,) = struct.unpack_from("<I", blob, payload_end)
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise CacheCorruptError(
            f"{path}: payload CRC32 {actual_crc:08x} does not match stored {stored_crc:08x}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(embed_dim, height, width).copy()
    return EmbeddingCacheEntry(image_id, embed_dim, height, width, values, stored_crc)


@dataclass
class CacheIndex:
    """Index over entry files; paths are relative to the cache directory."""

    cache_dir: Path
    entries: dict[str, tuple[str, int]] = field(default_factory=dict)  # id -> (relpath, crc)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (id, reason)
    encoded: int = 0

    def path_for(self, image_id: str) -> Path:
        if image_id not in self.entries:
            raise MissingArtifactError(
                f"no cached embedding for image {image_id!r}", producer="embed"
            )
        return self.cache_dir / self.entries[image_id][0]

    def write(self) -> Path:
        lines = [
            f"{image_id}\t{relpath}\t{crc:08x}\n"
            for image_id, (relpath, crc) in sorted(self.entries.items())
        ]
        path = self.cache_dir / INDEX_NAME
        tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
        tmp.write_text("".join(lines), encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, cache_dir: str | Path) -> "CacheIndex":
        cache_dir = Path(cache_dir)
        path = cache_dir / INDEX_NAME
        if not path.is_file():
            raise MissingArtifactError(f"embedding cache index not found: {path}", producer="embed")
        index = cls(cache_dir)
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 3:
                raise CacheCorruptError(f"{path}:{line_no}: malformed index line {line!r}")
            index.entries[parts[0]] = (parts[1], int(parts[2], 16))
        return index


def _existing_entry_ok(path: Path, image_id: str) -> bool:
    try:
        entry = read_entry(path)
    except (CacheCorruptError, MissingArtifactError):
        return False
    return entry.image_id == image_id


def precompute_embeddings(
    image_ids: Iterable[str],
    encode_fn: Callable[[str], ImageEmbedding],
    cache_dir: str | Path,
) -> CacheIndex:
    """Ensure one valid cache entry per unique image id.

    Idempotent: entries whose checksum verifies are skipped; corrupt entries
    are recomputed and overwritten; images whose ``encode_fn`` fails are
    skipped and reported on the returned index.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index = CacheIndex(cache_dir)
    for image_id in sorted(set(image_ids)):
        path = cache_dir / entry_filename(image_id)
        if path.is_file() and _existing_entry_ok(path, image_id):
            entry = read_entry(path)
            index.entries[image_id] = (path.name, entry.crc32)
            continue
        try:
            emb = encode_fn(image_id)
        except Exception as exc:  # unreadable image: report, keep going
            index.skipped.append((image_id, str(exc)))
            continue
        entry = EmbeddingCacheEntry.from_embedding(emb)
        _, crc = write_entry(cache_dir, entry)
        index.entries[image_id] = (path.name, crc)
        index.encoded += 1
    index.write()
    return index


def import_external_embeddings(
    source_dir: str | Path,
    image_ids: Iterable[str],
    cache_dir: str | Path,
    embed_dim: int,
    grid_side: int | None = None,
) -> CacheIndex:
    """Validate offline-computed embeddings and copy them into the cache.

    Every manifest image id must have an entry file in the documented cache
    format under ``source_dir``.  Entries are checked for dimensions,
    finiteness, and checksum before being admitted.
    """
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise MissingArtifactError(f"external embedding directory not found: {source_dir}")
    ids = sorted(set(image_ids))
    missing = [i for i in ids if not (source_dir / entry_filename(i)).is_file()]
    if missing:
        raise MissingArtifactError(
            f"external embeddings missing for {len(missing)} image(s): {', '.join(missing[:10])}"
        )

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index = CacheIndex(cache_dir)
    for image_id in ids:
        entry = read_entry(source_dir / entry_filename(image_id))
        if entry.image_id != image_id:
            raise CacheCorruptError(
                f"{entry_filename(image_id)}: header id {entry.image_id!r} does not match"
            )
        if entry.embed_dim != embed_dim:
            raise ValidationError(
                f"{entry_filename(image_id)}: embed_dim {entry.embed_dim} does not match "
                f"configured embed_dim {embed_dim}"
            )
        if grid_side is not None and (entry.height, entry.width) != (grid_side, grid_side):
            raise ValidationError(
                f"{entry_filename(image_id)}: grid {entry.height}x{entry.width} does not "
                f"match expected {grid_side}x{grid_side}"
            )
        if not np.isfinite(entry.values).all():
            raise ValidationError(f"{entry_filename(image_id)}: non-finite embedding values")
        _, crc = write_entry(cache_dir, entry)
        index.entries[image_id] = (entry_filename(image_id), crc)
    index.write()
    return index


class EmbeddingReader:
    """Read-through cache over entry files with a small in-memory LRU."""

    def __init__(self, index: CacheIndex, lru_size: int = 32):
        self.index = index
        self._lru: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lru_size = lru_size

    def grid(self, image_id: str) -> np.ndarray:
        if image_id in self._lru:
            self._lru.move_to_end(image_id)
            return self._lru[image_id]
        entry = read_entry(self.index.path_for(image_id))
        self._lru[image_id] = entry.values
        if len(self._lru) > self._lru_size:
            self._lru.popitem(last=False)
        return entry.values
