import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquaseg.embed_cache import (
    CacheIndex,
    EmbeddingCacheEntry,
    EmbeddingReader,
    entry_filename,
    import_external_embeddings,
    precompute_embeddings,
    read_entry,
    write_entry,
)
from aquaseg.encoder import EncoderSpec, ImageEmbedding, ToyImageEncoder, encode_image
from aquaseg.errors import CacheCorruptError, MissingArtifactError, ValidationError


def _image(side: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(3, side, side)).astype(np.float32)


class TestEncodeImage:
    def test_factor_16_downscale_full_scale(self):
        spec = EncoderSpec("toy", 256, 1024, seed=1)
        emb = encode_image(_image(1024), spec, image_id="big")
        assert emb.grid.shape == (256, 64, 64)

    def test_factor_16_downscale_toy(self):
        spec = EncoderSpec("toy", 32, 256, seed=1)
        emb = encode_image(_image(256), spec, image_id="small")
        assert emb.grid.shape == (32, 16, 16)

    def test_deterministic_given_seed(self):
        spec = EncoderSpec("toy", 32, 256, seed=9)
        a = encode_image(_image(256, seed=5), spec)
        b = encode_image(_image(256, seed=5), spec)
        np.testing.assert_array_equal(a.grid, b.grid)

    def test_external_kind_points_at_importer(self):
        spec = EncoderSpec("external", 256, 1024, seed=0)
        with pytest.raises(ValidationError, match="import_external_embeddings"):
            encode_image(_image(1024), spec)

    def test_all_values_finite_and_bounded(self):
        spec = EncoderSpec("toy", 32, 256, seed=2)
        emb = encode_image(100.0 * _image(256), spec)
        assert np.isfinite(emb.grid).all()
        assert np.abs(emb.grid).max() <= 1.0  # bounded nonlinearity

    def test_encoder_is_frozen(self):
        enc = ToyImageEncoder(32, seed=0)
        assert all(not p.requires_grad for p in enc.parameters())


class TestEntryFormat:
    def test_round_trip_exact(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(8, 4, 4)).astype(np.float32)
        entry = EmbeddingCacheEntry("img_a", 8, 4, 4, values)
        path, crc = write_entry(tmp_path, entry)
        back = read_entry(path)
        assert back.image_id == "img_a"
        assert back.crc32 == crc
        assert back.values.tobytes() == values.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_round_trip_random_dims(self, c, h, w, seed):
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            values = np.random.default_rng(seed).normal(size=(c, h, w)).astype(np.float32)
            entry = EmbeddingCacheEntry(f"id_{seed}", c, h, w, values)
            write_entry(tmp, entry)
            back = read_entry(f"{tmp}/{entry_filename(entry.image_id)}")
            assert back.values.tobytes() == values.tobytes()
            assert (back.embed_dim, back.height, back.width) == (c, h, w)

    def test_size_arithmetic(self, tmp_path):
        # magic(6) + version u16 + 3*u32 dims + id_len u32 + id + payload + crc u32
        entry = EmbeddingCacheEntry("xy", 32, 16, 16, np.zeros((32, 16, 16), np.float32))
        path, _ = write_entry(tmp_path, entry)
        expected = 6 + 2 + 12 + 4 + 2 + 32 * 16 * 16 * 4 + 4
        assert path.stat().st_size == expected

    def test_truncated_file_fails_checksum(self, tmp_path):
        entry = EmbeddingCacheEntry("t", 4, 4, 4, np.ones((4, 4, 4), np.float32))
        path, _ = write_entry(tmp_path, entry)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CacheCorruptError, match=str(path.name)):
            read_entry(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        entry = EmbeddingCacheEntry("t", 4, 4, 4, np.ones((4, 4, 4), np.float32))
        path, _ = write_entry(tmp_path, entry)
        blob = bytearray(path.read_bytes())
        blob[40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CacheCorruptError, match="CRC32"):
            read_entry(path)


def _fake_encoder(side: int = 64, dim: int = 8):
    spec = EncoderSpec("toy", dim, side, seed=3)
    model = ToyImageEncoder(dim, seed=3)
    calls = []

    def encode(image_id: str) -> ImageEmbedding:
        if image_id.startswith("bad"):
            raise OSError(f"cannot read {image_id}")
        calls.append(image_id)
        rng = np.random.default_rng(abs(hash(image_id)) % 2**31)
        return encode_image(rng.normal(size=(3, side, side)).astype(np.float32), spec, model, image_id)

    return encode, calls


class TestPrecompute:
    def test_keyed_by_image_not_target(self, tmp_path):
        encode, calls = _fake_encoder()
        targets = [(f"img_{i % 10}", c) for i, c in enumerate(["HD", "FV", "RO"] * 8)]  # 24 targets
        ids = [t[0] for t in targets]
        index = precompute_embeddings(ids, encode, tmp_path)
        assert len(index.entries) == 10
        assert len(calls) == 10

    def test_second_run_encodes_nothing(self, tmp_path):
        encode, calls = _fake_encoder()
        precompute_embeddings(["a", "b", "c"], encode, tmp_path)
        n_first = len(calls)
        index = precompute_embeddings(["a", "b", "c"], encode, tmp_path)
        assert len(calls) == n_first
        assert index.encoded == 0

    def test_deleted_entry_repaired_incrementally(self, tmp_path):
        encode, calls = _fake_encoder()
        precompute_embeddings(["a", "b", "c"], encode, tmp_path)
        (tmp_path / entry_filename("b")).unlink()
        calls.clear()
        index = precompute_embeddings(["a", "b", "c"], encode, tmp_path)
        assert calls == ["b"]
        assert index.encoded == 1

    def test_corrupt_entry_recomputed(self, tmp_path):
        encode, calls = _fake_encoder()
        precompute_embeddings(["a", "b"], encode, tmp_path)
        path = tmp_path / entry_filename("a")
        path.write_bytes(path.read_bytes()[:-4] + b"\x00\x00\x00\x00")
        calls.clear()
        precompute_embeddings(["a", "b"], encode, tmp_path)
        assert calls == ["a"]
        assert read_entry(path).image_id == "a"

    def test_unreadable_image_skipped_and_reported(self, tmp_path):
        encode, _ = _fake_encoder()
        index = precompute_embeddings(["a", "bad_x"], encode, tmp_path)
        assert "a" in index.entries and "bad_x" not in index.entries
        assert index.skipped and index.skipped[0][0] == "bad_x"

    def test_index_round_trip(self, tmp_path):
        encode, _ = _fake_encoder()
        index = precompute_embeddings(["a", "b"], encode, tmp_path)
        loaded = CacheIndex.load(tmp_path)
        assert loaded.entries == index.entries

    def test_reader_returns_grids(self, tmp_path):
        encode, _ = _fake_encoder()
        index = precompute_embeddings(["a"], encode, tmp_path)
        reader = EmbeddingReader(index)
        grid = reader.grid("a")
        assert grid.shape == (8, 4, 4)
        assert reader.grid("a") is grid  # LRU hit
        with pytest.raises(MissingArtifactError, match="embed"):
            reader.grid("zz")


class TestImportExternal:
    def _fill_source(self, src, ids, dim=16, side=4):
        for image_id in ids:
            values = np.random.default_rng(len(image_id)).normal(size=(dim, side, side))
            write_entry(src, EmbeddingCacheEntry(image_id, dim, side, side, values.astype(np.float32)))

    def test_complete_directory_indexed(self, tmp_path):
        src, dst = tmp_path / "src", tmp_path / "dst"
        self._fill_source(src, ["a", "b", "c"])
        index = import_external_embeddings(src, ["a", "b", "c"], dst, embed_dim=16, grid_side=4)
        assert sorted(index.entries) == ["a", "b", "c"]
        assert read_entry(dst / entry_filename("a")).embed_dim == 16

    def test_missing_id_named(self, tmp_path):
        src, dst = tmp_path / "src", tmp_path / "dst"
        self._fill_source(src, ["a"])
        with pytest.raises(MissingArtifactError, match="b"):
            import_external_embeddings(src, ["a", "b"], dst, embed_dim=16)

    def test_dim_mismatch_rejected(self, tmp_path):
        src, dst = tmp_path / "src", tmp_path / "dst"
        self._fill_source(src, ["a"], dim=128)
        with pytest.raises(ValidationError, match="embed_dim 128"):
            import_external_embeddings(src, ["a"], dst, embed_dim=256)

    def test_non_finite_rejected(self, tmp_path):
        src, dst = tmp_path / "src", tmp_path / "dst"
        values = np.full((4, 2, 2), np.nan, dtype=np.float32)
        write_entry(src, EmbeddingCacheEntry("a", 4, 2, 2, values))
        with pytest.raises(ValidationError, match="non-finite"):
            import_external_embeddings(src, ["a"], dst, embed_dim=4)
