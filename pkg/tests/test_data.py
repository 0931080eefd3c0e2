from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepstruct.data import (
    ALPHABET,
    Dataset,
    DatasetFormatError,
    DatasetSpec,
    dataset_bytes,
    decode_word,
    encode_word,
    generate_dataset,
    glyph_bitmap,
    parse_dataset,
    read_dataset,
    render_glyph,
    upsampled_glyph,
    write_dataset,
    write_manifest,
)


def _small_spec(**kw):
    base = dict(train=6, val=3, test=3, vocab_size=8, seed=0)
    base.update(kw)
    return DatasetSpec(**base)


class TestGlyphs:
    def test_every_letter_distinct(self):
        maps = {c: glyph_bitmap(c).tobytes() for c in ALPHABET}
        assert len(set(maps.values())) == 26

    def test_invalid_char(self):
        with pytest.raises(ValueError):
            glyph_bitmap("A")
        with pytest.raises(ValueError):
            render_glyph("?")

    def test_identity_blank_is_upsampled_bitmap(self):
        assert np.array_equal(render_glyph("q"), upsampled_glyph("q"))

    @pytest.mark.parametrize("background", ["blank", "texture"])
    def test_full_turn_equals_no_turn(self, background):
        a = render_glyph("k", 0.0, 1.1, (1.5, -2.0), 3, 0.1, background, clutter=1, occlusion=0.5)
        b = render_glyph("k", 360.0, 1.1, (1.5, -2.0), 3, 0.1, background, clutter=1, occlusion=0.5)
        assert np.array_equal(a, b)

    def test_deterministic(self):
        args = ("m", 12.0, 0.9, (0.5, 1.0), 99, 0.15, "texture")
        assert np.array_equal(render_glyph(*args), render_glyph(*args))

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(list(ALPHABET)), st.floats(-25, 25), st.floats(0.8, 1.2),
           st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1), st.floats(0, 0.5),
           st.sampled_from(["blank", "texture"]))
    def test_pixel_range(self, ch, rot, sc, dy, dx, seed, noise, bg):
        img = render_glyph(ch, rot, sc, (dy, dx), seed, noise, bg, clutter=2, occlusion=0.5)
        assert img.shape == (28, 28)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestSpec:
    def test_defaults(self):
        spec = DatasetSpec()
        assert (spec.train, spec.val, spec.test) == (1000, 200, 200)
        assert len(spec.vocabulary) == 50 and all(len(w) == 5 for w in spec.vocabulary)
        assert len(set(spec.vocabulary)) == 50

    @pytest.mark.parametrize("kw", [dict(vocabulary=["abc", "abcd"]), dict(vocabulary=["Hello"]),
                                    dict(rotation=-1.0), dict(noise=-0.1), dict(scale_min=1.3),
                                    dict(occlusion=1.5)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            DatasetSpec(**kw)

    def test_word_codec(self):
        assert decode_word(encode_word("quick")) == "quick"
        assert encode_word("az").tolist() == [0, 25]


class TestGenerate:
    def test_same_seed_identical(self):
        a, b = generate_dataset(_small_spec()), generate_dataset(_small_spec())
        assert all(a[k] == b[k] for k in a)

    def test_different_seed_differs(self):
        a, b = generate_dataset(_small_spec()), generate_dataset(_small_spec(seed=1))
        assert a["train"] != b["train"]

    def test_splits_use_separate_streams(self):
        d = generate_dataset(_small_spec(train=3, val=3, test=3))
        assert d["train"] != d["val"] and d["val"] != d["test"]

    def test_labels_spell_vocabulary_words(self):
        spec = _small_spec()
        for ds in generate_dataset(spec).values():
            assert all(decode_word(row) in spec.vocabulary for row in ds.labels)

    def test_unperturbed_renderings_identical(self):
        spec = _small_spec(vocabulary=["abcde", "edcba"], rotation=0, scale_min=1, scale_max=1,
                           translation=0, noise=0, background="blank")
        ds = generate_dataset(spec)["train"]
        seen = {}
        for k in range(len(ds)):
            for j in range(5):
                key = int(ds.labels[k, j])
                img = ds.images[k, j].tobytes()
                assert seen.setdefault(key, img) == img

    def test_shapes_and_range(self):
        ds = generate_dataset(_small_spec())["train"]
        assert ds.images.shape == (6, 5, 28, 28) and ds.images.dtype == np.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.features().shape == (6, 5, 784)


class TestSerialization:
    def test_round_trip_bytes(self, tmp_path):
        ds = generate_dataset(_small_spec())["train"]
        write_dataset(tmp_path / "a.dsd", ds)
        back = read_dataset(tmp_path / "a.dsd")
        assert back == ds
        assert dataset_bytes(back) == (tmp_path / "a.dsd").read_bytes()

    def test_labels_one_based_on_disk(self):
        ds = Dataset(np.zeros((1, 2, 1, 1), dtype=np.float32), np.array([[0, 25]]))
        raw = dataset_bytes(ds)
        assert raw[:8] == b"DSTRUCT1"
        assert raw[28:30] == bytes([1, 26])

    def test_header_layout(self):
        ds = Dataset(np.zeros((3, 5, 2, 4), dtype=np.float32), np.zeros((3, 5), dtype=int))
        raw = dataset_bytes(ds)
        assert struct.unpack_from("<IIIII", raw, 8) == (1, 3, 5, 2, 4)
        assert len(raw) == 28 + 3 * (5 + 4 * 5 * 8) + 4

    def test_empty_dataset(self):
        ds = Dataset(np.zeros((0, 5, 28, 28), dtype=np.float32), np.zeros((0, 5), dtype=np.int64))
        back = parse_dataset(dataset_bytes(ds))
        assert len(back) == 0 and back.images.shape == (0, 5, 28, 28)

    def test_corrupted_header(self):
        raw = bytearray(dataset_bytes(generate_dataset(_small_spec(train=2))["train"]))
        raw[10] ^= 0xFF
        with pytest.raises(DatasetFormatError, match="checksum"):
            parse_dataset(bytes(raw))

    def test_corrupted_payload(self):
        raw = bytearray(dataset_bytes(generate_dataset(_small_spec(train=2))["train"]))
        raw[len(raw) // 2] ^= 0x01
        with pytest.raises(DatasetFormatError):
            parse_dataset(bytes(raw))

    def test_truncated(self):
        raw = dataset_bytes(generate_dataset(_small_spec(train=2))["train"])
        for cut in (5, len(raw) // 2, len(raw) - 1):
            with pytest.raises(DatasetFormatError):
                parse_dataset(raw[:cut])

    def test_bad_magic_with_valid_checksum(self):
        import zlib

        raw = bytearray(dataset_bytes(Dataset(np.zeros((0, 5, 1, 1), np.float32), np.zeros((0, 5), int))))
        raw[:8] = b"NOTADATA"
        body = bytes(raw[:-4])
        with pytest.raises(DatasetFormatError, match="magic"):
            parse_dataset(body + struct.pack("<I", zlib.crc32(body)))

    def test_manifest(self, tmp_path):
        spec = _small_spec()
        write_manifest(tmp_path / "manifest.tsv", spec, {"train": 6})
        rows = dict(line.split("\t") for line in (tmp_path / "manifest.tsv").read_text().splitlines())
        assert rows["seed"] == "0" and rows["count_train"] == "6"
        assert rows["vocabulary"].split(",") == spec.vocabulary

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 4), st.integers(1, 6), st.integers(0, 10_000))
    def test_round_trip_property(self, n, L, seed):
        rng = np.random.default_rng(seed)
        ds = Dataset(rng.random((n, L, 3, 2)).astype(np.float32), rng.integers(0, 26, (n, L)))
        assert parse_dataset(dataset_bytes(ds)) == ds
