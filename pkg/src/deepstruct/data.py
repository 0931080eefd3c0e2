"""Synthetic noisy-word dataset: procedural glyphs, affine jitter, textured backgrounds.

Labels are 0-based in memory (``a`` is 0) and 1-based on disk.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"DSTRUCT1"
VERSION = 1
ALPHABET = "abcdefghijklmnopqrstuvwxyz"

_GLYPHS = {
    "a": [".......", ".......", "..###..", ".....#.", "..####.", ".#...#.", "..####."],
    "b": [".#.....", ".#.....", ".####..", ".#...#.", ".#...#.", ".#...#.", ".####.."],
    "c": [".......", ".......", "..###..", ".#...#.", ".#.....", ".#...#.", "..###.."],
    "d": [".....#.", ".....#.", "..####.", ".#...#.", ".#...#.", ".#...#.", "..####."],
    "e": [".......", ".......", "..###..", ".#...#.", ".#####.", ".#.....", "..###.."],
    "f": ["...##..", "..#..#.", "..#....", ".####..", "..#....", "..#....", "..#...."],
    "g": [".......", "..####.", ".#...#.", ".#...#.", "..####.", ".....#.", "..###.."],
    "h": [".#.....", ".#.....", ".#.##..", ".##..#.", ".#...#.", ".#...#.", ".#...#."],
    "i": ["...#...", ".......", "..##...", "...#...", "...#...", "...#...", "..###.."],
    "j": ["....#..", ".......", "...##..", "....#..", "....#..", ".#..#..", "..##..."],
    "k": [".#.....", ".#.....", ".#..#..", ".#.#...", ".##....", ".#.#...", ".#..#.."],
    "l": ["..##...", "...#...", "...#...", "...#...", "...#...", "...#...", "..###.."],
    "m": [".......", ".......", "##.#...", "#.#.#..", "#.#.#..", "#.#.#..", "#.#.#.."],
    "n": [".......", ".......", ".#.##..", ".##..#.", ".#...#.", ".#...#.", ".#...#."],
    "o": [".......", ".......", "..###..", ".#...#.", ".#...#.", ".#...#.", "..###.."],
    "p": [".......", ".####..", ".#...#.", ".#...#.", ".####..", ".#.....", ".#....."],
    "q": [".......", "..####.", ".#...#.", ".#...#.", "..####.", ".....#.", ".....##"],
    "r": [".......", ".......", ".#.##..", ".##..#.", ".#.....", ".#.....", ".#....."],
    "s": [".......", ".......", "..####.", ".#.....", "..###..", ".....#.", ".####.."],
    "t": ["..#....", "..#....", ".####..", "..#....", "..#....", "..#..#.", "...##.."],
    "u": [".......", ".......", ".#...#.", ".#...#.", ".#...#.", ".#..##.", "..##.#."],
    "v": [".......", ".......", ".#...#.", ".#...#.", ".#...#.", "..#.#..", "...#..."],
    "w": [".......", ".......", "#.....#", "#..#..#", "#..#..#", "#.#.#.#", ".#...#."],
    "x": [".......", ".......", ".#...#.", "..#.#..", "...#...", "..#.#..", ".#...#."],
    "y": [".......", ".#...#.", ".#...#.", ".#...#.", "..####.", ".....#.", "..###.."],
    "z": [".......", ".......", ".#####.", "....#..", "...#...", "..#....", ".#####."],
}

# five-letter words the default vocabulary is drawn from
WORD_POOL = (
    "banal julep resty drein yojan mothy quick quiet queen quote quilt quart equal squad "
    "about above actor adapt admit adult after again agent agree alarm album alert alive "
    "alone along angle apple apply arena argue arise armor aside award aware basic beach "
    "begin being below bench birth black blade blame blank blind block blood board brain "
    "brave bread break brick brief bring broad brown build buyer cable candy carry catch "
    "cause chain chair chalk charm chart chase cheap check chest chief child civil claim "
    "class clean clear climb clock close cloud coach coast could count court cover craft "
    "crash cream crime cross crowd crown curve cycle daily dance death delay depth dirty "
    "doubt dozen draft drama dream dress drink drive early earth eight elbow empty enemy "
    "enjoy enter entry error event exact exist extra faith false fancy fault fever field "
    "fifth fight final flame flash fleet floor fluid focus force forth forum found frame "
    "fresh front fruit funny ghost giant given glass globe glory grace grade grain grand "
    "grant grass great green gross group guard guess guest guide habit happy heart heavy "
    "hello honey horse hotel house human humor ideal image index inner input issue jelly "
    "joint judge juice knife knock label labor large laser later laugh layer learn lemon "
    "level light limit local logic loose lucky lunch magic major maker march match maybe "
    "mayor medal metal minor mixed model money month moral motor mount mouse mouth music "
    "naked nerve never night noise north novel nurse occur ocean offer often olive onion "
    "opera orbit order other owner paint panel paper party peace penny phase phone photo "
    "piano piece pilot pitch place plain plane plant plate point pound power press price "
    "pride prime print prize proof proud prove pupil queue radio raise range rapid ratio "
    "reach ready realm rebel refer relax reply rider ridge rifle right rigid river robot "
    "rocky roman rough round route royal rural salad sauce scale scene scope score sense "
    "serve seven shade shake shape share sharp sheep sheet shelf shell shift shirt shock "
    "shoot short shout sight skill sleep slide small smart smile smoke snake solid solve "
    "sound south space spare speak speed spend spice spine split sport staff stage stake "
    "stand start state steam steel stick still stock stone storm story strip study stuff "
    "style sugar suite sunny super sweet swing sword table taste teach thank theme thick "
    "thing think third three throw thumb tiger tight title toast today tooth topic total "
    "touch tough tower toxic track trade train treat trend trial tribe trick truck truly "
    "trust truth twice uncle under union unity until upper upset urban usage usual valid "
    "value video virus visit vital vivid vocal voice waste watch water wheat wheel where "
    "which while white whole woman world worry worth would wound write wrong yacht yield "
    "young youth zebra"
).split()


class DatasetFormatError(ValueError):
    pass


def glyph_bitmap(char: str) -> np.ndarray:
    if char not in _GLYPHS:
        raise ValueError(f"no glyph for {char!r}; expected a lowercase letter a-z")
    return np.array([[c == "#" for c in row] for row in _GLYPHS[char]], dtype=np.float64)


def upsampled_glyph(char: str, size: int = 28) -> np.ndarray:
    if size % 7:
        raise ValueError("image size must be a multiple of 7")
    f = size // 7
    return np.kron(glyph_bitmap(char), np.ones((f, f)))


def background_patch(size: int, mode: str, rng: np.random.Generator, level: float = 0.45,
                     clutter: int = 0) -> np.ndarray:
    """Blank, or smooth noise overlaid with ``clutter`` shifted half-glyph fragments."""
    if mode == "blank":
        return np.zeros((size, size))
    if mode != "texture":
        raise ValueError(f"unknown background mode {mode!r}")
    tex = ndimage.gaussian_filter(rng.random((size, size)), sigma=rng.uniform(1.0, 3.0))
    tex -= tex.min()
    peak = tex.max()
    if peak > 0:
        tex /= peak
    tex *= level
    for _ in range(clutter):
        frag = upsampled_glyph(ALPHABET[rng.integers(len(ALPHABET))], size)
        half = size // 2
        axis = rng.integers(2)
        keep = np.zeros((size, size), dtype=bool)
        if axis == 0:
            keep[:half] = True
        else:
            keep[:, :half] = True
        if rng.integers(2):
            keep = ~keep
        frag = np.where(keep, frag, 0.0)
        shift = rng.integers(-size // 3, size // 3 + 1, size=2)
        frag = ndimage.shift(frag, shift, order=0, mode="constant", cval=0.0)
        tex = np.maximum(tex, rng.uniform(0.5, 0.9) * frag)
    return tex


def render_glyph(char: str, rotation: float = 0.0, scale: float = 1.0, translation=(0.0, 0.0),
                 noise_seed: int = 0, noise: float = 0.0, background: str = "blank",
                 size: int = 28, clutter: int = 0, occlusion: float = 0.0) -> np.ndarray:
    """Render one character: the glyph's alpha mask over a background patch, plus clamped noise.

    ``rotation`` is in degrees, ``translation`` in pixels (dy, dx).  With a
    textured background, ``clutter`` glyph fragments are drawn behind the
    character and with probability ``occlusion`` a band of it is hidden.
    Everything is a deterministic function of the arguments.
    """
    alpha = upsampled_glyph(char, size)
    angle = np.deg2rad(rotation % 360.0)
    if angle != 0.0 or scale != 1.0 or tuple(translation) != (0.0, 0.0):
        c, s = np.cos(angle), np.sin(angle)
        # output -> input coordinate map about the image centre
        inv = np.array([[c, s], [-s, c]]) / scale
        centre = np.array([(size - 1) / 2.0] * 2)
        offset = centre - inv @ (centre + np.asarray(translation, dtype=np.float64))
        alpha = ndimage.affine_transform(alpha, inv, offset=offset, order=1, mode="constant", cval=0.0)
    rng = np.random.default_rng(noise_seed)
    bg = background_patch(size, background, rng, clutter=clutter)
    img = alpha + (1.0 - alpha) * bg
    if background == "texture" and occlusion > 0 and rng.random() < occlusion:
        # a band of the glyph is hidden behind background
        width = int(rng.integers(size * 3 // 8, size * 5 // 8 + 1))
        start = int(rng.integers(0, size - width + 1))
        band = (slice(start, start + width), slice(None))
        if rng.integers(2):
            band = band[::-1]
        img[band] = bg[band]
    if noise > 0:
        img = img + rng.uniform(-noise, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class DatasetSpec:
    vocabulary: list[str] = field(default_factory=list)
    vocab_size: int = 50
    word_length: int = 5
    train: int = 1000
    val: int = 200
    test: int = 200
    rotation: float = 25.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    translation: float = 3.0
    noise: float = 0.15
    background: str = "texture"
    image_size: int = 28
    seed: int = 0
    clutter: int = 1
    occlusion: float = 0.2

    def __post_init__(self):
        if not self.vocabulary:
            pool = [w for w in WORD_POOL if len(w) == self.word_length]
            if len(pool) < self.vocab_size:
                raise ValueError(f"word pool has only {len(pool)} words of length {self.word_length}")
            rng = np.random.default_rng([self.seed, 7])
            self.vocabulary = sorted(rng.choice(pool, size=self.vocab_size, replace=False).tolist())
        self.vocab_size = len(self.vocabulary)
        if not self.vocabulary or any(len(w) != self.word_length for w in self.vocabulary):
            raise ValueError("vocabulary must be nonempty with fixed word length")
        if any(ch not in ALPHABET for w in self.vocabulary for ch in w):
            raise ValueError("vocabulary must be lowercase a-z only")
        if not 0 <= self.occlusion <= 1:
            raise ValueError("occlusion must lie in [0, 1]")
        for name in ("rotation", "translation", "noise", "scale_min", "scale_max", "train", "val", "test", "clutter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.scale_min > self.scale_max or self.scale_min <= 0:
            raise ValueError("need 0 < scale_min <= scale_max")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """``images``: float32 (n, L, H, W) in [0, 1]; ``labels``: int (n, L), 0-based."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def word_length(self) -> int:
        return self.labels.shape[1]

    def features(self, idx=None) -> np.ndarray:
        """Flattened float64 images, shape (n, L, H*W)."""
        im = self.images if idx is None else self.images[idx]
        return im.reshape(im.shape[0], im.shape[1], -1).astype(np.float64)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx])

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.images.shape == other.images.shape
                and np.array_equal(self.labels, other.labels)
                and self.images.tobytes() == other.images.tobytes())


def encode_word(word: str) -> np.ndarray:
    return np.array([ALPHABET.index(c) for c in word], dtype=np.int64)


def decode_word(labels) -> str:
    return "".join(ALPHABET[int(k)] for k in labels)


def _render_split(spec: DatasetSpec, n: int, split: int) -> Dataset:
    rng = np.random.default_rng([spec.seed, split])
    L, S = spec.word_length, spec.image_size
    images = np.empty((n, L, S, S), dtype=np.float32)
    labels = np.empty((n, L), dtype=np.int64)
    for k in range(n):
        word = spec.vocabulary[rng.integers(len(spec.vocabulary))]
        labels[k] = encode_word(word)
        for j, ch in enumerate(word):
            rot = rng.uniform(-spec.rotation, spec.rotation)
            sc = rng.uniform(spec.scale_min, spec.scale_max)
            tr = rng.uniform(-spec.translation, spec.translation, size=2)
            nseed = int(rng.integers(2**31))
            images[k, j] = render_glyph(ch, rot, sc, tr, nseed, spec.noise, spec.background, S,
                                          spec.clutter, spec.occlusion)
    return Dataset(images, labels)


def generate_dataset(spec: DatasetSpec) -> dict[str, Dataset]:
    return {name: _render_split(spec, getattr(spec, name), k)
            for k, name in enumerate(("train", "val", "test"), start=1)}


# --------------------------------------------------------------------------
# binary format: magic, u32 version/count/length/H/W, records, CRC32 of everything before it

_HEADER = struct.Struct("<8sIIIII")


def dataset_bytes(ds: Dataset) -> bytes:
    n, L = ds.labels.shape
    H, W = ds.images.shape[2:] if ds.images.ndim == 4 else (0, 0)
    if n and (ds.labels.min() < 0 or ds.labels.max() > 254):
        raise DatasetFormatError("labels must fit in u8 after the +1 shift")
    parts = [_HEADER.pack(MAGIC, VERSION, n, L, H, W)]
    imgs = np.ascontiguousarray(ds.images, dtype="<f4")
    for k in range(n):
        parts.append((ds.labels[k] + 1).astype(np.uint8).tobytes())
        parts.append(imgs[k].tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size + 4:
        raise DatasetFormatError("truncated file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetFormatError("checksum mismatch")
    magic, version, n, L, H, W = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    rec = L + 4 * L * H * W
    if len(body) != _HEADER.size + n * rec:
        raise DatasetFormatError("truncated or oversized payload")
    labels = np.empty((n, L), dtype=np.int64)
    images = np.empty((n, L, H, W), dtype=np.float32)
    pos = _HEADER.size
    for k in range(n):
        labels[k] = np.frombuffer(body, np.uint8, L, pos).astype(np.int64) - 1
        pos += L
        images[k] = np.frombuffer(body, "<f4", L * H * W, pos).reshape(L, H, W)
        pos += 4 * L * H * W
    return Dataset(images, labels)


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def write_manifest(path, spec: DatasetSpec, counts: dict[str, int]) -> None:
    """Tab-separated key/value manifest next to the split files."""
    d = spec.to_dict()
    lines = ["key\tvalue"]
    for k, v in d.items():
        if k == "vocabulary":
            v = ",".join(v)
        lines.append(f"{k}\t{v}")
    for name, n in counts.items():
        lines.append(f"count_{name}\t{n}")
    Path(path).write_text("\n".join(lines) + "\n")
