"""Synthetic shape scenes, templated captions and area downsampling.

Scenes place one to three coloured shapes in distinct quadrants of a square
canvas.  Captions enumerate every object as ``<size> <color> <shape>
<quadrant>`` joined by ``and``, so the caption determines the scene up to
rendering jitter.
"""
from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange")
SIZES = ("small", "large")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.1, 0.3, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}

PROMPT_TEMPLATES = ("{}", "a {}", "a photo of a {}", "an image of a {}")

_EXTRA_WORDS = (
    "a", "an", "the", "of", "photo", "picture", "image", "with", "in", "on", "at",
    "is", "there", "shape", "object", "left", "right", "top", "bottom", "above",
    "below", "next", "to", "big", "tiny", "one", "two", "three", "some", "colored",
)
VOCAB: tuple[str, ...] = ("<pad>", "<unk>", "and") + SIZES + COLORS + SHAPES + QUADRANTS + _EXTRA_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID, UNK_ID = 0, 1
VOCAB_SIZE = len(VOCAB)
MAX_TEXT_LEN = 16

# Object half-extent as a fraction of the quadrant side.
_EXTENT = {"small": 0.22, "large": 0.40}
_SUPERSAMPLE = 4


class ConfigurationError(ValueError):
    """Dataset or pipeline parameters are inconsistent."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    quadrant: int


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[SceneObject, ...]

    @classmethod
    def from_seed(cls, seed: int) -> "SceneSpec":
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        quads = np.sort(rng.choice(4, size=n, replace=False))
        objs = tuple(
            SceneObject(SHAPES[rng.integers(4)], COLORS[rng.integers(8)],
                        SIZES[rng.integers(2)], int(q))
            for q in quads
        )
        return cls(seed, objs)

    def caption(self) -> str:
        return " and ".join(
            f"{o.size} {o.color} {o.shape} {QUADRANTS[o.quadrant]}" for o in self.objects
        )


@dataclass
class Caption:
    text: str
    tokens: np.ndarray
    true_length: int


# -- tokenizer -------------------------------------------------------------------

def tokenize(text: str, max_len: int = MAX_TEXT_LEN) -> Caption:
    words = text.split()[:max_len]
    tokens = np.zeros(max_len, dtype=np.int64)
    tokens[: len(words)] = [WORD_TO_ID.get(w, UNK_ID) for w in words]
    return Caption(text, tokens, len(words))


def detokenize(tokens, true_length: int | None = None) -> str:
    ids = list(tokens) if true_length is None else list(tokens)[:true_length]
    return " ".join(VOCAB[i] for i in ids if i != PAD_ID)


def tokenize_batch(texts, max_len: int = MAX_TEXT_LEN) -> tuple[np.ndarray, np.ndarray]:
    caps = [tokenize(t, max_len) for t in texts]
    return (np.stack([c.tokens for c in caps]),
            np.array([c.true_length for c in caps], dtype=np.int64))


def all_captions(n_objects: int) -> Iterator[str]:
    """Every caption the grammar can emit for scenes with ``n_objects`` objects."""
    attrs = list(itertools.product(SIZES, COLORS, SHAPES))
    for quads in itertools.combinations(range(4), n_objects):
        for combo in itertools.product(attrs, repeat=n_objects):
            yield " and ".join(f"{s} {c} {sh} {QUADRANTS[q]}"
                               for (s, c, sh), q in zip(combo, quads))


# -- rendering -------------------------------------------------------------------

def _coverage(shape: str, dx: np.ndarray, dy: np.ndarray, R: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "circle":
        return dx * dx + dy * dy <= R * R
    if shape == "square":
        return (ax <= 0.85 * R) & (ay <= 0.85 * R)
    if shape == "triangle":
        half = (dy + R) / (1.8 * R) * R
        return (dy >= -R) & (dy <= 0.8 * R) & (ax <= half)
    if shape == "cross":
        arm = R / 3.0
        return ((ax <= R) & (ay <= arm)) | ((ay <= R) & (ax <= arm))
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: SceneSpec, canvas: int) -> np.ndarray:
    """Rasterise ``spec`` to a ``[canvas, canvas, 3]`` float array in [0, 1]."""
    rng = np.random.default_rng([spec.seed, 1])
    bg = rng.uniform(0.0, 0.2)
    img = np.full((canvas, canvas, 3), bg)
    ss = _SUPERSAMPLE
    centers = (np.arange(canvas * ss) + 0.5) / ss
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    q = canvas / 2
    for obj in spec.objects:
        row, col = divmod(obj.quadrant, 2)
        jitter = rng.uniform(-q / 8, q / 8, size=2)
        cy, cx = (row + 0.5) * q + jitter[0], (col + 0.5) * q + jitter[1]
        mask = _coverage(obj.shape, xs - cx, ys - cy, _EXTENT[obj.size] * q)
        alpha = mask.reshape(canvas, ss, canvas, ss).mean(axis=(1, 3))[..., None]
        img = img * (1.0 - alpha) + np.asarray(PALETTE[obj.color]) * alpha
    return np.clip(img, 0.0, 1.0)


def generate_pair(seed: int, canvas: int = 32, max_len: int = MAX_TEXT_LEN) -> tuple[np.ndarray, Caption]:
    """Return a ``[1, canvas, canvas, 3]`` image and its caption for ``seed``."""
    if canvas < 32 or canvas % 16:
        raise ConfigurationError(f"canvas must be >= 32 and a multiple of 16, got {canvas}")
    spec = SceneSpec.from_seed(seed)
    return render(spec, canvas)[None], tokenize(spec.caption(), max_len)


def classification_scene(seed: int) -> tuple[SceneSpec, int]:
    """Single-object scene labelled by its (color, shape) class index."""
    rng = np.random.default_rng([seed, 2])
    obj = SceneObject(SHAPES[rng.integers(4)], COLORS[rng.integers(8)],
                      SIZES[rng.integers(2)], int(rng.integers(4)))
    return SceneSpec(seed, (obj,)), COLORS.index(obj.color) * len(SHAPES) + SHAPES.index(obj.shape)


def class_names() -> list[str]:
    return [f"{c} {s}" for c in COLORS for s in SHAPES]


def class_prompts(templates=PROMPT_TEMPLATES) -> list[list[str]]:
    return [[t.format(name) for t in templates] for name in class_names()]


# -- downsampling ----------------------------------------------------------------

def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` holds the overlap of output cell ``i`` with each input cell."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def downsample(images: np.ndarray, r: float, patch_size: int = 1) -> np.ndarray:
    """Area-average ``[B, H, W, C]`` images by factor ``r``.

    Integer factors reduce to exact block means; fractional factors weight
    input pixels by their overlap with each output cell.
    """
    images = np.asarray(images, dtype=np.float64)
    H, W = images.shape[1:3]
    h, w = H / r, W / r
    if r <= 0 or h != int(h) or w != int(w):
        raise ConfigurationError(f"downsample factor {r} does not divide image size {H}x{W}")
    h, w = int(h), int(w)
    if h % patch_size or w % patch_size:
        raise ConfigurationError(f"output size {h}x{w} is not a multiple of patch size {patch_size}")
    if h == H and w == W:
        return images.copy()
    if H % h == 0 and W % w == 0:
        B, C = images.shape[0], images.shape[3]
        return images.reshape(B, h, H // h, w, W // w, C).mean(axis=(2, 4))
    return np.einsum("ih,bhwc,jw->bijc", _area_weights(H, h), images, _area_weights(W, w))


def resize_to(images: np.ndarray, size: int, patch_size: int = 1) -> np.ndarray:
    return downsample(images, images.shape[1] / size, patch_size)


def nearest_upsample(images: np.ndarray, factor: int) -> np.ndarray:
    return images.repeat(factor, axis=1).repeat(factor, axis=2)


# -- corpus ----------------------------------------------------------------------

TRAIN_OFFSET = 0
EVAL_OFFSET = 1 << 32
CLASSIFY_OFFSET = 1 << 33


@dataclass
class PairBatch:
    images: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    seeds: np.ndarray


@dataclass
class PairSet:
    seeds: np.ndarray
    images: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    captions: list[str]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.seeds)

    def batch(self, idx) -> PairBatch:
        idx = np.asarray(idx)
        return PairBatch(self.images[idx], self.tokens[idx], self.lengths[idx], self.seeds[idx])


def _build_pairs(seeds, canvas, max_len) -> PairSet:
    specs = [SceneSpec.from_seed(int(s)) for s in seeds]
    caps = [s.caption() for s in specs]
    tokens, lengths = tokenize_batch(caps, max_len)
    images = np.stack([render(s, canvas) for s in specs]) if specs else np.zeros((0, canvas, canvas, 3))
    return PairSet(np.asarray(seeds, dtype=np.int64), images, tokens, lengths, caps)


def _build_classification(seeds, canvas, max_len) -> PairSet:
    scenes = [classification_scene(int(s)) for s in seeds]
    caps = [s.caption() for s, _ in scenes]
    tokens, lengths = tokenize_batch(caps, max_len)
    images = np.stack([render(s, canvas) for s, _ in scenes])
    labels = np.array([lab for _, lab in scenes], dtype=np.int64)
    return PairSet(np.asarray(seeds, dtype=np.int64), images, tokens, lengths, caps, labels)


@dataclass
class Corpus:
    """Train pairs, held-out retrieval pairs and a held-out classification set."""

    train: PairSet
    eval: PairSet
    classify: PairSet
    canvas: int
    seed0: int
    max_len: int = MAX_TEXT_LEN

    def stream(self, batch_size: int, order_seed: int) -> "EpochSampler":
        return EpochSampler(self.train, batch_size, order_seed)


class EpochSampler:
    """Endless stream of train batches, reshuffled each epoch from ``order_seed``.

    The cursor runs over concatenated epoch permutations, so the stream can be
    shared across phases with different batch sizes.
    """

    def __init__(self, pairs: PairSet, batch_size: int, order_seed: int):
        if len(pairs) < batch_size:
            raise ConfigurationError(
                f"need at least batch_size={batch_size} training pairs, have {len(pairs)}")
        self.pairs = pairs
        self.batch_size = batch_size
        self.order_seed = order_seed
        self.epoch = 0
        self.cursor = 0
        self._order = self.epoch_order(0)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.order_seed, epoch]).permutation(len(self.pairs))

    def next_indices(self, batch_size: int | None = None) -> np.ndarray:
        b = batch_size or self.batch_size
        if b > len(self.pairs):
            raise ConfigurationError(f"batch size {b} exceeds {len(self.pairs)} training pairs")
        out = []
        while len(out) < b:
            take = min(b - len(out), len(self._order) - self.cursor)
            out.extend(self._order[self.cursor:self.cursor + take])
            self.cursor += take
            if self.cursor == len(self._order):
                self.epoch += 1
                self.cursor = 0
                self._order = self.epoch_order(self.epoch)
        return np.asarray(out)

    def next_batch(self, batch_size: int | None = None) -> PairBatch:
        return self.pairs.batch(self.next_indices(batch_size))

    def __iter__(self):
        while True:
            yield self.next_batch()


def make_dataset(n_pairs: int, canvas: int = 32, seed0: int = 0, n_eval: int = 256,
                 n_classify: int = 256, max_len: int = MAX_TEXT_LEN,
                 batch_size: int | None = None) -> Corpus:
    if canvas < 32 or canvas % 16:
        raise ConfigurationError(f"canvas must be >= 32 and a multiple of 16, got {canvas}")
    if batch_size is not None and n_pairs < batch_size:
        raise ConfigurationError(f"n_pairs={n_pairs} is smaller than batch size {batch_size}")
    train = _build_pairs(seed0 + TRAIN_OFFSET + np.arange(n_pairs), canvas, max_len)
    held = _build_pairs(seed0 + EVAL_OFFSET + np.arange(n_eval), canvas, max_len)
    cls = _build_classification(seed0 + CLASSIFY_OFFSET + np.arange(n_classify), canvas, max_len)
    return Corpus(train, held, cls, canvas, seed0, max_len)


# -- on-disk format --------------------------------------------------------------
#
# Image tensor file: 16-byte header then a little-endian payload.
#   0  4s  magic b"C2FI"
#   4  u8  dtype code (1 = float64, 2 = float32, 3 = uint8)
#   5  u8  rank (1..4)
#   6  u16 reserved, zero
#   8  4 x u16 dims, unused trailing dims zero
IMAGE_MAGIC = b"C2FI"
_HEADER = struct.Struct("<4sBBH4H")
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1")}
_CODE_FOR = {v: k for k, v in DTYPE_CODES.items()}


def write_image(path, array: np.ndarray, dtype=np.float64) -> None:
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"rank must be 1..4, got {arr.ndim}")
    dims = list(arr.shape) + [0] * (4 - arr.ndim)
    header = _HEADER.pack(IMAGE_MAGIC, _CODE_FOR[arr.dtype], arr.ndim, 0, *dims)
    Path(path).write_bytes(header + arr.tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, code, rank, _, *dims = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if code not in DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = tuple(dims[:rank])
    return np.frombuffer(raw, dtype=DTYPE_CODES[code], offset=_HEADER.size).reshape(shape).astype(np.float64)


_SPLITS = (("train", "train"), ("eval", "eval"), ("classify", "classify"))


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.txt").write_text(
        f"canvas={corpus.canvas}\nseed0={corpus.seed0}\nmax_len={corpus.max_len}\n"
        f"n_train={len(corpus.train)}\nn_eval={len(corpus.eval)}\n"
        f"n_classify={len(corpus.classify)}\n")
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "index", "seed", "label", "image", "caption"])
        for split, attr in _SPLITS:
            pairs: PairSet = getattr(corpus, attr)
            (out / split).mkdir(exist_ok=True)
            for i, seed in enumerate(pairs.seeds):
                stem = f"{split}/{i:06d}"
                write_image(out / f"{stem}.img", pairs.images[i])
                (out / f"{stem}.txt").write_text(pairs.captions[i] + "\n", encoding="utf-8")
                label = "" if pairs.labels is None else int(pairs.labels[i])
                writer.writerow([split, i, int(seed), label, f"{stem}.img", f"{stem}.txt"])
    return out


def load_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    meta = dict(line.split("=", 1) for line in (root / "meta.txt").read_text().split())
    max_len = int(meta["max_len"])
    rows: dict[str, list[dict]] = {s: [] for s, _ in _SPLITS}
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows[row["split"]].append(row)
    sets = {}
    for split, _ in _SPLITS:
        rs = sorted(rows[split], key=lambda r: int(r["index"]))
        caps = [(root / r["caption"]).read_text(encoding="utf-8").rstrip("\n") for r in rs]
        tokens, lengths = tokenize_batch(caps, max_len)
        canvas = int(meta["canvas"])
        images = (np.stack([read_image(root / r["image"]) for r in rs]) if rs
                  else np.zeros((0, canvas, canvas, 3)))
        labels = np.array([int(r["label"]) for r in rs], dtype=np.int64) if split == "classify" else None
        sets[split] = PairSet(np.array([int(r["seed"]) for r in rs], dtype=np.int64),
                              images, tokens, lengths, caps, labels)
    return Corpus(sets["train"], sets["eval"], sets["classify"], int(meta["canvas"]),
                  int(meta["seed0"]), max_len)
