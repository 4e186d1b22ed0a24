"""Deterministic synthetic shapes-and-captions dataset.

Scenes are S x S images of 1-3 colored shapes on a textured noise
background, with exact segmentation masks and captions drawn from a fixed
template grammar ("[a photo of] a {color} {shape} [{relation} a {color}
{shape} [and a {color} {shape}]]").  Everything is a pure function of
(seed, split, index) through the counter-based generator in `rng`, so
samples are bit-identical across platforms and runs.

Split policy: train and val scenes hold 1-3 objects; the test split holds
exactly one object per scene so each test image carries an unambiguous
(color, shape) class label for classification and segmentation probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .multicrop import CropSpec, crop_resize_batch, resize_bilinear, sample_view_rects
from .rng import Stream, derive

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
_COLOR_RGB = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.10, 0.75, 0.18),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.12),
}
RELATIONS = (("above",), ("below",), ("left", "of"), ("right", "of"))

PAD_TOKEN = "<pad>"
VOCAB: tuple[str, ...] = (
    PAD_TOKEN,
    "a",
    "photo",
    "of",
    "above",
    "below",
    "left",
    "right",
    "and",
) + COLORS + SHAPES
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetConfig:
    n_shapes: int = 4
    n_colors: int = 4
    image_size: int = 64
    objects_min: int = 1
    objects_max: int = 3
    train_size: int = 4096
    val_size: int = 256
    test_size: int = 768
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.n_shapes <= len(SHAPES)):
            raise ValueError(f"n_shapes must be in [1, {len(SHAPES)}]")
        if not (1 <= self.n_colors <= len(COLORS)):
            raise ValueError(f"n_colors must be in [1, {len(COLORS)}]")
        if not (1 <= self.objects_min <= self.objects_max <= 3):
            raise ValueError("objects_per_scene range must satisfy 1 <= min <= max <= 3")

    @property
    def n_classes(self) -> int:
        """Object classes (background excluded)."""
        return self.n_shapes * self.n_colors

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]


@dataclass
class SceneSample:
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    caption: str
    seg_mask: np.ndarray  # (S, S) int32; 0 = background, 1..n_classes = objects
    class_set: list[int]  # class ids present, in placement order


@dataclass
class ViewBatch:
    """One minibatch of views plus tokenized captions."""

    contrastive: np.ndarray  # (B, gs, gs, 3)
    global_views: np.ndarray  # (n_global, B, gs, gs, 3)
    local_views: np.ndarray  # (n_local, B, ls, ls, 3)
    tokens: np.ndarray  # (B, max_len) int32
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def class_id(color_idx: int, shape_idx: int, n_shapes: int = 4) -> int:
    """1-based object class id; 0 is reserved for background."""
    return 1 + color_idx * n_shapes + shape_idx


def class_names(cfg: DatasetConfig) -> list[str]:
    """Names aligned with class ids 1..n_classes: 'red circle', ..."""
    return [
        f"{COLORS[c]} {SHAPES[s]}"
        for c in range(cfg.n_colors)
        for s in range(cfg.n_shapes)
    ]


def tokenize(caption: str, max_len: int = 16) -> np.ndarray:
    """Whitespace tokenization against the closed vocabulary; PAD=0."""
    ids = []
    for word in caption.split():
        if word not in _WORD_TO_ID:
            raise ValueError(f"unknown word {word!r}; vocabulary: {sorted(VOCAB[1:])}")
        ids.append(_WORD_TO_ID[word])
    ids = ids[:max_len]
    out = np.zeros(max_len, dtype=np.int32)
    out[: len(ids)] = ids
    return out


def detokenize(token_ids) -> str:
    return " ".join(VOCAB[int(i)] for i in token_ids if int(i) != 0)


def _shape_mask(kind: str, yy, xx, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        a = 0.85 * r
        return (np.abs(dy) <= a) & (np.abs(dx) <= a)
    if kind == "triangle":
        # apex up; half-width grows from apex (dy=-r) to base (dy=+r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.577)
    if kind == "cross":
        a = 0.38 * r
        return ((np.abs(dx) <= a) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= a) & (np.abs(dx) <= r)
        )
    raise ValueError(f"unknown shape {kind!r}")


def _relation_words(cy1, cx1, cy2, cx2) -> tuple[str, ...]:
    # first object relative to second; image y grows downward
    if abs(cy1 - cy2) >= abs(cx1 - cx2):
        return RELATIONS[0] if cy1 < cy2 else RELATIONS[1]
    return RELATIONS[2] if cx1 < cx2 else RELATIONS[3]


def generate_sample(cfg: DatasetConfig, split: str, index: int) -> SceneSample:
    """Deterministic scene for (cfg.seed, split, index)."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; valid: {SPLITS}")
    if not (0 <= index < cfg.split_size(split)):
        raise IndexError(f"index {index} out of range for split {split!r}")
    s = cfg.image_size
    stream = Stream(derive(cfg.seed, "scene", split, index))

    # textured background: per-scene base gray plus per-pixel noise
    base = float(stream.uniform(1, 0.25, 0.50)[0])
    noise = stream.uniform(s * s, -0.12, 0.12).reshape(s, s).astype(np.float32)
    image = np.clip(base + noise, 0.0, 1.0)[:, :, None].repeat(3, axis=2).astype(np.float32)
    seg = np.zeros((s, s), dtype=np.int32)

    n_objects = 1
    if split != "test":
        n_objects = int(stream.randint(1, cfg.objects_max - cfg.objects_min + 1)[0]) + cfg.objects_min

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    placed = []  # (color_idx, shape_idx, cy, cx, r)
    for _ in range(n_objects):
        color_idx = int(stream.randint(1, cfg.n_colors)[0])
        shape_idx = int(stream.randint(1, cfg.n_shapes)[0])
        for _attempt in range(200):
            r = float(stream.uniform(1, 8.0, 14.0)[0])
            cy = float(stream.uniform(1, r + 1.0, s - r - 1.0)[0])
            cx = float(stream.uniform(1, r + 1.0, s - r - 1.0)[0])
            ok = all(
                (cy - py) ** 2 + (cx - px) ** 2 >= (r + pr + 2.0) ** 2
                for _, _, py, px, pr in placed
            )
            if ok:
                placed.append((color_idx, shape_idx, cy, cx, r))
                break
        # on persistent failure the object is dropped; caption reflects what was placed

    class_set = []
    for color_idx, shape_idx, cy, cx, r in placed:
        mask = _shape_mask(SHAPES[shape_idx], yy, xx, cy, cx, r)
        rgb = np.array(_COLOR_RGB[COLORS[color_idx]], dtype=np.float32)
        jitter = float(stream.uniform(1, -0.06, 0.06)[0])
        image[mask] = np.clip(rgb + jitter, 0.0, 1.0)
        seg[mask] = class_id(color_idx, shape_idx, cfg.n_shapes)
        class_set.append(class_id(color_idx, shape_idx, cfg.n_shapes))

    words = []
    if float(stream.uniform(1)[0]) < 0.5:
        words += ["a", "photo", "of"]
    phrases = [
        ("a", COLORS[c], SHAPES[sh]) for (c, sh, _, _, _) in placed
    ]
    words += list(phrases[0])
    if len(phrases) >= 2:
        _, _, cy1, cx1, _ = placed[0]
        _, _, cy2, cx2, _ = placed[1]
        words += list(_relation_words(cy1, cx1, cy2, cx2))
        words += list(phrases[1])
    for extra in phrases[2:]:
        words += ["and", *extra]
    caption = " ".join(words)

    return SceneSample(image=image, caption=caption, seg_mask=seg, class_set=class_set)


class SyntheticDataset:
    """Caching front-end over `generate_sample`."""

    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        self._cache: dict[tuple[str, int], SceneSample] = {}

    def sample(self, split: str, index: int) -> SceneSample:
        key = (split, int(index))
        if key not in self._cache:
            self._cache[key] = generate_sample(self.cfg, split, index)
        return self._cache[key]

    def images(self, split: str, indices) -> np.ndarray:
        return np.stack([self.sample(split, i).image for i in indices])

    def size(self, split: str) -> int:
        return self.cfg.split_size(split)


def make_batch(
    ds: SyntheticDataset,
    spec: CropSpec,
    split: str,
    indices,
    seed: int,
) -> ViewBatch:
    """Assemble views + tokens for the given sample indices.

    Crop randomness for batch slot j comes from derive(seed, "crops", j),
    so a batch is a pure function of (dataset seed, indices, seed).
    """
    indices = np.asarray(list(indices), dtype=np.int64)
    if indices.size == 0:
        raise ValueError("empty index list")
    samples = [ds.sample(split, int(i)) for i in indices]
    images = np.stack([smp.image for smp in samples])  # (B, S, S, 3)
    src = ds.cfg.image_size

    rects = np.stack(
        [sample_view_rects(spec, src, derive(seed, "crops", j)) for j in range(len(samples))]
    )  # (B, n_views, 4)

    g, l = spec.n_global, spec.n_local
    global_views = np.stack(
        [crop_resize_batch(images, rects[:, i], spec.global_size) for i in range(g)]
    )
    local_views = np.stack(
        [crop_resize_batch(images, rects[:, g + i], spec.local_size) for i in range(l)]
    )
    full_rect = np.tile(np.array([[0.0, 0.0, src, src]]), (len(samples), 1))
    contrastive = crop_resize_batch(images, full_rect, spec.global_size)
    tokens = np.stack([tokenize(smp.caption, ds.cfg.max_len) for smp in samples])
    return ViewBatch(
        contrastive=contrastive.astype(np.float32),
        global_views=global_views.astype(np.float32),
        local_views=local_views.astype(np.float32),
        tokens=tokens,
        indices=indices,
    )


# ---------------------------------------------------------------------------
# binary export (layout documented in docs/formats.md)
# ---------------------------------------------------------------------------

EXPORT_MAGIC = b"SILCDAT1"
EXPORT_VERSION = 1


def export_split(ds: SyntheticDataset, split: str, path) -> int:
    """Write a split as one flat little-endian binary record file."""
    import struct

    cfg = ds.cfg
    n = ds.size(split)
    with open(path, "wb") as f:
        f.write(EXPORT_MAGIC)
        f.write(struct.pack("<IIII", EXPORT_VERSION, cfg.image_size, n, cfg.max_len))
        for i in range(n):
            smp = ds.sample(split, i)
            f.write(smp.image.astype("<f4").tobytes())
            f.write(smp.seg_mask.astype("<i4").tobytes())
            f.write(tokenize(smp.caption, cfg.max_len).astype("<i4").tobytes())
    return n


def full_resized_images(ds: SyntheticDataset, split: str, indices, size: int) -> np.ndarray:
    """Full scenes resized to the model's global input size."""
    return np.stack(
        [resize_bilinear(ds.sample(split, int(i)).image, size) for i in indices]
    ).astype(np.float32)
