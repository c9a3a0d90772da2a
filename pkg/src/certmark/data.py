"""Dataset ingestion, owner/adversary splits and trigger-set construction.

Images are always float32 [N, H, W, C] with pixels in [0, 1]; labels are
int64 class ids. Every generator is a pure function of its seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# IDX format (big endian):
# i32 | magic: 0x00000803 for 3-D uint8 image tensors, 0x00000801 for 1-D uint8 labels
# i32 x ndim | dimension sizes
# u8[] | raw values
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

TRIGGER_MAGIC = b"CMTRG1"
TRIGGER_SCHEMES = ("embedded-content", "noise", "unrelated")
_SCHEME_IDS = {s: i for i, s in enumerate(TRIGGER_SCHEMES)}

# 8x8 block-letter "T" stamped at the top-left corner for the
# embedded-content scheme; 1 = white (1.0), 0 = black (0.0).
PATCH_GLYPH = np.array(
    [
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [0, 0, 0, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 0, 0, 0],
    ],
    dtype=np.float32,
)

DEFAULT_NOISE_STD = 0.25
DEFAULT_TRIGGER_COUNT = 64


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [N, H, W, C], pixels in [0, 1]
    labels: np.ndarray  # int64 [N]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, H, W, C], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be 1-D with one entry per image")
        if self.images.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class TriggerSet:
    """Backdoor images plus the labels a marked model must predict for them."""

    images: np.ndarray        # float32 [M, H, W, C] in [0, 1]
    target_labels: np.ndarray  # int64 [M]
    scheme: str
    source_seed: int

    def __post_init__(self):
        if self.scheme not in TRIGGER_SCHEMES:
            raise ValueError(f"unknown trigger scheme {self.scheme!r}")
        if self.images.shape[0] < 1:
            raise ValueError("trigger set must contain at least one image")
        if self.target_labels.shape != (self.images.shape[0],):
            raise ValueError("one target label per trigger image required")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"trigger pixels must stay in [0, 1], found range [{lo}, {hi}]")
        if self.scheme in ("embedded-content", "noise") and len(set(self.target_labels.tolist())) != 1:
            raise ValueError(f"{self.scheme} scheme requires a single fixed target label")

    @property
    def labels(self) -> np.ndarray:
        """Alias so accuracy() accepts a TriggerSet like a Dataset."""
        return self.target_labels

    def __len__(self):
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# IDX files

def _read_be32(blob, off, path):
    if off + 4 > len(blob):
        raise IdxFormatError(f"{path}: truncated file (header cut short)")
    return struct.unpack(">i", blob[off:off + 4])[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset.

    Pixels are rescaled from [0, 255] bytes to [0, 1] float32; grayscale
    images get a trailing channel axis.
    """
    with open(images_path, "rb") as fh:
        iblob = fh.read()
    with open(labels_path, "rb") as fh:
        lblob = fh.read()

    magic = _read_be32(iblob, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic & 0xFFFFFFFF:08x}, expected image magic 0x{IDX_IMAGE_MAGIC:08x}")
    n = _read_be32(iblob, 4, images_path)
    rows = _read_be32(iblob, 8, images_path)
    cols = _read_be32(iblob, 12, images_path)
    if len(iblob) - 16 != n * rows * cols:
        raise IdxFormatError(
            f"{images_path}: truncated file, header promises {n * rows * cols} pixel bytes, found {len(iblob) - 16}")

    lmagic = _read_be32(lblob, 0, labels_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{lmagic & 0xFFFFFFFF:08x}, expected label magic 0x{IDX_LABEL_MAGIC:08x}")
    ln = _read_be32(lblob, 4, labels_path)
    if len(lblob) - 8 != ln:
        raise IdxFormatError(f"{labels_path}: truncated file, header promises {ln} labels, found {len(lblob) - 8}")
    if ln != n:
        raise IdxFormatError(f"label count {ln} does not match image count {n}")

    images = np.frombuffer(iblob, dtype=np.uint8, offset=16).reshape(n, rows, cols, 1)
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset((images.astype(np.float32) / 255.0), labels)


def write_idx(images_path, labels_path, dataset: Dataset) -> None:
    """Write a single-channel dataset as an IDX image/label file pair."""
    imgs = dataset.images
    if imgs.shape[3] != 1:
        raise ValueError("IDX writer handles single-channel images only")
    n, rows, cols, _ = imgs.shape
    raw = np.clip(np.rint(imgs[..., 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(raw.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic generators

def synthetic_dataset(seed: int, n: int, classes: int, dims=(16, 16, 1)) -> Dataset:
    """Class-conditioned Gaussian-blob images, easy for the small CNN.

    Each class owns a fixed blob center on a grid; samples add mild pixel
    noise. Labels are exactly balanced (first n % classes classes get the
    extra example).
    """
    if n < classes:
        raise ValueError("need at least one example per class")
    h, w, c = dims
    rng = np.random.default_rng(np.random.SeedSequence([_u(seed), 0xDA7A]))
    side = int(np.ceil(np.sqrt(classes)))
    centers = [((0.5 + k // side) * h / side, (0.5 + k % side) * w / side) for k in range(classes)]
    yy, xx = np.mgrid[0:h, 0:w]
    width = max(h, w) / (2.5 * side)
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, h, w, c), dtype=np.float32)
    for i, k in enumerate(labels):
        cy, cx = centers[k]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
        img = 0.9 * blob[..., None] + rng.normal(0.0, 0.05, size=(h, w, c))
        images[i] = np.clip(img, 0.0, 1.0)
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm])


# 5x7 bitmaps for digits 0-9, used to render an offline MNIST stand-in.
_DIGIT_FONT = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def digit_glyph_dataset(seed: int, n: int, dims=(28, 28, 1)) -> Dataset:
    """Rendered digit glyphs with jitter/noise; an MNIST-shaped stand-in
    for environments without the real IDX files."""
    h, w, c = dims
    if c != 1:
        raise ValueError("digit glyphs are single-channel")
    rng = np.random.default_rng(np.random.SeedSequence([_u(seed), 0xD161]))
    glyphs = {}
    for d, rows in _DIGIT_FONT.items():
        bitmap = np.array([[int(ch) for ch in row] for row in rows], dtype=np.float32)
        glyphs[d] = np.kron(bitmap, np.ones((3, 3), dtype=np.float32))  # 15x21
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    images = np.zeros((n, h, w, 1), dtype=np.float32)
    gh, gw = glyphs[0].shape
    # roughly centered with +-3 px jitter, like the real digits
    cy, cx = (h - gh) // 2, (w - gw) // 2
    for i, d in enumerate(labels):
        dy = int(np.clip(cy + rng.integers(-3, 4), 0, h - gh))
        dx = int(np.clip(cx + rng.integers(-3, 4), 0, w - gw))
        scale = 0.7 + 0.3 * rng.random()
        img = np.zeros((h, w), dtype=np.float32)
        img[dy:dy + gh, dx:dx + gw] = glyphs[int(d)] * scale
        img += rng.normal(0.0, 0.08, size=(h, w)).astype(np.float32)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


def split_owner_adversary(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint halves via a seeded shuffle; owner gets floor(N/2)."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 examples to split")
    rng = np.random.default_rng(np.random.SeedSequence([_u(seed), 0x5917]))
    perm = rng.permutation(n)
    half = n // 2
    return dataset.subset(perm[:half]), dataset.subset(perm[half:])


# ---------------------------------------------------------------------------
# trigger sets

def make_trigger_set(scheme: str, base: Dataset | None, target_label: int | None,
                     count: int, seed: int, *, unrelated: Dataset | None = None,
                     patch_glyph: np.ndarray = PATCH_GLYPH,
                     noise_std: float = DEFAULT_NOISE_STD,
                     input_dims: tuple[int, int, int] | None = None) -> TriggerSet:
    """Build a trigger set for one of the three watermark schemes.

    embedded-content: a fixed binary glyph stamped over base images at the
    top-left corner, all target labels equal.
    noise: a seeded Gaussian overlay on base images (clipped), all target
    labels equal.
    unrelated: images drawn from a different dataset, keeping their own
    labels, zero-padded/channel-adapted to the model input dims.
    """
    if scheme not in TRIGGER_SCHEMES:
        raise ValueError(f"unknown trigger scheme {scheme!r}, expected one of {TRIGGER_SCHEMES}")
    rng = np.random.default_rng(np.random.SeedSequence([_u(seed), 0x7816]))

    if scheme == "unrelated":
        if unrelated is None:
            raise ValueError("unrelated scheme needs an unrelated source dataset")
        if count > len(unrelated):
            raise ValueError(f"requested {count} triggers but unrelated source has {len(unrelated)}")
        idx = np.sort(rng.choice(len(unrelated), size=count, replace=False))
        images = unrelated.images[idx]
        if input_dims is not None:
            images = _fit_dims(images, input_dims)
        return TriggerSet(images, unrelated.labels[idx].copy(), scheme, seed)

    if base is None:
        raise ValueError(f"{scheme} scheme needs a base dataset")
    if target_label is None:
        raise ValueError(f"{scheme} scheme needs a fixed target label")
    if count > len(base):
        raise ValueError(f"requested {count} triggers but base dataset has {len(base)}")
    idx = np.sort(rng.choice(len(base), size=count, replace=False))
    images = base.images[idx].copy()
    labels = np.full(count, int(target_label), dtype=np.int64)

    if scheme == "embedded-content":
        gh, gw = patch_glyph.shape
        if gh > images.shape[1] or gw > images.shape[2]:
            raise ValueError("patch glyph larger than the image")
        stamped = images.copy()
        stamped[:, :gh, :gw, :] = patch_glyph[None, :, :, None]
        if np.array_equal(stamped, images):
            raise ValueError("patch region identical to every base image; watermark would be invisible")
        images = stamped
    else:  # noise
        overlay = rng.normal(0.0, 1.0, size=images.shape).astype(np.float32) * np.float32(noise_std)
        images = np.clip(images + overlay, 0.0, 1.0)

    return TriggerSet(images, labels, scheme, seed)


def _fit_dims(images, dims):
    """Zero-pad (centered) and adapt channels; larger sources are rejected."""
    h, w, c = dims
    n, ih, iw, ic = images.shape
    if ih > h or iw > w:
        raise ValueError(f"unrelated images {ih}x{iw} exceed model input {h}x{w}; padding cannot shrink them")
    if ic != c:
        if ic == 1:
            images = np.repeat(images, c, axis=3)
        elif c == 1:
            images = images.mean(axis=3, keepdims=True).astype(np.float32)
        else:
            raise ValueError(f"cannot adapt {ic}-channel images to {c} channels")
    top = (h - ih) // 2
    left = (w - iw) // 2
    out = np.zeros((n, h, w, c), dtype=np.float32)
    out[:, top:top + ih, left:left + iw, :] = images
    return out


# ---------------------------------------------------------------------------
# trigger-set serialization

def save_trigger_set(path, triggers: TriggerSet) -> None:
    """magic | u8 scheme id | u64-LE seed | u32-LE M,H,W,C | labels u32-LE | images f32-LE."""
    m, h, w, c = triggers.images.shape
    with open(path, "wb") as fh:
        fh.write(TRIGGER_MAGIC)
        fh.write(struct.pack("<BQiiii", _SCHEME_IDS[triggers.scheme],
                             _u(triggers.source_seed), m, h, w, c))
        fh.write(triggers.target_labels.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(triggers.images, dtype="<f4").tobytes())


def load_trigger_set(path) -> TriggerSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(TRIGGER_MAGIC)] != TRIGGER_MAGIC:
        raise ValueError(f"{path}: bad magic, not a certmark trigger set")
    off = len(TRIGGER_MAGIC)
    scheme_id, seed, m, h, w, c = struct.unpack("<BQiiii", blob[off:off + 25])
    off += 25
    labels = np.frombuffer(blob, dtype="<u4", count=m, offset=off).astype(np.int64)
    off += 4 * m
    expected = 4 * m * h * w * c
    if len(blob) - off != expected:
        raise ValueError(f"{path}: truncated trigger set, expected {expected} image bytes, found {len(blob) - off}")
    images = np.frombuffer(blob, dtype="<f4", count=m * h * w * c, offset=off)
    return TriggerSet(images.astype(np.float32).reshape(m, h, w, c), labels,
                      TRIGGER_SCHEMES[scheme_id], seed)


def _u(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF
