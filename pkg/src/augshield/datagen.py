"""Desk-scale image data: the procedural ShapeSet, CIFAR-10 binary batches, splits."""

import colorsys
import os
from dataclasses import dataclass, field

import numpy as np

SHAPESET_CLASSES = (
    "disc",
    "bar",
    "cross",
    "ring",
    "corner",
    "gradient",
    "checker",
    "diagonal",
    "blob_pair",
    "frame",
)

CIFAR10_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)

CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images ``[N, w, h, c]`` in [0, 1] with integer labels in ``[0, n_classes)``.

    ``source_indices`` maps each row back to the dataset it was cut from, so a
    poison index stays meaningful after splitting or sub-setting.
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = ""
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataFormatError(f"images must be [N, w, h, c], got {images.shape}")
        if len(images) != len(labels):
            raise DataFormatError("image and label counts differ")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")
        src = self.source_indices
        src = np.arange(len(labels)) if src is None else np.asarray(src, dtype=np.int64)
        for arr in (images, labels, src):
            arr.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source_indices", src)

    def __len__(self):
        return len(self.labels)

    @property
    def geometry(self):
        return self.images.shape[1:]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices, provenance=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.n_classes,
            self.provenance if provenance is None else provenance,
            self.source_indices[idx],
        )

    def with_images(self, images, provenance=None):
        """Same labels and indices, new pixels."""
        return Dataset(
            images,
            self.labels,
            self.n_classes,
            self.provenance if provenance is None else provenance,
            self.source_indices,
        )

    def relabel(self, mapping, n_classes):
        """Map class ids through ``mapping`` (dict old -> new); rows not mapped are dropped."""
        keep = np.isin(self.labels, list(mapping))
        sub = self.subset(np.flatnonzero(keep))
        labels = np.array([mapping[int(v)] for v in sub.labels], dtype=np.int64)
        return Dataset(sub.images, labels, n_classes, sub.provenance, sub.source_indices)


# ------------------------------------------------------------------ ShapeSet


def _color(rng, value_lo, value_hi, sat_lo=0.5):
    h = rng.random()
    s = rng.uniform(sat_lo, 1.0)
    v = rng.uniform(value_lo, value_hi)
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def _motif_mask(kind, rng, w, h):
    """Soft coverage map in [0, 1] of shape [w, h] for one motif draw."""
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5, indexing="ij")
    size = min(w, h)
    scale = rng.uniform(0.75, 1.15)
    margin = 0.3 * size
    cu = rng.uniform(margin, w - margin)
    cv = rng.uniform(margin, h - margin)
    du, dv = u - cu, v - cv
    r = np.hypot(du, dv)
    if kind == 0:  # disc
        return (r <= 0.22 * size * scale).astype(float)
    if kind == 1:  # horizontal bar
        return ((np.abs(du) <= 0.08 * size * scale) & (np.abs(dv) <= 0.34 * size * scale)).astype(float)
    if kind == 2:  # plus sign
        arm, half = 0.07 * size * scale, 0.28 * size * scale
        horiz = (np.abs(du) <= arm) & (np.abs(dv) <= half)
        vert = (np.abs(dv) <= arm) & (np.abs(du) <= half)
        return (horiz | vert).astype(float)
    if kind == 3:  # ring
        rad = 0.24 * size * scale
        return (np.abs(r - rad) <= 0.06 * size).astype(float)
    if kind == 4:  # L-shaped corner
        arm, half = 0.07 * size * scale, 0.26 * size * scale
        box = (du >= -half) & (du <= half) & (dv >= -half) & (dv <= half)
        return (box & ((du >= half - 2 * arm) | (dv <= -half + 2 * arm))).astype(float)
    if kind == 5:  # linear ramp across the whole canvas
        ang = rng.uniform(0, 2 * np.pi)
        t = (u - w / 2) * np.cos(ang) + (v - h / 2) * np.sin(ang)
        return np.clip(0.5 + t / size, 0.0, 1.0)
    if kind == 6:  # checkerboard block
        cell = max(2, int(round(0.08 * size * scale)))
        half = 0.28 * size * scale
        box = (np.abs(du) <= half) & (np.abs(dv) <= half)
        chk = ((np.floor(du / cell) + np.floor(dv / cell)) % 2) == 0
        return (box & chk).astype(float)
    if kind == 7:  # diagonal stripe
        sign = 1.0 if rng.random() < 0.5 else -1.0
        d = np.abs(du - sign * dv) / np.sqrt(2.0)
        return ((d <= 0.07 * size * scale) & (r <= 0.4 * size * scale)).astype(float)
    if kind == 8:  # two small discs
        ang = rng.uniform(0, np.pi)
        off = 0.18 * size * scale
        ou, ov = off * np.cos(ang), off * np.sin(ang)
        rad = 0.1 * size * scale
        a = np.hypot(du - ou, dv - ov) <= rad
        b = np.hypot(du + ou, dv + ov) <= rad
        return (a | b).astype(float)
    if kind == 9:  # hollow square
        half = 0.28 * size * scale
        edge = 0.07 * size
        m = np.maximum(np.abs(du), np.abs(dv))
        return ((m <= half) & (m >= half - edge)).astype(float)
    raise ValueError(kind)


def render_shape(kind, rng, geometry=(32, 32, 3), noise=0.04):
    w, h, c = geometry
    mask = _motif_mask(kind, rng, w, h)[..., None]
    bg = _color(rng, 0.05, 0.45, sat_lo=0.0)
    fg = _color(rng, 0.6, 1.0)
    if c == 1:
        bg, fg = bg.mean(keepdims=True), fg.mean(keepdims=True)
    elif c != 3:
        bg, fg = np.resize(bg, c), np.resize(fg, c)
    img = bg * (1.0 - mask) + fg * mask
    img = img + rng.normal(0.0, noise, size=(w, h, c))
    return np.clip(img, 0.0, 1.0)


def gen_shapeset(seed, per_class, geometry=(32, 32, 3)):
    """``per_class`` images of each of the ten motifs, deterministically from ``seed``.

    Rows are interleaved by class (0, 1, ..., 9, 0, 1, ...).
    """
    if per_class <= 0:
        raise ValueError("per_class must be positive")
    w, h, c = geometry
    if w < 16 or h < 16 or c < 3:
        raise ValueError(f"geometry must be at least 16x16x3, got {geometry}")
    rng = np.random.default_rng(seed)
    n = per_class * len(SHAPESET_CLASSES)
    images = np.empty((n, w, h, c))
    labels = np.tile(np.arange(len(SHAPESET_CLASSES)), per_class)
    for i, k in enumerate(labels):
        images[i] = render_shape(int(k), rng, geometry)
    return Dataset(images, labels, len(SHAPESET_CLASSES), f"shapeset:seed={seed}:per_class={per_class}")


# ------------------------------------------------------------------ CIFAR-10


def parse_cifar10_batch(raw, name="<bytes>"):
    """Decode a CIFAR-10 binary batch (``1 label byte + 3072 pixel bytes`` per record)."""
    raw = memoryview(raw)
    if len(raw) == 0:
        raise DataFormatError(f"{name}: empty file")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataFormatError(
            f"{name}: truncated record {whole} starting at byte offset {whole * CIFAR_RECORD} "
            f"({len(raw) - whole * CIFAR_RECORD} of {CIFAR_RECORD} bytes present)"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{name}: label {labels[bad]} > 9 at byte offset {bad * CIFAR_RECORD}")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return images, labels


def load_cifar10_batch(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    images, labels = parse_cifar10_batch(raw, os.fspath(path))
    return Dataset(images, labels, 10, f"cifar10:{os.fspath(path)}")


def load_cifar10(path, batches=(1, 2, 3, 4, 5)):
    """Return ``(train, test)`` from a ``cifar-10-batches-bin`` directory."""
    path = os.fspath(path)
    nested = os.path.join(path, "cifar-10-batches-bin")
    if not os.path.exists(os.path.join(path, "test_batch.bin")) and os.path.isdir(nested):
        path = nested
    parts = []
    for b in batches:
        fname = os.path.join(path, f"data_batch_{b}.bin")
        if not os.path.exists(fname):
            raise DataFormatError(f"{fname}: missing (byte offset 0)")
        parts.append(load_cifar10_batch(fname))
    train = Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        10,
        f"cifar10:{path}:train",
    )
    test_file = os.path.join(path, "test_batch.bin")
    if not os.path.exists(test_file):
        raise DataFormatError(f"{test_file}: missing (byte offset 0)")
    test = load_cifar10_batch(test_file)
    return train, Dataset(test.images, test.labels, 10, f"cifar10:{path}:test")


def encode_cifar10_batch(images, labels):
    """Inverse of :func:`parse_cifar10_batch` for images on the 1/255 grid."""
    pix = np.rint(np.asarray(images) * 255.0).astype(np.uint8).transpose(0, 3, 1, 2)
    rec = np.concatenate(
        [np.asarray(labels, dtype=np.uint8)[:, None], pix.reshape(len(pix), -1)], axis=1
    )
    return rec.tobytes()


# --------------------------------------------------------------------- split


def split(dataset, val_fraction, seed):
    """Stratified seeded split into disjoint ``(train, val)`` subsets."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for k in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == k)
        rng.shuffle(members)
        n_val = int(round(len(members) * val_fraction))
        val_idx.append(members[:n_val])
        train_idx.append(members[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return (
        dataset.subset(train_idx, dataset.provenance + ":train"),
        dataset.subset(val_idx, dataset.provenance + ":val"),
    )


# ------------------------------------------------------------------------ io


def save_dataset(dataset, path, fingerprint=""):
    np.savez(
        path,
        config_fingerprint=np.str_(fingerprint),
        images=dataset.images,
        labels=dataset.labels,
        n_classes=np.int64(dataset.n_classes),
        provenance=np.str_(dataset.provenance),
        source_indices=dataset.source_indices,
    )


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        return Dataset(
            z["images"],
            z["labels"],
            int(z["n_classes"]),
            str(z["provenance"]),
            z["source_indices"],
        )


def contact_sheet(images, ncols=10, pad=1):
    """Tile images into one uint8 RGB array; ``pad`` pixels of black between tiles."""
    images = np.asarray(images)
    n, w, h, c = images.shape
    nrows = max(1, -(-n // ncols))
    sheet = np.zeros((nrows * (w + pad) + pad, ncols * (h + pad) + pad, 3), dtype=np.uint8)
    tiles = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    if c == 1:
        tiles = np.repeat(tiles, 3, axis=-1)
    for i in range(n):
        r, col = divmod(i, ncols)
        y0, x0 = pad + r * (w + pad), pad + col * (h + pad)
        sheet[y0 : y0 + w, x0 : x0 + h] = tiles[i, :, :, :3]
    return sheet


def write_png(array, path, text=None):
    """Save a uint8 array as PNG; ``text`` entries go into tEXt chunks."""
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    Image.fromarray(array).save(path, pnginfo=info)
