"""Batch augmentations: flips/crops, k-way mixup, CutMix, cutout, MaxUp copies.

Every transform takes an explicit ``numpy.random.Generator``; nothing reads
global random state. Labels come back as soft-label rows on the simplex.
"""

from dataclasses import dataclass

import numpy as np

AUG_KINDS = ("none", "standard", "mixup", "cutmix", "cutout", "maxup")
STOCHASTIC_BASES = ("cutout", "standard")


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = "none"
    k: int = 2
    alpha: float = 1.0
    patch_side: int = 8
    m: int = 4
    base: str = "cutout"

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "mixup" and (self.k < 2 or not self.alpha > 0):
            raise ValueError("mixup needs k >= 2 and alpha > 0")
        if self.kind == "cutout" and self.patch_side < 0:
            raise ValueError("cutout patch side must be nonnegative")
        if self.kind == "maxup":
            if self.m < 2:
                raise ValueError("maxup needs m >= 2")
            if self.base not in STOCHASTIC_BASES:
                raise ValueError(f"maxup base must be stochastic, one of {STOCHASTIC_BASES}")

    @property
    def mixes_labels(self):
        return self.kind in ("mixup", "cutmix")

    def label(self):
        if self.kind == "mixup":
            return "mixup" if self.k == 2 else f"mixup({self.k}-way)"
        if self.kind == "maxup":
            return f"maxup-{self.base}"
        return self.kind


@dataclass(frozen=True)
class CutBox:
    """Zeroed rectangle ``[x0, x1) x [y0, y1)`` of an otherwise all-ones mask."""

    center: tuple
    extents: tuple
    bounds: tuple
    shape: tuple

    @property
    def mask(self):
        m = np.ones(self.shape)
        x0, x1, y0, y1 = self.bounds
        m[x0:x1, y0:y1] = 0.0
        return m

    @property
    def zero_cells(self):
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) * (y1 - y0)


def make_box(center, extents, w, h):
    """Image-clipped, pixel-snapped box centred at ``center``."""
    rx, ry = center
    rw, rh = extents
    x0 = int(np.clip(np.round(rx - rw / 2.0), 0, w))
    x1 = int(np.clip(np.round(rx + rw / 2.0), 0, w))
    y0 = int(np.clip(np.round(ry - rh / 2.0), 0, h))
    y1 = int(np.clip(np.round(ry + rh / 2.0), 0, h))
    return CutBox((float(rx), float(ry)), (float(rw), float(rh)), (x0, x1, y0, y1), (w, h))


def one_hot(labels, n_classes):
    return np.eye(n_classes)[np.asarray(labels, dtype=np.intp)]


def _soft(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return one_hot(labels, n_classes)
    return labels.astype(np.float64)


# ---------------------------------------------------------------- dirichlet


def sample_dirichlet(k, alpha, rng, size=None):
    """Dir(alpha, ..., alpha) of order ``k`` via normalised Gamma(alpha) draws."""
    if int(k) != k or k < 2:
        raise ValueError("Dirichlet order k must be an integer >= 2")
    if not alpha > 0:
        raise ValueError("Dirichlet alpha must be positive")
    shape = (k,) if size is None else (size, k)
    g = rng.standard_gamma(alpha, size=shape)
    total = g.sum(axis=-1, keepdims=True)
    # all-zero draws only happen for tiny alpha; fall back to a vertex
    bad = total[..., 0] == 0
    if np.any(bad):
        g[bad] = 0.0
        g[bad, 0] = 1.0
        total = g.sum(axis=-1, keepdims=True)
    return g / total


# -------------------------------------------------------------------- mixup


def mixup_partners(batch_size, k, rng):
    """``[B, k]`` partner indices; column 0 is the sample itself, no repeats per row."""
    if batch_size < k:
        raise ValueError(f"mixup needs batch size >= k ({batch_size} < {k})")
    perm = rng.permutation(batch_size)
    pos = np.empty(batch_size, dtype=np.intp)
    pos[perm] = np.arange(batch_size)
    shifts = np.arange(k)
    return perm[(pos[:, None] + shifts[None, :]) % batch_size]


def mixup_batch(images, labels, k, alpha, rng, n_classes=None, lambdas=None):
    """k-way mixup of a batch; returns ``(images, soft_labels)``."""
    images = np.asarray(images, dtype=np.float64)
    y = _soft(labels, n_classes) if n_classes else _soft(labels, int(np.max(labels)) + 1)
    B = len(images)
    partners = mixup_partners(B, k, rng)
    if lambdas is None:
        lam = sample_dirichlet(k, alpha, rng, size=B)
    else:
        lam = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), (B, k))
    out = np.einsum("bj,bj...->b...", lam, images[partners])
    soft = np.einsum("bj,bjk->bk", lam, y[partners])
    np.clip(out, 0.0, 1.0, out=out)
    return out, soft


# ------------------------------------------------------------------- cutmix


def cutmix_pair(x_i, y_i, x_j, y_j, rng, lam=None, center=None):
    """Paste a box of ``x_j`` into ``x_i``; label weight follows the kept area.

    Returns ``(image, soft_label, box)``. ``y_i``/``y_j`` are soft-label rows.
    """
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"cutmix geometry mismatch: {x_i.shape} vs {x_j.shape}")
    w, h = x_i.shape[:2]
    if lam is None:
        lam = sample_dirichlet(2, 1.0, rng)[0]
    if center is None:
        center = (rng.uniform(0, w), rng.uniform(0, h))
    cut = np.sqrt(1.0 - lam)
    box = make_box(center, (w * cut, h * cut), w, h)
    m = box.mask[..., None]
    image = m * x_i + (1.0 - m) * x_j
    lam_eff = 1.0 - box.zero_cells / (w * h)
    label = lam_eff * np.asarray(y_i, dtype=np.float64) + (1.0 - lam_eff) * np.asarray(y_j, dtype=np.float64)
    return image, label, box


def cutmix_batch(images, labels, rng, n_classes):
    images = np.asarray(images, dtype=np.float64)
    y = _soft(labels, n_classes)
    partners = rng.permutation(len(images))
    out = np.empty_like(images)
    soft = np.empty_like(y)
    for i, j in enumerate(partners):
        out[i], soft[i], _ = cutmix_pair(images[i], y[i], images[j], y[j], rng)
    return out, soft


# ------------------------------------------------------------------- cutout


def cutout(x, y, patch_side, rng, center=None):
    """Zero a ``patch_side`` square at a uniform centre; label passes through.

    Returns ``(image, y, box)``.
    """
    x = np.asarray(x, dtype=np.float64)
    w, h = x.shape[:2]
    if patch_side < 0 or patch_side > min(w, h):
        raise ValueError(f"cutout patch side must lie in [0, {min(w, h)}]")
    if center is None:
        center = (rng.uniform(0, w), rng.uniform(0, h))
    box = make_box(center, (patch_side, patch_side), w, h)
    return x * box.mask[..., None], y, box


def cutout_batch(images, labels, patch_side, rng, n_classes):
    out = np.empty_like(np.asarray(images, dtype=np.float64))
    for i, img in enumerate(images):
        out[i], _, _ = cutout(img, None, patch_side, rng)
    return out, _soft(labels, n_classes)


# --------------------------------------------------------------- flip / crop


def standard_aug(x, rng, pad=4, flip=None, offset=None):
    """Random horizontal mirror (p = 1/2) then a random crop of the reflect-padded image."""
    x = np.asarray(x, dtype=np.float64)
    w, h = x.shape[:2]
    if flip is None:
        flip = rng.random() < 0.5
    if flip:
        x = x[:, ::-1]
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    if offset is None:
        offset = (rng.integers(0, 2 * pad + 1), rng.integers(0, 2 * pad + 1))
    ox, oy = offset
    return padded[ox : ox + w, oy : oy + h].copy()


def standard_batch(images, rng, pad=4):
    images = np.asarray(images, dtype=np.float64)
    B, w, h, _ = images.shape
    flips = rng.random(B) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
    src = np.where(flips[:, None, None, None], images[:, :, ::-1], images)
    padded = np.pad(src, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out = np.empty_like(images)
    for i in range(B):
        ox, oy = offs[i]
        out[i] = padded[i, ox : ox + w, oy : oy + h]
    return out


# -------------------------------------------------------------------- maxup


def maxup_expand(x, y, m, base, rng, patch_side=8):
    """``m`` independent draws of a stochastic base augmentation applied to ``x``.

    Returns ``(copies [m, w, h, c], [y] * m)``. CutMix as a base mixes ``x``
    with itself, which leaves it unchanged, so only cutout and flips/crops
    are meaningful bases here.
    """
    if m < 2:
        raise ValueError("maxup needs m >= 2")
    if base not in ("cutout", "standard"):
        raise ValueError(f"maxup base {base!r} is not a stochastic single-image augmentation")
    copies = []
    for _ in range(m):
        if base == "cutout":
            img, _, _ = cutout(x, y, patch_side, rng)
        else:
            img = standard_aug(x, rng)
        copies.append(img)
    return np.stack(copies), [y] * m


def maxup_batch(images, labels, m, base, rng, n_classes, patch_side=8):
    """Copies laid out example-major: rows ``i*m .. i*m+m-1`` belong to example ``i``."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty((len(images) * m,) + images.shape[1:])
    for i, img in enumerate(images):
        out[i * m : (i + 1) * m], _ = maxup_expand(img, None, m, base, rng, patch_side)
    return out, np.repeat(_soft(labels, n_classes), m, axis=0)


# ------------------------------------------------------------------- policy


def apply_policy(policy, images, labels, rng, n_classes):
    """Transform one batch under ``policy`` (MaxUp excluded: it changes the loss).

    Returns ``(images, soft_labels)``.
    """
    kind = policy.kind
    if kind in ("none", "standard"):
        return np.asarray(images, dtype=np.float64), _soft(labels, n_classes)
    if kind == "mixup":
        return mixup_batch(images, labels, policy.k, policy.alpha, rng, n_classes)
    if kind == "cutmix":
        return cutmix_batch(images, labels, rng, n_classes)
    if kind == "cutout":
        return cutout_batch(images, labels, policy.patch_side, rng, n_classes)
    raise ValueError(f"apply_policy does not handle {kind!r}")
