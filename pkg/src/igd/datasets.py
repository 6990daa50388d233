"""Image-folder ingestion, one-class splits, robustness protocols and patches.

Images are stored as float32 arrays shaped ``(N, H, W, C)`` with values in
[0, 1]; masks as ``(N, H, W)`` uint8 arrays.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}

# default holdout of normals when a dataset ships no train/test partition
HOLDOUT_FRACTION = 0.2


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    ids: list
    masks: np.ndarray | None = None
    classes: list | None = None
    partitions: list | None = None
    # audit only: marks anomalies injected into a training set
    contaminated: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim == 3 and len(self.images):
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.ids = list(self.ids)
        n = len(self.images)
        if len(self.labels) != n or len(self.ids) != n:
            raise ValueError(f"images ({n}), labels ({len(self.labels)}) and ids ({len(self.ids)}) must align")
        if n and not set(np.unique(self.labels)) <= {0, 1}:
            raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.uint8)
            if len(self.masks) != n:
                raise ValueError("masks must align 1:1 with images")
            if n and np.any(self.masks[self.labels == 0]):
                raise ValueError("masks of normal images must be all zero")
        for name in ("classes", "partitions"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} must align 1:1 with images")
        if self.contaminated is None:
            self.contaminated = np.zeros(n, dtype=bool)
        self.contaminated = np.asarray(self.contaminated, dtype=bool)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, index) -> "LabeledImageSet":
        index = np.asarray(index, dtype=np.int64)
        pick = lambda seq: None if seq is None else [seq[i] for i in index]  # noqa: E731
        return LabeledImageSet(
            images=self.images[index],
            labels=self.labels[index],
            ids=[self.ids[i] for i in index],
            masks=None if self.masks is None else self.masks[index],
            classes=pick(self.classes),
            partitions=pick(self.partitions),
            contaminated=self.contaminated[index],
        )

    def relabel(self, labels) -> "LabeledImageSet":
        labels = np.asarray(labels, dtype=np.int64)
        masks = self.masks
        if masks is not None:
            masks = masks.copy()
            masks[labels == 0] = 0
        return replace(self, labels=labels, masks=masks)

    def chw(self) -> np.ndarray:
        """Images as ``(N, C, H, W)`` for the networks."""
        return np.ascontiguousarray(self.images.transpose(0, 3, 1, 2))


def concat(a: LabeledImageSet, b: LabeledImageSet) -> LabeledImageSet:
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    masks = None
    if a.masks is not None or b.masks is not None:
        ma = a.masks if a.masks is not None else np.zeros(a.images.shape[:3], np.uint8)
        mb = b.masks if b.masks is not None else np.zeros(b.images.shape[:3], np.uint8)
        masks = np.concatenate([ma, mb])
    join = lambda x, y, n, m: None if x is None and y is None else (x or [None] * n) + (y or [None] * m)  # noqa: E731
    return LabeledImageSet(
        images=np.concatenate([a.images, b.images]),
        labels=np.concatenate([a.labels, b.labels]),
        ids=a.ids + b.ids,
        masks=masks,
        classes=join(a.classes, b.classes, len(a), len(b)),
        partitions=join(a.partitions, b.partitions, len(a), len(b)),
        contaminated=np.concatenate([a.contaminated, b.contaminated]),
    )


def empty_set(shape=(0, 0, 1)) -> LabeledImageSet:
    return LabeledImageSet(np.zeros((0, *shape), np.float32), np.zeros(0, np.int64), [])


@dataclass(frozen=True)
class SplitSpec:
    normal_class: str | int
    train_fraction: float = 1.0
    contamination_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if not 0.0 <= self.contamination_rate < 1.0:
            raise ValueError(f"contamination_rate must lie in [0, 1), got {self.contamination_rate}")


# -- loading ------------------------------------------------------------------


def _read_image(path: Path, resolution, mode: str, resample) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if resolution is not None:
                h, w = resolution
                if im.size != (w, h):
                    im = im.resize((w, h), resample=resample)
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return arr


def _image_files(folder: Path) -> list:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _detect_mode(files) -> str:
    from PIL import Image

    for f in files:
        try:
            with Image.open(f) as im:
                return "L" if im.mode in ("1", "L", "I", "I;16", "F", "LA") else "RGB"
        except OSError:
            continue
    return "RGB"


def load_image_folder(path, resolution=None, mode: str | None = None) -> LabeledImageSet:
    """Load ``root/<class>/<images>`` (optionally with ``root_masks/<class>/<same names>``).

    A root holding ``train/`` and ``test/`` subfolders is treated as a dataset
    with official partitions, each laid out as above. Images are resized with
    bilinear resampling and scaled to [0, 1]; order is by class then file name.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    parts = [p for p in ("train", "test") if (root / p).is_dir()]
    if parts:
        sets = []
        for p in parts:
            sub = _load_flat(root / p, root.parent / f"{root.name}_masks" / p, resolution, mode, Image)
            sub.partitions = [p] * len(sub)
            sub.ids = [f"{p}/{i}" for i in sub.ids]
            sets.append(sub)
        out = sets[0]
        for s in sets[1:]:
            out = concat(out, s)
        return out
    return _load_flat(root, root.parent / f"{root.name}_masks", resolution, mode, Image)


def _load_flat(root: Path, mask_root: Path, resolution, mode, Image) -> LabeledImageSet:
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    all_files = [(d.name, f) for d in class_dirs for f in _image_files(d)]
    if not all_files:
        return empty_set()
    mode = mode or _detect_mode([f for _, f in all_files])
    images, masks, ids, classes = [], [], [], []
    have_masks = mask_root.is_dir()
    for cls in [d.name for d in class_dirs]:
        files = [f for c, f in all_files if c == cls]
        mask_index = {}
        if have_masks and (mask_root / cls).is_dir():
            for m in _image_files(mask_root / cls):
                stem = m.stem[:-5] if m.stem.endswith("_mask") else m.stem
                mask_index[stem] = m
            unmatched = set(mask_index) - {f.stem for f in files}
            if unmatched:
                bad = mask_root / cls / mask_index[sorted(unmatched)[0]].name
                raise ValueError(f"mask without matching image: {bad}")
        for f in files:
            arr = _read_image(f, resolution, mode, Image.BILINEAR)
            if resolution is None and images and arr.shape[:2] != images[0].shape[:2]:
                raise ValueError(f"image {f} has size {arr.shape[:2]}; pass a resolution to resize")
            images.append(arr)
            if f.stem in mask_index:
                m = _read_image(mask_index[f.stem], arr.shape[:2], "L", Image.NEAREST)
                masks.append((m > 127).astype(np.uint8))
            else:
                masks.append(np.zeros(arr.shape[:2], np.uint8))
            ids.append(f"{cls}/{f.name}")
            classes.append(cls)
    imgs = np.stack(images).astype(np.float32) / 255.0
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    mask_arr = np.stack(masks) if have_masks else None
    labels = np.zeros(len(imgs), np.int64)
    if mask_arr is not None:
        labels = (mask_arr.reshape(len(mask_arr), -1).max(axis=1) > 0).astype(np.int64)
    return LabeledImageSet(imgs, labels, ids, masks=mask_arr, classes=classes)


def load_idx(images_path, labels_path, resolution=None) -> LabeledImageSet:
    """Read an MNIST-style IDX pair (optionally gzipped) into a set with class ids."""
    import gzip

    def read(p):
        opener = gzip.open if str(p).endswith(".gz") else open
        with opener(p, "rb") as fh:
            data = fh.read()
        ndim = data[3]
        dims = np.frombuffer(data, ">i4", count=ndim, offset=4)
        return np.frombuffer(data, np.uint8, offset=4 + 4 * ndim).reshape(dims)

    imgs = read(images_path).astype(np.float32) / 255.0
    labels = read(labels_path).astype(np.int64)
    return from_arrays(imgs, labels, resolution=resolution)


def load_mnist_subset(resolution=(32, 32)) -> LabeledImageSet:
    """The 5000-image MNIST subset bundled with ``mlxtend`` (500 per digit)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError("load_mnist_subset needs the optional 'mlxtend' package") from exc
    x, y = mnist_data()
    return from_arrays(x.reshape(-1, 28, 28) / 255.0, y, resolution=resolution)


def from_arrays(images, class_ids, resolution=None, prefix: str = "img") -> LabeledImageSet:
    """Wrap an array of images plus integer/str class ids (labels left at 0)."""
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    if resolution is not None and tuple(imgs.shape[1:3]) != tuple(resolution):
        imgs = resize_images(imgs, resolution)
    classes = [str(c) for c in np.asarray(class_ids).tolist()]
    width = len(str(max(len(imgs) - 1, 0)))
    ids = [f"{c}/{prefix}{i:0{width}d}" for i, c in enumerate(classes)]
    return LabeledImageSet(np.clip(imgs, 0, 1), np.zeros(len(imgs), np.int64), ids, classes=classes)


def resize_images(images: np.ndarray, resolution) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    t = F.interpolate(t, size=tuple(resolution), mode="bilinear", align_corners=False)
    return t.numpy().transpose(0, 2, 3, 1).clip(0, 1).astype(np.float32)


# -- splits -------------------------------------------------------------------


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


def make_one_class_split(data: LabeledImageSet, normal_class, seed: int = 0,
                         holdout: float = HOLDOUT_FRACTION):
    """Train on ``normal_class`` only; test on held-out normals plus every other class.

    Official ``train``/``test`` partitions are honoured when present; otherwise
    normals are split by a seeded shuffle (``holdout`` goes to test).
    """
    if data.classes is None:
        raise ValueError("dataset carries no class ids")
    normal_class = str(normal_class)
    classes = np.array(data.classes, dtype=object)
    is_normal = classes == normal_class
    if not is_normal.any():
        raise ValueError(f"normal class {normal_class!r} not found among {sorted(set(data.classes))}")

    if data.partitions is not None:
        part = np.array(data.partitions, dtype=object)
        train_idx = np.flatnonzero(is_normal & (part == "train"))
        test_idx = np.flatnonzero(part == "test")
    else:
        normals = np.flatnonzero(is_normal)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(normals)
        n_test = _floor(holdout * len(normals))
        test_normals = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
        test_idx = np.sort(np.concatenate([test_normals, np.flatnonzero(~is_normal)]))

    train = data.subset(train_idx).relabel(np.zeros(len(train_idx), np.int64))
    test = data.subset(test_idx)
    test_labels = (np.array(test.classes, dtype=object) != normal_class).astype(np.int64)
    test = test.relabel(test_labels)
    if test_labels.sum() == 0:
        warnings.warn("one-class split has no anomalous test images", RuntimeWarning, stacklevel=2)
    return train, test


def subsample_train(train: LabeledImageSet, fraction: float, seed: int) -> LabeledImageSet:
    """Keep ``floor(fraction * N)`` images drawn uniformly without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(train)
    k = _floor(fraction * n)
    if k == n:
        return train
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return train.subset(idx)


def contaminate_train(train: LabeledImageSet, test: LabeledImageSet, rate: float, seed: int):
    """Move ``floor(rate * A)`` anomalous test images into the training set.

    Moved images get label 0 in ``train'``; ``contaminated`` records them.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"contamination rate must lie in [0, 1), got {rate}")
    anomalous = np.flatnonzero(test.labels == 1)
    if rate > 0 and len(anomalous) == 0:
        raise ValueError("cannot contaminate: test set has no anomalous images")
    k = _floor(rate * len(anomalous))
    if k == 0:
        return train, test
    rng = np.random.default_rng(seed)
    moved = np.sort(rng.choice(anomalous, size=k, replace=False))
    keep = np.setdiff1d(np.arange(len(test)), moved)
    injected = test.subset(moved)
    injected = replace(injected.relabel(np.zeros(k, np.int64)), masks=None)
    injected.contaminated = np.ones(k, dtype=bool)
    base = train if train.masks is None else replace(train, masks=None)
    return concat(base, injected), test.subset(keep)


def apply_split(data: LabeledImageSet, spec: SplitSpec):
    """One-class split followed by the small-training-set and contamination protocols."""
    train, test = make_one_class_split(data, spec.normal_class, seed=spec.seed)
    if spec.train_fraction < 1.0:
        train = subsample_train(train, spec.train_fraction, spec.seed)
    if spec.contamination_rate > 0:
        train, test = contaminate_train(train, test, spec.contamination_rate, spec.seed)
    return train, test


def write_manifest(path, train: LabeledImageSet, test: LabeledImageSet) -> None:
    """UTF-8 CSV with columns ``id,label,split,contaminated``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "split", "contaminated"])
        for split, s in (("train", train), ("test", test)):
            for i in range(len(s)):
                w.writerow([s.ids[i], int(s.labels[i]), split, int(s.contaminated[i])])


# -- patches ------------------------------------------------------------------


def _axis_layout(n: int, size: int, stride: int):
    if size > n:
        raise ValueError(f"patch size {size} exceeds image size {n}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if size == n or stride >= size:
        # tiling / full-size grid: no padding
        starts = list(range(0, n - size + 1, stride))
        return (0, 0), starts, [s + size // 2 for s in starts]
    before, after = size // 2, size - 1 - size // 2
    centers = list(range(0, n, stride))
    # with this padding a patch centred at c starts at padded index c
    return (before, after), centers, centers


def patch_grid(image_hw, size, stride):
    """Padding and patch centres used by :func:`extract_patches`."""
    (h, w), (ph, pw), (sh, sw) = image_hw, size, stride
    pad_h, starts_h, cen_h = _axis_layout(h, ph, sh)
    pad_w, starts_w, cen_w = _axis_layout(w, pw, sw)
    return pad_h, pad_w, starts_h, starts_w, cen_h, cen_w


def extract_patches(x: np.ndarray, size, stride=(1, 1)):
    """Sliding-window patches of an ``(H, W, C)`` image with their centre pixels.

    Overlapping grids (stride < size) are reflect-padded so every pixel on the
    stride lattice is a centre; tiling grids are taken without padding.
    Returns ``(patches, centers)``: an ``(P, h, w, C)`` array and a list of
    ``(row, col)`` centres.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[..., None]
    size, stride = tuple(size), tuple(stride)
    pad_h, pad_w, starts_h, starts_w, cen_h, cen_w = patch_grid(x.shape[:2], size, stride)
    if any(pad_h) or any(pad_w):
        x = np.pad(x, (pad_h, pad_w, (0, 0)), mode="reflect")
    ph, pw = size
    patches, centers = [], []
    for sr, cr in zip(starts_h, cen_h):
        for sc, cc in zip(starts_w, cen_w):
            patches.append(x[sr:sr + ph, sc:sc + pw])
            centers.append((cr, cc))
    return np.stack(patches), centers


# -- synthetic benchmark ------------------------------------------------------


def _blob_image(rng, res):
    h, w = res
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.full((h, w), 0.15 + 0.1 * rng.random(), np.float32)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        s = rng.uniform(0.12, 0.25) * min(h, w)
        amp = rng.uniform(0.35, 0.7)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return np.clip(img, 0, 1)


def _stripe_image(rng, res):
    h, w = res
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return np.clip(0.5 + 0.35 * wave, 0, 1).astype(np.float32)


def corrupt_square(img: np.ndarray, rng, side: int):
    """Paste a high-frequency square onto ``img``; returns ``(image, mask)``."""
    h, w = img.shape
    r, c = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
    out = img.copy()
    checker = (np.indices((side, side)).sum(axis=0) % 2).astype(np.float32)
    out[r:r + side, c:c + side] = 0.1 + 0.8 * checker
    mask = np.zeros((h, w), np.uint8)
    mask[r:r + side, c:c + side] = 1
    return out, mask


def synthetic_blobs(n_normal: int = 200, n_stripes: int = 100, n_corrupt: int = 100,
                    resolution=(32, 32), square: int = 7, seed: int = 0) -> LabeledImageSet:
    """Seeded toy benchmark with classes ``blob`` (normal), ``stripe`` and ``corrupt``.

    ``stripe`` images are sinusoidal gratings; ``corrupt`` images are blob
    images with a checkerboard square whose location is given by the mask.
    """
    rng = np.random.default_rng(seed)
    imgs, masks, classes = [], [], []
    for _ in range(n_normal):
        imgs.append(_blob_image(rng, resolution))
        masks.append(np.zeros(resolution, np.uint8))
        classes.append("blob")
    for _ in range(n_stripes):
        imgs.append(_stripe_image(rng, resolution))
        masks.append(np.ones(resolution, np.uint8))
        classes.append("stripe")
    for _ in range(n_corrupt):
        img, m = corrupt_square(_blob_image(rng, resolution), rng, square)
        imgs.append(img)
        masks.append(m)
        classes.append("corrupt")
    images = np.stack(imgs)[..., None]
    mask_arr = np.stack(masks)
    labels = np.array([c != "blob" for c in classes], np.int64)
    ids = [f"{c}/{i:05d}" for i, c in enumerate(classes)]
    return LabeledImageSet(images, labels, ids, masks=mask_arr, classes=classes)
