"""Datasets: IDX parsing/writing, synthetic Gaussian-blob images, and the npz container."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: at byte offset {offset}: {message}")
        self.path, self.offset = str(path), offset


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [n, c, h, w], got shape {self.images.shape}")
        n = len(self.labels)
        if n < 1 or len(self.images) != n:
            raise DatasetError(f"need n >= 1 matching images/labels, got {len(self.images)} / {n}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError("labels must lie in [0, num_classes)")
        if not (np.all(self.images >= 0) and np.all(self.images <= 1)):
            raise DatasetError("images must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, start: int, stop: int, split: str | None = None) -> "Dataset":
        prov = dict(self.provenance, subset=[start, stop])
        return Dataset(self.images[start:stop], self.labels[start:stop], self.num_classes,
                       split or self.split, prov)

    def payload_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _read_idx(path, expected_magic):
    allowed = (expected_magic,) if isinstance(expected_magic, int) else tuple(expected_magic)
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError(path, 0, "file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in allowed:
        want = " or ".join(f"0x{m:08x}" for m in allowed)
        raise IDXFormatError(path, 0, f"wrong magic 0x{magic:08x}, expected {want}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(path, 4, f"truncated header: need {ndim} dimension sizes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IDXFormatError(path, header, f"truncated payload: expected {count} bytes, found {len(raw) - header}")
    if len(raw) - header > count:
        raise IDXFormatError(path, header + count, "trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image file (unsigned bytes, [n, h, w] or [n, c, h, w]) and its label file."""
    pix = _read_idx(images_path, (IDX_IMAGES_MAGIC, IDX_IMAGES_MAGIC + 1))
    lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if pix.shape[0] != lab.shape[0]:
        raise IDXFormatError(labels_path, 4, f"label count {lab.shape[0]} != image count {pix.shape[0]}")
    images = pix.astype(np.float32) / np.float32(255)
    if images.ndim == 3:
        images = images[:, None]
    labels = lab.astype(np.int64)
    prov = {"source": "idx", "images_sha256": hashlib.sha256(Path(images_path).read_bytes()).hexdigest(),
            "labels_sha256": hashlib.sha256(Path(labels_path).read_bytes()).hexdigest()}
    return Dataset(images, labels, num_classes or int(labels.max()) + 1, split, prov)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray):
    """Write unsigned-byte images ([n, h, w] or [n, c, h, w]) and labels as IDX files."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", 0x00000800 | images_u8.ndim))
        fh.write(struct.pack(f">{images_u8.ndim}I", *images_u8.shape))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)


def _smooth(field_: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        field_ = (field_ + np.roll(field_, 1, -1) + np.roll(field_, -1, -1)
                  + np.roll(field_, 1, -2) + np.roll(field_, -1, -2)) / 5.0
    return field_


def class_patterns(classes: int, image_size: int, channels: int, seed: int, smooth: int = 1) -> np.ndarray:
    """Per-class mean-pattern directions, each scaled to max |value| = 1."""
    rng = np.random.default_rng([seed, 1])
    pat = _smooth(rng.standard_normal((classes, channels, image_size, image_size)), smooth)
    return pat / np.abs(pat).reshape(classes, -1).max(axis=1)[:, None, None, None]


def synth_dataset(classes: int = 10, n: int = 1000, image_size: int = 8, seed: int = 0, sigma: float = 0.1,
                  channels: int = 1, amplitude: float = 0.1, smooth: int = 1, split: str = "train",
                  pattern_seed: int | None = None) -> Dataset:
    """Class-conditional Gaussian blobs around ``0.5 + amplitude * pattern[c]``, clipped to [0, 1].

    Class means of two classes differ by at least ``amplitude * min_dist`` in
    l2; the set is linearly separable with high probability while ``sigma`` is
    well below half that distance.  ``pattern_seed`` (default ``seed``) fixes
    the class means so that independent splits share them.
    """
    if classes < 2:
        raise DatasetError("need at least two classes")
    pseed = seed if pattern_seed is None else pattern_seed
    means = 0.5 + amplitude * class_patterns(classes, image_size, channels, pseed, smooth)
    rng = np.random.default_rng([seed, 2])
    labels = rng.permutation(np.arange(n) % classes)
    noise = rng.standard_normal((n, channels, image_size, image_size))
    images = np.clip(means[labels] + sigma * noise, 0, 1).astype(np.float32)
    prov = {"source": "synthetic", "generator": "gaussian_blobs", "seed": seed, "pattern_seed": pseed,
            "classes": classes, "n": n, "image_size": image_size, "sigma": sigma, "channels": channels,
            "amplitude": amplitude, "smooth": smooth}
    return Dataset(images, labels, classes, split, prov)


def save_dataset(ds: Dataset, path, adversarial: bool = False, extra: dict | None = None, clean=None):
    """npz container; adversarial payloads also carry their clean inputs and the attack spec."""
    meta = {"split": ds.split, "provenance": ds.provenance, "num_classes": ds.num_classes,
            "adversarial": adversarial, **(extra or {})}
    arrays = {"images": ds.images, "labels": ds.labels, "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)}
    if clean is not None:
        arrays["clean"] = np.asarray(clean, np.float32)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        ds = Dataset(z["images"], z["labels"], meta["num_classes"], meta["split"], meta["provenance"])
        clean = z["clean"] if "clean" in z else None
    return ds, meta, clean
