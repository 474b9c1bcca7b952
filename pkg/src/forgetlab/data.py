"""Datasets: ingestion, subject-disjoint splitting, subsampling, fusion, batching.

Every sample is a 48x48 grayscale image in [0,1] with one of seven expression
labels. Loaders normalize whatever they ingest (pixel CSV rows, raster files
behind a manifest) into that shape; nothing here mutates a dataset after
construction.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
IMAGE_HW = (48, 48)

_USAGE_TO_SUBSET = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
_SUBSET_TO_USAGE = {v: k for k, v in _USAGE_TO_SUBSET.items()}


class DataError(ValueError):
    """Raised for malformed input files or inconsistent dataset operations."""


@dataclass
class Sample:
    image: np.ndarray           # [1, 48, 48] float64 in [0,1]
    label: int
    subject_id: str | None = None
    origin: str = ""


@dataclass
class Dataset:
    name: str
    samples: list[Sample] = field(default_factory=list)
    class_names: tuple[str, ...] = CLASS_NAMES

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subjects(self) -> set[str]:
        return {s.subject_id for s in self.samples if s.subject_id is not None}

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """All images as one [N,1,48,48] tensor plus the label vector."""
        if not self.samples:
            return np.zeros((0, 1) + IMAGE_HW), np.zeros(0, dtype=np.int64)
        return np.stack([s.image for s in self.samples]), self.labels()

    def class_histogram(self) -> np.ndarray:
        counts = np.zeros(len(self.class_names), dtype=np.int64)
        for s in self.samples:
            counts[s.label] += 1
        return counts


def _check_sample(s: Sample, context: str) -> None:
    if s.image.shape != (1,) + IMAGE_HW:
        raise DataError(f"{context}: image shape {s.image.shape}, expected (1, 48, 48)")
    if not 0 <= s.label < len(CLASS_NAMES):
        raise DataError(f"{context}: label {s.label} outside 0..{len(CLASS_NAMES) - 1}")


# ---------------------------------------------------------------------------
# Pixel-CSV format (emotion,pixels,usage)
# ---------------------------------------------------------------------------

def load_pixel_csv(path: str | Path, name: str | None = None
                   ) -> tuple[Dataset, Dataset, Dataset]:
    """Parse an `emotion,pixels,usage` CSV into (train, val, test) datasets.

    `pixels` is 2304 space-separated integers 0..255, row-major; the usage tag
    routes each row (Training / PublicTest / PrivateTest). Pixel values are
    divided by 255.
    """
    path = Path(path)
    name = name or path.stem
    subsets = {k: Dataset(f"{name}-{k}") for k in ("train", "val", "test")}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            next(reader)                          # header row
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{rownum}: expected 3 fields, got {len(row)}")
            emotion_s, pixels_s, usage = row
            try:
                emotion = int(emotion_s)
            except ValueError:
                raise DataError(f"{path}:{rownum}: emotion {emotion_s!r} is not an integer") from None
            if not 0 <= emotion < len(CLASS_NAMES):
                raise DataError(f"{path}:{rownum}: emotion {emotion} outside 0..6")
            if usage not in _USAGE_TO_SUBSET:
                raise DataError(
                    f"{path}:{rownum}: unknown usage tag {usage!r} "
                    f"(expected one of {sorted(_USAGE_TO_SUBSET)})")
            try:
                vals = np.array(pixels_s.split(), dtype=np.int64)
            except ValueError:
                raise DataError(f"{path}:{rownum}: non-integer pixel value") from None
            if vals.size != IMAGE_HW[0] * IMAGE_HW[1]:
                raise DataError(f"{path}:{rownum}: {vals.size} pixels, expected 2304")
            if vals.min() < 0 or vals.max() > 255:
                raise DataError(f"{path}:{rownum}: pixel value outside 0..255")
            image = (vals / 255.0).reshape((1,) + IMAGE_HW)
            subsets[_USAGE_TO_SUBSET[usage]].samples.append(
                Sample(image=image, label=emotion, subject_id=None, origin=name))
    return subsets["train"], subsets["val"], subsets["test"]


def save_pixel_csv(path: str | Path, train: Dataset, val: Dataset, test: Dataset) -> None:
    """Inverse of load_pixel_csv; round-trips tensors exactly."""
    with open(path, "w", newline="") as fh:
        fh.write("emotion,pixels,Usage\n")
        for subset, ds in (("train", train), ("val", val), ("test", test)):
            usage = _SUBSET_TO_USAGE[subset]
            for s in ds:
                pix = np.rint(s.image.reshape(-1) * 255.0).astype(np.int64)
                fh.write(f"{s.label},{' '.join(str(v) for v in pix)},{usage}\n")


# ---------------------------------------------------------------------------
# Image manifest (TSV: relative_path <tab> label_name <tab> subject_id)
# ---------------------------------------------------------------------------

def load_image_manifest(manifest_path: str | Path, name: str | None = None) -> Dataset:
    """Load raster images listed in a tab-separated manifest.

    Color inputs are reduced with luma weights (0.299, 0.587, 0.114), resized
    to 48x48 with bilinear interpolation and scaled to [0,1].
    """
    manifest_path = Path(manifest_path)
    name = name or manifest_path.stem
    root = manifest_path.parent
    ds = Dataset(name)
    seen: set[tuple[str, str, str]] = set()
    with open(manifest_path) as fh:
        for rownum, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{manifest_path}:{rownum}: expected 3 tab-separated fields, got {len(parts)}")
            rel, label_name, subject = parts
            key = (rel, label_name, subject)
            if key in seen:
                raise DataError(f"{manifest_path}:{rownum}: duplicate row {key}")
            seen.add(key)
            if label_name not in CLASS_NAMES:
                raise DataError(
                    f"{manifest_path}:{rownum}: unknown label {label_name!r} "
                    f"(valid: {', '.join(CLASS_NAMES)})")
            try:
                gray = load_image_grayscale(root / rel)
            except (OSError, DataError) as exc:
                raise DataError(f"{manifest_path}:{rownum}: cannot read {rel}: {exc}") from None
            image = resize_bilinear(gray, *IMAGE_HW)[None, :, :]
            sample = Sample(image=image, label=CLASS_NAMES.index(label_name),
                            subject_id=subject, origin=name)
            _check_sample(sample, f"{manifest_path}:{rownum}")
            ds.samples.append(sample)
    return ds


def load_image_grayscale(path: str | Path) -> np.ndarray:
    """Decode a raster file to a float64 [H,W] grayscale array in [0,1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm"):
        return _read_pnm(path)
    from PIL import Image                          # only touched for non-PNM files

    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.float64) / 255.0
        if img.mode in ("I", "I;16"):
            return np.asarray(img, dtype=np.float64) / 65535.0
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb @ np.array([0.299, 0.587, 0.114])


def _read_pnm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    i = 0
    # header = magic, width, height, maxval, with '#' comments allowed
    while len(tokens) < 4 and i < len(raw):
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        if i > start:
            tokens.append(raw[start:i])
    if len(tokens) < 4:
        raise DataError(f"{path}: truncated PNM header")
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"{path}: unsupported PNM magic {magic!r} (P2/P5 grayscale only)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 65535:
        raise DataError(f"{path}: bad maxval {maxval}")
    if magic == b"P2":
        vals = np.array(raw[i:].split(), dtype=np.float64)
    else:
        i += 1                                    # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(raw, dtype=dtype, count=w * h, offset=i).astype(np.float64)
    if vals.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {vals.size}")
    return vals.reshape(h, w) / maxval


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a [H,W] or [1,H,W] array in [0,1] as binary 8-bit PGM."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resampling with half-pixel-aligned centers."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, 0])[:, None] + bot * wy[:, 0][:, None]


# ---------------------------------------------------------------------------
# Splitting, subsampling, fusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    val_fraction: float
    test_fraction: float
    subject_disjoint: bool = False
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0.0 < f < 1.0 for f in fr):
            raise DataError(f"split fractions must lie in (0,1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-6:
            raise DataError(f"split fractions must sum to 1, got {sum(fr):.6f}")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition into train/val/test; subject-disjoint mode never puts one
    subject's samples in two subsets."""
    if spec.subject_disjoint:
        idx = _split_by_subject(ds, spec)
    else:
        idx = _split_stratified(ds, spec)
    out = []
    for subset in ("train", "val", "test"):
        sub = Dataset(f"{ds.name}-{subset}", class_names=ds.class_names)
        sub.samples = [ds.samples[i] for i in sorted(idx[subset])]
        out.append(sub)
    return tuple(out)


def _split_by_subject(ds: Dataset, spec: SplitSpec) -> dict[str, list[int]]:
    by_subject: dict[str, list[int]] = {}
    for i, s in enumerate(ds.samples):
        if s.subject_id is None:
            raise DataError(f"subject-disjoint split: sample {i} has no subject_id")
        by_subject.setdefault(s.subject_id, []).append(i)

    fractions = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
    total = len(ds)
    biggest = max(len(v) for v in by_subject.values())
    if biggest > max(fractions) * total:
        log.warning(
            "subject %s holds %d/%d samples, more than the largest split fraction; "
            "split targets are unreachable, proceeding best-effort",
            max(by_subject, key=lambda k: len(by_subject[k])), biggest, total)

    rng = np.random.default_rng(spec.seed)
    order = [sorted(by_subject)[i] for i in rng.permutation(len(by_subject))]
    order.sort(key=lambda s: -len(by_subject[s]))  # stable: big subjects placed first

    deficits = [f * total for f in fractions]
    idx: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    names = ("train", "val", "test")
    for subject in order:
        take = max(range(3), key=lambda j: (deficits[j], -j))  # ties favor train
        idx[names[take]].extend(by_subject[subject])
        deficits[take] -= len(by_subject[subject])
    return idx


def _split_stratified(ds: Dataset, spec: SplitSpec) -> dict[str, list[int]]:
    rng = np.random.default_rng(spec.seed)
    idx: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for c in range(len(ds.class_names)):
        members = [i for i, s in enumerate(ds.samples) if s.label == c]
        if not members:
            continue
        members = [members[j] for j in rng.permutation(len(members))]
        n = len(members)
        n_val = math.floor(spec.val_fraction * n)
        n_test = math.floor(spec.test_fraction * n)
        n_train = n - n_val - n_test              # remainders land in train
        idx["train"].extend(members[:n_train])
        idx["val"].extend(members[n_train:n_train + n_val])
        idx["test"].extend(members[n_train + n_val:])
    return idx


def take_fraction(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Stratified subsample keeping ceil(fraction * n_c) of every class c."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0,1], got {fraction}")
    if fraction == 1.0:
        out = Dataset(ds.name, class_names=ds.class_names)
        out.samples = list(ds.samples)
        return out
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for c in range(len(ds.class_names)):
        members = [i for i, s in enumerate(ds.samples) if s.label == c]
        if not members:
            continue
        k = math.ceil(fraction * len(members))
        chosen = rng.permutation(len(members))[:k]
        keep.extend(members[j] for j in chosen)
    out = Dataset(f"{ds.name}@{fraction:g}", class_names=ds.class_names)
    out.samples = [ds.samples[i] for i in sorted(keep)]
    return out


def merge(a: Dataset, b: Dataset) -> Dataset:
    """Plain concatenation; origin tags are preserved, nothing is reweighted."""
    if a.class_names != b.class_names:
        raise DataError(
            f"cannot merge datasets with different label spaces: "
            f"{a.class_names} vs {b.class_names}")
    out = Dataset(f"{a.name}+{b.name}", class_names=a.class_names)
    out.samples = list(a.samples) + list(b.samples)
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def shuffled_batches(ds: Dataset, batch_size: int, seed: int, epoch: int
                     ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Full permutation per epoch, keyed by (seed, epoch); short tail retained."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        chunk = perm[start:start + batch_size]
        x = np.stack([ds.samples[i].image for i in chunk])
        y = np.array([ds.samples[i].label for i in chunk], dtype=np.int64)
        yield x, y


def sequential_batches(ds: Dataset, batch_size: int
                       ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for start in range(0, len(ds), batch_size):
        chunk = ds.samples[start:start + batch_size]
        yield (np.stack([s.image for s in chunk]),
               np.array([s.label for s in chunk], dtype=np.int64))
