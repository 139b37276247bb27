"""Datasets: IDX and CSV loading, mean subtraction, crop/flip augmentation,
and a synthetic regression task generated by a known APL function."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from aplnet.functional import ShapeError
from aplnet.pwl import AplParams1D, eval_apl


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    norm_mean: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       split=split or self.split)


# -- IDX ------------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_DTYPES.items()}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array of its native dtype."""
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic", len(raw))
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise IdxFormatError(f"bad magic {raw[:4].hex()}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    expected = header + math.prod(dims) * dtype.itemsize
    if len(raw) < expected:
        raise IdxFormatError(f"truncated payload: need {expected} bytes, have {len(raw)}", len(raw))
    if len(raw) > expected:
        raise IdxFormatError(f"{len(raw) - expected} trailing bytes", expected)
    return np.frombuffer(raw, dtype=dtype, count=math.prod(dims), offset=header).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in _IDX_CODES:
        raise TypeError(f"dtype {arr.dtype} has no IDX type code")
    head = struct.pack(">HBB", 0, _IDX_CODES[dtype], arr.ndim)
    head += struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(dtype).tobytes()


def write_idx(path, arr: np.ndarray) -> Path:
    path = Path(path)
    raw = encode_idx(arr)
    path.write_bytes(gzip.compress(raw, mtime=0) if path.suffix == ".gz" else raw)
    return path


def load_idx(images_path, labels_path=None, split: str = "train") -> Dataset:
    """Load an IDX image file (and optional label file).

    Unsigned-byte pixels are scaled to [0, 1]. Without a label file the labels
    are zeros.
    """
    images = read_idx(images_path)
    if images.dtype == np.uint8:
        inputs = images.astype(np.float64) / 255.0
    else:
        inputs = images.astype(np.float64)
    if labels_path is None:
        labels = np.zeros(len(inputs), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64)
    return Dataset(inputs, labels, split)


# -- CSV -----------------------------------------------------------------------------

def write_csv(path, ds: Dataset) -> Path:
    """Header ``x0..x{d-1},y``; one flattened sample per line."""
    path = Path(path)
    flat = ds.inputs.reshape(len(ds), -1)
    labels = ds.labels.reshape(len(ds), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + [f"y{i}" if labels.shape[1] > 1 else "y"
                                                              for i in range(labels.shape[1])])
        for xs, ys in zip(flat, labels):
            w.writerow([repr(float(v)) for v in xs] + [repr(v.item()) for v in ys])
    return path


def load_csv(path, split: str = "train", task: str = "regression") -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_y = sum(1 for h in header if h.startswith("y"))
    arr = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    inputs = arr[:, :len(header) - n_y]
    labels = arr[:, len(header) - n_y:]
    if task == "classification":
        labels = labels[:, 0].astype(np.int64)
    return Dataset(inputs, labels, split)


# -- manifests -----------------------------------------------------------------------------

def read_manifest(path) -> dict[str, Any]:
    """``key = value`` lines; relative paths resolve against the manifest's folder.

    Recognised keys: ``task``, ``<split>_images``, ``<split>_labels``,
    ``<split>_csv`` and ``input_shape`` (space separated ints).
    """
    path = Path(path)
    out: dict[str, Any] = {"task": "classification"}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.endswith(("_images", "_labels", "_csv")):
            out[key] = (path.parent / value).resolve()
        elif key == "input_shape":
            out[key] = tuple(int(v) for v in value.split())
        else:
            out[key] = value
    return out


def load_split(manifest: dict[str, Any], split: str) -> Dataset | None:
    if f"{split}_images" in manifest:
        ds = load_idx(manifest[f"{split}_images"], manifest.get(f"{split}_labels"), split)
    elif f"{split}_csv" in manifest:
        ds = load_csv(manifest[f"{split}_csv"], split, manifest.get("task", "classification"))
    else:
        return None
    if "input_shape" in manifest:
        ds.inputs = ds.inputs.reshape((len(ds),) + tuple(manifest["input_shape"]))
    return ds


def train_val_split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    """Seeded random hold-out of ``val_fraction`` of ``ds``."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(val_fraction * len(ds)))
    if n_val == 0:
        return ds, None
    perm = np.random.default_rng([seed, 7]).permutation(len(ds))
    return ds.subset(np.sort(perm[n_val:]), "train"), ds.subset(np.sort(perm[:n_val]), "val")


# -- preprocessing ---------------------------------------------------------------------------

def apply_normalization(ds: Dataset, mean: np.ndarray) -> Dataset:
    """Subtract ``mean`` unless ``ds`` already carries exactly this record."""
    if ds.feature_shape != mean.shape:
        raise ShapeError(f"feature shape {ds.feature_shape} != mean shape {mean.shape}")
    if ds.norm_mean is not None and np.array_equal(ds.norm_mean, mean):
        return ds
    return replace(ds, inputs=ds.inputs - mean, norm_mean=mean)


def mean_subtract(train: Dataset, others=()) -> tuple[Dataset, list[Dataset]]:
    """Subtract the per-feature training mean from ``train`` and every other split."""
    others = list(others)
    for o in others:
        if o.feature_shape != train.feature_shape:
            raise ShapeError(f"{o.split} feature shape {o.feature_shape} != train {train.feature_shape}")
    if train.norm_mean is not None:
        mean = train.norm_mean
        return train, [apply_normalization(o, mean) for o in others]
    mean = train.inputs.mean(axis=0)
    return apply_normalization(train, mean), [apply_normalization(o, mean) for o in others]


def sample_crop_flip(pad: int, rng) -> tuple[int, int, bool]:
    """Row offset, column offset in ``0..2*pad`` and a fair-coin flip flag."""
    rng = np.random.default_rng(rng)
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return int(dy), int(dx), bool(rng.random() < 0.5)


def crop_flip(img: np.ndarray, pad: int, dy: int, dx: int, flip: bool) -> np.ndarray:
    """Zero-pad a ``(C, H, W)`` image by ``pad``, crop ``H x W`` at ``(dy, dx)``, maybe mirror."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad))) if pad else img
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_crop_flip(img: np.ndarray, pad: int, rng, flip: bool | None = None) -> np.ndarray:
    """Random padded crop plus horizontal flip with probability 0.5.

    ``flip`` overrides the coin; with ``pad=0`` and ``flip=False`` this is the identity.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    dy, dx, coin = sample_crop_flip(pad, rng)
    return crop_flip(np.asarray(img), pad, dy, dx, coin if flip is None else flip)


def augment_batch(x: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment_crop_flip(img, pad, rng) for img in x])


# -- synthetic task ------------------------------------------------------------------------------

def random_apl_function(S: int, rng, x_range: tuple[float, float] = (-3.0, 3.0),
                        min_gap: float = 0.5, slope_range: tuple[float, float] = (0.3, 1.0)) -> AplParams1D:
    """Random APL unit with hinges well inside ``x_range`` and separated from each other and 0.

    Hinge slopes have magnitude in ``slope_range`` and random sign.
    """
    rng = np.random.default_rng(rng)
    lo, hi = x_range[0] + 1.0, x_range[1] - 1.0
    for _ in range(10_000):
        b = np.sort(rng.uniform(lo, hi, size=S))
        pts = np.sort(np.r_[b, 0.0])
        if S == 0 or np.min(np.diff(pts)) >= min_gap:
            break
    else:
        raise ValueError(f"cannot place {S} hinges {min_gap} apart in {x_range}")
    a = rng.uniform(*slope_range, size=S) * rng.choice([-1.0, 1.0], size=S)
    return AplParams1D(tuple(a), tuple(b))


def gen_synthetic_pwl_task(n: int, S_true: int, noise: float, seed, split: str = "train",
                           true_params: AplParams1D | None = None) -> Dataset:
    """Regression data ``y = h*(x) + N(0, noise^2)`` with ``x ~ U(-3, 3)``.

    ``h*`` is a random APL unit with ``S_true`` hinges (or ``true_params``),
    stored in ``meta['true_params']``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    h = true_params if true_params is not None else random_apl_function(S_true, rng)
    x = rng.uniform(-3.0, 3.0, size=(n, 1))
    y = eval_apl(h, x)
    if noise:
        y = y + rng.normal(0.0, noise, size=y.shape)
    return Dataset(x, y, split, meta={"true_params": h})
