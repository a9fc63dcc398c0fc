"""Dataset readers (IDX, CIFAR binary), synthetic batches and report writers."""
import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from gradsense.victim import LabeledBatch

__all__ = [
    "DataFormatError",
    "ImageSet",
    "SynthSpec",
    "read_idx",
    "parse_idx",
    "read_cifar_bin",
    "parse_cifar_bin",
    "synth_batch",
    "sample_batch",
    "write_image",
    "encode_image",
    "write_csv_report",
    "CSV_COLUMNS",
    "atomic_write_bytes",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32

CSV_COLUMNS = (
    "run_id", "method", "dataset", "batch_size", "arch", "strategy", "schedule_param",
    "alpha", "tv_weight", "iterations", "optimizer", "seed",
    "rmse_mean", "rmse_std", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
    "recr", "final_loss", "wall_time_s",
)


class DataFormatError(ValueError):
    """Malformed input; ``offset`` is a byte offset, ``record`` a record index."""

    def __init__(self, message, offset=None, record=None):
        self.offset = offset
        self.record = record
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if record is not None:
            where.append(f"record {record}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label exceeds num_classes")

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# IDX


def _idx_header(buf, expected_magic, what):
    if len(buf) < 4:
        raise DataFormatError(f"{what}: truncated magic number", offset=len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"{what}: bad magic, expected 0x{expected_magic:08X}, found 0x{magic:08X}", offset=0
        )
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise DataFormatError(f"{what}: truncated dimension fields", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if count > 2 ** 31:
            raise DataFormatError(f"{what}: dimension overflow", offset=4 + 4 * i)
    if len(buf) - end < count:
        raise DataFormatError(
            f"{what}: truncated data, need {count} bytes, have {len(buf) - end}", offset=len(buf)
        )
    return dims, np.frombuffer(buf, dtype=np.uint8, count=count, offset=end)


def parse_idx(image_bytes, label_bytes, num_classes=None):
    """Parse in-memory IDX image (rank 3) and label (rank 1) files."""
    dims, pixels = _idx_header(image_bytes, IDX_IMAGES_MAGIC, "images")
    n, rows, cols = dims
    ldims, labels = _idx_header(label_bytes, IDX_LABELS_MAGIC, "labels")
    if ldims[0] != n:
        raise DataFormatError(f"labels: count {ldims[0]} != image count {n}", offset=4)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    return ImageSet(images, labels, num_classes)


def read_idx(images_path, labels_path, num_classes=None):
    with open(images_path, "rb") as fi, open(labels_path, "rb") as fl:
        return parse_idx(fi.read(), fl.read(), num_classes)


# ---------------------------------------------------------------------------
# CIFAR


def parse_cifar_bin(buf, variant="cifar10"):
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    label_bytes = 1 if variant == "cifar10" else 2
    rec = label_bytes + CIFAR_PIXELS
    n, rem = divmod(len(buf), rec)
    if rem:
        raise DataFormatError(
            f"file length {len(buf)} is not a multiple of record size {rec}",
            offset=n * rec, record=n,
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return ImageSet(images, labels, 10 if variant == "cifar10" else 100)


def read_cifar_bin(path, variant="cifar10"):
    with open(path, "rb") as f:
        return parse_cifar_bin(f.read(), variant)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple = (1, 16, 16)
    num_classes: int = 10
    pattern: str = "blocks"
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or self.shape[1] < 4 or self.shape[2] < 4:
            raise ValueError(f"synthetic shape must be (C, H>=4, W>=4), got {self.shape}")
        if self.pattern not in ("blocks", "gradients-and-shapes"):
            raise ValueError(f"unknown synthetic pattern {self.pattern!r}")


def _blocks(rng, label, num_classes, c, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    img = np.empty((c, h, w))
    for ch in range(c):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[ch] = 0.25 + 0.1 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    # class-indexed rectangle: position from the label, size jittered
    cells = int(np.ceil(np.sqrt(num_classes)))
    cy, cx = divmod(label % (cells * cells), cells)
    bh = max(2, int(rng.integers(h // 3, h // 2 + 1)))
    bw = max(2, int(rng.integers(w // 3, w // 2 + 1)))
    top = min(int(cy * (h - bh) / max(cells - 1, 1)), h - bh)
    left = min(int(cx * (w - bw) / max(cells - 1, 1)), w - bw)
    img[:, top:top + bh, left:left + bw] = rng.uniform(0.7, 1.0, size=(c, 1, 1))
    return img


def _shapes(rng, label, num_classes, c, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    angle = 2 * np.pi * label / num_classes
    ramp = 0.5 + 0.5 * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5))
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    r = rng.uniform(0.15, 0.3)
    disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
    img = np.empty((c, h, w))
    for ch in range(c):
        img[ch] = 0.8 * ramp
        img[ch][disk] = rng.uniform(0.0, 1.0)
    return img


def synth_batch(spec, B):
    """Deterministic batch of B synthetic images, labels round-robin over classes."""
    if B < 1:
        raise ValueError("B must be >= 1")
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.shape
    draw = _blocks if spec.pattern == "blocks" else _shapes
    labels = np.arange(B) % spec.num_classes
    images = np.stack([draw(rng, int(y), spec.num_classes, c, h, w) for y in labels])
    return LabeledBatch(np.clip(images, 0.0, 1.0), labels)


def sample_batch(image_set, B, seed):
    """B distinct images drawn uniformly from an ImageSet."""
    if B > len(image_set):
        raise ValueError(f"dataset has {len(image_set)} images, cannot draw {B}")
    idx = np.random.default_rng(seed).choice(len(image_set), size=B, replace=False)
    return LabeledBatch(image_set.images[idx], image_set.labels[idx])


# ---------------------------------------------------------------------------
# writers


def atomic_write_bytes(path, data):
    """Write to a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_image(image):
    """Binary PGM (1 channel) or PPM (3 channels) bytes; values rounded half-up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"unsupported image shape {img.shape}; need 1 or 3 channels")
    c, h, w = img.shape
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes()


def write_image(image, path):
    atomic_write_bytes(path, encode_image(image))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_csv_report(rows, path):
    """CSV with the fixed column order, rows sorted by (method, seed)."""
    ordered = sorted(rows, key=lambda r: (str(r["method"]), int(r["seed"])))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in ordered:
        unknown = set(row) - set(CSV_COLUMNS)
        if unknown:
            raise ValueError(f"unknown CSV columns {sorted(unknown)}")
        writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
