"""Dataset loading: IDX (MNIST) and CSV matrices, row preconditioning, parity targets."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A data file exists but its contents cannot be parsed."""


class IdxFormatError(DataFormatError):
    pass


@dataclass(frozen=True)
class RawDataset:
    samples: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError("samples must be a matrix")
        object.__setattr__(self, "samples", samples)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if labels.shape[0] != samples.shape[0]:
                raise ValueError(f"{labels.shape[0]} labels for {samples.shape[0]} samples")
            object.__setattr__(self, "labels", labels)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def _read_idx(path: str | Path, magic: int) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < count:
        raise IdxFormatError(f"{path}: truncated payload ({len(data) - header} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path | None = None) -> RawDataset:
    """Read IDX image (and optionally label) files; ``.gz`` files are decompressed.

    Images are flattened row-wise and scaled to ``[0, 1]``.
    """
    images = _read_idx(images_path, IMAGES_MAGIC)
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != samples.shape[0]:
            raise IdxFormatError(f"{labels.shape[0]} labels for {samples.shape[0]} images")
    return RawDataset(samples, labels)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic ``0x08`` type byte, big-endian dims)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only uint8 IDX payloads are supported")
    head = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def precondition_rows(dataset: RawDataset | np.ndarray):
    """Center every row and scale it to unit Euclidean norm.

    Returns the same kind of object it was given.

    Raises
    ------
    ValueError
        If a row is constant (it would center to zero).
    """
    samples = dataset.samples if isinstance(dataset, RawDataset) else np.asarray(dataset, dtype=np.float64)
    centered = samples - samples.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    scale = np.max(np.abs(samples), axis=1)
    flat = norms <= 1e-12 * np.maximum(scale, 1e-300)
    if np.any(flat):
        raise ValueError(f"row {int(np.flatnonzero(flat)[0])} is constant and cannot be normalized")
    out = centered / norms[:, None]
    # One more centering pass removes the rounding left by the division.
    out -= out.mean(axis=1, keepdims=True)
    out /= np.linalg.norm(out, axis=1)[:, None]
    if isinstance(dataset, RawDataset):
        return RawDataset(out, dataset.labels)
    return out


def parity_target(dataset: RawDataset | np.ndarray) -> np.ndarray:
    """``+0.5`` for odd labels and ``-0.5`` for even ones."""
    labels = dataset.labels if isinstance(dataset, RawDataset) else dataset
    if labels is None:
        raise ValueError("dataset has no labels")
    labels = np.asarray(labels, dtype=np.int64)
    return np.where(labels % 2 == 1, 0.5, -0.5)


def load_csv_matrix(path: str | Path, skip_header: bool = False) -> np.ndarray:
    """Parse a rectangular numeric CSV file into a float matrix.

    Raises
    ------
    DataFormatError
        On ragged rows or non-numeric cells; the message names the line.
    """
    rows = []
    width = None
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if skip_header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def write_csv_matrix(path: str | Path, matrix) -> None:
    """Write a matrix as CSV with 17 significant digits (lossless for doubles)."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in matrix:
            w.writerow([format(v, ".17g") for v in row])


def load_matrix(path: str | Path, skip_header: bool = False) -> np.ndarray:
    """CSV or IDX matrix, chosen by file name."""
    name = Path(path).name.removesuffix(".gz")
    if name.endswith((".idx", "ubyte")):
        return load_idx(path).samples
    return load_csv_matrix(path, skip_header)
