"""Directory-of-tensors dataset format.

Each ``*.tensor`` file holds a 24-byte little-endian header followed by the
row-major payload::

    magic  b"FXTN"
    u8     dtype tag (0 = f32, 1 = u8)
    u8     rank (1..4)
    u16    reserved, zero
    4*u32  dims, unused trailing slots zero

An optional ``labels.tsv`` maps file names to class indices. Labels are kept
for reporting only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import DatasetError

MAGIC = b"FXTN"
HEADER = struct.Struct("<4sBBH4I")
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _DTYPE_TO_TAG:
        raise DatasetError(f"unsupported dtype {array.dtype}")
    if not 1 <= array.ndim <= 4:
        raise DatasetError(f"rank {array.ndim} outside 1..4")
    tag = _DTYPE_TO_TAG[array.dtype]
    dims = list(array.shape) + [0] * (4 - array.ndim)
    header = HEADER.pack(MAGIC, tag, array.ndim, 0, *dims)
    return header + np.ascontiguousarray(array, dtype=_TAG_TO_DTYPE[tag]).tobytes()


def decode_tensor(data: bytes, where: str = "<bytes>") -> np.ndarray:
    if len(data) < HEADER.size:
        raise DatasetError(f"{where}: truncated header")
    magic, tag, rank, _reserved, *dims = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetError(f"{where}: bad magic {magic!r}")
    if tag not in _TAG_TO_DTYPE or not 1 <= rank <= 4:
        raise DatasetError(f"{where}: bad dtype tag {tag} or rank {rank}")
    shape = tuple(dims[:rank])
    if any(d < 1 for d in shape):
        raise DatasetError(f"{where}: non-positive dim in {shape}")
    dtype = _TAG_TO_DTYPE[tag]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise DatasetError(f"{where}: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


@dataclass(frozen=True)
class Dataset:
    ids: tuple[str, ...]
    images: tuple[np.ndarray, ...]
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.images):
            raise DatasetError("ids and images differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("duplicate image ids")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.ids, self.images))

    def image(self, image_id: str) -> np.ndarray:
        return self.images[self.ids.index(image_id)]


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    files = sorted(directory.glob("*.tensor"))
    if not files:
        raise DatasetError(f"no *.tensor files in {directory}")
    labels: dict[str, int] = {}
    tsv = directory / "labels.tsv"
    if tsv.exists():
        for line in tsv.read_text().splitlines():
            if line.strip():
                name, label = line.split("\t")
                labels[Path(name).stem] = int(label)
    return Dataset(tuple(f.stem for f in files), tuple(read_tensor(f) for f in files), labels)


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id, image in dataset:
        write_tensor(directory / f"{image_id}.tensor", image)
    if dataset.labels:
        lines = [f"{i}.tensor\t{dataset.labels[i]}" for i in dataset.ids if i in dataset.labels]
        (directory / "labels.tsv").write_text("\n".join(lines) + "\n")
