from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..ir.model import ENTRY, GraphModel, PreprocessingConfig
from .kernels import F32


def resize_nearest(raw: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resample of an HWC image (pixel-centre sampling)."""
    h, w = raw.shape[:2]
    if (h, w) == (height, width):
        return raw
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return raw[rows][:, cols]


def apply_preprocessing(raw: np.ndarray, cfg: PreprocessingConfig,
                        size: tuple[int, int] | None = None) -> np.ndarray:
    """Affine normalisation of an ``H x W x 3`` image into a batch-of-one tensor.

    ``v = (raw * scale - mean[c]) / std[c]``, laid out as ``cfg.layout``.
    With ``size`` the image is first resampled to that (height, width).
    """
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ShapeError(ENTRY, f"expected H x W x 3 image, got {list(raw.shape)}")
    if size is not None:
        raw = resize_nearest(raw, *size)
    mean = np.asarray(cfg.mean, dtype=F32)
    std = np.asarray(cfg.std, dtype=F32)
    hwc = (raw.astype(F32) * F32(cfg.scale) - mean) / std
    if cfg.layout == "NCHW":
        return np.ascontiguousarray(hwc.transpose(2, 0, 1))[None]
    return hwc[None]


def prepare_input(raw: np.ndarray, model: GraphModel) -> np.ndarray:
    """Preprocess ``raw`` with the model's own config at the model's input size."""
    shape = model.input.shape
    size = model.input.spatial if len(shape) == 4 else None
    return apply_preprocessing(raw, model.preproc, size)
