"""Reference interpreter for the graph IR."""

from .dataset import Dataset, load_dataset, read_tensor, save_dataset, write_tensor
from .kernels import KERNELS, run_kernel
from .preprocess import apply_preprocessing, prepare_input, resize_nearest
from .runtime import ActivationTrace, LabelRanking, execute, infer, infer_shapes, infer_traced

__all__ = [
    "KERNELS", "ActivationTrace", "Dataset", "LabelRanking", "apply_preprocessing", "execute",
    "infer", "infer_shapes", "infer_traced", "load_dataset", "prepare_input", "read_tensor",
    "resize_nearest", "run_kernel", "save_dataset", "write_tensor",
]
