"""8-bit PNG image I/O for datasets and previews."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .geometry import DTYPE


def to_uint8(img: Tensor) -> np.ndarray:
    arr = img.detach().clamp(0.0, 1.0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png_rgb(path: str | Path, img: Tensor) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(str(path))


def save_png_gray(path: str | Path, img: Tensor) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(str(path))


def load_png_rgb(path: str | Path) -> Tensor:
    arr = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float64) / 255.0
    return torch.as_tensor(arr, dtype=DTYPE)


def load_png_gray(path: str | Path) -> Tensor:
    arr = np.asarray(Image.open(str(path)).convert("L"), dtype=np.float64) / 255.0
    return torch.as_tensor(arr, dtype=DTYPE)
