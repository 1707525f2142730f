"""Hybrid splat-plus-textured-mesh avatars: rendering, fitting, pruning."""

from __future__ import annotations

import os

import torch

__version__ = "0.1.0"

_threads = os.environ.get("MESHSPLAT_THREADS")
if _threads:
    torch.set_num_threads(max(1, int(_threads)))
