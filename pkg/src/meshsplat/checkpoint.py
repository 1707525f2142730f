"""Versioned binary checkpoints: Gaussians, texture, per-frame poses, config.

Layout (all little-endian):

* 8-byte magic ``SPLATMSH``
* u32 format version, u32 stage tag
* u32 config length + flat config text (UTF-8)
* u32 Gaussian count, then per Gaussian: u32 parent index + 14 float32
  (mu xyz, quaternion wxyz, log-scale xyz, rgb, opacity)
* u32 texture width, u32 height, float32 RGB texels row-major
* u32 frame count, then per frame: u32 joint count, u32 shape length,
  float32 root xyz, float32 joint axis-angles, float32 shape offsets

Model data is quantized to float32 on write; loading and re-saving is
byte-identical.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainingConfig, config_from_text, config_to_text
from .errors import CheckpointError
from .geometry import DTYPE, GaussianSet
from .mesh import Pose, Texture

MAGIC = b"SPLATMSH"
FORMAT_VERSION = 1
GAUSSIAN_RECORD_BYTES = 4 + 14 * 4


@dataclass
class Checkpoint:
    """Complete trained state after one or more stages."""

    gaussians: GaussianSet
    texture: Texture
    poses: list[Pose]
    config: TrainingConfig
    stage: int

    def gaussian_bytes(self) -> int:
        return 4 + GAUSSIAN_RECORD_BYTES * len(self.gaussians)

    def texture_bytes(self) -> int:
        return 8 + 4 * self.texture.texels.numel()


def _f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4")


def quantize_to_storage(ckpt: Checkpoint) -> Checkpoint:
    """Round model data to float32 exactly as serialization would.

    Training resumes from checkpoints at stage boundaries; applying the same
    quantization to the live state keeps interrupted and uninterrupted runs
    on identical trajectories.
    """
    back = lambda a: torch.as_tensor(np.asarray(a, dtype="<f4").astype(np.float64), dtype=DTYPE)
    g = ckpt.gaussians
    return Checkpoint(
        gaussians=GaussianSet(
            parent=g.parent.clone(),
            mu=back(_f32(g.mu)),
            rot=back(_f32(g.rot)),
            log_scale=back(_f32(g.log_scale)),
            color=back(_f32(g.color)),
            opacity=back(_f32(g.opacity)),
        ),
        texture=Texture(back(_f32(ckpt.texture.texels))),
        poses=[
            Pose(
                back(_f32(p.joint_rotations)),
                back(_f32(p.root_translation)),
                None if p.shape_offsets is None else back(_f32(p.shape_offsets)),
            )
            for p in ckpt.poses
        ],
        config=ckpt.config,
        stage=ckpt.stage,
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Serialize atomically (write to a temp file, then rename)."""
    g = ckpt.gaussians
    n = len(g)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", FORMAT_VERSION, ckpt.stage)

    cfg_text = config_to_text(ckpt.config).encode("utf-8")
    out += struct.pack("<I", len(cfg_text)) + cfg_text

    out += struct.pack("<I", n)
    if n:
        records = np.zeros((n, 15), dtype="<f4")
        records[:, 0:3] = _f32(g.mu)
        records[:, 3:7] = _f32(g.rot)
        records[:, 7:10] = _f32(g.log_scale)
        records[:, 10:13] = _f32(g.color)
        records[:, 13] = _f32(g.opacity)
        parents = g.parent.numpy().astype("<u4")
        for i in range(n):
            out += struct.pack("<I", int(parents[i]))
            out += records[i, :14].tobytes()

    tex = ckpt.texture.texels
    out += struct.pack("<II", tex.shape[1], tex.shape[0])
    out += _f32(tex).tobytes()

    out += struct.pack("<I", len(ckpt.poses))
    for p in ckpt.poses:
        shape_len = 0 if p.shape_offsets is None else int(p.shape_offsets.numel())
        out += struct.pack("<II", p.num_joints, shape_len)
        out += _f32(p.root_translation).tobytes()
        out += _f32(p.joint_rotations).tobytes()
        if shape_len:
            out += _f32(p.shape_offsets).tobytes()

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stage = r.u32()
    cfg = config_from_text(r.take(r.u32()).decode("utf-8"))

    n = r.u32()
    parents = np.zeros(n, dtype=np.int64)
    vals = np.zeros((n, 14), dtype=np.float64)
    for i in range(n):
        parents[i] = r.u32()
        vals[i] = r.f32_array(14)
    gaussians = GaussianSet(
        parent=torch.as_tensor(parents),
        mu=torch.as_tensor(vals[:, 0:3], dtype=DTYPE),
        rot=torch.as_tensor(vals[:, 3:7], dtype=DTYPE),
        log_scale=torch.as_tensor(vals[:, 7:10], dtype=DTYPE),
        color=torch.as_tensor(vals[:, 10:13], dtype=DTYPE),
        opacity=torch.as_tensor(vals[:, 13], dtype=DTYPE),
    )

    w, h = r.u32(), r.u32()
    texture = Texture(torch.as_tensor(r.f32_array(w * h * 3).reshape(h, w, 3), dtype=DTYPE))

    poses = []
    for _ in range(r.u32()):
        joints, shape_len = r.u32(), r.u32()
        root = torch.as_tensor(r.f32_array(3), dtype=DTYPE)
        rots = torch.as_tensor(r.f32_array(3 * joints).reshape(joints, 3), dtype=DTYPE)
        shape = torch.as_tensor(r.f32_array(shape_len), dtype=DTYPE) if shape_len else None
        poses.append(Pose(rots, root, shape))

    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(gaussians=gaussians, texture=texture, poses=poses, config=cfg, stage=stage)
