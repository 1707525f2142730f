"""Procedural ground-truth scenes: articulated toy body, textures, fuzz, orbits.

Ground truth is rendered with the package's own hybrid renderer (a deliberate
inverse-crime setup: the target is the optimization and pruning machinery,
not sensor realism). Fuzz Gaussians are attached to tagged body regions so
tests can assert that pruning keeps splats where out-of-mesh content exists
and removes them over bare mesh.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidSpec
from .geometry import DTYPE, Camera, GaussianSet, polygon_frames
from .imgio import load_png_gray, load_png_rgb, save_png_gray, save_png_rgb
from .mesh import Pose, SkinnedMesh, Texture, load_obj_with_skeleton, save_obj, save_skeleton
from .splatting import build_pairs, project_gaussian_set, render_frame

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Scene specification
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    """Everything needed to deterministically build a synthetic scene."""

    body: str = "humanoid"              # "humanoid" or "chain"
    segments: int = 10                  # chain length when body == "chain"
    body_height: float = 1.6
    body_radius: float = 0.09
    texture_pattern: str = "checker"    # checker | stripes | noise
    texture_resolution: int = 64
    texture_color_min: float = 0.15
    texture_color_max: float = 0.9
    fuzz_count: int = 8
    fuzz_regions: tuple[str, ...] = ("head",)
    # offsets stay within ~1 triangle size so the annealed xyz rate can pull
    # a parent-polygon splat onto the blob instead of inflating it
    fuzz_offset_min: float = 0.04
    fuzz_offset_max: float = 0.09
    fuzz_scale: float = 0.9             # polygon-frame units
    fuzz_opacity: float = 0.95
    # dim fuzz: random stage-1 backgrounds make it easy to fit, while its
    # low contrast over black keeps the stage-3 photometric defense weak so
    # only the silhouette term decides its survival
    fuzz_color_min: float = 0.06
    fuzz_color_max: float = 0.22
    train_frames: int = 20
    test_frames: int = 4
    orbit_radius: float = 4.0
    orbit_height: float = 0.25
    image_size: int = 64
    anim_amplitude: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        if self.body not in ("humanoid", "chain"):
            raise InvalidSpec(f"unknown body '{self.body}'")
        if self.segments < 2:
            raise InvalidSpec("segment count must be >= 2")
        if self.train_frames < 1 or self.test_frames < 1:
            raise InvalidSpec("frame counts must be >= 1")
        if self.image_size < 32:
            raise InvalidSpec("image resolution must be >= 32")
        if not (0 < self.fuzz_offset_min <= self.fuzz_offset_max):
            raise InvalidSpec("fuzz offsets must be positive")
        if self.texture_pattern not in ("checker", "stripes", "noise"):
            raise InvalidSpec(f"unknown texture pattern '{self.texture_pattern}'")


# ---------------------------------------------------------------------------
# Toy body
# ---------------------------------------------------------------------------

_SECTORS = 8
_RINGS = 5


@dataclass
class ToyBody:
    """Skinned capsule-chain body plus per-triangle region tags."""

    mesh: SkinnedMesh
    segment_names: list[str]
    tri_segment: Tensor         # (T,) long, segment index per triangle

    def triangles_in_region(self, region: str) -> Tensor:
        idx = self.segment_names.index(region)
        return torch.nonzero(self.tri_segment == idx, as_tuple=False).squeeze(-1)


def _capsule(base, tip, radius, uv_cell, sectors=_SECTORS, rings=_RINGS):
    """Capped cylinder from base to tip with a cylindrical unwrap into uv_cell.

    The seam column is duplicated so uv interpolation never wraps. Returns
    (verts, tris, uv, axis_t) with axis_t the [0, 1] parameter along the axis
    used for skinning falloff.
    """
    base = np.asarray(base, dtype=np.float64)
    tip = np.asarray(tip, dtype=np.float64)
    axis = tip - base
    length = np.linalg.norm(axis)
    az = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(az[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    ax = np.cross(helper, az)
    ax /= np.linalg.norm(ax)
    ay = np.cross(az, ax)

    u0, v0, u1, v1 = uv_cell
    verts, uv, axis_t = [], [], []
    for ri in range(rings):
        t = ri / (rings - 1)
        center = base + axis * t
        for si in range(sectors + 1):
            phi = 2 * math.pi * si / sectors
            p = center + radius * (math.cos(phi) * ax + math.sin(phi) * ay)
            verts.append(p)
            uv.append([u0 + (u1 - u0) * si / sectors, v0 + (v1 - v0) * t])
            axis_t.append(t)
    cols = sectors + 1
    tris = []
    for ri in range(rings - 1):
        for si in range(sectors):
            a = ri * cols + si
            b = a + 1
            c = a + cols
            d = c + 1
            tris.append([a, b, c])
            tris.append([b, d, c])
    # pole caps
    bottom = len(verts)
    verts.append(base - az * radius * 0.6)
    uv.append([(u0 + u1) / 2, v0])
    axis_t.append(0.0)
    top = len(verts)
    verts.append(tip + az * radius * 0.6)
    uv.append([(u0 + u1) / 2, v1])
    axis_t.append(1.0)
    for si in range(sectors):
        tris.append([bottom, si + 1, si])
        last = (rings - 1) * cols
        tris.append([top, last + si, last + si + 1])
    return np.array(verts), np.array(tris, dtype=np.int64), np.array(uv), np.array(axis_t)


def _humanoid_segments(height: float, radius: float):
    """(name, parent_name, base, tip, radius) table; proportions of `height`."""
    h = height
    r = radius
    arm_y0, arm_y1, arm_y2 = 0.79 * h, 0.62 * h, 0.47 * h
    return [
        ("torso", None, (0, 0.47 * h, 0), (0, 0.81 * h, 0), 1.7 * r),
        ("head", "torso", (0, 0.84 * h, 0), (0, 0.985 * h, 0), 1.15 * r),
        ("arm_upper_l", "torso", (-0.11 * h, arm_y0, 0), (-0.24 * h, arm_y1, 0), 0.72 * r),
        ("arm_lower_l", "arm_upper_l", (-0.24 * h, arm_y1, 0), (-0.36 * h, arm_y2, 0), 0.6 * r),
        ("arm_upper_r", "torso", (0.11 * h, arm_y0, 0), (0.24 * h, arm_y1, 0), 0.72 * r),
        ("arm_lower_r", "arm_upper_r", (0.24 * h, arm_y1, 0), (0.36 * h, arm_y2, 0), 0.6 * r),
        ("leg_upper_l", "torso", (-0.055 * h, 0.47 * h, 0), (-0.065 * h, 0.25 * h, 0), 0.95 * r),
        ("leg_lower_l", "leg_upper_l", (-0.065 * h, 0.25 * h, 0), (-0.07 * h, 0.03 * h, 0), 0.72 * r),
        ("leg_upper_r", "torso", (0.055 * h, 0.47 * h, 0), (0.065 * h, 0.25 * h, 0), 0.95 * r),
        ("leg_lower_r", "leg_upper_r", (0.065 * h, 0.25 * h, 0), (0.07 * h, 0.03 * h, 0), 0.72 * r),
    ]


def _chain_segments(n: int, height: float, radius: float):
    seg_h = height / n
    out = []
    for i in range(n):
        parent = None if i == 0 else f"seg{i - 1}"
        out.append((f"seg{i}", parent, (0, i * seg_h, 0), (0, (i + 1) * seg_h - 0.2 * seg_h, 0), radius))
    return out


def build_toy_body(spec: SceneSpec) -> ToyBody:
    """Assemble the capsule-chain body with skinning weights and a UV atlas."""
    spec.validate()
    table = (
        _humanoid_segments(spec.body_height, spec.body_radius)
        if spec.body == "humanoid"
        else _chain_segments(spec.segments, spec.body_height, spec.body_radius)
    )
    names = [row[0] for row in table]
    name_to_joint = {n: i for i, n in enumerate(names)}
    parents = [(-1 if row[1] is None else name_to_joint[row[1]]) for row in table]

    grid_cols = math.ceil(math.sqrt(len(table)))
    grid_rows = math.ceil(len(table) / grid_cols)
    margin = 0.04

    all_v, all_t, all_uv, seg_of_tri = [], [], [], []
    weights_rows = []
    joint_positions = []
    offset = 0
    for si, (name, parent, base, tip, radius) in enumerate(table):
        col, row = si % grid_cols, si // grid_cols
        cell = (
            (col + margin) / grid_cols,
            (row + margin) / grid_rows,
            (col + 1 - margin) / grid_cols,
            (row + 1 - margin) / grid_rows,
        )
        v, t, uv, axis_t = _capsule(base, tip, radius, cell)
        joint_positions.append(base)
        all_v.append(v)
        all_uv.append(uv)
        all_t.append(t + offset)
        seg_of_tri.extend([si] * len(t))

        # near the base, blend toward the parent joint with a linear falloff
        w = np.zeros((len(v), len(table)))
        parent_j = parents[si]
        blend_zone = 0.3
        for vi, tt in enumerate(axis_t):
            if parent_j >= 0 and tt < blend_zone:
                wp = 0.5 * (1.0 - tt / blend_zone)
                w[vi, parent_j] = wp
                w[vi, si] = 1.0 - wp
            else:
                w[vi, si] = 1.0
        weights_rows.append(w)
        offset += len(v)

    mesh = SkinnedMesh(
        vertices=torch.as_tensor(np.concatenate(all_v), dtype=DTYPE),
        triangles=torch.as_tensor(np.concatenate(all_t)),
        uv=torch.as_tensor(np.clip(np.concatenate(all_uv), 0.0, 1.0), dtype=DTYPE),
        weights=torch.as_tensor(np.concatenate(weights_rows), dtype=DTYPE),
        joint_parents=parents,
        joint_positions=torch.as_tensor(np.array(joint_positions), dtype=DTYPE),
    )
    mesh.validate()
    return ToyBody(mesh=mesh, segment_names=names, tri_segment=torch.as_tensor(seg_of_tri))


# ---------------------------------------------------------------------------
# Ground-truth texture and fuzz
# ---------------------------------------------------------------------------

def make_texture(
    pattern: str, resolution: int, rng: np.random.Generator,
    lo: float = 0.15, hi: float = 0.9,
) -> Texture:
    """Deterministic GT texture in one of three pattern families."""
    res = resolution
    c1 = rng.uniform(lo, hi, size=3)
    c2 = rng.uniform(lo, hi, size=3)
    c3 = rng.uniform(lo, hi, size=3)
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    if pattern == "checker":
        block = max(res // 8, 1)
        mask = ((yy // block + xx // block) % 2).astype(np.float64)[:, :, None]
        img = c1 * mask + c2 * (1 - mask)
    elif pattern == "stripes":
        period = max(res // 6, 2)
        phase = (yy % period) / period
        img = np.where((phase < 0.5)[:, :, None], c1, c2)
        img = img + 0.15 * (hi - lo) * np.sin(2 * np.pi * xx / res)[:, :, None] * (c3 - 0.5)
    else:  # noise
        img = rng.uniform(lo, hi, size=(res, res, 3))
        for _ in range(2):  # cheap smoothing for learnable content
            img = 0.25 * (np.roll(img, 1, 0) + np.roll(img, -1, 0) + np.roll(img, 1, 1) + np.roll(img, -1, 1))
    return Texture(torch.as_tensor(np.clip(img, 0.0, 1.0), dtype=DTYPE))


def _make_fuzz(
    body: ToyBody, spec: SceneSpec, rng: np.random.Generator
) -> GaussianSet:
    """Out-of-mesh GT Gaussians on tagged regions, offset outward along normals."""
    candidates = []
    for region in spec.fuzz_regions:
        if region not in body.segment_names:
            raise InvalidSpec(f"fuzz region '{region}' not a body segment")
        candidates.append(body.triangles_in_region(region))
    pool = torch.cat(candidates)
    replace = spec.fuzz_count > len(pool)
    pick = rng.choice(len(pool), size=spec.fuzz_count, replace=bool(replace))
    parents = pool[torch.as_tensor(pick, dtype=torch.long)]

    _, _, scales = polygon_frames(body.mesh.vertices, body.mesh.triangles)
    k = scales[parents].numpy()
    z_off = rng.uniform(spec.fuzz_offset_min, spec.fuzz_offset_max, size=spec.fuzz_count) / k
    mu = np.stack(
        [
            rng.uniform(-0.3, 0.3, size=spec.fuzz_count),
            rng.uniform(-0.3, 0.3, size=spec.fuzz_count),
            z_off,
        ],
        axis=1,
    )
    log_scale = np.log(
        np.stack(
            [
                rng.uniform(0.7, 1.3, size=spec.fuzz_count) * spec.fuzz_scale,
                rng.uniform(0.7, 1.3, size=spec.fuzz_count) * spec.fuzz_scale,
                rng.uniform(0.4, 0.8, size=spec.fuzz_count) * spec.fuzz_scale,
            ],
            axis=1,
        )
    )
    colors = rng.uniform(spec.fuzz_color_min, spec.fuzz_color_max, size=(spec.fuzz_count, 3))
    return GaussianSet(
        parent=parents.clone(),
        mu=torch.as_tensor(mu, dtype=DTYPE),
        rot=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=DTYPE).repeat(spec.fuzz_count, 1),
        log_scale=torch.as_tensor(log_scale, dtype=DTYPE),
        color=torch.as_tensor(colors, dtype=DTYPE),
        opacity=torch.full((spec.fuzz_count,), spec.fuzz_opacity, dtype=DTYPE),
    )


# ---------------------------------------------------------------------------
# Cameras and animation
# ---------------------------------------------------------------------------

def look_at_camera(eye, target, size: int, focal: float) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Camera(
        fx=focal, fy=focal, cx=size / 2, cy=size / 2,
        rotation=torch.as_tensor(rot, dtype=DTYPE),
        translation=torch.as_tensor(-rot @ eye, dtype=DTYPE),
        width=size, height=size,
    )


def orbit_camera(spec: SceneSpec, azimuth_deg: float) -> Camera:
    center = np.array([0.0, spec.body_height * 0.55, 0.0])
    a = math.radians(azimuth_deg)
    eye = center + np.array(
        [spec.orbit_radius * math.sin(a), spec.orbit_height, spec.orbit_radius * math.cos(a)]
    )
    focal = 0.72 * spec.image_size * spec.orbit_radius / spec.body_height
    return look_at_camera(eye, center, spec.image_size, focal)


_SWING_JOINTS = {
    "arm_upper_l": (0.0, 0.0, 1.0, 1.0, 0.0),     # axis + (freq, phase) multipliers
    "arm_upper_r": (0.0, 0.0, -1.0, 1.0, math.pi),
    "leg_upper_l": (1.0, 0.0, 0.0, 1.0, math.pi),
    "leg_upper_r": (1.0, 0.0, 0.0, 1.0, 0.0),
    "head": (1.0, 0.0, 0.0, 2.0, 0.5),
}


def pose_at(body: ToyBody, spec: SceneSpec, tau: float) -> Pose:
    """Deterministic joint animation at curve parameter tau in [0, 1]."""
    rot = torch.zeros(len(body.segment_names), 3, dtype=DTYPE)
    amp = spec.anim_amplitude
    if spec.body == "chain":
        for j in range(1, len(body.segment_names)):
            angle = amp * math.sin(2 * math.pi * tau + 0.7 * j)
            rot[j, 2] = angle * (1 if j % 2 else -1)
    else:
        for name, (ax, ay, az, freq, phase) in _SWING_JOINTS.items():
            j = body.segment_names.index(name)
            angle = amp * math.sin(2 * math.pi * freq * tau + phase)
            rot[j, 0] = ax * angle
            rot[j, 1] = ay * angle
            rot[j, 2] = az * angle
    return Pose(rot)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class FrameRecord:
    """One GT frame: image over black, soft silhouette, camera and pose."""

    rgb: Tensor
    alpha: Tensor
    camera: Camera
    pose: Pose
    split: str
    index: int

    @property
    def mask(self) -> Tensor:
        """Binary silhouette: 1 where coverage or accumulated alpha > 0.5."""
        return (self.alpha > 0.5).to(DTYPE)


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    body: ToyBody
    gt_texture: Texture
    gt_fuzz: GaussianSet
    train: list[FrameRecord]
    test: list[FrameRecord]

    @property
    def mesh(self) -> SkinnedMesh:
        return self.body.mesh

    def fuzz_triangles(self) -> Tensor:
        return torch.unique(self.gt_fuzz.parent)


def _render_gt_frame(ds_body, texture, fuzz, pose, camera) -> tuple[Tensor, Tensor]:
    bundle = render_frame(fuzz, ds_body.mesh, texture, pose, camera, mode="hybrid")
    coverage = torch.isfinite(bundle.depth).to(DTYPE)
    sil = 1.0 - (1.0 - coverage) * (1.0 - bundle.alpha)
    return bundle.image.detach(), sil.detach()


def _frame_params(spec: SceneSpec):
    """(split, azimuth, tau) triples; train/test azimuths and taus are disjoint."""
    out = []
    for i in range(spec.train_frames):
        frac = i / spec.train_frames
        out.append(("train", 300.0 * frac, 0.75 * frac))
    for i in range(spec.test_frames):
        frac = i / spec.test_frames
        out.append(("test", 305.0 + 50.0 * frac, 0.82 + 0.16 * frac))
    return out


def _max_fuzz_alpha(ds_body, fuzz, frames_params, spec) -> Tensor:
    """Per-Gaussian max pair alpha over the given frames (after depth gating)."""
    best = torch.zeros(len(fuzz), dtype=DTYPE)
    for split, azimuth, tau in frames_params:
        pose = pose_at(ds_body, spec, tau)
        camera = orbit_camera(spec, azimuth)
        from .mesh import rasterize_mesh, skin

        raster = rasterize_mesh(skin(ds_body.mesh, pose), ds_body.mesh.triangles,
                                ds_body.mesh.uv, Texture.grey(4), camera)
        centers2d, cov2d, depths, in_front = project_gaussian_set(fuzz, ds_body.mesh, pose, camera)
        pairs = build_pairs(centers2d, cov2d, depths, in_front, raster.depth,
                            width=camera.width, height=camera.height)
        if len(pairs) == 0:
            continue
        alpha = (fuzz.opacity[pairs.gauss] * pairs.weight).detach()
        best.scatter_reduce_(0, pairs.gauss, alpha, reduce="amax")
    return best


def generate_dataset(spec: SceneSpec, observability_retries: int = 20) -> SyntheticDataset:
    """Build body, GT texture and fuzz, then render disjoint train/test frames.

    Fuzz offsets are resampled until every GT Gaussian reaches alpha > 0.1
    somewhere in the training split, so stage 3 always has photometric
    grounds to keep necessary splats.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    body = build_toy_body(spec)
    texture = make_texture(
        spec.texture_pattern, spec.texture_resolution, rng,
        lo=spec.texture_color_min, hi=spec.texture_color_max,
    )

    params = _frame_params(spec)
    train_params = [p for p in params if p[0] == "train"]
    fuzz = _make_fuzz(body, spec, rng) if spec.fuzz_count > 0 else GaussianSet.empty()
    if spec.fuzz_count > 0:
        for attempt in range(observability_retries):
            vis = _max_fuzz_alpha(body, fuzz, train_params, spec)
            if bool((vis > 0.1).all()):
                break
            hidden = vis <= 0.1
            refresh = _make_fuzz(body, spec, rng)
            for name in ("parent", "mu", "rot", "log_scale", "color", "opacity"):
                getattr(fuzz, name)[hidden] = getattr(refresh, name)[hidden]
        else:
            raise InvalidSpec("could not make every fuzz Gaussian observable")

    train, test = [], []
    for i, (split, azimuth, tau) in enumerate(params):
        pose = pose_at(body, spec, tau)
        camera = orbit_camera(spec, azimuth)
        rgb, sil = _render_gt_frame(body, texture, fuzz, pose, camera)
        rec = FrameRecord(rgb=rgb, alpha=sil, camera=camera, pose=pose, split=split, index=i)
        (train if split == "train" else test).append(rec)
    return SyntheticDataset(spec=spec, body=body, gt_texture=texture, gt_fuzz=fuzz, train=train, test=test)


# ---------------------------------------------------------------------------
# Disk format: numbered PNGs + JSON manifest + OBJ/skeleton sidecars
# ---------------------------------------------------------------------------

def _camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": [float(x) for x in cam.rotation.reshape(-1)],
        "translation": [float(x) for x in cam.translation],
        "width": cam.width, "height": cam.height,
    }


def _camera_from_dict(d: dict) -> Camera:
    return Camera(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        rotation=torch.tensor(d["rotation"], dtype=DTYPE).reshape(3, 3),
        translation=torch.tensor(d["translation"], dtype=DTYPE),
        width=d["width"], height=d["height"],
    )


def _pose_to_dict(pose: Pose) -> dict:
    d = {
        "joint_rotations": [float(x) for x in pose.joint_rotations.reshape(-1)],
        "root_translation": [float(x) for x in pose.root_translation],
    }
    if pose.shape_offsets is not None:
        d["shape_offsets"] = [float(x) for x in pose.shape_offsets]
    return d


def _pose_from_dict(d: dict) -> Pose:
    rot = torch.tensor(d["joint_rotations"], dtype=DTYPE).reshape(-1, 3)
    shape = d.get("shape_offsets")
    return Pose(
        rot,
        torch.tensor(d["root_translation"], dtype=DTYPE),
        None if shape is None else torch.tensor(shape, dtype=DTYPE),
    )


def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    save_obj(out / "body.obj", ds.mesh)
    save_skeleton(out / "body.skel.json", ds.mesh)

    frames_meta = []
    for rec in ds.train + ds.test:
        name = f"{rec.index:05d}.png"
        save_png_rgb(out / "frames" / name, rec.rgb)
        save_png_gray(out / "masks" / name, rec.alpha)
        frames_meta.append(
            {
                "index": rec.index,
                "split": rec.split,
                "image": f"frames/{name}",
                "mask": f"masks/{name}",
                "camera": _camera_to_dict(rec.camera),
                "pose": _pose_to_dict(rec.pose),
            }
        )
    save_png_rgb(out / "texture_gt.png", ds.gt_texture.texels)
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": dataclasses.asdict(ds.spec),
        "mesh": "body.obj",
        "skeleton": "body.skel.json",
        "segment_names": ds.body.segment_names,
        "tri_segment": [int(x) for x in ds.body.tri_segment],
        "fuzz": {
            "parent": [int(x) for x in ds.gt_fuzz.parent],
            "mu": [float(x) for x in ds.gt_fuzz.mu.reshape(-1)],
            "rot": [float(x) for x in ds.gt_fuzz.rot.reshape(-1)],
            "log_scale": [float(x) for x in ds.gt_fuzz.log_scale.reshape(-1)],
            "color": [float(x) for x in ds.gt_fuzz.color.reshape(-1)],
            "opacity": [float(x) for x in ds.gt_fuzz.opacity],
        },
        "frames": frames_meta,
    }
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(out / MANIFEST_NAME)


def load_dataset(root: str | Path) -> SyntheticDataset:
    """Load a dataset directory; images come back as float tensors from PNG.

    The GT texture is not reconstructible from disk (texture_gt.png is an
    8-bit preview), so the returned dataset carries a grey placeholder there;
    fuzz parameters round-trip exactly through the manifest.
    """
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise InvalidSpec(f"unsupported dataset manifest version {manifest.get('version')}")
    spec_d = manifest["spec"]
    spec_d["fuzz_regions"] = tuple(spec_d["fuzz_regions"])
    spec = SceneSpec(**spec_d)
    mesh = load_obj_with_skeleton(root / manifest["mesh"], root / manifest["skeleton"])
    body = ToyBody(
        mesh=mesh,
        segment_names=list(manifest["segment_names"]),
        tri_segment=torch.tensor(manifest["tri_segment"], dtype=torch.long),
    )
    fz = manifest["fuzz"]
    n_fuzz = len(fz["parent"])
    gt_fuzz = GaussianSet(
        parent=torch.tensor(fz["parent"], dtype=torch.long),
        mu=torch.tensor(fz["mu"], dtype=DTYPE).reshape(n_fuzz, 3),
        rot=torch.tensor(fz["rot"], dtype=DTYPE).reshape(n_fuzz, 4),
        log_scale=torch.tensor(fz["log_scale"], dtype=DTYPE).reshape(n_fuzz, 3),
        color=torch.tensor(fz["color"], dtype=DTYPE).reshape(n_fuzz, 3),
        opacity=torch.tensor(fz["opacity"], dtype=DTYPE),
    )
    train, test = [], []
    for meta in manifest["frames"]:
        rec = FrameRecord(
            rgb=load_png_rgb(root / meta["image"]),
            alpha=load_png_gray(root / meta["mask"]),
            camera=_camera_from_dict(meta["camera"]),
            pose=_pose_from_dict(meta["pose"]),
            split=meta["split"],
            index=meta["index"],
        )
        (train if rec.split == "train" else test).append(rec)
    return SyntheticDataset(
        spec=spec,
        body=body,
        gt_texture=Texture.grey(spec.texture_resolution),
        gt_fuzz=gt_fuzz,
        train=train,
        test=test,
    )
