"""Three-stage avatar fitting: splat training, texture training, opacity filtering.

Stage 1 fits Gaussian offsets, colors and per-frame pose/shape against
randomly backed splat-only renders (opacity pinned at 1). Stage 2 freezes
everything and fits the RGB texture through the mesh rasterizer. Stage 3
renders the hybrid composite, trains only opacity and color under the
opacity-vs-silhouette tug of war, then deletes every Gaussian whose opacity
ends below the threshold.

Stages 2 and 3 cache per-frame rasterization geometry: poses are frozen
there, so the pixel-to-triangle assignment (stage 2) and the splat pair
lists (stage 3) are constants and only the trainable quantities re-enter
the graph each iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .checkpoint import Checkpoint, quantize_to_storage
from .config import TrainingConfig
from .diffopt import AdamState, ParamGroup, Schedule, adam_step
from .errors import MissingSilhouettes, NonFiniteGradient, UnsupportedSubdivision
from .geometry import DTYPE, GaussianSet, gaussians_to_world, polygon_frames, quat_to_matrix
from .losses import (
    LossReport,
    dice_loss,
    knn_neighbor_indices,
    knn_regularizer,
    l2_loss,
    make_report,
    opacity_regularizer,
    psnr,
    sobel_loss,
    ssim_loss,
    ssim_metric,
    tv_regularizer,
    weighted_total,
)
from .mesh import Pose, SkinnedMesh, Texture, rasterize_mesh, sample_texture, skin
from .scenes import FrameRecord
from .splatting import (
    build_pairs,
    compose_pairs,
    project_gaussian_set,
    render_frame,
)

logger = logging.getLogger(__name__)

PREVIEW_EVERY = 500


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_gaussians(mesh: SkinnedMesh, subdivision: int = 1) -> GaussianSet:
    """One Gaussian per triangle (M=1) or center plus edge midpoints (M=4).

    Initial splats are grey, fully opaque and flattened along the surface
    normal (frame-space scale 0.5, 0.5, 0.1).
    """
    if subdivision not in (1, 4):
        raise UnsupportedSubdivision(f"subdivision must be 1 or 4, got {subdivision}")
    t = mesh.triangles.shape[0]
    centers, quats, scales = polygon_frames(mesh.vertices, mesh.triangles)

    if subdivision == 1:
        parent = torch.arange(t, dtype=torch.long)
        mu = torch.zeros(t, 3, dtype=DTYPE)
    else:
        v0 = mesh.vertices[mesh.triangles[:, 0]]
        v1 = mesh.vertices[mesh.triangles[:, 1]]
        v2 = mesh.vertices[mesh.triangles[:, 2]]
        mids = torch.stack([(v0 + v1) / 2, (v1 + v2) / 2, (v2 + v0) / 2], dim=1)  # (T,3,3)
        rot_t = quat_to_matrix(quats).transpose(-1, -2)                           # world->frame
        local = torch.einsum("tab,tmb->tma", rot_t, mids - centers[:, None, :])
        local = local / scales[:, None, None]
        mu = torch.cat([torch.zeros(t, 1, 3, dtype=DTYPE), local], dim=1).reshape(-1, 3)
        parent = torch.arange(t, dtype=torch.long).repeat_interleave(4)

    n = parent.shape[0]
    return GaussianSet(
        parent=parent,
        mu=mu,
        rot=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=DTYPE).repeat(n, 1),
        log_scale=torch.log(torch.tensor([[0.5, 0.5, 0.1]], dtype=DTYPE)).repeat(n, 1),
        color=torch.full((n, 3), 0.5, dtype=DTYPE),
        opacity=torch.ones(n, dtype=DTYPE),
    )


# ---------------------------------------------------------------------------
# Shared fitting utilities
# ---------------------------------------------------------------------------

class _Batcher:
    """Deterministic epoch-shuffled frame batches."""

    def __init__(self, num_frames: int, batch_size: int, rng: np.random.Generator):
        self.n = num_frames
        self.k = min(batch_size, num_frames)
        self.rng = rng
        self._order: list[int] = []

    def next(self) -> list[int]:
        if len(self._order) < self.k:
            self._order = list(self.rng.permutation(self.n))
        batch, self._order = self._order[: self.k], self._order[self.k :]
        return batch


def _step_groups(groups: list[ParamGroup], states: dict[str, AdamState]) -> None:
    for group in groups:
        try:
            adam_step(group, states[group.name])
        except NonFiniteGradient:
            logger.warning("skipped %s update on a non-finite gradient", group.name)


def _rest_frame_data(mesh: SkinnedMesh):
    return polygon_frames(mesh.vertices, mesh.triangles)


def _rest_centers(gaussians_mu, gaussians_rot, gaussians_log_scale, parent, rest):
    centers, quats, scales = rest
    mu_w, _, _ = gaussians_to_world(
        gaussians_mu.detach(), gaussians_rot.detach(), gaussians_log_scale.detach(),
        centers[parent], quats[parent], scales[parent],
    )
    return mu_w


# ---------------------------------------------------------------------------
# Stage 1: splat-only fitting with random backgrounds
# ---------------------------------------------------------------------------

def stage1_fit(
    frames: list[FrameRecord],
    mesh: SkinnedMesh,
    config: TrainingConfig,
    gaussians: GaussianSet | None = None,
    iterations: int | None = None,
    log_fn=None,
    preview_fn=None,
) -> tuple[GaussianSet, list[Pose]]:
    """Optimize local splat transforms, colors and per-frame pose/shape.

    Opacity stays pinned at 1 so photometric error propagates into the pose
    instead of fading splats out. Every iteration draws one uniform random
    background color shared by the batch; ground truth is composited onto it
    through the stored silhouette.
    """
    iterations = config.iters_stage1 if iterations is None else iterations
    rng = np.random.default_rng([config.seed, 1])
    if gaussians is None:
        gaussians = init_gaussians(mesh, config.subdivision)

    mu = gaussians.mu.detach().clone().requires_grad_(True)
    rot = gaussians.rot.detach().clone().requires_grad_(True)
    log_scale = gaussians.log_scale.detach().clone().requires_grad_(True)
    color = gaussians.color.detach().clone().requires_grad_(True)
    opacity = torch.ones(len(gaussians), dtype=DTYPE)
    parent = gaussians.parent.clone()

    num_v = mesh.vertices.shape[0]
    pose_rot = torch.stack([f.pose.joint_rotations for f in frames]).clone().requires_grad_(True)
    pose_root = torch.stack([f.pose.root_translation for f in frames]).clone().requires_grad_(True)
    pose_shape = torch.zeros(len(frames), num_v, dtype=DTYPE).requires_grad_(True)
    for i, f in enumerate(frames):
        if f.pose.shape_offsets is not None:
            with torch.no_grad():
                pose_shape[i] = f.pose.shape_offsets

    sched = Schedule(config.lr_xyz_start, config.lr_xyz_end, max(iterations, 1))
    # per-vertex shape offsets are far more flexible than the pose joints, so
    # they step 10x slower to keep the mesh from absorbing splat content
    groups = [
        ParamGroup("gauss_xyz", [mu], config.lr_xyz_start, schedule=sched),
        ParamGroup("gauss_rotation", [rot], config.lr_rotation),
        ParamGroup("gauss_scaling", [log_scale], config.lr_scaling),
        ParamGroup("gauss_color", [color], config.lr_color),
        ParamGroup("pose", [pose_rot, pose_root], config.lr_pose),
        ParamGroup("pose_shape", [pose_shape], 0.1 * config.lr_pose),
    ]
    states = {g.name: AdamState.for_group(g) for g in groups}

    rest = _rest_frame_data(mesh)
    rest_scales = rest[2].detach()
    batcher = _Batcher(len(frames), config.batch_size, rng)
    lambdas = config.lambdas()
    neighbor_idx = None
    # pose gradients are unreliable while the splats are still grey blobs;
    # holding pose for the first 10% of iterations prevents early warping
    pose_warmup = iterations // 10

    for it in range(iterations):
        live = GaussianSet(parent, mu, rot, log_scale, color, opacity)
        if it % config.knn_refresh == 0:
            centers_now = _rest_centers(mu, rot, log_scale, parent, rest)
            neighbor_idx = knn_neighbor_indices(centers_now, config.knn_k)

        bg = rng.uniform(size=3)
        batch = batcher.next()
        l2s, ssims, sobels = [], [], []
        for fi in batch:
            rec = frames[fi]
            pose = Pose(pose_rot[fi], pose_root[fi], pose_shape[fi])
            bundle = render_frame(
                live, mesh, _DUMMY_TEX, pose, rec.camera,
                mode="gaussians_only", background=tuple(bg),
            )
            bg_img = torch.as_tensor(bg, dtype=DTYPE).expand(rec.rgb.shape)
            gt = rec.rgb + bg_img * (1.0 - rec.alpha)[:, :, None]
            l2s.append(l2_loss(bundle.image, gt))
            ssims.append(ssim_loss(bundle.image, gt))
            sobels.append(sobel_loss(bundle.image, gt))

        terms = {
            "l2": torch.stack(l2s).mean(),
            "ssim": torch.stack(ssims).mean(),
            "sobel": torch.stack(sobels).mean(),
            "knn": knn_regularizer(live, config.knn_k, None, rest_scales, neighbor_idx),
        }
        total = weighted_total(terms, lambdas, 1)
        total.backward()
        if it < pose_warmup:
            for g in groups:
                if g.name.startswith("pose"):
                    for t in g.tensors:
                        if t.grad is not None:
                            t.grad.zero_()
        _step_groups(groups, states)

        if log_fn is not None:
            log_fn(make_report(terms, lambdas, 1, iteration=it))
        if preview_fn is not None and (it % PREVIEW_EVERY == 0 or it == iterations - 1):
            with torch.no_grad():
                snapshot = GaussianSet(parent, mu, rot, log_scale, color, opacity)
                rec = frames[0]
                preview_fn(1, it, render_frame(
                    snapshot, mesh, _DUMMY_TEX, Pose(pose_rot[0], pose_root[0], pose_shape[0]),
                    rec.camera, mode="gaussians_only", background=(0.0, 0.0, 0.0)))

    out_poses = [
        Pose(pose_rot[i].detach().clone(), pose_root[i].detach().clone(), pose_shape[i].detach().clone())
        for i in range(len(frames))
    ]
    result = GaussianSet(
        parent, mu.detach(), rot.detach(), log_scale.detach(), color.detach(), opacity
    )
    return result, out_poses


_DUMMY_TEX = Texture.grey(2)


# ---------------------------------------------------------------------------
# Stage 2: texture fitting on frozen geometry
# ---------------------------------------------------------------------------

def stage2_fit_texture(
    frames: list[FrameRecord],
    mesh: SkinnedMesh,
    poses: list[Pose],
    config: TrainingConfig,
    iterations: int | None = None,
    log_fn=None,
    preview_fn=None,
) -> Texture:
    """Fit the RGB texture with mesh-only renders; only texels get gradients."""
    iterations = config.iters_stage2 if iterations is None else iterations
    rng = np.random.default_rng([config.seed, 2])
    res = config.texture_resolution
    texels = torch.full((res, res, 3), 0.5, dtype=DTYPE).requires_grad_(True)

    # pose and camera are frozen: cache pixel-to-surface assignments per frame
    caches = []
    with torch.no_grad():
        for rec, pose in zip(frames, poses):
            raster = rasterize_mesh(skin(mesh, pose), mesh.triangles, mesh.uv, _DUMMY_TEX, rec.camera)
            caches.append((raster.pixels, raster.uv.detach().clone()))

    group = ParamGroup("texture", [texels], config.lr_texture)
    states = {"texture": AdamState.for_group(group)}
    batcher = _Batcher(len(frames), config.batch_size, rng)
    lambdas = config.lambdas()

    h, w = frames[0].rgb.shape[:2]
    for it in range(iterations):
        batch = batcher.next()
        l2s, ssims = [], []
        for fi in batch:
            rec = frames[fi]
            pix, uv = caches[fi]
            pred = torch.zeros(h * w, 3, dtype=DTYPE)
            if pix.numel():
                pred = pred.index_put((pix,), sample_texture(Texture(texels), uv))
            pred = pred.reshape(h, w, 3)
            l2s.append(l2_loss(pred, rec.rgb))
            ssims.append(ssim_loss(pred, rec.rgb))
        terms = {
            "l2": torch.stack(l2s).mean(),
            "ssim": torch.stack(ssims).mean(),
            "tv": tv_regularizer(texels),
        }
        total = weighted_total(terms, lambdas, 2)
        total.backward()
        _step_groups([group], states)

        if log_fn is not None:
            log_fn(make_report(terms, lambdas, 2, iteration=it))
        if preview_fn is not None and (it % PREVIEW_EVERY == 0 or it == iterations - 1):
            with torch.no_grad():
                rec = frames[0]
                preview_fn(2, it, render_frame(
                    GaussianSet.empty(), mesh, Texture(texels.detach().clone()),
                    poses[0], rec.camera, mode="mesh_only"))

    return Texture(texels.detach().clone())


# ---------------------------------------------------------------------------
# Stage 3: hybrid fine-tuning and opacity filtering
# ---------------------------------------------------------------------------

def stage3_filter(
    frames: list[FrameRecord],
    mesh: SkinnedMesh,
    gaussians: GaussianSet,
    texture: Texture,
    poses: list[Pose],
    config: TrainingConfig,
    iterations: int | None = None,
    log_fn=None,
    preview_fn=None,
) -> GaussianSet:
    """Train opacity and color on the hybrid composite, then prune.

    The opacity regularizer pushes every splat toward deletion while the
    silhouette Dice term defends splats that cover out-of-mesh content;
    geometry, texture and poses stay frozen. After the last iteration every
    Gaussian with opacity below the threshold is removed.
    """
    iterations = config.iters_stage3 if iterations is None else iterations
    rng = np.random.default_rng([config.seed, 3])
    for rec in frames:
        if rec.alpha is None:
            raise MissingSilhouettes(f"frame {rec.index} has no silhouette mask")

    color = gaussians.color.detach().clone().requires_grad_(True)
    opacity = gaussians.opacity.detach().clone().requires_grad_(True)
    frozen = GaussianSet(
        gaussians.parent, gaussians.mu.detach(), gaussians.rot.detach(),
        gaussians.log_scale.detach(), color, opacity,
    )

    # geometry, texture and poses are frozen: cache mesh renders and splat
    # pair lists once; only opacity/color re-enter the graph per iteration
    caches = []
    with torch.no_grad():
        for rec, pose in zip(frames, poses):
            raster = rasterize_mesh(skin(mesh, pose), mesh.triangles, mesh.uv, texture, rec.camera)
            centers2d, cov2d, depths, in_front = project_gaussian_set(frozen, mesh, pose, rec.camera)
            pairs = build_pairs(centers2d, cov2d, depths, in_front, raster.depth,
                                width=rec.camera.width, height=rec.camera.height)
            pairs.weight = pairs.weight.detach().clone()
            caches.append((pairs, raster.rgb.detach().clone(), raster.depth.detach().clone()))

    groups = [
        ParamGroup("gauss_color", [color], config.lr_color),
        ParamGroup("gauss_opacity", [opacity], config.lr_opacity),
    ]
    states = {g.name: AdamState.for_group(g) for g in groups}

    rest = _rest_frame_data(mesh)
    rest_scales = rest[2].detach()
    centers_rest = _rest_centers(frozen.mu, frozen.rot, frozen.log_scale, frozen.parent, rest)
    neighbor_idx = knn_neighbor_indices(centers_rest, config.knn_k)

    batcher = _Batcher(len(frames), config.batch_size, rng)
    lambdas = config.lambdas()

    for it in range(iterations):
        batch = batcher.next()
        l2s, ssims, sobels, dices = [], [], [], []
        for fi in batch:
            rec = frames[fi]
            pairs, mesh_rgb, depth = caches[fi]
            blended, alpha_map, _ = compose_pairs(pairs, color, opacity, mesh_rgb)
            l2s.append(l2_loss(blended, rec.rgb))
            ssims.append(ssim_loss(blended, rec.rgb))
            sobels.append(sobel_loss(blended, rec.rgb))
            dices.append(dice_loss(rec.mask, depth, alpha_map))
        terms = {
            "l2": torch.stack(l2s).mean(),
            "ssim": torch.stack(ssims).mean(),
            "sobel": torch.stack(sobels).mean(),
            "knn": knn_regularizer(frozen, config.knn_k, None, rest_scales, neighbor_idx),
            "opacity": opacity_regularizer(frozen),
            "dice": torch.stack(dices).mean(),
        }
        total = weighted_total(terms, lambdas, 3)
        total.backward()
        _step_groups(groups, states)

        if log_fn is not None:
            log_fn(make_report(terms, lambdas, 3, iteration=it))
        if preview_fn is not None and (it % PREVIEW_EVERY == 0 or it == iterations - 1):
            with torch.no_grad():
                snapshot = GaussianSet(
                    frozen.parent, frozen.mu, frozen.rot, frozen.log_scale,
                    color.detach().clone(), opacity.detach().clone(),
                )
                rec = frames[0]
                preview_fn(3, it, render_frame(snapshot, mesh, texture, poses[0], rec.camera, mode="hybrid"))

    trained = GaussianSet(
        frozen.parent, frozen.mu, frozen.rot, frozen.log_scale,
        color.detach(), opacity.detach(),
    )
    keep = trained.opacity >= config.prune_threshold
    pruned = trained.subset(keep)
    logger.info("stage 3 pruned %d of %d gaussians", len(trained) - len(pruned), len(trained))
    return pruned


# ---------------------------------------------------------------------------
# Test-time pose refinement
# ---------------------------------------------------------------------------

def refine_pose_test_time(
    frame: FrameRecord,
    checkpoint: Checkpoint,
    mesh: SkinnedMesh,
    iterations: int = 50,
    lr: float | None = None,
    initial_pose: Pose | None = None,
) -> Pose:
    """Refine one frame's pose photometrically with appearance frozen.

    Optimizes joint rotations and root translation against the stage-1
    photometric terms (no regularizers) on hybrid renders; shape offsets are
    kept fixed.
    """
    config = checkpoint.config
    start = initial_pose if initial_pose is not None else frame.pose
    rot = start.joint_rotations.detach().clone().requires_grad_(True)
    root = start.root_translation.detach().clone().requires_grad_(True)
    shape = None if start.shape_offsets is None else start.shape_offsets.detach().clone()

    group = ParamGroup("pose", [rot, root], lr if lr is not None else config.lr_pose)
    states = {"pose": AdamState.for_group(group)}
    lam = config.lambdas()

    for _ in range(iterations):
        pose = Pose(rot, root, shape)
        bundle = render_frame(checkpoint.gaussians, mesh, checkpoint.texture, pose, frame.camera, mode="hybrid")
        loss = (
            l2_loss(bundle.image, frame.rgb)
            + lam["ssim"] * ssim_loss(bundle.image, frame.rgb)
            + lam["sobel"] * sobel_loss(bundle.image, frame.rgb)
        )
        loss.backward()
        _step_groups([group], states)

    return Pose(rot.detach().clone(), root.detach().clone(), shape)


# ---------------------------------------------------------------------------
# Reporting and orchestration
# ---------------------------------------------------------------------------

@dataclass
class ModelReport:
    gaussian_count: int
    gaussian_bytes: int
    texture_bytes: int
    total_bytes: int
    psnr_mean: float
    ssim_mean: float
    per_frame_psnr: list[float]
    mean_neighbor_distance: float | None

    def as_dict(self) -> dict:
        return {
            "gaussian_count": self.gaussian_count,
            "gaussian_bytes": self.gaussian_bytes,
            "texture_bytes": self.texture_bytes,
            "total_bytes": self.total_bytes,
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "mean_neighbor_distance": self.mean_neighbor_distance,
        }


def report_model(checkpoint: Checkpoint, mesh: SkinnedMesh, frames: list[FrameRecord]) -> ModelReport:
    """Count, serialized size, render quality and a 6-NN density summary."""
    g = checkpoint.gaussians
    per_psnr, per_ssim = [], []
    with torch.no_grad():
        for rec in frames:
            bundle = render_frame(g, mesh, checkpoint.texture, rec.pose, rec.camera, mode="hybrid")
            per_psnr.append(psnr(bundle.image, rec.rgb))
            per_ssim.append(float(ssim_metric(bundle.image, rec.rgb)))

    density = None
    if len(g) >= 7:
        rest = polygon_frames(mesh.vertices, mesh.triangles)
        centers = _rest_centers(g.mu, g.rot, g.log_scale, g.parent, rest)
        idx = knn_neighbor_indices(centers, 6)
        dists = torch.linalg.norm(centers[idx] - centers[:, None, :], dim=-1)
        density = float(dists.mean())

    return ModelReport(
        gaussian_count=len(g),
        gaussian_bytes=checkpoint.gaussian_bytes(),
        texture_bytes=checkpoint.texture_bytes(),
        total_bytes=checkpoint.gaussian_bytes() + checkpoint.texture_bytes(),
        psnr_mean=float(np.mean(per_psnr)) if per_psnr else float("nan"),
        ssim_mean=float(np.mean(per_ssim)) if per_ssim else float("nan"),
        per_frame_psnr=per_psnr,
        mean_neighbor_distance=density,
    )


def run_pipeline(
    frames: list[FrameRecord],
    mesh: SkinnedMesh,
    config: TrainingConfig,
    stages: tuple[int, ...] = (1, 2, 3),
    start: Checkpoint | None = None,
    log_fn=None,
    preview_fn=None,
    stage_done_fn=None,
) -> Checkpoint:
    """Run the requested stages in order, quantizing state at each boundary.

    Boundary quantization matches a checkpoint save/load round trip exactly,
    so a run resumed from a stage checkpoint follows the same trajectory as
    an uninterrupted one.
    """
    if start is not None:
        ckpt = start
        stages = tuple(s for s in stages if s > start.stage)
    else:
        ckpt = Checkpoint(
            gaussians=init_gaussians(mesh, config.subdivision),
            texture=Texture.grey(config.texture_resolution),
            poses=[f.pose.clone() for f in frames],
            config=config,
            stage=0,
        )
        ckpt = quantize_to_storage(ckpt)

    for stage in stages:
        if stage == 1:
            gaussians, poses = stage1_fit(
                frames, mesh, config, gaussians=ckpt.gaussians,
                log_fn=log_fn, preview_fn=preview_fn,
            )
            ckpt = Checkpoint(gaussians, ckpt.texture, poses, config, stage=1)
        elif stage == 2:
            texture = stage2_fit_texture(
                frames, mesh, ckpt.poses, config, log_fn=log_fn, preview_fn=preview_fn
            )
            ckpt = Checkpoint(ckpt.gaussians, texture, ckpt.poses, config, stage=2)
        elif stage == 3:
            pruned = stage3_filter(
                frames, mesh, ckpt.gaussians, ckpt.texture, ckpt.poses, config,
                log_fn=log_fn, preview_fn=preview_fn,
            )
            ckpt = Checkpoint(pruned, ckpt.texture, ckpt.poses, config, stage=3)
        else:
            raise ValueError(f"unknown stage {stage}")
        ckpt = quantize_to_storage(ckpt)
        if stage_done_fn is not None:
            stage_done_fn(stage, ckpt)
    return ckpt
