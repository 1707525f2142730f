"""Depth-conditioned Gaussian rasterization and mesh compositing.

The production compositor vectorizes the classic tile/bbox culling scheme:
pairs (gaussian, pixel) are built from 3-sigma screen bounding boxes, sorted
by (pixel, global depth rank) and blended front-to-back with a segmented
prefix product. A Gaussian's alpha is zeroed wherever its center depth
exceeds the mesh depth map, so splats inside or behind the body never render.

``composite_naive`` is the independent brute-force reference used by the
oracle tests: plain numpy, per-pixel loop over every Gaussian, no culling,
no early-out.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import DimensionMismatch
from .geometry import (
    DTYPE,
    Camera,
    GaussianSet,
    gaussians_to_world,
    polygon_frames,
    project_gaussians,
    world_covariance,
)
from .mesh import DEPTH_INF, MeshRaster, Pose, SkinnedMesh, Texture, rasterize_mesh, skin

ALPHA_CLAMP = 0.99
CUTOFF_MAHALANOBIS = 9.0          # 3-sigma ellipse
# Sequential renderers may stop once transmittance falls below this; the
# default keeps compositing exact so the tiled path matches the brute-force
# reference to float precision.
DEFAULT_EARLY_OUT = 0.0


# ---------------------------------------------------------------------------
# Spec-level scalar operations (unit-testable building blocks)
# ---------------------------------------------------------------------------

def splat_alpha(opacity: float, center2d, cov2d, pixel) -> float:
    """Alpha of one Gaussian at one pixel: opacity times the attenuation.

    Zero outside the 3-sigma ellipse; clamped to 0.99 for compositing
    stability.
    """
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(center2d, dtype=np.float64)
    m = float(d @ np.linalg.inv(np.asarray(cov2d, dtype=np.float64)) @ d)
    if m > CUTOFF_MAHALANOBIS:
        return 0.0
    return min(float(opacity) * math.exp(-0.5 * m), ALPHA_CLAMP)


def depth_mask(alpha: float, gaussian_depth: float, mesh_depth: float) -> float:
    """Zero the alpha when the Gaussian center lies behind the mesh surface."""
    return 0.0 if gaussian_depth > mesh_depth else alpha


# ---------------------------------------------------------------------------
# Pair construction and segmented compositing
# ---------------------------------------------------------------------------

@dataclass
class SplatPairs:
    """(gaussian, pixel) pairs surviving culling, sorted front-to-back per pixel.

    ``weight`` is the spatial attenuation exp(-m/2), differentiable w.r.t.
    the projected geometry; opacity is applied later so the pair set can be
    cached while opacity and color keep training.
    """

    gauss: Tensor       # (P,) long
    pix: Tensor         # (P,) long flat pixel index
    weight: Tensor      # (P,)
    width: int
    height: int
    num_gaussians: int

    def __len__(self) -> int:
        return int(self.gauss.shape[0])


def build_pairs(
    centers2d: Tensor,
    cov2d: Tensor,
    depths: Tensor,
    in_front: Tensor,
    depth_map: Tensor | None,
    width: int,
    height: int,
) -> SplatPairs:
    """Cull Gaussians to their 3-sigma pixel boxes and order them for blending.

    The depth gate (center depth > mesh depth at the pixel) and the 3-sigma
    cutoff are hard, non-differentiable masks evaluated on detached values.
    """
    n = int(centers2d.shape[0])
    empty = SplatPairs(
        torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
        torch.zeros(0, dtype=DTYPE), width, height, n,
    )
    if n == 0:
        return empty

    # discrete pair construction in numpy (bbox culling, depth gate, sorting);
    # only the Mahalanobis weight below carries gradients
    c = centers2d.detach().numpy()
    diag = np.stack([cov2d.detach().numpy()[:, 0, 0], cov2d.detach().numpy()[:, 1, 1]], axis=1)
    radii = 3.0 * np.sqrt(diag) + 1.0
    x0 = np.clip(np.floor(c[:, 0] - radii[:, 0]), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(c[:, 0] + radii[:, 0]), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(c[:, 1] - radii[:, 1]), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(c[:, 1] + radii[:, 1]), 0, height - 1).astype(np.int64)
    on_screen = (
        in_front.numpy()
        & (c[:, 0] + radii[:, 0] >= 0) & (c[:, 0] - radii[:, 0] <= width - 1)
        & (c[:, 1] + radii[:, 1] >= 0) & (c[:, 1] - radii[:, 1] <= height - 1)
    )
    valid = np.nonzero(on_screen)[0]
    if valid.size == 0:
        return empty

    wbox = x1[valid] - x0[valid] + 1
    counts = wbox * (y1[valid] - y0[valid] + 1)
    total = int(counts.sum())
    g_np = np.repeat(valid, counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    wrep = np.repeat(wbox, counts)
    px = np.repeat(x0[valid], counts) + local % wrep
    py = np.repeat(y0[valid], counts) + local // wrep
    pix_np = py * width + px

    # differentiable Mahalanobis distance at pair pixels
    g_idx = torch.from_numpy(g_np)
    a = cov2d[g_idx, 0, 0]
    b = cov2d[g_idx, 0, 1]
    cc = cov2d[g_idx, 1, 1]
    det = a * cc - b * b
    dx = torch.from_numpy(px.astype(np.float64)) - centers2d[g_idx, 0]
    dy = torch.from_numpy(py.astype(np.float64)) - centers2d[g_idx, 1]
    m = (cc * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det

    keep = m.detach().numpy() <= CUTOFF_MAHALANOBIS
    depths_np = depths.detach().numpy()
    if depth_map is not None:
        keep &= ~(depths_np[g_np] > depth_map.detach().numpy().reshape(-1)[pix_np])

    g_np, pix_np = g_np[keep], pix_np[keep]
    weight = torch.exp(-0.5 * m[torch.from_numpy(np.nonzero(keep)[0])])

    # global front-to-back order; stable sorts keep index order on depth ties
    order = np.argsort(depths_np, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n, dtype=np.int64)
    perm = np.argsort(pix_np * n + rank[g_np], kind="stable")
    perm_t = torch.from_numpy(perm)

    return SplatPairs(
        torch.from_numpy(g_np[perm]), torch.from_numpy(pix_np[perm]),
        weight[perm_t], width, height, n,
    )


def compose_pairs(
    pairs: SplatPairs,
    colors: Tensor,
    opacities: Tensor,
    background: Tensor,
    early_out: float = DEFAULT_EARLY_OUT,
) -> tuple[Tensor, Tensor, Tensor]:
    """Front-to-back blend of ordered pairs over a background image.

    Returns (blended RGB, alpha map, premultiplied Gaussian RGB). The blended
    image is premult + background * transmittance.
    """
    h, w = pairs.height, pairs.width
    if background.shape != (h, w, 3):
        raise DimensionMismatch(f"background must be ({h}, {w}, 3)")
    npix = h * w
    if len(pairs) == 0:
        alpha_map = torch.zeros(h, w, dtype=DTYPE)
        premult = torch.zeros(h, w, 3, dtype=DTYPE)
        return background.clone(), alpha_map, premult

    alpha = (opacities[pairs.gauss] * pairs.weight).clamp(max=ALPHA_CLAMP)
    lg = torch.log1p(-alpha)

    csum = torch.cumsum(lg, 0)
    is_start = torch.ones(len(pairs), dtype=torch.bool)
    is_start[1:] = pairs.pix[1:] != pairs.pix[:-1]
    seg_id = torch.cumsum(is_start.long(), 0) - 1
    start_idx = torch.nonzero(is_start, as_tuple=False).squeeze(-1)
    base = (csum - lg)[start_idx]
    log_t_before = csum - lg - base[seg_id]

    if early_out > 0.0:
        # sequential semantics: stop the pixel once transmittance would drop
        # below the threshold; everything after the stop is skipped
        keep = (log_t_before + lg).detach() >= math.log(early_out)
        alpha = alpha * keep
        lg = torch.log1p(-alpha)
        csum = torch.cumsum(lg, 0)
        base = (csum - lg)[start_idx]
        log_t_before = csum - lg - base[seg_id]

    t_before = torch.exp(log_t_before)
    contrib = alpha * t_before

    premult = torch.zeros(npix, 3, dtype=DTYPE)
    premult.index_add_(0, pairs.pix, colors[pairs.gauss] * contrib[:, None])
    log_t_total = torch.zeros(npix, dtype=DTYPE)
    log_t_total.index_add_(0, pairs.pix, lg)
    t_total = torch.exp(log_t_total)

    premult = premult.reshape(h, w, 3)
    t_total = t_total.reshape(h, w)
    alpha_map = 1.0 - t_total
    blended = premult + background * t_total[:, :, None]
    return blended, alpha_map, premult


def composite_final(gauss_premult: Tensor, alpha: Tensor, mesh_rgb: Tensor) -> Tensor:
    """Blend premultiplied Gaussian content over the mesh render.

    With the Gaussian image premultiplied this equals the per-Gaussian
    expansion sum_i c_i a_i T_i + M * prod_i (1 - a_i); alpha = 0 pixels
    reproduce the mesh bit-exactly.
    """
    if gauss_premult.shape != mesh_rgb.shape or alpha.shape != mesh_rgb.shape[:2]:
        raise DimensionMismatch("composite inputs must share dimensions")
    return gauss_premult + mesh_rgb * (1.0 - alpha)[:, :, None]


# ---------------------------------------------------------------------------
# Brute-force reference (independent oracle path)
# ---------------------------------------------------------------------------

def composite_naive(
    centers2d: np.ndarray,
    cov2d: np.ndarray,
    depths: np.ndarray,
    colors: np.ndarray,
    opacities: np.ndarray,
    depth_map: np.ndarray,
    background: np.ndarray,
    width: int,
    height: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel loop over all Gaussians in depth order; no culling, no early-out."""
    order = np.argsort(depths, kind="stable")
    inv = np.linalg.inv(cov2d) if len(cov2d) else cov2d
    g_img = np.zeros((height, width, 3))
    a_img = np.zeros((height, width))
    final = np.zeros((height, width, 3))
    for y in range(height):
        for x in range(width):
            t = 1.0
            accum = np.zeros(3)
            for i in order:
                d = np.array([x, y], dtype=np.float64) - centers2d[i]
                m = float(d @ inv[i] @ d)
                if m > CUTOFF_MAHALANOBIS:
                    continue
                alpha = min(opacities[i] * math.exp(-0.5 * m), ALPHA_CLAMP)
                if depths[i] > depth_map[y, x]:
                    alpha = 0.0
                accum = accum + colors[i] * alpha * t
                t *= 1.0 - alpha
            g_img[y, x] = accum + background[y, x] * t
            a_img[y, x] = 1.0 - t
            final[y, x] = accum + background[y, x] * t
    return g_img, a_img, final


# ---------------------------------------------------------------------------
# Frame rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderBundle:
    """Per-frame rasterizer outputs; all images share (H, W)."""

    gauss_rgb: Tensor       # Gaussian render blended over its background
    alpha: Tensor           # accumulated Gaussian transparency in [0, 1]
    mesh_rgb: Tensor
    depth: Tensor           # camera-space mesh depth, +inf off-mesh
    image: Tensor           # final composite
    signature: bytes | None = None

    def validate(self) -> None:
        h, w = self.alpha.shape
        for img in (self.gauss_rgb, self.mesh_rgb, self.image):
            if img.shape[:2] != (h, w):
                raise DimensionMismatch("render bundle images disagree on size")
        if self.depth.shape != (h, w):
            raise DimensionMismatch("depth map size mismatch")
        if float(self.alpha.min()) < -1e-9 or float(self.alpha.max()) > 1 + 1e-9:
            raise ValueError("alpha map out of [0, 1]")


def _hash_tensors(parts: list[Tensor]) -> bytes:
    h = hashlib.sha1()
    for t in parts:
        arr = t.detach().cpu().numpy()
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.digest()


def project_gaussian_set(
    gaussians: GaussianSet, mesh: SkinnedMesh, pose: Pose, camera: Camera
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Skin the mesh, attach Gaussians to posed polygon frames and project."""
    verts = skin(mesh, pose)
    centers, quats, scales = polygon_frames(verts, mesh.triangles)
    mu_w, rot_w, scale_w = gaussians_to_world(
        gaussians.mu,
        gaussians.rot,
        gaussians.log_scale,
        centers[gaussians.parent],
        quats[gaussians.parent],
        scales[gaussians.parent],
    )
    cov = world_covariance(rot_w, scale_w)
    return project_gaussians(mu_w, cov, camera)


def render_frame(
    gaussians: GaussianSet,
    mesh: SkinnedMesh,
    texture: Texture,
    pose: Pose,
    camera: Camera,
    mode: str = "hybrid",
    background: tuple[float, float, float] | str = (0.0, 0.0, 0.0),
    rng: np.random.Generator | None = None,
    early_out: float = DEFAULT_EARLY_OUT,
    collect_signature: bool = False,
) -> RenderBundle:
    """Render one frame in ``mesh_only``, ``gaussians_only`` or ``hybrid`` mode.

    In hybrid mode the mesh render is the Gaussian background and the depth
    map gates Gaussian alphas; in gaussians_only mode the depth map is +inf
    everywhere and ``background`` (a color, or "random" drawn once from
    ``rng``) backs the splats.
    """
    if mode not in ("mesh_only", "gaussians_only", "hybrid"):
        raise ValueError(f"unknown render mode '{mode}'")
    h, w = camera.height, camera.width

    if mode == "gaussians_only":
        mesh_rgb = torch.zeros(h, w, 3, dtype=DTYPE)
        depth = torch.full((h, w), DEPTH_INF, dtype=DTYPE)
        raster = None
    else:
        raster = rasterize_mesh(skin(mesh, pose), mesh.triangles, mesh.uv, texture, camera)
        mesh_rgb, depth = raster.rgb, raster.depth

    if mode == "mesh_only":
        bundle = RenderBundle(
            gauss_rgb=mesh_rgb,
            alpha=torch.zeros(h, w, dtype=DTYPE),
            mesh_rgb=mesh_rgb,
            depth=depth,
            image=mesh_rgb,
        )
        if collect_signature and raster is not None:
            bundle.signature = _hash_tensors([raster.tri_id])
        return bundle

    if mode == "hybrid":
        bg = mesh_rgb
    elif background == "random":
        if rng is None:
            raise ValueError("background='random' requires an rng")
        bg = torch.as_tensor(rng.uniform(size=3), dtype=DTYPE).expand(h, w, 3)
    else:
        bg = torch.as_tensor(background, dtype=DTYPE).expand(h, w, 3)

    if len(gaussians) == 0:
        bundle = RenderBundle(
            gauss_rgb=bg.clone() if mode == "gaussians_only" else mesh_rgb,
            alpha=torch.zeros(h, w, dtype=DTYPE),
            mesh_rgb=mesh_rgb,
            depth=depth,
            image=bg.clone() if mode == "gaussians_only" else mesh_rgb,
        )
        if collect_signature:
            bundle.signature = _hash_tensors([raster.tri_id] if raster is not None else [])
        return bundle

    centers2d, cov2d, depths, in_front = project_gaussian_set(gaussians, mesh, pose, camera)
    pairs = build_pairs(centers2d, cov2d, depths, in_front,
                        depth, width=w, height=h)
    blended, alpha_map, premult = compose_pairs(
        pairs, gaussians.color, gaussians.opacity, bg, early_out=early_out
    )
    image = blended if mode == "gaussians_only" else composite_final(premult, alpha_map, mesh_rgb)

    bundle = RenderBundle(
        gauss_rgb=blended, alpha=alpha_map, mesh_rgb=mesh_rgb, depth=depth, image=image
    )
    if collect_signature:
        parts = [in_front, pairs.gauss, pairs.pix,
                 (gaussians.opacity.detach()[pairs.gauss] * pairs.weight.detach() >= ALPHA_CLAMP)]
        if raster is not None:
            parts.append(raster.tri_id)
            if raster.uv is not None and raster.uv.numel():
                # bilinear cells are C0 but not C1; flag probes that hop cells
                u_cell = (raster.uv[:, 0].detach().clamp(0, 1) * (texture.width - 1)).floor().long()
                v_cell = (raster.uv[:, 1].detach().clamp(0, 1) * (texture.height - 1)).floor().long()
                parts.extend([u_cell, v_cell])
        bundle.signature = _hash_tensors(parts)
    return bundle
