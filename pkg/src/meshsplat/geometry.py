"""Polygon local frames, Gaussian transforms, quaternion and projection math.

Conventions used throughout the package:

* quaternions are (w, x, y, z), unit norm;
* image coordinates are in pixels with the sample point of pixel ``[x, y]``
  at the integer coordinate ``(x, y)``;
* cameras store a world-to-camera rotation/translation pair;
* all tensors are float64 on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import BehindCamera, DegenerateTriangle

DTYPE = torch.float64

# Anti-aliasing floor added to the diagonal of every projected 2D covariance.
COV2D_DILATION = 0.3
# Default near plane for projection, in world units.
NEAR_PLANE = 0.01

_AREA_EPS = 1e-12


def as_tensor(x, dtype=DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Quaternion helpers (batched over leading dimensions).
# ---------------------------------------------------------------------------

def quat_normalize(q: Tensor) -> Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a*b; both (..., 4) in (w, x, y, z) order."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix(q: Tensor) -> Tensor:
    """Unit quaternion (..., 4) to rotation matrix (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors (..., 3) by unit quaternions (..., 4)."""
    return (quat_to_matrix(q) @ v.unsqueeze(-1)).squeeze(-1)


def matrix_to_quat(m: Tensor) -> Tensor:
    """Rotation matrix (..., 3, 3) to unit quaternion (..., 4), differentiable.

    Evaluates all four Shepperd branches on clamped radicands so autograd
    stays finite, then selects the numerically dominant one per element.
    """
    m00, m01, m02 = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    m10, m11, m12 = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    m20, m21, m22 = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    trace = m00 + m11 + m22

    def _safe_sqrt(x: Tensor) -> Tensor:
        return torch.sqrt(torch.clamp(x, min=1e-12))

    # branch w: trace dominant
    sw = _safe_sqrt(1.0 + trace) * 2.0
    qw_w = 0.25 * sw
    qx_w = (m21 - m12) / sw
    qy_w = (m02 - m20) / sw
    qz_w = (m10 - m01) / sw

    sx = _safe_sqrt(1.0 + m00 - m11 - m22) * 2.0
    qw_x = (m21 - m12) / sx
    qx_x = 0.25 * sx
    qy_x = (m01 + m10) / sx
    qz_x = (m02 + m20) / sx

    sy = _safe_sqrt(1.0 - m00 + m11 - m22) * 2.0
    qw_y = (m02 - m20) / sy
    qx_y = (m01 + m10) / sy
    qy_y = 0.25 * sy
    qz_y = (m12 + m21) / sy

    sz = _safe_sqrt(1.0 - m00 - m11 + m22) * 2.0
    qw_z = (m10 - m01) / sz
    qx_z = (m02 + m20) / sz
    qy_z = (m12 + m21) / sz
    qz_z = 0.25 * sz

    use_w = trace > 0
    use_x = (~use_w) & (m00 >= m11) & (m00 >= m22)
    use_y = (~use_w) & (~use_x) & (m11 >= m22)
    use_z = (~use_w) & (~use_x) & (~use_y)

    def _select(cw, cx, cy, cz):
        out = torch.where(use_w, cw, cw.new_zeros(()))
        out = torch.where(use_x, cx, out)
        out = torch.where(use_y, cy, out)
        out = torch.where(use_z, cz, out)
        return out

    q = torch.stack(
        [
            _select(qw_w, qw_x, qw_y, qw_z),
            _select(qx_w, qx_x, qx_y, qx_z),
            _select(qy_w, qy_x, qy_y, qy_z),
            _select(qz_w, qz_x, qz_y, qz_z),
        ],
        dim=-1,
    )
    return quat_normalize(q)


def axis_angle_to_matrix(aa: Tensor) -> Tensor:
    """Rodrigues formula for axis-angle vectors (..., 3), safe at zero angle."""
    theta_sq = (aa * aa).sum(-1)
    theta = torch.sqrt(torch.clamp(theta_sq, min=1e-30))
    small = theta_sq < 1e-16
    # sin(t)/t and (1-cos t)/t^2 with Taylor fallbacks near zero
    sin_t = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    cos_t = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq.clamp(min=1e-30))
    x, y, z = aa.unbind(-1)
    zeros = torch.zeros_like(x)
    k = torch.stack(
        [
            torch.stack([zeros, -z, y], dim=-1),
            torch.stack([z, zeros, -x], dim=-1),
            torch.stack([-y, x, zeros], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=aa.dtype).expand(k.shape)
    return eye + sin_t[..., None, None] * k + cos_t[..., None, None] * (k @ k)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class PolygonFrame:
    """Per-triangle rigid frame: center T, unit quaternion R, scale k."""

    translation: Tensor
    rotation: Tensor
    scale: Tensor

    def validate(self) -> None:
        if abs(float(torch.linalg.norm(self.rotation)) - 1.0) > 1e-6:
            raise ValueError("frame quaternion is not unit norm")
        if float(self.scale) <= 0:
            raise ValueError("frame scale must be positive")


@dataclass
class Gaussian:
    """A single mesh-attached Gaussian expressed in its parent polygon frame."""

    parent_polygon: int
    mu: Tensor
    rot: Tensor
    log_scale: Tensor
    color: Tensor
    opacity: Tensor


@dataclass
class GaussianSet:
    """Batched optimizable splat state; one row per Gaussian.

    ``log_scale`` stores ln of the polygon-frame scale so unconstrained
    gradient steps keep the actual scale positive.
    """

    parent: Tensor          # (N,) long, parent triangle index
    mu: Tensor              # (N, 3) offsets in polygon-frame units
    rot: Tensor             # (N, 4) unit quaternions, local rotation
    log_scale: Tensor       # (N, 3)
    color: Tensor           # (N, 3) RGB in [0, 1]
    opacity: Tensor         # (N,) in [0, 1]

    def __len__(self) -> int:
        return int(self.parent.shape[0])

    def clone(self) -> "GaussianSet":
        return GaussianSet(
            self.parent.clone(),
            self.mu.detach().clone(),
            self.rot.detach().clone(),
            self.log_scale.detach().clone(),
            self.color.detach().clone(),
            self.opacity.detach().clone(),
        )

    def subset(self, keep: Tensor) -> "GaussianSet":
        return GaussianSet(
            self.parent[keep],
            self.mu[keep],
            self.rot[keep],
            self.log_scale[keep],
            self.color[keep],
            self.opacity[keep],
        )

    @staticmethod
    def empty() -> "GaussianSet":
        z = torch.zeros
        return GaussianSet(
            torch.zeros(0, dtype=torch.long), z((0, 3), dtype=DTYPE), z((0, 4), dtype=DTYPE),
            z((0, 3), dtype=DTYPE), z((0, 3), dtype=DTYPE), z((0,), dtype=DTYPE),
        )


@dataclass
class Camera:
    """Pinhole camera; rotation/translation map world to camera coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: Tensor = field(default_factory=lambda: torch.eye(3, dtype=DTYPE))
    translation: Tensor = field(default_factory=lambda: torch.zeros(3, dtype=DTYPE))
    width: int = 64
    height: int = 64

    def __post_init__(self) -> None:
        self.rotation = as_tensor(self.rotation).reshape(3, 3)
        self.translation = as_tensor(self.translation).reshape(3)
        err = self.rotation @ self.rotation.T - torch.eye(3, dtype=self.rotation.dtype)
        if float(err.abs().max()) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    def world_to_camera(self, pts: Tensor) -> Tensor:
        return pts @ self.rotation.T + self.translation


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def polygon_frames(vertices: Tensor, triangles: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Local frame of every triangle: centers (T,3), quaternions (T,4), scales (T,).

    The frame center is the vertex mean; the scale is the mean of edge
    ``v1 - v0`` length and the height from ``v2``; the rotation has columns
    ``[e_hat, n_hat x e_hat, n_hat]`` so the local z axis maps to the surface
    normal. Vertex order pins the convention.
    """
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    e01 = v1 - v0
    e02 = v2 - v0
    normal = torch.cross(e01, e02, dim=-1)
    double_area = torch.linalg.norm(normal, dim=-1)
    if bool((double_area <= 2 * _AREA_EPS).any()):
        bad = int(torch.nonzero(double_area <= 2 * _AREA_EPS)[0])
        raise DegenerateTriangle(f"triangle {bad} has area <= {_AREA_EPS}")

    center = (v0 + v1 + v2) / 3.0
    edge_len = torch.linalg.norm(e01, dim=-1)
    # height of v2 over line v0-v1; area = 0.5 * base * height
    height = double_area / edge_len
    scale = 0.5 * (edge_len + height)

    e_hat = e01 / edge_len[:, None]
    n_hat = normal / double_area[:, None]
    basis = torch.stack([e_hat, torch.cross(n_hat, e_hat, dim=-1), n_hat], dim=-1)
    quats = matrix_to_quat(basis)
    return center, quats, scale


def polygon_frame(v0, v1, v2) -> PolygonFrame:
    """Frame of a single triangle; raises DegenerateTriangle on near-zero area."""
    verts = torch.stack([as_tensor(v0), as_tensor(v1), as_tensor(v2)])
    tris = torch.tensor([[0, 1, 2]], dtype=torch.long)
    center, quats, scale = polygon_frames(verts, tris)
    return PolygonFrame(center[0], quats[0], scale[0])


def gaussians_to_world(
    mu: Tensor,
    rot: Tensor,
    log_scale: Tensor,
    frame_t: Tensor,
    frame_q: Tensor,
    frame_k: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Batched local-to-world transform of Gaussian offsets.

    world rotation = frame_q * rot, world center = k * R(mu) + T and world
    scale = k * exp(log_scale), all componentwise over rows.
    """
    world_q = quat_multiply(frame_q, rot)
    world_mu = frame_k[:, None] * quat_rotate(frame_q, mu) + frame_t
    world_scale = frame_k[:, None] * torch.exp(log_scale)
    return world_mu, world_q, world_scale


def gaussian_to_world(g: Gaussian, f: PolygonFrame) -> tuple[Tensor, Tensor, Tensor]:
    """Single-Gaussian wrapper around :func:`gaussians_to_world`."""
    mu, q, s = gaussians_to_world(
        as_tensor(g.mu)[None],
        as_tensor(g.rot)[None],
        as_tensor(g.log_scale)[None],
        as_tensor(f.translation)[None],
        as_tensor(f.rotation)[None],
        as_tensor(f.scale)[None],
    )
    return mu[0], q[0], s[0]


def world_covariance(rot: Tensor, scale: Tensor) -> Tensor:
    """Sigma = R diag(s)^2 R^T for world rotation (...,4) and scale (...,3)."""
    r = quat_to_matrix(rot)
    rs = r * scale[..., None, :]
    return rs @ rs.transpose(-1, -2)


def project_gaussians(
    world_mu: Tensor,
    cov: Tensor,
    camera: Camera,
    near: float = NEAR_PLANE,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """EWA projection of world Gaussians to pixel space.

    Returns (centers2d (N,2), cov2d (N,2,2), depth (N,), in_front (N,) bool);
    rows with ``in_front == False`` carry unusable values and must be dropped
    by the caller. cov2d includes the anti-aliasing diagonal floor.
    """
    cam_pts = camera.world_to_camera(world_mu)
    x, y, z = cam_pts.unbind(-1)
    in_front = z > near
    z_safe = torch.where(in_front, z, torch.ones_like(z))

    cx2d = camera.fx * x / z_safe + camera.cx
    cy2d = camera.fy * y / z_safe + camera.cy
    centers2d = torch.stack([cx2d, cy2d], dim=-1)

    zeros = torch.zeros_like(z_safe)
    j_row0 = torch.stack([camera.fx / z_safe, zeros, -camera.fx * x / z_safe**2], dim=-1)
    j_row1 = torch.stack([zeros, camera.fy / z_safe, -camera.fy * y / z_safe**2], dim=-1)
    jac = torch.stack([j_row0, j_row1], dim=-2)          # (N, 2, 3)
    jw = jac @ camera.rotation
    cov2d = jw @ cov @ jw.transpose(-1, -2)
    cov2d = cov2d + COV2D_DILATION * torch.eye(2, dtype=cov2d.dtype)
    return centers2d, cov2d, z, in_front


def project_gaussian(world_mu, cov, camera: Camera, near: float = NEAR_PLANE):
    """Single-Gaussian projection; raises BehindCamera when z <= near."""
    centers2d, cov2d, depth, in_front = project_gaussians(
        as_tensor(world_mu)[None], as_tensor(cov)[None], camera, near=near
    )
    if not bool(in_front[0]):
        raise BehindCamera(f"gaussian center depth {float(depth[0]):.4g} <= near plane {near}")
    return centers2d[0], cov2d[0], depth[0]
