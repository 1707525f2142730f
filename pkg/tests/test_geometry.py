"""Polygon frames, Gaussian transforms, covariance and projection."""

import math

import pytest
import torch

from meshsplat.errors import BehindCamera, DegenerateTriangle
from meshsplat.geometry import (
    Camera,
    Gaussian,
    PolygonFrame,
    gaussian_to_world,
    matrix_to_quat,
    polygon_frame,
    polygon_frames,
    project_gaussian,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    world_covariance,
)

T64 = lambda *a: torch.tensor(a, dtype=torch.float64)


def _rot_z_quat(angle):
    return torch.tensor([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)], dtype=torch.float64)


def _random_unit_quat(gen):
    q = torch.randn(4, generator=gen, dtype=torch.float64)
    return q / q.norm()


def _quat_close(a, b, tol=1e-6):
    # quaternions double-cover rotations; compare up to sign
    return min(float((a - b).abs().max()), float((a + b).abs().max())) < tol


class TestPolygonFrame:
    def test_centroid_unit_triangle(self):
        f = polygon_frame((0, 0, 0), (1, 0, 0), (0, 1, 0))
        assert torch.allclose(f.translation, T64(1 / 3, 1 / 3, 0), atol=1e-12)

    def test_scale_unit_triangle(self):
        # independent oracle: point-line distance of v2 from segment v0-v1
        v0, v1, v2 = T64(0, 0, 0), T64(1, 0, 0), T64(0, 1, 0)
        d = v1 - v0
        h = torch.linalg.norm(torch.cross(d, v2 - v0, dim=-1)) / torch.linalg.norm(d)
        expected = 0.5 * (torch.linalg.norm(d) + h)
        assert float(expected) == pytest.approx(1.0, abs=1e-12)
        f = polygon_frame(v0, v1, v2)
        assert float(f.scale) == pytest.approx(float(expected), abs=1e-12)

    def test_uniform_scaling_doubles_k(self):
        f1 = polygon_frame((0, 0, 0), (1, 0, 0), (0, 1, 0))
        f2 = polygon_frame((0, 0, 0), (2, 0, 0), (0, 2, 0))
        assert float(f2.scale) == pytest.approx(2 * float(f1.scale), abs=1e-12)

    def test_rotation_columns(self):
        f = polygon_frame((0, 0, 0), (1, 0, 0), (0, 1, 0))
        r = quat_to_matrix(f.rotation)
        # local x = edge direction, local z = normal
        assert torch.allclose(r[:, 0], T64(1, 0, 0), atol=1e-9)
        assert torch.allclose(r[:, 2], T64(0, 0, 1), atol=1e-9)
        assert torch.allclose(r[:, 1], T64(0, 1, 0), atol=1e-9)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateTriangle):
            polygon_frame((0, 0, 0), (1, 0, 0), (2, 0, 0))

    def test_rigid_equivariance(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(25):
            verts = torch.randn(3, 3, generator=gen, dtype=torch.float64)
            if float(torch.linalg.norm(torch.cross(verts[1] - verts[0], verts[2] - verts[0], dim=-1))) < 1e-3:
                continue
            q0 = _random_unit_quat(gen)
            t0 = torch.randn(3, generator=gen, dtype=torch.float64)
            moved = quat_rotate(q0.expand(3, 4), verts) + t0

            f = polygon_frame(*verts)
            g = polygon_frame(*moved)
            assert torch.allclose(g.translation, quat_rotate(q0, f.translation) + t0, atol=1e-6)
            assert float(g.scale) == pytest.approx(float(f.scale), abs=1e-6)
            assert _quat_close(g.rotation, quat_multiply(q0, f.rotation))


class TestGaussianToWorld:
    def _gauss(self, mu, log_scale=(0.0, 0.0, 0.0), rot=(1.0, 0.0, 0.0, 0.0)):
        return Gaussian(0, T64(*mu), T64(*rot), T64(*log_scale), T64(0.5, 0.5, 0.5), T64(1.0)[()])

    def test_identity_frame(self):
        f = PolygonFrame(T64(0, 0, 0), T64(1, 0, 0, 0), T64(1.0)[()])
        mu, _, _ = gaussian_to_world(self._gauss((1, 2, 3)), f)
        assert torch.allclose(mu, T64(1, 2, 3), atol=1e-12)

    def test_scale_translate(self):
        f = PolygonFrame(T64(1, 0, 0), T64(1, 0, 0, 0), T64(2.0)[()])
        s = math.log(0.5)
        mu, _, scale = gaussian_to_world(self._gauss((1, 0, 0), log_scale=(s, s, s)), f)
        assert torch.allclose(mu, T64(3, 0, 0), atol=1e-12)
        assert torch.allclose(scale, T64(1, 1, 1), atol=1e-12)

    def test_quarter_turn(self):
        # hand-derived: rotating (1,0,0) by 90 deg about z gives (0,1,0)
        f = PolygonFrame(T64(0, 0, 0), _rot_z_quat(math.pi / 2), T64(1.0)[()])
        mu, _, _ = gaussian_to_world(self._gauss((1, 0, 0)), f)
        assert torch.allclose(mu, T64(0, 1, 0), atol=1e-9)

    def test_attachment_matches_rigid_motion(self):
        gen = torch.Generator().manual_seed(3)
        for _ in range(20):
            verts = torch.randn(3, 3, generator=gen, dtype=torch.float64)
            if float(torch.linalg.norm(torch.cross(verts[1] - verts[0], verts[2] - verts[0], dim=-1))) < 1e-3:
                continue
            q0 = _random_unit_quat(gen)
            t0 = torch.randn(3, generator=gen, dtype=torch.float64)
            moved = quat_rotate(q0.expand(3, 4), verts) + t0

            g = self._gauss(
                tuple(torch.randn(3, generator=gen, dtype=torch.float64).tolist()),
                rot=tuple(_random_unit_quat(gen).tolist()),
            )
            mu_rest, q_rest, s_rest = gaussian_to_world(g, polygon_frame(*verts))
            mu_posed, q_posed, s_posed = gaussian_to_world(g, polygon_frame(*moved))
            assert torch.allclose(mu_posed, quat_rotate(q0, mu_rest) + t0, atol=1e-6)
            assert torch.allclose(s_posed, s_rest, atol=1e-9)
            assert _quat_close(q_posed, quat_multiply(q0, q_rest))


class TestWorldCovariance:
    def test_identity_rotation(self):
        cov = world_covariance(T64(1, 0, 0, 0), T64(1, 2, 3))
        assert torch.allclose(cov, torch.diag(T64(1, 4, 9)), atol=1e-12)

    def test_isotropic_rotation_invariant(self):
        gen = torch.Generator().manual_seed(11)
        for _ in range(10):
            q = _random_unit_quat(gen)
            cov = world_covariance(q, T64(0.7, 0.7, 0.7))
            assert torch.allclose(cov, 0.49 * torch.eye(3, dtype=torch.float64), atol=1e-9)

    def test_quarter_turn_conjugation(self):
        # hand-derived: Rz(90) diag(4,1,1) Rz(90)^T = diag(1,4,1)
        cov = world_covariance(_rot_z_quat(math.pi / 2), T64(2, 1, 1))
        assert torch.allclose(cov, torch.diag(T64(1, 4, 1)), atol=1e-9)

    def test_always_cholesky_factorizable(self):
        gen = torch.Generator().manual_seed(13)
        for _ in range(50):
            q = _random_unit_quat(gen)
            s = torch.rand(3, generator=gen, dtype=torch.float64) * 2 + 1e-3
            cov = world_covariance(q, s)
            torch.linalg.cholesky(cov)  # raises if not SPD


class TestProjectGaussian:
    def _camera(self, **kw):
        defaults = dict(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)
        defaults.update(kw)
        return Camera(**defaults)

    def test_on_axis_covariance(self):
        # oracle: pinhole Jacobian on the optical axis is (f/z) * I
        cam = self._camera()
        _, cov2d, depth = project_gaussian(T64(0, 0, 2), torch.eye(3, dtype=torch.float64), cam)
        expected = (100.0 / 2.0) ** 2 * torch.eye(2, dtype=torch.float64) + 0.3 * torch.eye(2, dtype=torch.float64)
        assert torch.allclose(cov2d, expected, atol=1e-9)
        assert float(depth) == pytest.approx(2.0)

    def test_principal_point(self):
        cam = self._camera()
        center, _, _ = project_gaussian(T64(0, 0, 1), torch.eye(3, dtype=torch.float64), cam)
        assert torch.allclose(center, T64(64, 64), atol=1e-12)

    def test_behind_camera(self):
        cam = self._camera()
        with pytest.raises(BehindCamera):
            project_gaussian(T64(0, 0, 0.0), torch.eye(3, dtype=torch.float64), cam)

    def test_cov2d_symmetric_positive(self):
        gen = torch.Generator().manual_seed(5)
        cam = self._camera()
        for _ in range(30):
            q = _random_unit_quat(gen)
            s = torch.rand(3, generator=gen, dtype=torch.float64) * 0.5 + 0.01
            mu = torch.randn(3, generator=gen, dtype=torch.float64) * 0.5 + T64(0, 0, 3)
            cov = world_covariance(q, s)
            _, cov2d, _ = project_gaussian(mu, cov, cam)
            assert torch.allclose(cov2d, cov2d.T, atol=1e-10)
            assert bool((torch.linalg.eigvalsh(cov2d) > 0).all())


class TestCamera:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Camera(fx=10, fy=10, cx=1, cy=1, rotation=torch.eye(3, dtype=torch.float64) * 1.5)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            Camera(fx=10, fy=10, cx=1, cy=1, width=0)


class TestQuaternionRoundtrip:
    def test_matrix_quat_roundtrip(self):
        gen = torch.Generator().manual_seed(21)
        q = torch.randn(100, 4, generator=gen, dtype=torch.float64)
        q = q / q.norm(dim=-1, keepdim=True)
        back = matrix_to_quat(quat_to_matrix(q))
        flip = torch.sign((back * q).sum(-1, keepdim=True))
        assert torch.allclose(back * flip, q, atol=1e-9)

    def test_batched_frames_match_single(self):
        gen = torch.Generator().manual_seed(2)
        verts = torch.randn(9, 3, generator=gen, dtype=torch.float64)
        tris = torch.arange(9, dtype=torch.long).reshape(3, 3)
        centers, quats, scales = polygon_frames(verts, tris)
        for i in range(3):
            f = polygon_frame(verts[tris[i, 0]], verts[tris[i, 1]], verts[tris[i, 2]])
            assert torch.allclose(centers[i], f.translation)
            assert torch.allclose(scales[i], f.scale)
            assert _quat_close(quats[i], f.rotation, tol=1e-9)
