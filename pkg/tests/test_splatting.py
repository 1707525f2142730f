"""Tiled compositor vs brute-force oracle, depth gating, render modes."""

import math

import numpy as np
import pytest
import torch

from meshsplat.geometry import Camera, GaussianSet
from meshsplat.mesh import DEPTH_INF, Pose, SkinnedMesh, Texture
from meshsplat.splatting import (
    RenderBundle,
    build_pairs,
    compose_pairs,
    composite_final,
    composite_naive,
    depth_mask,
    render_frame,
    splat_alpha,
)

F64 = torch.float64


def _random_scene(rng: np.random.Generator, size=16, max_gaussians=8):
    n = int(rng.integers(1, max_gaussians + 1))
    centers = rng.uniform(-2, size + 2, size=(n, 2))
    cov = np.zeros((n, 2, 2))
    for i in range(n):
        a = rng.uniform(-2, 2, size=(2, 2))
        cov[i] = a @ a.T + 0.3 * np.eye(2)
    depths = rng.uniform(1.0, 5.0, size=n)
    colors = rng.uniform(0, 1, size=(n, 3))
    opacities = rng.uniform(0, 1, size=n)
    depth_map = np.where(
        rng.uniform(size=(size, size)) < 0.5,
        rng.uniform(1.0, 5.0, size=(size, size)),
        np.inf,
    )
    background = rng.uniform(0, 1, size=(size, size, 3))
    return centers, cov, depths, colors, opacities, depth_map, background


def _run_tiled(centers, cov, depths, colors, opacities, depth_map, background, size):
    t = lambda x: torch.as_tensor(x, dtype=F64)
    pairs = build_pairs(
        t(centers), t(cov), t(depths), torch.ones(len(centers), dtype=torch.bool),
        t(depth_map), width=size, height=size,
    )
    blended, alpha, premult = compose_pairs(pairs, t(colors), t(opacities), t(background))
    final = composite_final(premult, alpha, t(background))
    return blended, alpha, final


class TestSplatAlpha:
    def test_center(self):
        assert splat_alpha(0.8, (5, 5), np.eye(2), (5, 5)) == pytest.approx(0.8, abs=1e-12)

    def test_zero_opacity(self):
        assert splat_alpha(0.0, (5, 5), np.eye(2), (6, 7)) == 0.0

    def test_one_sigma_distance(self):
        sigma = 2.0
        cov = sigma**2 * np.eye(2)
        val = splat_alpha(1.0, (0, 0), cov, (sigma, 0))
        assert val == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_outside_three_sigma(self):
        assert splat_alpha(1.0, (0, 0), np.eye(2), (3.5, 0)) == 0.0

    def test_clamped(self):
        assert splat_alpha(5.0, (0, 0), np.eye(2), (0, 0)) == 0.99


class TestDepthMask:
    def test_behind(self):
        assert depth_mask(0.7, 5.0, 2.0) == 0.0

    def test_in_front(self):
        assert depth_mask(0.7, 1.0, 2.0) == 0.7

    def test_background_sentinel(self):
        assert depth_mask(0.7, 123.0, float("inf")) == 0.7


class TestCompose:
    def _one_gaussian_inputs(self, opacity, color, size=9):
        centers = torch.tensor([[4.0, 4.0]], dtype=F64)
        cov = torch.eye(2, dtype=F64)[None]
        depths = torch.tensor([1.0], dtype=F64)
        pairs = build_pairs(centers, cov, depths, torch.ones(1, dtype=torch.bool),
                            None, width=size, height=size)
        colors = torch.tensor([color], dtype=F64)
        ops = torch.tensor([opacity], dtype=F64)
        return pairs, colors, ops

    def test_no_gaussians(self):
        bg = torch.rand(8, 8, 3, dtype=F64)
        pairs = build_pairs(
            torch.zeros(0, 2, dtype=F64), torch.zeros(0, 2, 2, dtype=F64),
            torch.zeros(0, dtype=F64), torch.zeros(0, dtype=torch.bool),
            None, width=8, height=8,
        )
        blended, alpha, _ = compose_pairs(pairs, torch.zeros(0, 3, dtype=F64), torch.zeros(0, dtype=F64), bg)
        assert torch.equal(blended, bg)
        assert float(alpha.abs().max()) == 0.0

    def test_two_half_alphas(self):
        size = 9
        centers = torch.tensor([[4.0, 4.0], [4.0, 4.0]], dtype=F64)
        cov = torch.eye(2, dtype=F64).expand(2, 2, 2)
        depths = torch.tensor([1.0, 2.0], dtype=F64)
        pairs = build_pairs(centers, cov, depths, torch.ones(2, dtype=torch.bool),
                            None, width=size, height=size)
        bg = torch.zeros(size, size, 3, dtype=F64)
        _, alpha, _ = compose_pairs(pairs, torch.full((2, 3), 1.0, dtype=F64),
                                    torch.tensor([0.5, 0.5], dtype=F64), bg)
        assert float(alpha[4, 4]) == pytest.approx(0.75, abs=1e-12)

    def test_full_occlusion_same_color_as_bg(self):
        # alpha = 1 before clamping: with bg equal to the color the pixel is c
        pairs, colors, ops = self._one_gaussian_inputs(1.0, [0.2, 0.6, 0.9])
        bg = torch.tensor([0.2, 0.6, 0.9], dtype=F64).expand(9, 9, 3)
        blended, _, _ = compose_pairs(pairs, colors, ops, bg)
        assert torch.allclose(blended[4, 4], torch.tensor([0.2, 0.6, 0.9], dtype=F64), atol=1e-12)

    def test_full_occlusion_clamp_semantics(self):
        # the 0.99 stability clamp leaves 1% of the background visible
        pairs, colors, ops = self._one_gaussian_inputs(1.0, [1.0, 1.0, 1.0])
        bg = torch.zeros(9, 9, 3, dtype=F64)
        blended, alpha, _ = compose_pairs(pairs, colors, ops, bg)
        assert float(blended[4, 4, 0]) == pytest.approx(0.99, abs=1e-12)
        assert float(alpha[4, 4]) == pytest.approx(0.99, abs=1e-12)


class TestCompositeFinal:
    def test_alpha_zero_bit_identical(self):
        mesh = torch.rand(6, 6, 3, dtype=F64)
        premult = torch.zeros(6, 6, 3, dtype=F64)
        alpha = torch.zeros(6, 6, dtype=F64)
        out = composite_final(premult, alpha, mesh)
        assert torch.equal(out, mesh)

    def test_alpha_one_gives_gaussian(self):
        mesh = torch.rand(6, 6, 3, dtype=F64)
        premult = torch.rand(6, 6, 3, dtype=F64)
        alpha = torch.ones(6, 6, dtype=F64)
        out = composite_final(premult, alpha, mesh)
        assert torch.allclose(out, premult, atol=1e-12)

    def test_half_white_over_black(self):
        # expand Eq. 7 + 8 by hand: 0.5*white + 0.5*black = 0.5 grey
        size = 9
        centers = torch.tensor([[4.0, 4.0]], dtype=F64)
        cov = torch.eye(2, dtype=F64)[None]
        pairs = build_pairs(centers, cov, torch.tensor([1.0], dtype=F64),
                            torch.ones(1, dtype=torch.bool), None, width=size, height=size)
        mesh = torch.zeros(size, size, 3, dtype=F64)
        _, alpha, premult = compose_pairs(pairs, torch.ones(1, 3, dtype=F64),
                                          torch.tensor([0.5], dtype=F64), mesh)
        out = composite_final(premult, alpha, mesh)
        assert torch.allclose(out[4, 4], torch.full((3,), 0.5, dtype=F64), atol=1e-12)


class TestOracle:
    def test_matches_naive_on_random_scenes(self):
        rng = np.random.default_rng(123)
        for _ in range(25):
            size = int(rng.integers(4, 17))
            scene = _random_scene(rng, size=size)
            g_t, a_t, i_t = _run_tiled(*scene, size)
            g_n, a_n, i_n = composite_naive(*scene, width=size, height=size)
            assert np.abs(g_t.numpy() - g_n).max() < 1e-5
            assert np.abs(a_t.numpy() - a_n).max() < 1e-5
            assert np.abs(i_t.numpy() - i_n).max() < 1e-5

    def test_early_out_skips_deep_tail(self):
        size = 5
        n = 6
        centers = torch.full((n, 2), 2.0, dtype=F64)
        cov = torch.eye(2, dtype=F64).expand(n, 2, 2)
        depths = torch.arange(1, n + 1, dtype=F64)
        pairs = build_pairs(centers, cov, depths, torch.ones(n, dtype=torch.bool),
                            None, width=size, height=size)
        colors = torch.ones(n, 3, dtype=F64)
        ops = torch.full((n,), 0.99, dtype=F64)
        bg = torch.zeros(size, size, 3, dtype=F64)
        exact, _, _ = compose_pairs(pairs, colors, ops, bg, early_out=0.0)
        fast, _, _ = compose_pairs(pairs, colors, ops, bg, early_out=1e-2)
        # the early-out drops only contributions below the threshold
        assert float((exact - fast).abs().max()) < 1e-2
        assert float((exact - fast).abs().max()) > 0


class TestOcclusionInvariant:
    def test_fully_masked_gaussian_leaves_image_unchanged(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            size = 12
            scene = list(_random_scene(rng, size=size, max_gaussians=5))
            centers, cov, depths, colors, opacities, depth_map, background = scene
            depth_map = np.full((size, size), 3.0)
            g0, a0, i0 = _run_tiled(centers, cov, depths, colors, opacities, depth_map, background, size)

            extra_center = np.array([[size / 2, size / 2]])
            extra_cov = np.eye(2)[None] * 4.0
            g1, a1, i1 = _run_tiled(
                np.vstack([centers, extra_center]),
                np.vstack([cov, extra_cov]),
                np.append(depths, 10.0),      # behind the mesh everywhere
                np.vstack([colors, [[1.0, 0.0, 0.0]]]),
                np.append(opacities, 1.0),
                depth_map,
                background,
                size,
            )
            assert torch.equal(i0, i1)
            assert torch.equal(a0, a1)
            assert torch.equal(g0, g1)


class TestAlphaMonotone:
    def test_alpha_non_decreasing_in_opacity(self):
        rng = np.random.default_rng(11)
        scene = _random_scene(rng, size=12, max_gaussians=6)
        centers, cov, depths, colors, opacities, depth_map, background = scene
        _, a0, _ = _run_tiled(centers, cov, depths, colors, opacities, depth_map, background, 12)
        raised = opacities.copy()
        raised[0] = min(1.0, raised[0] + 0.3)
        _, a1, _ = _run_tiled(centers, cov, depths, colors, raised, depth_map, background, 12)
        assert bool((a1 >= a0 - 1e-12).all())


def _toy_scene():
    verts = torch.tensor(
        [[-0.55, -0.52, 2.0], [0.57, -0.51, 2.1], [0.02, 0.56, 1.95], [-0.53, 0.54, 2.2]],
        dtype=F64,
    )
    tris = torch.tensor([[0, 1, 2], [0, 2, 3]], dtype=torch.long)
    uv = torch.tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], dtype=F64)
    weights = torch.ones(4, 1, dtype=F64)
    mesh = SkinnedMesh(
        vertices=verts, triangles=tris, uv=uv, weights=weights,
        joint_parents=[-1], joint_positions=torch.zeros(1, 3, dtype=F64),
    )
    gen = torch.Generator().manual_seed(42)
    tex = Texture(torch.rand(8, 8, 3, generator=gen, dtype=F64))
    gaussians = GaussianSet(
        parent=torch.tensor([0, 1], dtype=torch.long),
        mu=torch.tensor([[0.1, 0.1, 0.8], [0.0, -0.2, 1.2]], dtype=F64),
        rot=torch.tensor([[1.0, 0, 0, 0], [1.0, 0, 0, 0]], dtype=F64),
        log_scale=torch.log(torch.tensor([[0.5, 0.4, 0.2], [0.3, 0.5, 0.2]], dtype=F64)),
        color=torch.tensor([[0.9, 0.2, 0.1], [0.1, 0.8, 0.3]], dtype=F64),
        opacity=torch.tensor([0.8, 0.6], dtype=F64),
    )
    cam = Camera(fx=24.0, fy=24.0, cx=16.0, cy=16.0, width=32, height=32)
    return gaussians, mesh, tex, Pose.identity(1), cam


class TestRenderFrame:
    def test_mesh_only(self):
        gaussians, mesh, tex, pose, cam = _toy_scene()
        bundle = render_frame(gaussians, mesh, tex, pose, cam, mode="mesh_only")
        bundle.validate()
        assert torch.equal(bundle.image, bundle.mesh_rgb)
        assert float(bundle.alpha.abs().max()) == 0.0

    def test_hybrid_empty_set_equals_mesh_only(self):
        _, mesh, tex, pose, cam = _toy_scene()
        empty = GaussianSet.empty()
        hybrid = render_frame(empty, mesh, tex, pose, cam, mode="hybrid")
        mesh_only = render_frame(empty, mesh, tex, pose, cam, mode="mesh_only")
        assert torch.equal(hybrid.image, mesh_only.image)

    def test_gaussians_only_equals_hybrid_with_transparent_mesh(self):
        # run both paths: the hybrid compositor fed an all-inf depth map and
        # a black mesh image must reproduce gaussians_only over black
        gaussians, mesh, tex, pose, cam = _toy_scene()
        g_only = render_frame(gaussians, mesh, tex, pose, cam,
                              mode="gaussians_only", background=(0.0, 0.0, 0.0))

        from meshsplat.splatting import project_gaussian_set

        centers2d, cov2d, depths, in_front = project_gaussian_set(gaussians, mesh, pose, cam)
        no_mesh_depth = torch.full((32, 32), DEPTH_INF, dtype=F64)
        black_mesh = torch.zeros(32, 32, 3, dtype=F64)
        pairs = build_pairs(centers2d, cov2d, depths, in_front, no_mesh_depth, width=32, height=32)
        _, alpha, premult = compose_pairs(pairs, gaussians.color, gaussians.opacity, black_mesh)
        hybrid_image = composite_final(premult, alpha, black_mesh)
        assert torch.allclose(g_only.image, hybrid_image, atol=1e-12)
        assert torch.allclose(g_only.alpha, alpha, atol=1e-12)

    def test_random_background_deterministic(self):
        gaussians, mesh, tex, pose, cam = _toy_scene()
        b1 = render_frame(gaussians, mesh, tex, pose, cam, mode="gaussians_only",
                          background="random", rng=np.random.default_rng(5))
        b2 = render_frame(gaussians, mesh, tex, pose, cam, mode="gaussians_only",
                          background="random", rng=np.random.default_rng(5))
        assert torch.equal(b1.image, b2.image)

    def test_hybrid_vs_naive(self):
        gaussians, mesh, tex, pose, cam = _toy_scene()
        bundle = render_frame(gaussians, mesh, tex, pose, cam, mode="hybrid")
        from meshsplat.splatting import project_gaussian_set

        centers2d, cov2d, depths, _ = project_gaussian_set(gaussians, mesh, pose, cam)
        g_n, a_n, _ = composite_naive(
            centers2d.detach().numpy(), cov2d.detach().numpy(), depths.detach().numpy(),
            gaussians.color.numpy(), gaussians.opacity.numpy(),
            bundle.depth.numpy(), bundle.mesh_rgb.numpy(), 32, 32,
        )
        assert np.abs(bundle.gauss_rgb.numpy() - g_n).max() < 1e-9
        assert np.abs(bundle.alpha.numpy() - a_n).max() < 1e-9
        assert np.abs(bundle.image.numpy() - g_n).max() < 1e-9

    def test_alpha_in_range_and_signature(self):
        gaussians, mesh, tex, pose, cam = _toy_scene()
        bundle = render_frame(gaussians, mesh, tex, pose, cam, mode="hybrid", collect_signature=True)
        bundle.validate()
        assert isinstance(bundle.signature, bytes)
