import math

import numpy as np
import pytest
import torch

from gf4d.errors import InvalidArgument
from gf4d.field import GaussianField, Gaussians
from gf4d.geometry import axis_angle_to_quat, quat_to_rotmat
from gf4d.render import Camera, RenderSettings, normal_from_depth, project, rasterize, render_flow, render_flow_between

from conftest import SMOOTH, random_gaussians

F64 = torch.float64


def _splats(pos, scale, logit, color):
    pos = torch.as_tensor(np.asarray(pos, float))
    n = len(pos)
    return Gaussians(pos, torch.tensor([[1.0, 0, 0, 0]] * n, dtype=F64),
                     torch.log(torch.as_tensor(np.broadcast_to(np.asarray(scale, float), (n, 3)).copy())),
                     torch.as_tensor(np.broadcast_to(np.asarray(logit, float), (n,)).copy()),
                     torch.as_tensor(np.broadcast_to(np.asarray(color, float), (n, 3)).copy()))


def _front(size=16, half_extent=1.0):
    return Camera(np.eye(3), np.zeros(3), half_extent, size, size)


# ---------------------------------------------------------------- camera / project

def test_camera_validation_and_serialization():
    with pytest.raises(InvalidArgument):
        Camera(np.eye(3) * 2, np.zeros(3), 1.0, 8, 8)
    with pytest.raises(InvalidArgument):
        Camera(np.eye(3), np.zeros(3), 0.0, 8, 8)
    cam = Camera.orbit(45.0, 10.0, size=(32, 24), viewpoint_index=3)
    back = Camera.from_array(cam.to_array())
    assert np.array_equal(back.rotation, cam.rotation) and back.viewpoint_index == 3
    assert (back.width, back.height) == (32, 24)


def test_project_examples():
    cam = _front(64, 2.0)
    s, W = 0.1, 64
    g = _splats([[0.0, 0, 5], [2.0, 0, 5]], s, 0.0, 0.5)
    mean, cov, depth = project(g, cam)
    assert torch.allclose(mean[0], torch.tensor([32.0, 32.0], dtype=F64))
    expect = (s * W / (2 * 2.0)) ** 2 + 0.3
    assert torch.allclose(cov[0], expect * torch.eye(2, dtype=F64), atol=1e-12)
    assert float(mean[1, 0] - mean[0, 0]) == pytest.approx(W / 2)
    assert torch.allclose(depth, torch.tensor([5.0, 5.0], dtype=F64))


# ---------------------------------------------------------------- rasterize

def test_single_splat_at_its_mean():
    cam = _front(16)
    # pixel 8 has its centre at 8.5 px, i.e. x = 0.5 / s world units
    x = 0.5 / cam.scale
    g = _splats([[x, x, 3.0]], 0.2, 1.3, [0.2, 0.6, 0.9])
    out = rasterize(g, cam, {"rgb", "alpha"})
    a = 1.0 / (1.0 + math.exp(-1.3))
    assert float(out.alpha[8, 8]) == pytest.approx(a, abs=1e-12)
    assert torch.allclose(out.rgb[8, 8], a * torch.tensor([0.2, 0.6, 0.9], dtype=F64), atol=1e-12)


def test_nothing_in_support_gives_zero_alpha():
    out = rasterize(_splats([[50.0, 50.0, 3.0]], 0.05, 2.0, 1.0), _front(16), {"rgb", "alpha"})
    assert float(out.alpha.abs().max()) == 0.0
    assert float(out.rgb.abs().max()) == 0.0


def _oracle(g, cam, settings):
    """Per-pixel scalar compositing, written without any vectorization."""
    mean, cov, depth = (t.detach().numpy() for t in project(g, cam, settings.cov_reg))
    opac = 1.0 / (1.0 + np.exp(-g.opacity_logits.detach().numpy()))
    col = g.colors.detach().numpy()
    order = sorted(range(len(depth)), key=lambda i: depth[i])
    H, W = cam.height, cam.width
    rgb, alpha = np.zeros((H, W, 3)), np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            T = 1.0
            for i in order:
                d = np.array([x + 0.5, y + 0.5]) - mean[i]
                a = min(settings.alpha_cap, opac[i] * math.exp(-0.5 * d @ np.linalg.inv(cov[i]) @ d))
                if a < settings.min_alpha:
                    continue
                rgb[y, x] += T * a * col[i]
                alpha[y, x] += T * a
                T *= 1.0 - a
                if T < settings.t_min:
                    break
    return rgb, alpha


@pytest.mark.parametrize("settings", [SMOOTH, RenderSettings()])
def test_two_overlapping_splats_match_scalar_oracle(settings):
    cam = _front(16)
    g = _splats([[0.05, 0.0, 2.0], [-0.1, 0.08, 3.0]], [0.3, 0.25, 0.2], [2.0, 0.5], 0.0)
    g.colors = torch.tensor([[1.0, 0.2, 0.1], [0.1, 0.4, 1.0]], dtype=F64)
    out = rasterize(g, cam, {"rgb", "alpha"}, settings=settings)
    rgb, alpha = _oracle(g, cam, settings)
    assert np.abs(out.alpha.numpy() - alpha).max() <= 1e-6
    assert np.abs(out.rgb.numpy() - rgb).max() <= 1e-6


def test_random_scene_matches_scalar_oracle(cam16):
    g = random_gaussians(7, seed=11, spread=1.2, scale=(0.1, 0.3))
    out = rasterize(g, cam16, {"rgb", "alpha"})
    rgb, alpha = _oracle(g, cam16, RenderSettings())
    assert np.abs(out.rgb.numpy() - rgb).max() <= 1e-6
    assert np.abs(out.alpha.numpy() - alpha).max() <= 1e-6


def test_weights_sum_to_alpha_and_alpha_bounded(cam16):
    g = random_gaussians(40, seed=2, spread=1.0, scale=(0.1, 0.4))
    g.opacity_logits = g.opacity_logits + 4.0
    g.colors = torch.ones_like(g.colors)
    out = rasterize(g, cam16, {"rgb", "alpha"})
    assert float(out.alpha.max()) <= 1.0
    assert torch.allclose(out.rgb, out.alpha[..., None].expand(-1, -1, 3), atol=1e-12)


def test_order_invariance(cam16):
    g = random_gaussians(25, seed=4, spread=1.0, scale=(0.1, 0.3))
    perm = torch.randperm(25, generator=torch.Generator().manual_seed(0))
    a = rasterize(g, cam16, {"rgb", "alpha", "depth"})
    b = rasterize(g.select(perm), cam16, {"rgb", "alpha", "depth"})
    for name in ("rgb", "alpha", "depth"):
        assert torch.allclose(getattr(a, name), getattr(b, name), atol=1e-12), name


def test_degenerate_and_errors(cam16):
    g = random_gaussians(3)
    g.log_scales = torch.full_like(g.log_scales, float("nan"))
    out = rasterize(g, cam16, {"rgb", "alpha"})
    assert out.report.empty and out.report.num_degenerate == 3
    assert float(out.alpha.abs().max()) == 0.0
    with pytest.raises(InvalidArgument):
        rasterize(g.select(torch.tensor([], dtype=torch.long)), cam16)
    with pytest.raises(InvalidArgument):
        rasterize(random_gaussians(2), cam16, {"rgb", "sparkle"})
    with pytest.raises(InvalidArgument):
        rasterize(random_gaussians(2), cam16, {"flow"})


def test_unrequested_channels_are_skipped(cam16):
    out = rasterize(random_gaussians(4), cam16, {"alpha"})
    assert out.rgb is None and out.depth is None and out.normal is None and out.flow is None


# ---------------------------------------------------------------- flow

def _plane_grid(n=24, extent=0.8, z=0.0):
    u = np.linspace(-extent, extent, n)
    xx, yy = np.meshgrid(u, u)
    pos = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], -1)
    step = u[1] - u[0]
    return _splats(pos, [step * 0.7, step * 0.7, 0.01], 3.0, 0.5)


def test_static_field_flow_is_zero(cam16):
    field = GaussianField(random_gaussians(20, seed=1), 4)
    for ta, tb in ((1, 1), (1, 3), (4, 2)):
        flow = render_flow(field, cam16, ta, tb)
        assert float(flow.flow[flow.valid].abs().max()) == 0.0


def test_translation_flow_is_uniform():
    cam = Camera(np.eye(3), np.array([0.0, 0.0, -4.0]), 1.0, 32, 32)
    g = _plane_grid()
    v = torch.tensor([0.1, -0.05, 0.3], dtype=F64)
    moved = Gaussians(**{**g.__dict__, "positions": g.positions + v})
    flow = render_flow_between(g, moved, cam)
    flow = flow.numpy()
    f, valid = flow.flow, flow.valid
    expect = np.array([0.1, -0.05]) * cam.scale
    assert valid.sum() > 200
    assert np.abs(f[valid] - expect).max() <= 1e-9


def test_rotation_flow_matches_analytic_field():
    cam = Camera(np.eye(3), np.array([0.0, 0.0, -4.0]), 1.0, 32, 32)
    g = _plane_grid(32)
    theta = math.radians(8.0)
    R = quat_to_rotmat(axis_angle_to_quat(torch.tensor([0.0, 0, 1], dtype=F64), theta))
    moved = Gaussians(**{**g.__dict__, "positions": g.positions @ R.T})
    flow = render_flow_between(g, moved, cam).numpy()
    f, valid = flow.flow, flow.valid
    ys, xs = np.mgrid[0:32, 0:32] + 0.5
    p = np.stack([xs - 16, ys - 16], -1)
    c, s = math.cos(theta), math.sin(theta)
    expect = np.stack([c * p[..., 0] - s * p[..., 1], s * p[..., 0] + c * p[..., 1]], -1) - p
    interior = valid.copy()
    for dy in (-2, 0, 2):
        for dx in (-2, 0, 2):
            interior &= np.roll(valid, (dy, dx), (0, 1))
    interior[[0, 1, -2, -1], :] = interior[:, [0, 1, -2, -1]] = False
    assert interior.sum() > 300
    assert np.linalg.norm(f[interior] - expect[interior], axis=-1).max() <= 0.5


# ---------------------------------------------------------------- normals

def test_normal_from_flat_depth():
    cam = _front(16)
    mask = torch.zeros(16, 16, dtype=torch.bool)
    mask[2:14, 3:12] = True
    n, valid = normal_from_depth(torch.full((16, 16), 2.5, dtype=F64), cam, mask)
    assert valid.sum() == 10 * 7
    assert torch.allclose(n[valid], torch.tensor([0.0, 0.0, -1.0], dtype=F64).expand(70, 3), atol=1e-6)
    assert float(n[~valid].abs().max()) == 0.0


def test_normal_from_tilted_plane():
    cam = _front(32, 1.5)
    a = 0.7
    xs = (np.arange(32) + 0.5 - 16) / cam.scale
    depth = torch.as_tensor(np.broadcast_to(3.0 + a * xs, (32, 32)).copy())
    n, valid = normal_from_depth(depth, cam, torch.ones(32, 32, dtype=torch.bool))
    expect = torch.tensor([a, 0.0, -1.0], dtype=F64) / math.sqrt(1 + a * a)
    assert float((n[valid] - expect).abs().max()) <= 1e-3
    assert torch.allclose(n[valid].norm(dim=-1), torch.ones(int(valid.sum()), dtype=F64), atol=1e-6)


def test_one_pixel_wide_mask_is_invalid():
    mask = torch.zeros(16, 16, dtype=torch.bool)
    mask[:, 7] = True
    mask[4, 9:] = True
    _, valid = normal_from_depth(torch.rand(16, 16, dtype=F64), _front(16), mask)
    assert not valid.any()


def test_rendered_normals_are_unit(cam16):
    g = random_gaussians(30, seed=8, spread=0.8, scale=(0.15, 0.3))
    g.opacity_logits = g.opacity_logits + 5.0
    out = rasterize(g, cam16, {"alpha", "normal"})
    norms = out.normal[out.normal_valid].norm(dim=-1)
    assert len(norms) > 0
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)
