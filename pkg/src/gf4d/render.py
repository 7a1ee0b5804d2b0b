"""Orthographic splatting renderer with RGB, alpha, depth, normal and flow outputs.

Geometry (projection, covariance, depth normalization, normals) runs in torch
autograd; per-pixel compositing is a tile-binned numba kernel exposed as a
``torch.autograd.Function``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from . import _raster
from .data import FlowMap
from .errors import InvalidArgument
from .field import deform

ALL_CHANNELS = frozenset({"rgb", "alpha", "depth", "normal", "flow"})
IMAGE_CHANNELS = frozenset({"rgb", "alpha", "depth", "normal"})
DEFAULT_AZIMUTHS = (0.0, 45.0, 90.0, 180.0, 270.0, 315.0)


@dataclass(frozen=True)
class Camera:
    """Orthographic camera. Rotation rows are the camera x (right), y (down), z (forward) axes."""

    rotation: np.ndarray
    center: np.ndarray
    half_extent: float
    width: int
    height: int
    viewpoint_index: int = 1

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise InvalidArgument("camera rotation is not orthonormal")
        if self.half_extent <= 0 or self.width <= 0 or self.height <= 0:
            raise InvalidArgument("camera extent and image size must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @property
    def scale(self):
        """Pixels per world unit."""
        return self.width / (2.0 * self.half_extent)

    @classmethod
    def orbit(cls, azimuth_deg, elevation_deg=0.0, size=(128, 128), half_extent=1.0,
              distance=4.0, viewpoint_index=1):
        """Camera on a sphere around the origin looking at it, world +y up."""
        az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
        pos = distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        fwd = -pos / np.linalg.norm(pos)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.array([1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(np.stack([right, down, fwd]), pos, half_extent, int(size[0]), int(size[1]), viewpoint_index)

    def to_array(self):
        return np.concatenate([self.rotation.reshape(-1), self.center,
                               [self.half_extent, self.width, self.height, self.viewpoint_index]])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:9].reshape(3, 3), a[9:12], float(a[12]), int(a[13]), int(a[14]), int(a[15]))


def default_cameras(size=(128, 128), azimuths=DEFAULT_AZIMUTHS, elevation=0.0, half_extent=1.0):
    return [Camera.orbit(az, elevation, size, half_extent, viewpoint_index=i + 1)
            for i, az in enumerate(azimuths)]


@dataclass(frozen=True)
class RenderSettings:
    min_alpha: float = 1.0 / 255.0     # splat support cutoff; 0 disables culling
    alpha_cap: float = 0.99
    t_min: float = 1e-4
    cov_reg: float = 0.3               # px^2 added to every 2D covariance
    coverage_threshold: float = 0.5


@dataclass
class RenderReport:
    num_gaussians: int
    num_degenerate: int
    num_culled: int

    @property
    def empty(self):
        return self.num_degenerate == self.num_gaussians


@dataclass
class RenderOutput:
    alpha: torch.Tensor                      # (H, W)
    coverage: torch.Tensor                   # (H, W) bool
    report: RenderReport
    rgb: torch.Tensor | None = None          # (H, W, 3)
    depth: torch.Tensor | None = None        # (H, W)
    normal: torch.Tensor | None = None       # (H, W, 3)
    normal_valid: torch.Tensor | None = None
    flow: torch.Tensor | None = None         # (H, W, 2)
    extras: dict = dc_field(default_factory=dict)
    means2d: torch.Tensor | None = None      # (G, 2) pixel means fed to the compositor
    radii: np.ndarray | None = None          # (G,) support radius in pixels, 0 if skipped

    def flow_map(self):
        return FlowMap(self.flow, self.coverage)


def project(gaussians, camera, cov_reg=0.3):
    """Pixel-space means (G, 2), 2D covariances (G, 2, 2) and camera depths (G,)."""
    dt = gaussians.dtype
    R = torch.as_tensor(camera.rotation, dtype=dt)
    c = torch.as_tensor(camera.center, dtype=dt)
    pc = (gaussians.positions - c) @ R.T
    s = camera.scale
    mean2d = torch.stack([camera.width / 2 + s * pc[:, 0], camera.height / 2 + s * pc[:, 1]], -1)
    J = s * R[:2]
    cov2d = J @ gaussians.covariances() @ J.T + cov_reg * torch.eye(2, dtype=dt)
    return mean2d, cov2d, pc[:, 2]


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conics, opac, feats, order, radii, cfg):
        width, height, min_alpha, cap, t_min = cfg
        m = means.detach().double().numpy()[order]
        co = conics.detach().double().numpy()[order]
        op = opac.detach().double().numpy()[order]
        ft = feats.detach().double().numpy()[order]
        offsets, lists = _raster.bin_tiles(m, radii[order], width, height, _raster.TILE)
        out, final_t, n_used = _raster.composite_forward(
            m, co, op, ft, offsets, lists, width, height, _raster.TILE, min_alpha, cap, t_min)
        ctx.saved = (m, co, op, ft, offsets, lists, n_used, order, cfg)
        dt = means.dtype
        return torch.from_numpy(out).to(dt), torch.from_numpy(1.0 - final_t).to(dt)

    @staticmethod
    def backward(ctx, grad_out, grad_alpha):
        m, co, op, ft, offsets, lists, n_used, order, cfg = ctx.saved
        width, height, min_alpha, cap, _ = cfg
        go = np.zeros((height, width, ft.shape[1])) if grad_out is None else grad_out.double().numpy()
        ga = np.zeros((height, width)) if grad_alpha is None else grad_alpha.double().numpy()
        d_m, d_c, d_o, d_f = _raster.composite_backward(
            m, co, op, ft, offsets, lists, n_used, width, height, _raster.TILE,
            min_alpha, cap, np.ascontiguousarray(go), np.ascontiguousarray(ga))
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        dt = grad_alpha.dtype if grad_alpha is not None else grad_out.dtype
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a[inv])).to(dt)
        return t(d_m), t(d_c), t(d_o), t(d_f), None, None, None


def _support_radii(cov2d, opac, settings, width, height):
    cov = cov2d.detach().double().numpy()
    op = opac.detach().double().numpy()
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    finite = np.isfinite(cov).all(axis=(1, 2)) & np.isfinite(op)
    degenerate = ~finite | ~(det > 0)
    with np.errstate(invalid="ignore"):
        mid = 0.5 * (a + c)
        lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    if settings.min_alpha > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.sqrt(np.maximum(2.0 * np.log(op / settings.min_alpha), 0.0))
        culled = ~degenerate & (op < settings.min_alpha)
        radii = np.ceil(k * np.sqrt(np.maximum(lam, 0.0))) + 1.0
    else:
        culled = np.zeros_like(degenerate)
        radii = np.full(len(op), 4.0 * (width + height))
    radii[degenerate | culled] = 0.0
    return radii, int(degenerate.sum()), int(culled.sum())


def _conics(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    safe = torch.where(det > 0, det, torch.ones_like(det))
    return torch.stack([c / safe, -b / safe, a / safe], -1)


def rasterize(gaussians, camera, channels=IMAGE_CHANNELS, flow_offsets=None, extras=None,
              settings=RenderSettings(), normal_mask=None, track_means=False):
    """Composite ``gaussians`` into ``camera``.

    Args:
        gaussians: deformed Gaussians (non-empty).
        camera: target camera.
        channels: subset of {"rgb", "alpha", "depth", "normal", "flow"}.
        flow_offsets: (G, 2) per-Gaussian pixel offsets, required for "flow".
        extras: optional name -> (G, C) per-Gaussian attributes, returned as
            alpha-normalized maps in ``RenderOutput.extras``.
        settings: numerical knobs.
        normal_mask: mask for the normal stencil; defaults to the coverage mask.
        track_means: keep the gradient of the projected means on
            ``RenderOutput.means2d`` (used by density control).

    Returns:
        RenderOutput. Depth, flow and extras are alpha-weighted means; rgb is
        premultiplied (black background).
    """
    if len(gaussians) == 0:
        raise InvalidArgument("rasterize needs at least one Gaussian")
    channels = set(channels)
    unknown = channels - ALL_CHANNELS
    if unknown:
        raise InvalidArgument(f"unknown channels {sorted(unknown)}")
    if "flow" in channels and flow_offsets is None:
        raise InvalidArgument("flow channel requires flow_offsets")
    W, H = camera.width, camera.height
    dt = gaussians.dtype
    mean2d, cov2d, depth = project(gaussians, camera, settings.cov_reg)
    opac = gaussians.opacities()
    radii, n_deg, n_cull = _support_radii(cov2d, opac, settings, W, H)
    report = RenderReport(len(gaussians), n_deg, n_cull)

    feats, slots = [], {}

    def add(name, t):
        slots[name] = (sum(f.shape[1] for f in feats), t.shape[1])
        feats.append(t)

    if "rgb" in channels:
        add("rgb", gaussians.colors.clamp(0.0, 1.0))
    if channels & {"depth", "normal"}:
        add("depth", depth[:, None])
    if "flow" in channels:
        add("flow", flow_offsets)
    for name, t in (extras or {}).items():
        add("x:" + name, t.reshape(len(gaussians), -1).to(dt))
    feat = torch.cat(feats, 1) if feats else torch.zeros((len(gaussians), 1), dtype=dt)

    mean_in = None
    if report.empty:
        img = torch.zeros((H, W, feat.shape[1]), dtype=dt)
        alpha = torch.zeros((H, W), dtype=dt)
    else:
        finite = torch.isfinite(cov2d).all(-1).all(-1)
        mean_in = torch.where(finite[:, None], mean2d, torch.zeros_like(mean2d))
        if track_means and mean_in.requires_grad:
            mean_in.retain_grad()
        conic = _conics(torch.where(finite[:, None, None], cov2d, torch.eye(2, dtype=dt)))
        order = np.argsort(depth.detach().cpu().numpy(), kind="stable")
        cfg = (W, H, float(settings.min_alpha), float(settings.alpha_cap), float(settings.t_min))
        img, alpha = _Composite.apply(mean_in, conic, opac, feat, order, radii, cfg)

    coverage = (alpha > settings.coverage_threshold).detach()
    safe_alpha = torch.where(alpha > 1e-8, alpha, torch.ones_like(alpha))

    def normalized(name):
        lo, n = slots[name]
        v = img[..., lo:lo + n] / safe_alpha[..., None]
        return torch.where((alpha > 1e-8)[..., None], v, torch.zeros_like(v))

    out = RenderOutput(alpha=alpha, coverage=coverage, report=report, means2d=mean_in, radii=radii)
    if "rgb" in channels:
        lo, n = slots["rgb"]
        out.rgb = img[..., lo:lo + n]
    if channels & {"depth", "normal"}:
        out.depth = normalized("depth")[..., 0]
    if "normal" in channels:
        mask = coverage if normal_mask is None else normal_mask
        out.normal, out.normal_valid = normal_from_depth(out.depth, camera, mask)
    if "flow" in channels:
        out.flow = normalized("flow")
    for name in extras or {}:
        out.extras[name] = normalized("x:" + name)
    return out


def render_flow_between(gaussians_a, gaussians_b, camera, settings=RenderSettings()):
    """Flow from the configuration ``gaussians_a`` to ``gaussians_b`` (same splats)."""
    mean_a = project(gaussians_a, camera)[0]
    mean_b = project(gaussians_b, camera)[0]
    out = rasterize(gaussians_a, camera, {"alpha", "flow"}, flow_offsets=mean_b - mean_a, settings=settings)
    return FlowMap(out.flow, out.coverage)


def render_flow(field, camera, t_a, t_b, settings=RenderSettings()):
    """2D flow (pixels) at frame t_a geometry pointing to where each surface point is at t_b."""
    return render_flow_between(deform(field, t_a), deform(field, t_b), camera, settings)


def normal_from_depth(depth, camera, mask):
    """Camera-frame unit normals from a depth map via central differences.

    Normals point toward the camera (negative z). A pixel is valid only if it
    and its four stencil neighbours lie inside ``mask``; invalid pixels are zero.
    """
    depth = torch.as_tensor(depth)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    H, W = depth.shape
    inv_s = 1.0 / camera.scale
    valid = torch.zeros((H, W), dtype=torch.bool)
    if H >= 3 and W >= 3:
        valid[1:-1, 1:-1] = (mask[1:-1, 1:-1] & mask[1:-1, 2:] & mask[1:-1, :-2]
                             & mask[2:, 1:-1] & mask[:-2, 1:-1])
    zx = torch.zeros_like(depth)
    zy = torch.zeros_like(depth)
    zx[:, 1:-1] = 0.5 * (depth[:, 2:] - depth[:, :-2])
    zy[1:-1, :] = 0.5 * (depth[2:, :] - depth[:-2, :])
    zx = torch.where(valid, zx, torch.zeros_like(zx))
    zy = torch.where(valid, zy, torch.zeros_like(zy))
    # cross(dP/dy, dP/dx) with dP/dx = (1/s, 0, zx), dP/dy = (0, 1/s, zy)
    n = torch.stack([inv_s * zx, inv_s * zy, torch.full_like(zx, -inv_s * inv_s)], -1)
    n = n / n.norm(dim=-1, keepdim=True)
    return torch.where(valid[..., None], n, torch.zeros_like(n)), valid


def render_sequence(field, cameras, with_flows=True, settings=RenderSettings()):
    """Render every (frame, camera) of ``field`` into a MultiviewSequence.

    Masks are render coverage and normals are rendered normals (valid on
    coverage); consecutive forward / backward flows are rendered too when
    ``with_flows`` is set.
    """
    from .data import MultiviewSequence

    N, K = field.num_frames, len(cameras)
    W, H = cameras[0].width, cameras[0].height
    images = np.zeros((N, K, H, W, 3), np.float32)
    masks = np.zeros((N, K, H, W), bool)
    normals = np.zeros((N, K, H, W, 3), np.float32)
    valid = np.zeros((N, K, H, W), bool)
    with torch.no_grad():
        for n in range(1, N + 1):
            g = deform(field, n)
            for i, cam in enumerate(cameras):
                out = rasterize(g, cam, {"rgb", "alpha", "normal"}, settings=settings)
                images[n - 1, i] = out.rgb.numpy()
                masks[n - 1, i] = out.coverage.numpy()
                normals[n - 1, i] = out.normal.numpy()
                valid[n - 1, i] = out.normal_valid.numpy()
        seq = MultiviewSequence(list(cameras), images, masks, normals, valid)
        if with_flows:
            for cam in cameras:
                k = cam.viewpoint_index
                for n in range(1, N):
                    seq.forward[(n, k)] = render_flow(field, cam, n, n + 1, settings).numpy()
                    seq.backward[(n, k)] = render_flow(field, cam, n + 1, n, settings).numpy()
    return seq
