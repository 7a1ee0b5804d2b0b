"""Synthetic oracle scenes with analytic depth, normals and flow.

A scene is a union of textured spheres ("bodies"), each following a rigid
motion x -> R_n (x - pivot) + pivot + t_n. Images and masks are rendered with
the splatting renderer from a hand-built Gaussian field whose controls replay
the same motion exactly; depth, normals and flows come from ray-sphere
intersection and never touch the renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from torch import nn

from .data import FlowMap, MultiviewSequence
from .errors import InvalidArgument
from .field import Gaussians, GaussianField, control_graph, fps_sample, knn_assign
from .geometry import rotmat_to_quat
from .render import DEFAULT_AZIMUTHS, Camera, default_cameras, rasterize

KINDS = ("sphere", "translation", "rotation", "articulation")


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "translation"
    num_gaussians: int = 1200
    num_frames: int = 16
    velocity: tuple = (0.02, 0.0, 0.0)   # world units per frame
    angular_rate: float = 3.0            # degrees per frame, about world z
    image_size: tuple = (128, 128)
    azimuths: tuple = DEFAULT_AZIMUTHS
    elevation: float = 0.0
    half_extent: float = 1.0
    radius: float = 0.4
    heldout_azimuth: float = 22.5
    seed: int = 0


@dataclass
class Body:
    center: np.ndarray        # rest center (frame 1)
    radius: float
    pivot: np.ndarray
    velocity: np.ndarray      # per frame
    angular_rate: float       # radians per frame about +z

    def motion(self, n):
        """(R, t) taking frame-1 points to frame n."""
        ang = self.angular_rate * (n - 1)
        c, s = math.cos(ang), math.sin(ang)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return R, self.velocity * (n - 1)

    def apply(self, n, x):
        R, t = self.motion(n)
        return (x - self.pivot) @ R.T + self.pivot + t

    def unapply(self, n, x):
        R, t = self.motion(n)
        return (x - self.pivot - t) @ R + self.pivot

    def center_at(self, n):
        return self.apply(n, self.center[None])[0]


def make_bodies(spec):
    r = spec.radius
    zero = np.zeros(3)
    v = np.asarray(spec.velocity, dtype=np.float64)
    w = math.radians(spec.angular_rate)
    span = spec.num_frames - 1
    if spec.kind == "sphere":
        return [Body(zero.copy(), r, zero.copy(), zero.copy(), 0.0)]
    if spec.kind == "translation":
        start = -0.5 * span * v
        return [Body(start, r, zero.copy(), v, 0.0)]
    if spec.kind == "rotation":
        return [Body(zero.copy(), r, zero.copy(), zero.copy(), w)]
    if spec.kind == "articulation":
        rb = 0.6 * r
        return [Body(np.array([-0.45, 0.0, 0.0]), rb, zero.copy(), zero.copy(), 0.0),
                Body(np.array([0.45, 0.0, 0.0]), rb, zero.copy(), zero.copy(), w)]
    raise InvalidArgument(f"unknown scene kind {spec.kind!r}; expected one of {KINDS}")


def _fibonacci_sphere(count):
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def _texture(local):
    """Smooth RGB pattern in body-local coordinates (moves with the body)."""
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    r = 0.5 + 0.35 * np.sin(7.0 * x + 2.0 * y)
    g = 0.5 + 0.35 * np.sin(6.0 * y - 3.0 * z + 1.0)
    b = 0.5 + 0.35 * np.cos(5.0 * z + 4.0 * x)
    return np.stack([r, g, b], -1)


def _surface_gaussians(body, count, rng):
    dirs = _fibonacci_sphere(count)
    dirs = dirs + 0.01 * rng.standard_normal(dirs.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pos = body.center + body.radius * dirs
    helper = np.where(np.abs(dirs[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(helper, dirs)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(dirs, t1)
    rot = np.stack([t1, t2, dirs], -1)       # columns: tangent, tangent, normal
    spacing = body.radius * math.sqrt(4 * math.pi / count)
    sigma = 0.55 * spacing
    log_scales = np.log(np.array([sigma, sigma, 0.25 * sigma]))
    return dict(
        positions=pos,
        orientations=rotmat_to_quat(torch.as_tensor(rot)).numpy(),
        log_scales=np.tile(log_scales, (count, 1)),
        opacity_logits=np.full(count, 2.5),
        colors=_texture(dirs),
    )


class RigidTrack(nn.Module):
    """Stand-in deformation module that replays known rigid body motions.

    Emits, for every control, the 7-vector the control blend expects: the
    translation making a rotation about the control's own rest position equal
    the body motion, and the quaternion offset from identity.
    """

    def __init__(self, bodies, control_body, num_frames):
        super().__init__()
        self.bodies = bodies
        self.control_body = np.asarray(control_body)
        self.num_frames = num_frames

    def forward(self, rest_positions, time):
        n = int(round(time * (self.num_frames - 1))) + 1 if self.num_frames > 1 else 1
        p = rest_positions.detach().cpu().numpy().astype(np.float64)
        out = np.zeros((len(p), 7))
        for b, body in enumerate(self.bodies):
            sel = self.control_body == b
            R, _ = body.motion(n)
            out[sel, :3] = body.apply(n, p[sel]) - p[sel]
            q = rotmat_to_quat(torch.as_tensor(R)).numpy()
            out[sel, 3:] = q - np.array([1.0, 0.0, 0.0, 0.0])
        return torch.as_tensor(out, dtype=rest_positions.dtype)


@dataclass
class SceneTruth:
    """Ground-truth field plus rendered training and held-out sequences."""

    spec: SceneSpec
    bodies: list
    field: GaussianField
    sequence: MultiviewSequence
    heldout: MultiviewSequence
    body_of: np.ndarray = dc_field(default=None)   # per-Gaussian body index

    def surface(self, camera, n, px=None, py=None):
        """Analytic ray hits. Returns (depth, body, hit) at pixel-index coords (default: all pixels)."""
        return surface_hits(self.bodies, camera, n, px, py)

    def flow(self, camera, a, b, px=None, py=None):
        return analytic_flow(self.bodies, camera, a, b, px, py)


def _pixel_grid(camera):
    ys, xs = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    return xs, ys


def _camera_coords(camera, px, py):
    s = camera.scale
    return (px + 0.5 - camera.width / 2) / s, (py + 0.5 - camera.height / 2) / s


def surface_hits(bodies, camera, n, px=None, py=None):
    if px is None:
        px, py = _pixel_grid(camera)
    cx, cy = _camera_coords(camera, np.asarray(px, float), np.asarray(py, float))
    R = camera.rotation
    origin = camera.center + cx[..., None] * R[0] + cy[..., None] * R[1]
    fwd = R[2]
    depth = np.full(cx.shape, np.inf)
    body = np.full(cx.shape, -1, dtype=np.int64)
    for i, bd in enumerate(bodies):
        o = origin - bd.center_at(n)
        of = o @ fwd
        disc = of * of - ((o * o).sum(-1) - bd.radius ** 2)
        with np.errstate(invalid="ignore"):
            z = -of - np.sqrt(disc)
        closer = (disc >= 0) & (z < depth)
        depth = np.where(closer, z, depth)
        body = np.where(closer, i, body)
    return depth, body, body >= 0


def analytic_normals(bodies, camera, n):
    """Camera-frame unit normals facing the camera, plus hit mask."""
    depth, body, hit = surface_hits(bodies, camera, n)
    px, py = _pixel_grid(camera)
    cx, cy = _camera_coords(camera, px, py)
    R = camera.rotation
    z = np.where(hit, depth, 0.0)
    P = camera.center + cx[..., None] * R[0] + cy[..., None] * R[1] + z[..., None] * R[2]
    normals = np.zeros(P.shape)
    for i, bd in enumerate(bodies):
        sel = body == i
        normals[sel] = (P[sel] - bd.center_at(n)) / bd.radius
    normals = normals @ R.T
    return np.where(hit[..., None], normals, 0.0), hit


def analytic_flow(bodies, camera, a, b, px=None, py=None):
    """Pixel displacement of the visible surface point at (px, py), frame a -> b."""
    grid = px is None
    if grid:
        px, py = _pixel_grid(camera)
    px, py = np.asarray(px, float), np.asarray(py, float)
    depth, body, hit = surface_hits(bodies, camera, a, px, py)
    cx, cy = _camera_coords(camera, px, py)
    R = camera.rotation
    z = np.where(hit, depth, 0.0)
    P = camera.center + cx[..., None] * R[0] + cy[..., None] * R[1] + z[..., None] * R[2]
    Q = P.copy()
    for i, bd in enumerate(bodies):
        sel = body == i
        Q[sel] = bd.apply(b, bd.unapply(a, P[sel]))
    d = (Q - P) @ R.T * camera.scale
    flow = np.where(hit[..., None], d[..., :2], 0.0)
    return FlowMap(flow, hit) if grid else (flow, hit)


def build_truth_field(spec, bodies, rng):
    counts = np.full(len(bodies), spec.num_gaussians // len(bodies))
    counts[: spec.num_gaussians - counts.sum()] += 1
    parts = [_surface_gaussians(bd, int(c), rng) for bd, c in zip(bodies, counts)]
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    body_of = np.repeat(np.arange(len(bodies)), counts)
    t = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in cat.items()}
    gaussians = Gaussians(t["positions"], t["orientations"], t["log_scales"],
                          t["opacity_logits"], t["colors"])
    # controls per body so that every Gaussian's three neighbours share its motion
    ctl, ctl_body = [], []
    for i in range(len(bodies)):
        pts = cat["positions"][body_of == i]
        idx = fps_sample(pts, min(64, len(pts)))
        ctl.append(pts[idx])
        ctl_body += [i] * len(idx)
    ctl = np.concatenate(ctl)
    field = GaussianField(
        gaussians, spec.num_frames,
        control_positions=torch.as_tensor(ctl),
        rbf_log_radii=torch.full((len(ctl),), math.log(0.1), dtype=torch.float64),
        knn=torch.as_tensor(knn_assign(cat["positions"], ctl)),
        deformation=RigidTrack(bodies, ctl_body, spec.num_frames),
        arap_edges=control_graph(ctl),
    )
    return field, body_of


def render_views(truth_field, bodies, cameras, num_frames, with_flows=True):
    """Render images, masks and analytic normals/flows for every (frame, camera)."""
    from .field import deform

    N, K = num_frames, len(cameras)
    W, H = cameras[0].width, cameras[0].height
    images = np.zeros((N, K, H, W, 3), dtype=np.float32)
    masks = np.zeros((N, K, H, W), dtype=bool)
    normals = np.zeros((N, K, H, W, 3), dtype=np.float32)
    normal_valid = np.zeros((N, K, H, W), dtype=bool)
    with torch.no_grad():
        for n in range(1, N + 1):
            g = deform(truth_field, n)
            for i, cam in enumerate(cameras):
                out = rasterize(g, cam, {"rgb", "alpha"})
                images[n - 1, i] = out.rgb.numpy()
                masks[n - 1, i] = out.coverage.numpy()
                nrm, hit = analytic_normals(bodies, cam, n)
                normals[n - 1, i] = nrm
                normal_valid[n - 1, i] = hit & masks[n - 1, i]
    seq = MultiviewSequence(list(cameras), images, masks, normals, normal_valid)
    if with_flows:
        for cam in cameras:
            k = cam.viewpoint_index
            for n in range(1, N):
                seq.forward[(n, k)] = analytic_flow(bodies, cam, n, n + 1)
                seq.backward[(n, k)] = analytic_flow(bodies, cam, n + 1, n)
    return seq


def make_scene(spec):
    """Ground-truth field plus training sequence and a held-out view.

    The held-out camera sits at ``spec.heldout_azimuth`` with viewpoint index
    K + 1.
    """
    if spec.num_frames < 1:
        raise InvalidArgument("num_frames must be positive")
    bodies = make_bodies(spec)
    rng = np.random.default_rng(spec.seed)
    field, body_of = build_truth_field(spec, bodies, rng)
    cams = default_cameras(spec.image_size, spec.azimuths, spec.elevation, spec.half_extent)
    held = Camera.orbit(spec.heldout_azimuth, spec.elevation, spec.image_size, spec.half_extent,
                        viewpoint_index=len(cams) + 1)
    seq = render_views(field, bodies, cams, spec.num_frames)
    heldout = render_views(field, bodies, [held], spec.num_frames)
    return SceneTruth(spec, bodies, field, seq, heldout, body_of)
