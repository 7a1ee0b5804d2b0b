"""Dynamic Gaussian field: static splats driven by sparse control points.

A canonical set of 3D Gaussians is deformed to any frame of the timeline by a
small MLP that emits one rigid motion per control point. Each Gaussian follows
its three nearest controls, blended with normalized RBF weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument
from .geometry import normalize_quat, quat_multiply, quat_to_rotmat

NUM_NEIGHBORS = 3


@dataclass
class Gaussians:
    """Struct-of-arrays view of G splats.

    ``orientations`` are unit quaternions, ``log_scales`` are per-axis log
    standard deviations, ``colors`` are linear RGB stored unclamped.
    """

    positions: torch.Tensor        # (G, 3)
    orientations: torch.Tensor     # (G, 4)
    log_scales: torch.Tensor       # (G, 3)
    opacity_logits: torch.Tensor   # (G,)
    colors: torch.Tensor           # (G, 3)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def tensors(self):
        return [getattr(self, f.name) for f in fields(self)]

    def map(self, fn):
        return Gaussians(*[fn(t) for t in self.tensors()])

    def detach(self):
        return self.map(lambda t: t.detach())

    def select(self, index):
        return self.map(lambda t: t[index])

    def to(self, dtype):
        return self.map(lambda t: t.to(dtype))

    @staticmethod
    def cat(parts):
        return Gaussians(*[torch.cat(ts, 0) for ts in zip(*[p.tensors() for p in parts])])

    def opacities(self):
        return torch.sigmoid(self.opacity_logits)

    def covariances(self):
        R = quat_to_rotmat(self.orientations)
        s2 = torch.exp(2 * self.log_scales)
        return (R * s2[..., None, :]) @ R.transpose(-1, -2)


def _encode(x, bands):
    freqs = 2.0 ** torch.arange(bands, dtype=x.dtype, device=x.device)
    ang = x[..., None] * freqs
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], -1).flatten(-2)
    return torch.cat([x, enc], -1)


class DeformationNet(nn.Module):
    """MLP mapping (rest position, normalized time) to a per-control rigid motion.

    Output columns are 3 translation components and 4 quaternion offsets added
    to the identity quaternion. The last layer starts at zero, so a fresh net
    emits the identity motion.
    """

    def __init__(self, pos_bands=6, time_bands=4, width=64, depth=3):
        super().__init__()
        self.pos_bands = pos_bands
        self.time_bands = time_bands
        self.width = width
        self.depth = depth
        in_dim = 3 * (1 + 2 * pos_bands) + (1 + 2 * time_bands)
        layers = []
        for i in range(depth):
            layers += [nn.Linear(in_dim if i == 0 else width, width), nn.SiLU()]
        self.hidden = nn.Sequential(*layers)
        self.head = nn.Linear(width, 7)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, rest_positions, time):
        t = torch.full_like(rest_positions[:, :1], float(time))
        h = torch.cat([_encode(rest_positions, self.pos_bands), _encode(t, self.time_bands)], -1)
        return self.head(self.hidden(h))

    def architecture(self):
        return (self.pos_bands, self.time_bands, self.width, self.depth)

    def flat_parameters(self):
        """Weights flattened layer by layer (weight then bias)."""
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def load_flat_parameters(self, flat):
        flat = torch.as_tensor(flat)
        sizes = [p.numel() for p in self.parameters()]
        if flat.numel() != sum(sizes):
            raise InvalidArgument(f"expected {sum(sizes)} net weights, got {flat.numel()}")
        with torch.no_grad():
            offset = 0
            for p in self.parameters():
                p.copy_(flat[offset:offset + p.numel()].reshape(p.shape).to(p.dtype))
                offset += p.numel()


@dataclass
class GaussianField:
    gaussians: Gaussians
    num_frames: int
    control_positions: torch.Tensor | None = None   # (M, 3), fixed
    rbf_log_radii: torch.Tensor | None = None       # (M,)
    knn: torch.Tensor | None = None                 # (G, 3) int64
    deformation: DeformationNet | None = None
    arap_edges: torch.Tensor | None = None          # (E, 2) int64
    canonical_frame: int = 1

    @property
    def has_controls(self):
        return self.control_positions is not None

    def normalized_time(self, n):
        check_frame(self, n)
        return 0.0 if self.num_frames == 1 else (n - 1) / (self.num_frames - 1)

    def clone(self):
        net = None
        if self.deformation is not None:
            net = DeformationNet(*self.deformation.architecture()).to(self.deformation.head.weight.dtype)
            net.load_state_dict(self.deformation.state_dict())
        c = lambda t: None if t is None else t.detach().clone()
        return replace(
            self,
            gaussians=self.gaussians.map(lambda t: t.detach().clone()),
            control_positions=c(self.control_positions),
            rbf_log_radii=c(self.rbf_log_radii),
            knn=c(self.knn),
            deformation=net,
            arap_edges=c(self.arap_edges),
        )


def check_frame(field, n):
    if not (isinstance(n, (int, np.integer)) and 1 <= n <= field.num_frames):
        raise InvalidArgument(f"timestep {n!r} outside timeline 1..{field.num_frames}")


def fps_sample(points, k, seed_index=0):
    """Greedy farthest point sampling.

    Args:
        points: (P, 3) array-like.
        k: number of indices to return.
        seed_index: first selected index.

    Returns:
        (k,) int64 indices; ties in the max-min distance go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidArgument("fps_sample needs at least one point")
    if not 1 <= k <= len(pts):
        raise InvalidArgument(f"cannot sample {k} of {len(pts)} points")
    if not 0 <= seed_index < len(pts):
        raise InvalidArgument(f"seed_index {seed_index} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    mind = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def knn_assign(positions, control_positions, k=NUM_NEIGHBORS):
    """Indices of the k nearest controls per Gaussian, nearest first, ties to lower index."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ctl = np.asarray(control_positions, dtype=np.float64).reshape(-1, 3)
    if len(ctl) < k:
        raise InvalidArgument(f"need at least {k} control points, got {len(ctl)}")
    out = np.empty((len(pos), k), dtype=np.int64)
    for start in range(0, len(pos), 4096):
        d2 = ((pos[start:start + 4096, None, :] - ctl[None]) ** 2).sum(-1)
        out[start:start + 4096] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def rbf_weights(positions, neighbor_positions, neighbor_log_radii):
    """Normalized RBF blend weights.

    Shapes: positions (..., 3), neighbor_positions (..., 3, 3),
    neighbor_log_radii (..., 3). Raw weights exp(-d^2 / 2r^2) are normalized
    to sum to one; rows whose raw weights all underflow become uniform.
    """
    d2 = ((positions[..., None, :] - neighbor_positions) ** 2).sum(-1)
    r2 = torch.exp(2 * neighbor_log_radii)
    raw = torch.exp(-d2 / (2 * r2))
    total = raw.sum(-1, keepdim=True)
    ok = total > 0
    w = raw / torch.where(ok, total, torch.ones_like(total))
    return torch.where(ok, w, torch.full_like(w, 1.0 / raw.shape[-1]))


def control_motions(field, n):
    """Per-control (unit quaternion, translation) at frame n.

    The net output at the canonical frame is subtracted, so the canonical frame
    always maps to the rest configuration.
    """
    check_frame(field, n)
    net = field.deformation
    ctl = field.control_positions
    out = net(ctl, field.normalized_time(n))
    if n != field.canonical_frame:
        out = out - net(ctl, field.normalized_time(field.canonical_frame))
    else:
        out = out - out
    ident = torch.zeros_like(out[:, 3:])
    ident[:, 0] = 1
    return normalize_quat(ident + out[:, 3:]), out[:, :3]


def blend_control_motions(gaussians, control_positions, rbf_log_radii, knn, quats, translations):
    """Deform Gaussians given explicit per-control rigid motions."""
    nbr_pos = control_positions[knn]                     # (G, 3, 3)
    w = rbf_weights(gaussians.positions, nbr_pos, rbf_log_radii[knn])
    R = quat_to_rotmat(quats)[knn]                       # (G, 3, 3, 3)
    local = (gaussians.positions[:, None, :] - nbr_pos)[..., None]
    moved = (R @ local)[..., 0] + nbr_pos + translations[knn]
    positions = (w[..., None] * moved).sum(1)

    q = quats[knn]                                       # (G, 3, 4)
    sign = torch.where((q * q[:, :1]).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(q.dtype)
    q_blend = normalize_quat((w[..., None] * sign * q).sum(1))
    orientations = quat_multiply(q_blend, gaussians.orientations)
    return replace(gaussians, positions=positions, orientations=orientations)


def deform(field, n):
    """Gaussians of ``field`` moved to frame n. Scales, opacities and colors are untouched."""
    check_frame(field, n)
    if not field.has_controls or n == field.canonical_frame:
        return field.gaussians
    quats, trans = control_motions(field, n)
    return blend_control_motions(field.gaussians, field.control_positions, field.rbf_log_radii,
                                 field.knn, quats, trans)


def control_graph(rest_positions, degree=4):
    """Undirected kNN graph over control rest positions as unique (j, k) pairs, j < k."""
    pts = np.asarray(rest_positions, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    degree = min(degree, m - 1)
    if degree < 1:
        return torch.zeros((0, 2), dtype=torch.int64)
    d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :degree]
    pairs = {(min(j, k), max(j, k)) for j in range(m) for k in nbrs[j]}
    return torch.as_tensor(sorted(pairs), dtype=torch.int64).reshape(-1, 2)


def arap_from_positions(pos_a, pos_b, edges):
    """Mean absolute change in edge length between two deformed control sets."""
    if len(edges) == 0:
        return pos_a.sum() * 0
    j, k = edges[:, 0], edges[:, 1]
    la = (pos_a[j] - pos_a[k]).norm(dim=-1)
    lb = (pos_b[j] - pos_b[k]).norm(dim=-1)
    return (la - lb).abs().mean()


def deformed_controls(field, n):
    check_frame(field, n)
    if n == field.canonical_frame:
        return field.control_positions
    return field.control_positions + control_motions(field, n)[1]


def arap_energy(field, timestep_a, timestep_b):
    check_frame(field, timestep_a)
    check_frame(field, timestep_b)
    if not field.has_controls:
        raise InvalidArgument("field has no control points")
    if timestep_a == timestep_b:
        return field.control_positions.sum() * 0
    return arap_from_positions(deformed_controls(field, timestep_a),
                               deformed_controls(field, timestep_b), field.arap_edges)


def attach_controls(field, num_controls=512, seed_index=0, arap_degree=4, seed=0):
    """Add FPS-sampled controls, kNN assignment and a fresh deformation net.

    The control count is capped by the number of Gaussians. ``seed`` fixes the
    hidden-layer initialization without touching the global torch RNG.
    """
    g = field.gaussians
    pos = g.positions.detach().cpu().numpy()
    m = min(num_controls, len(pos))
    if m < NUM_NEIGHBORS:
        raise InvalidArgument(f"need at least {NUM_NEIGHBORS} Gaussians to place controls, got {len(pos)}")
    idx = fps_sample(pos, m, seed_index)
    ctl = pos[idx]
    d2 = ((ctl[:, None] - ctl[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    spacing = float(np.sqrt(d2.min(axis=1)).mean())
    dtype = g.dtype
    field.control_positions = torch.as_tensor(ctl, dtype=dtype)
    field.rbf_log_radii = torch.full((m,), math.log(max(spacing, 1e-4)), dtype=dtype)
    field.knn = torch.as_tensor(knn_assign(pos, ctl), dtype=torch.int64)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        field.deformation = DeformationNet().to(dtype)
    field.arap_edges = control_graph(ctl, arap_degree)
    return field
