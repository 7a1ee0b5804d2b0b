"""Quaternion and rotation helpers. Quaternions are stored (w, x, y, z)."""

import torch


def normalize_quat(q, eps=1e-12):
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions (normalized internally)."""
    q = normalize_quat(q)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def quat_multiply(a, b):
    """Hamilton product a * b (apply b first, then a)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def axis_angle_to_quat(axis, angle):
    axis = torch.as_tensor(axis, dtype=torch.float64)
    axis = axis / axis.norm()
    half = torch.as_tensor(angle, dtype=torch.float64) / 2
    return torch.cat([torch.cos(half).reshape(1), torch.sin(half) * axis])


def rotmat_to_quat(R):
    """Rotation matrices (..., 3, 3) to unit quaternions with w >= 0.

    Picks, per matrix, the best-conditioned of the four standard extraction
    formulas.
    """
    R = torch.as_tensor(R, dtype=torch.float64)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    d = torch.stack([1 + m00 + m11 + m22, 1 + m00 - m11 - m22,
                     1 - m00 + m11 - m22, 1 - m00 - m11 + m22], -1)
    a = R[..., 2, 1] - R[..., 1, 2]
    b = R[..., 0, 2] - R[..., 2, 0]
    c = R[..., 1, 0] - R[..., 0, 1]
    e = R[..., 0, 1] + R[..., 1, 0]
    f = R[..., 0, 2] + R[..., 2, 0]
    g = R[..., 1, 2] + R[..., 2, 1]
    cand = torch.stack([
        torch.stack([d[..., 0], a, b, c], -1),
        torch.stack([a, d[..., 1], e, f], -1),
        torch.stack([b, e, d[..., 2], g], -1),
        torch.stack([c, f, g, d[..., 3]], -1),
    ], -2)
    best = d.argmax(-1)
    q = torch.gather(cand, -2, best[..., None, None].expand(*best.shape, 1, 4))[..., 0, :]
    q = normalize_quat(q)
    return torch.where(q[..., :1] < 0, -q, q)
