"""Image-sequence containers and flow utilities (numpy)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


@dataclass
class FlowMap:
    """Per-pixel 2D displacement (pixels) plus validity."""

    flow: np.ndarray    # (H, W, 2)
    valid: np.ndarray   # (H, W) bool

    def numpy(self):
        f = self.flow.detach().cpu().numpy() if hasattr(self.flow, "detach") else np.asarray(self.flow)
        v = self.valid.detach().cpu().numpy() if hasattr(self.valid, "detach") else np.asarray(self.valid)
        return FlowMap(f.astype(np.float64), v.astype(bool))

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))


def bilinear_sample(values, x, y, valid=None):
    """Sample ``values`` (H, W, ...) at continuous pixel-index coordinates.

    Pixel i has its center at coordinate i. Returns (samples, ok); ``ok`` is
    False where a tap with nonzero weight falls outside the grid or on a cell
    where ``valid`` is False.
    """
    H, W = values.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    x = np.where(ok, x, 0.0)
    y = np.where(ok, y, 0.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    flat = values.reshape(H, W, -1)
    out = np.zeros(x.shape + (flat.shape[-1],))
    for dy, dx, w in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                      (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xc, yc = np.clip(xi, 0, W - 1), np.clip(yi, 0, H - 1)
        good = inside if valid is None else inside & valid[yc, xc]
        ok &= (w == 0) | good
        out += w[..., None] * flat[yc, xc]
    return out.reshape(x.shape + values.shape[2:]), ok


def compose_flows(first, second):
    """Chain a->b with b->c into a->c using a bilinear lookup of the second flow."""
    first, second = first.numpy(), second.numpy()
    H, W = first.valid.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    tx = xs + first.flow[..., 0]
    ty = ys + first.flow[..., 1]
    f2, ok = bilinear_sample(second.flow, tx, ty, second.valid)
    return FlowMap(first.flow + np.where(ok[..., None], f2, 0.0), first.valid & ok)


@dataclass
class MultiviewSequence:
    """N frames x K views of images, masks, normals and consecutive flows.

    Frame and view indices are 1-based in the public API. Flows are keyed by
    (n, k): ``forward[(n, k)]`` maps frame n to n+1, ``backward[(n, k)]``
    maps frame n+1 back to n.
    """

    cameras: list
    images: np.ndarray                  # (N, K, H, W, 3) float32
    masks: np.ndarray                   # (N, K, H, W) bool
    normals: np.ndarray | None = None   # (N, K, H, W, 3) camera frame
    normal_valid: np.ndarray | None = None
    forward: dict = field(default_factory=dict)
    backward: dict = field(default_factory=dict)

    @property
    def num_frames(self):
        return self.images.shape[0]

    @property
    def num_views(self):
        return self.images.shape[1]

    @property
    def image_size(self):
        return self.images.shape[3], self.images.shape[2]

    def view_position(self, k):
        for i, cam in enumerate(self.cameras):
            if cam.viewpoint_index == k:
                return i
        raise InvalidArgument(f"unknown view {k}")

    def has_flows(self, k):
        return all((n, k) in self.forward and (n, k) in self.backward for n in range(1, self.num_frames))

    def flow_views(self):
        return [c.viewpoint_index for c in self.cameras if self.has_flows(c.viewpoint_index)]

    def pair_flow(self, k, a, b):
        """Flow from frame a to frame b in view k, chained from consecutive flows."""
        N = self.num_frames
        if not (1 <= a <= N and 1 <= b <= N):
            raise InvalidArgument(f"frames {a}, {b} outside 1..{N}")
        H, W = self.images.shape[2:4]
        if a == b:
            return FlowMap.zeros(H, W)
        if a < b:
            steps = [self.forward[(n, k)] for n in range(a, b)]
        else:
            steps = [self.backward[(n, k)] for n in range(a - 1, b - 1, -1)]
        out = steps[0].numpy()
        for s in steps[1:]:
            out = compose_flows(out, s)
        return out

    def subset_views(self, views):
        idx = [self.view_position(k) for k in views]
        keep = set(views)
        return MultiviewSequence(
            [self.cameras[i] for i in idx], self.images[:, idx], self.masks[:, idx],
            None if self.normals is None else self.normals[:, idx],
            None if self.normal_valid is None else self.normal_valid[:, idx],
            {key: v for key, v in self.forward.items() if key[1] in keep},
            {key: v for key, v in self.backward.items() if key[1] in keep},
        )
