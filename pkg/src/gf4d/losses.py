"""Training objectives on rendered buffers, and their weighted total.

Each loss returns a :class:`Term` holding the differentiable value and the
number of pixels (or edges) it averaged over. An empty support gives a zero
value with ``count == 0`` rather than a NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import bilinear_sample
from .errors import FormatError, InvalidArgument, TrainingAborted

TERMS = ("rgb", "mask", "dssim", "arap", "normal", "flow")
LUMA = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class Term(NamedTuple):
    value: torch.Tensor
    count: int
    skipped: int = 0


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None and torch.is_floating_point(like) else None
    a = np.asarray(x)
    if a.dtype == bool:
        return torch.as_tensor(a)
    return torch.as_tensor(a, dtype=dtype or torch.float64)


def _masked_mean(per_pixel, mask):
    """Mean of ``per_pixel`` over ``mask``; masked-out entries never touch the value."""
    n = int(mask.sum())
    if n == 0:
        return Term(per_pixel.sum() * 0, 0)
    picked = torch.where(mask, per_pixel, torch.zeros_like(per_pixel))
    return Term(picked.sum() / n, n)


def photometric_loss(render_rgb, target_rgb, target_mask):
    """Mean absolute RGB error over pixels inside ``target_mask`` (all channels)."""
    target = _as_tensor(target_rgb, render_rgb).to(render_rgb.dtype)
    mask = _as_tensor(target_mask).bool()
    per_pixel = (render_rgb - target).abs().mean(-1)
    return _masked_mean(per_pixel, mask)


def mask_loss(render_alpha, target_mask):
    """Mean absolute error between alpha and the binary mask over every pixel."""
    m = _as_tensor(target_mask).to(render_alpha.dtype)
    return Term((render_alpha - m).abs().mean(), m.numel())


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    w = torch.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def luminance(rgb):
    w = torch.as_tensor(LUMA, dtype=rgb.dtype)
    return (rgb * w).sum(-1)


def ssim_map(a, b):
    """Per-pixel SSIM of two single-channel (H, W) images; zero padding at borders."""
    w = gaussian_window(dtype=a.dtype)
    pad = SSIM_WINDOW // 2

    def blur(x):
        x = x[None, None]
        x = F.conv2d(x, w.view(1, 1, 1, -1), padding=(0, pad))
        x = F.conv2d(x, w.view(1, 1, -1, 1), padding=(pad, 0))
        return x[0, 0]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def dssim_loss(render_rgb, target_rgb, mask=None):
    """(1 - SSIM) / 2 on luminance, averaged over window centers inside ``mask``."""
    target = _as_tensor(target_rgb, render_rgb).to(render_rgb.dtype)
    s = ssim_map(luminance(render_rgb), luminance(target))
    if mask is None:
        mask = torch.ones(s.shape, dtype=torch.bool)
    return _masked_mean((1 - s) / 2, _as_tensor(mask).bool())


def occlusion_mask(forward, backward, threshold=1.5):
    """Pixels failing the forward-backward check ||f(x) + b(x + f(x))|| <= threshold.

    Pixels whose backward lookup leaves the grid or hits invalid flow count as
    occluded. Returns an (H, W) bool array, True where occluded.
    """
    fwd, bwd = forward.numpy(), backward.numpy()
    H, W = fwd.valid.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    back, ok = bilinear_sample(bwd.flow, xs + fwd.flow[..., 0], ys + fwd.flow[..., 1], bwd.valid)
    residual = np.linalg.norm(fwd.flow + back, axis=-1)
    consistent = ok & fwd.valid & (residual <= threshold)
    return ~consistent


def flow_loss(rendered, reference, occluded=None):
    """Mean per-pixel L1 norm of the flow difference over usable pixels.

    Usable means valid in both flows and not occluded. ``skipped`` counts the
    pixels dropped by the occlusion mask alone.
    """
    ref = reference.numpy()
    r_flow = rendered.flow
    r_valid = _as_tensor(rendered.valid).bool()
    both = r_valid & torch.as_tensor(ref.valid)
    usable = both
    skipped = 0
    if occluded is not None:
        occ = torch.as_tensor(np.asarray(occluded, dtype=bool))
        usable = both & ~occ
        skipped = int((both & occ).sum())
    target = torch.as_tensor(ref.flow, dtype=r_flow.dtype)
    target = torch.where(usable[..., None], target, torch.zeros_like(target))
    per_pixel = (r_flow - target).abs().sum(-1)
    t = _masked_mean(per_pixel, usable)
    return Term(t.value, t.count, skipped)


def normal_loss(rendered_normal, reference_normal, mask):
    """Mean over valid pixels of the component-averaged absolute difference."""
    ref = _as_tensor(reference_normal, rendered_normal).to(rendered_normal.dtype)
    mask = _as_tensor(mask).bool()
    ref = torch.where(mask[..., None], ref, torch.zeros_like(ref))
    per_pixel = (rendered_normal - ref).abs().mean(-1)
    return _masked_mean(per_pixel, mask)


def _detached(v):
    return v.detach() if isinstance(v, torch.Tensor) else v


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 0.8
    mask: float = 2.0
    dssim: float = 0.2
    arap: float = 1.0
    normal: float = 1.0
    flow: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise InvalidArgument(f"loss weight {f.name} must be nonnegative")

    def as_dict(self):
        return {name: getattr(self, name) for name in TERMS}


def total_loss(terms, weights=LossWeights()):
    """Weighted sum over the six terms (missing terms count as zero).

    Raises TrainingAborted naming the first non-finite term.
    """
    w = weights.as_dict()
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    for name in TERMS:
        if name in terms and not math.isfinite(float(_detached(terms[name]))):
            raise TrainingAborted(name)
    parts = [w[name] * terms[name] for name in TERMS if name in terms]
    if not parts:
        return 0.0
    if all(not isinstance(p, torch.Tensor) for p in parts):
        return math.fsum(parts)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


@dataclass
class LossReport:
    """One iteration's loss values as plain floats."""

    iteration: int
    values: dict
    total: float
    counts: dict = field(default_factory=dict)
    occluded: int = 0
    stage: str = ""

    def to_line(self):
        parts = [f"stage={self.stage or '-'}", f"iter={self.iteration}"]
        parts += [f"{name}={self.values.get(name, 0.0)!r}" for name in TERMS]
        parts.append(f"total={self.total!r}")
        parts += [f"n_{name}={self.counts.get(name, 0)}" for name in TERMS]
        parts.append(f"occluded={self.occluded}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line):
        try:
            kv = dict(item.split("=", 1) for item in line.split())
            return cls(
                iteration=int(kv["iter"]),
                values={name: float(kv[name]) for name in TERMS},
                total=float(kv["total"]),
                counts={name: int(kv[f"n_{name}"]) for name in TERMS},
                occluded=int(kv["occluded"]),
                stage="" if kv["stage"] == "-" else kv["stage"],
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed loss record: {line!r}") from exc
