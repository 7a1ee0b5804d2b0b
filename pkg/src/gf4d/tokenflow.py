"""Flow-guided token propagation around a pluggable denoiser.

Keyframes are denoised normally; their self-attention features are warped
along 2D flow to the frames in between and blended with a linear weight. The
denoiser contract is small (see :class:`Denoiser`), and :class:`ToyDenoiser`
implements it with a closed-form contraction toward known targets so the
whole regeneration loop runs without pretrained weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import FlowMap, MultiviewSequence, bilinear_sample
from .errors import InvalidArgument
from .formats import atomic_write, decode_ftv1, encode_ftv1
from .render import render_flow


@dataclass
class FeatureVolume:
    """(H', W', C) feature grid of one frame and view at denoising step t."""

    grid: np.ndarray
    frame: int
    view: int
    step: int

    def with_grid(self, grid, step=None):
        return replace(self, grid=grid, step=self.step if step is None else step)

    def to_bytes(self):
        return encode_ftv1(self.grid, self.frame, self.view, self.step)

    @classmethod
    def from_bytes(cls, payload):
        grid, n, k, t = decode_ftv1(payload)
        return cls(grid.astype(np.float64), n, k, t)

    def save(self, path):
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass(frozen=True)
class KeyframeSchedule:
    """Keyframes 1, 1 + interval, ... plus the last frame when not already covered."""

    num_frames: int
    interval: int = 8

    def __post_init__(self):
        if self.num_frames < 1 or self.interval < 1:
            raise InvalidArgument("num_frames and interval must be positive")

    @property
    def keyframes(self):
        keys = list(range(1, self.num_frames + 1, self.interval))
        if keys[-1] != self.num_frames:
            keys.append(self.num_frames)
        return tuple(keys)

    def is_keyframe(self, n):
        return n in self.keyframes

    def bracket(self, n):
        """(n_{m-1}, n_m): the keyframes strictly around a non-keyframe n."""
        if not 1 <= n <= self.num_frames:
            raise InvalidArgument(f"frame {n} outside 1..{self.num_frames}")
        if self.is_keyframe(n):
            raise InvalidArgument(f"frame {n} is a keyframe and is never propagated")
        keys = self.keyframes
        i = int(np.searchsorted(keys, n))
        return keys[i - 1], keys[i]

    def weight(self, n, form="linear"):
        """Blend weight on the next keyframe.

        ``"linear"`` is (n - n_{m-1}) / (n_m - n_{m-1}); ``"printed"`` is the
        mirrored (n_m - n) / (n_m - n_{m-1}).
        """
        lo, hi = self.bracket(n)
        if form == "linear":
            return (n - lo) / (hi - lo)
        if form == "printed":
            return (hi - n) / (hi - lo)
        raise InvalidArgument(f"unknown weight form {form!r}")


def downsample_flow(flow, stride):
    """Pixel flow to feature resolution: bilinear sample at cell centers, displacement / stride."""
    fm = flow.numpy()
    H, W = fm.valid.shape
    if H % stride or W % stride:
        raise InvalidArgument(f"image size {W}x{H} is not divisible by stride {stride}")
    c = (stride - 1) / 2
    ys, xs = np.mgrid[0:H // stride, 0:W // stride].astype(np.float64)
    f, ok = bilinear_sample(fm.flow, xs * stride + c, ys * stride + c, fm.valid)
    return FlowMap(f / stride, ok)


def warp_features(source, flow):
    """Backward warp: out(x) = source(x + flow(x)), bilinear.

    ``flow`` is at feature resolution and points from the target frame into
    ``source``. Cells whose sample leaves the grid or whose flow is invalid
    are zero and flagged invalid.
    """
    fm = flow.numpy()
    h, w = source.grid.shape[:2]
    if fm.valid.shape != (h, w):
        raise InvalidArgument(f"flow grid {fm.valid.shape} does not match features {(h, w)}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    vals, ok = bilinear_sample(source.grid, xs + fm.flow[..., 0], ys + fm.flow[..., 1])
    ok &= fm.valid
    return source.with_grid(np.where(ok[..., None], vals, 0.0)), ok


def propagate(n, schedule, warped_prev, warped_next, valid_prev=None, valid_next=None, own=None,
              form="linear"):
    """Blend two warped keyframe features for non-keyframe n.

    Where both warps are valid the result is a + lambda (b - a), clamped to the
    per-cell interval spanned by a and b; where one is valid it is used alone;
    where neither is, ``own`` (the frame's own feature) is kept.
    """
    lam = schedule.weight(n, form)
    a, b = warped_prev.grid, warped_next.grid
    vp = np.ones(a.shape[:2], dtype=bool) if valid_prev is None else np.asarray(valid_prev, dtype=bool)
    vn = np.ones(a.shape[:2], dtype=bool) if valid_next is None else np.asarray(valid_next, dtype=bool)
    mixed = np.clip(a + lam * (b - a), np.minimum(a, b), np.maximum(a, b))
    fallback = np.zeros_like(a) if own is None else own.grid
    out = np.where((vp & vn)[..., None], mixed,
                   np.where(vp[..., None], a, np.where(vn[..., None], b, fallback)))
    return FeatureVolume(out, n, warped_prev.view, warped_prev.step)


def attention(query, keys, values, heads=1):
    """Scaled dot-product attention on token matrices (Lq, C), (Lk, C), (Lk, C)."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (query, keys, values))
    C = q.shape[1]
    if C % heads:
        raise InvalidArgument(f"{C} channels do not split into {heads} heads")
    d = C // heads
    out = np.empty((q.shape[0], v.shape[1]))
    dv = v.shape[1] // heads
    for h in range(heads):
        qs, ks = q[:, h * d:(h + 1) * d], k[:, h * d:(h + 1) * d]
        logits = qs @ ks.T / math.sqrt(d)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out[:, h * dv:(h + 1) * dv] = p @ v[:, h * dv:(h + 1) * dv]
    return out


def enlarged_self_attention(query_frame, frames, heads=1):
    """Attention whose keys and values are the tokens of every frame of the same view.

    ``query_frame`` is (H', W', C); ``frames`` is a sequence of equally shaped
    grids (typically including the query frame itself).
    """
    q = np.asarray(query_frame, dtype=np.float64)
    h, w, c = q.shape
    kv = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, c) for f in frames], 0)
    return attention(q.reshape(-1, c), kv, kv, heads).reshape(h, w, c)


class Denoiser:
    """Contract for a per-view multi-frame denoiser.

    ``step(frames, injected, enlarged_sa)`` takes a dict frame -> FeatureVolume
    at step t and returns (dict frame -> FeatureVolume at step t - 1, dict
    frame -> self-attention features at step t). When ``injected`` holds a grid
    for a frame, that grid replaces the frame's own self-attention output.
    ``decode(volume)`` maps a final volume to an (H, W, 3) image.
    """

    total_steps = 40
    stride = 8

    def step(self, frames, injected=None, enlarged_sa=True):
        raise NotImplementedError

    def decode(self, volume):
        raise NotImplementedError


class ToyDenoiser(Denoiser):
    """Contracts every volume toward an encoding of its target image by ``gamma`` per step.

    The encoding averages stride x stride pixel blocks and lifts RGB to C
    channels with a fixed map with orthonormal rows, so ``decode`` can return
    the target plus the upsampled residual. ``sa_mix`` > 0 blends in attention
    over the frames passed to the step (across all of them when enlarged).
    """

    def __init__(self, targets, gamma=0.2, stride=8, channels=16, total_steps=40, seed=0, sa_mix=0.0,
                 heads=1):
        if not 0.0 <= gamma <= 1.0:
            raise InvalidArgument("gamma must lie in [0, 1]")
        self.targets = {int(n): np.asarray(img, dtype=np.float64) for n, img in targets.items()}
        self.gamma = gamma
        self.stride = stride
        self.channels = channels
        self.total_steps = total_steps
        self.sa_mix = sa_mix
        self.heads = heads
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((channels, 3)))
        self.lift = q.T                              # (3, C), orthonormal rows
        self._encoded = {n: self.encode(img) for n, img in self.targets.items()}

    def encode(self, image):
        H, W = image.shape[:2]
        s = self.stride
        pooled = image.reshape(H // s, s, W // s, s, 3).mean(axis=(1, 3))
        return pooled @ self.lift

    def feature_shape(self):
        H, W = next(iter(self.targets.values())).shape[:2]
        return H // self.stride, W // self.stride, self.channels

    def step(self, frames, injected=None, enlarged_sa=True):
        injected = injected or {}
        order = sorted(frames)
        sa = {}
        for n in order:
            x = frames[n].grid
            if self.sa_mix > 0:
                pool = [frames[m].grid for m in order] if enlarged_sa else [x]
                x = (1 - self.sa_mix) * x + self.sa_mix * enlarged_self_attention(x, pool, self.heads)
            sa[n] = x
        out = {}
        for n in order:
            s = injected[n] if n in injected else sa[n]
            out[n] = frames[n].with_grid(s + self.gamma * (self._encoded[n] - s), frames[n].step - 1)
        return out, sa

    def decode(self, volume):
        n = volume.frame
        residual = (volume.grid - self._encoded[n]) @ self.lift.T
        up = np.repeat(np.repeat(residual, self.stride, 0), self.stride, 1)
        return np.clip(self.targets[n] + up, 0.0, 1.0)


@dataclass(frozen=True)
class GenerationConfig:
    interval: int = 8
    tau: int = 20
    total_steps: int = 40
    gamma: float = 0.2
    stride: int = 8
    channels: int = 16
    weight_form: str = "linear"       # or "printed"
    propagate_early: bool = True      # propagate during the first tau iterations
    enlarged_sa: bool = True
    shared_noise: bool = True         # one noise volume per view, reused by every frame
    seed: int = 0


@dataclass
class Regeneration:
    sequence: MultiviewSequence
    valid_fraction: dict     # (n, k) -> mean valid-warp fraction, non-keyframes only
    features: dict           # (n, k) -> FeatureVolume at step 0


def _propagating(iteration, tau, total, early):
    return iteration < tau if early else iteration >= total - tau


def run_generation(denoiser, schedule, flows, tau, initial, weight_form="linear", propagate_early=True,
                   enlarged_sa=True, stats=None):
    """Denoise all frames of one view with keyframe token propagation.

    Args:
        denoiser: a :class:`Denoiser`.
        schedule: KeyframeSchedule.
        flows: dict (n, keyframe) -> FlowMap at feature resolution, pointing
            from frame n into the keyframe, for every non-keyframe and both of
            its bracketing keyframes.
        tau: number of sampler iterations with propagation.
        initial: dict frame -> FeatureVolume at step ``denoiser.total_steps``.
        stats: optional dict filled with the mean valid-warp fraction per frame.

    Returns:
        dict frame -> FeatureVolume at step 0.
    """
    T = denoiser.total_steps
    keys = schedule.keyframes
    others = [n for n in sorted(initial) if n not in keys]
    if tau > 0:
        for n in others:
            for kf in schedule.bracket(n):
                if (n, kf) not in flows:
                    raise InvalidArgument(f"missing flow from frame {n} to keyframe {kf}")
    state = dict(initial)
    for it in range(T):
        if tau > 0 and _propagating(it, tau, T, propagate_early):
            key_out, sa = denoiser.step({n: state[n] for n in keys}, None, enlarged_sa)
            injected = {}
            for n in others:
                lo, hi = schedule.bracket(n)
                wp, vp = warp_features(FeatureVolume(sa[lo], lo, state[lo].view, state[lo].step), flows[(n, lo)])
                wn, vn = warp_features(FeatureVolume(sa[hi], hi, state[hi].view, state[hi].step), flows[(n, hi)])
                injected[n] = propagate(n, schedule, wp, wn, vp, vn, state[n], weight_form).grid
                if stats is not None:
                    stats.setdefault(n, 0.5 * (vp.mean() + vn.mean()))
            rest, _ = denoiser.step({n: state[n] for n in others}, injected, enlarged_sa)
            state = {**key_out, **rest}
        else:
            state, _ = denoiser.step(state, None, enlarged_sa)
    return state


def initial_noise(shape, frames, view, step, seed, shared=True):
    """Standard-normal starting volumes for ``frames`` of one view."""
    rng = np.random.default_rng([seed, view])
    if shared:
        base = rng.standard_normal(shape)
        return {n: FeatureVolume(base.copy(), n, view, step) for n in frames}
    return {n: FeatureVolume(rng.standard_normal(shape), n, view, step) for n in frames}


def warp_flows(field, camera, schedule, stride, frames):
    """Feature-resolution flows from every non-keyframe to its bracketing keyframes.

    Inside the rendered coverage the flow is the rendered 2D flow; the
    background is treated as static (zero flow, valid).
    """
    flows = {}
    for n in frames:
        if schedule.is_keyframe(n):
            continue
        for kf in schedule.bracket(n):
            fm = render_flow(field, camera, n, kf).numpy()
            full = FlowMap(np.where(fm.valid[..., None], fm.flow, 0.0), np.ones_like(fm.valid))
            flows[(n, kf)] = downsample_flow(full, stride)
    return flows


def regenerate_pipeline(field, sequence, config=GenerationConfig(), denoiser_factory=None, log=None):
    """Regenerate every view of ``sequence`` with flows rendered from ``field``.

    ``denoiser_factory(view_index, targets)`` builds the per-view denoiser; the
    default is a :class:`ToyDenoiser` pulled toward ``sequence``'s images.
    Masks and normals are carried over; consecutive flows for all views are
    rendered from ``field`` for the refinement stage.

    Returns:
        Regeneration with the new sequence, the valid-warp fraction per
        (frame, view) and the final feature volume per (frame, view).
    """
    N = sequence.num_frames
    schedule = KeyframeSchedule(N, config.interval)
    frames = list(range(1, N + 1))
    images = np.array(sequence.images, copy=True)
    stats, volumes = {}, {}
    for i, cam in enumerate(sequence.cameras):
        k = cam.viewpoint_index
        targets = {n: sequence.images[n - 1, i] for n in frames}
        if denoiser_factory is None:
            den = ToyDenoiser(targets, config.gamma, config.stride, config.channels,
                              config.total_steps, seed=config.seed)
        else:
            den = denoiser_factory(k, targets)
        try:
            flows = warp_flows(field, cam, schedule, den.stride, frames) if config.tau > 0 else {}
        except Exception as exc:
            raise type(exc)(f"flow rendering failed for view {k}: {exc}") from exc
        shape = den.feature_shape()
        init = initial_noise(shape, frames, k, den.total_steps, config.seed, config.shared_noise)
        view_stats = {}
        final = run_generation(den, schedule, flows, config.tau, init, config.weight_form,
                               config.propagate_early, config.enlarged_sa, view_stats)
        for n in frames:
            images[n - 1, i] = den.decode(final[n])
            volumes[(n, k)] = final[n]
        for n, frac in view_stats.items():
            stats[(n, k)] = float(frac)
            if log is not None:
                log(f"view={k} frame={n} valid_warp={frac:.6f}")
    out = MultiviewSequence(list(sequence.cameras), images.astype(np.float32), sequence.masks.copy(),
                            None if sequence.normals is None else sequence.normals.copy(),
                            None if sequence.normal_valid is None else sequence.normal_valid.copy())
    for cam in sequence.cameras:
        k = cam.viewpoint_index
        for n in range(1, N):
            out.forward[(n, k)] = render_flow(field, cam, n, n + 1).numpy()
            out.backward[(n, k)] = render_flow(field, cam, n + 1, n).numpy()
    return Regeneration(out, stats, volumes)
