"""Three-stage optimization: static keyframe fit, coarse dynamics, refinement.

One iteration of a dynamic stage samples a frame pair, renders every view at
both frames, and steps Adam on the weighted sum of the six loss terms. All
randomness flows from the state's numpy and torch generators, so a run is a
pure function of its inputs and seed.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field, fields

import numpy as np
import torch
from scipy.ndimage import binary_erosion

from . import losses as L
from .errors import InvalidArgument, TrainingAborted
from .field import Gaussians, GaussianField, arap_energy, attach_controls, deform
from .geometry import normalize_quat, quat_to_rotmat
from .optim import Adam, exponential_lr
from .render import project, rasterize

STAGES = ("static", "coarse", "refine")
GAUSSIAN_PARAMS = ("positions", "orientations", "log_scales", "opacity_logits", "colors")


@dataclass
class TrainConfig:
    static_iters: int = 5000
    coarse_iters: int = 10000
    refine_iters: int = 15000
    net_lr: float = 3e-4
    net_lr_final: float = 3e-6
    position_lr: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    rotation_lr: float = 1e-3
    scale_lr: float = 5e-3
    opacity_lr: float = 5e-2
    color_lr: float = 2.5e-3
    rbf_lr: float = 1e-3
    canonical_lr_scale: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    net_adam_eps: float = 1e-8
    pair_bias: float = 0.7
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 4000
    densify_interval: int = 100
    densify_grad_threshold: float = 3e-5
    densify_scale_fraction: float = 0.02
    prune_opacity: float = 0.005
    max_gaussians: int = 3000
    num_controls: int = 512
    arap_degree: int = 4
    occlusion_threshold: float = 1.5
    coarse_flow_views: tuple = (1,)
    keyframe: int = 1
    carve_resolution: int = 64
    init_opacity: float = 0.9
    weight_rgb: float = 0.8
    weight_mask: float = 2.0
    weight_dssim: float = 0.2
    weight_arap: float = 1.0
    weight_normal: float = 1.0
    weight_flow: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("static_iters", "coarse_iters", "refine_iters", "num_controls", "max_gaussians",
                     "densify_interval", "carve_resolution"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        for f in fields(self):
            if f.name.endswith("_lr") or f.name.endswith("_lr_final"):
                if not getattr(self, f.name) > 0:
                    raise InvalidArgument(f"{f.name} must be positive")
        if not self.canonical_lr_scale >= 0.0:
            raise InvalidArgument("canonical_lr_scale must be non-negative")
        if not 0.0 <= self.pair_bias <= 1.0:
            raise InvalidArgument("pair_bias must lie in [0, 1]")
        self.coarse_flow_views = tuple(int(k) for k in self.coarse_flow_views)
        L.LossWeights(**self._weight_kwargs())

    def _weight_kwargs(self):
        return {name: getattr(self, "weight_" + name) for name in L.TERMS}

    @property
    def weights(self):
        return L.LossWeights(**self._weight_kwargs())

    def stage_iters(self, stage):
        return {"static": self.static_iters, "coarse": self.coarse_iters, "refine": self.refine_iters}[stage]


@dataclass
class TrainState:
    field: GaussianField
    optimizer: Adam
    iteration: int = 0
    stage: str = "static"
    rng: np.random.Generator = dc_field(default_factory=lambda: np.random.default_rng(0))
    torch_rng: torch.Generator = dc_field(default_factory=torch.Generator)
    grad_accum: torch.Tensor | None = None   # view-space gradient norms per Gaussian
    grad_count: torch.Tensor | None = None

    def parameters(self):
        """Trainable tensors by name, in a fixed order."""
        f = self.field
        out = OrderedDict((name, getattr(f.gaussians, name)) for name in GAUSSIAN_PARAMS)
        if f.has_controls:
            out["rbf_log_radii"] = f.rbf_log_radii
            for name, p in f.deformation.named_parameters():
                out["net." + name] = p
        return out


def sample_timestep_pair(num_frames, bias, rng):
    """(t_a, t_b) with t_a < t_b; adjacent with probability ``bias``, otherwise uniform."""
    if num_frames < 2:
        raise InvalidArgument("need at least two frames to sample a pair")
    if rng.random() < bias:
        t = int(rng.integers(1, num_frames))
        return t, t + 1
    a, b = rng.choice(num_frames, size=2, replace=False) + 1
    return int(min(a, b)), int(max(a, b))


# ---------------------------------------------------------------- initialization

def carve_hull(cameras, masks, resolution, extent):
    """Surface voxels of the visual hull of ``masks`` as (P, 3) world points plus voxel size."""
    lin = (np.arange(resolution) + 0.5) / resolution * 2 * extent - extent
    P = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), -1).reshape(-1, 3)
    inside = np.ones(len(P), dtype=bool)
    for cam, mask in zip(cameras, masks):
        pc = (P - cam.center) @ cam.rotation.T
        u = np.floor(cam.width / 2 + cam.scale * pc[:, 0]).astype(np.int64)
        v = np.floor(cam.height / 2 + cam.scale * pc[:, 1]).astype(np.int64)
        ok = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        hit = np.zeros(len(P), dtype=bool)
        hit[ok] = mask[v[ok], u[ok]]
        inside &= hit
    vol = inside.reshape((resolution,) * 3)
    shell = vol & ~binary_erosion(vol, border_value=0)
    return P[shell.reshape(-1)], 2 * extent / resolution


def _hull_colors(points, cameras, images):
    centroid = points.mean(0)
    normals = points - centroid
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    acc = np.zeros((len(points), 3))
    wsum = np.zeros(len(points))
    for cam, img in zip(cameras, images):
        w = np.maximum(0.0, -(normals @ cam.rotation[2]))
        pc = (points - cam.center) @ cam.rotation.T
        u = np.clip(np.floor(cam.width / 2 + cam.scale * pc[:, 0]).astype(np.int64), 0, cam.width - 1)
        v = np.clip(np.floor(cam.height / 2 + cam.scale * pc[:, 1]).astype(np.int64), 0, cam.height - 1)
        acc += w[:, None] * img[v, u]
        wsum += w
    return np.where(wsum[:, None] > 0, acc / np.maximum(wsum, 1e-12)[:, None], 0.5)


def initial_gaussians(cameras, masks, images, config, rng):
    """Carved visual-hull shell as isotropic Gaussians colored from the views."""
    extent = max(c.half_extent for c in cameras)
    pts, voxel = carve_hull(cameras, masks, config.carve_resolution, extent)
    if len(pts) > config.max_gaussians:
        pts = pts[np.sort(rng.choice(len(pts), config.max_gaussians, replace=False))]
    if len(pts) < 4:
        # nothing survives carving (e.g. empty masks): a small seed cloud
        d = rng.standard_normal((64, 3))
        pts = 0.5 * extent * d / np.linalg.norm(d, axis=1, keepdims=True) * rng.random((64, 1)) ** (1 / 3)
    colors = _hull_colors(pts, cameras, images)
    G = len(pts)
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)
    quat = np.zeros((G, 4))
    quat[:, 0] = 1.0
    logit = math.log(config.init_opacity / (1 - config.init_opacity))
    return Gaussians(t(pts), t(quat), t(np.full((G, 3), math.log(0.7 * voxel))),
                     t(np.full(G, logit)), t(colors))


def new_state(sequence, config):
    """Fresh state for the static stage, initialized from the keyframe's masks."""
    if sequence.num_views < 2:
        raise InvalidArgument("static initialization needs at least two views")
    n = config.keyframe - 1
    if not 0 <= n < sequence.num_frames:
        raise InvalidArgument(f"keyframe {config.keyframe} outside the sequence")
    rng = np.random.default_rng(config.seed)
    tgen = torch.Generator()
    tgen.manual_seed(config.seed)
    g = initial_gaussians(sequence.cameras, sequence.masks[n], sequence.images[n], config, rng)
    field = GaussianField(g, sequence.num_frames)
    return TrainState(field, Adam(config.adam_beta1, config.adam_beta2), 0, "static", rng, tgen)


# ---------------------------------------------------------------- losses per iteration

class _FlowCache:
    """LRU of reference pair flows and their occlusion masks."""

    def __init__(self, sequence, threshold, size=256):
        self.seq = sequence
        self.threshold = threshold
        self.size = size
        self.items = OrderedDict()

    def get(self, k, a, b):
        key = (k, a, b)
        if key in self.items:
            self.items.move_to_end(key)
            return self.items[key]
        fwd = self.seq.pair_flow(k, a, b)
        occ = L.occlusion_mask(fwd, self.seq.pair_flow(k, b, a), self.threshold)
        self.items[key] = (fwd, occ)
        if len(self.items) > self.size:
            self.items.popitem(last=False)
        return fwd, occ


def _image_terms(out, seq, n, i):
    target = seq.images[n - 1, i]
    mask = seq.masks[n - 1, i]
    terms = {
        "rgb": L.photometric_loss(out.rgb, target, mask),
        "mask": L.mask_loss(out.alpha, mask),
        "dssim": L.dssim_loss(out.rgb, target, mask),
    }
    if seq.normals is not None and out.normal is not None:
        valid = out.normal_valid & torch.as_tensor(seq.normal_valid[n - 1, i])
        terms["normal"] = L.normal_loss(out.normal, seq.normals[n - 1, i], valid)
    return terms


def _accumulate(bucket, terms):
    for name, t in terms.items():
        bucket.setdefault(name, []).append(t)


def _reduce(bucket):
    values, counts = {}, {}
    for name, ts in bucket.items():
        values[name] = sum(t.value for t in ts) / len(ts)
        counts[name] = sum(t.count for t in ts)
    return values, counts


def _channels(seq):
    return {"rgb", "alpha", "depth", "normal"} if seq.normals is not None else {"rgb", "alpha"}


def static_iteration(state, seq, config, track):
    g = state.field.gaussians
    n = config.keyframe
    bucket, outs = {}, []
    for i, cam in enumerate(seq.cameras):
        out = rasterize(g, cam, _channels(seq), track_means=track)
        _accumulate(bucket, _image_terms(out, seq, n, i))
        outs.append(out)
    values, counts = _reduce(bucket)
    return values, counts, 0, outs


def dynamic_iteration(state, seq, config, stage, flows):
    f = state.field
    ta, tb = sample_timestep_pair(f.num_frames, config.pair_bias, state.rng)
    ga, gb = deform(f, ta), deform(f, tb)
    if stage == "coarse":
        flow_views = [k for k in config.coarse_flow_views if k in seq.flow_views()]
    else:
        flow_views = seq.flow_views()
    bucket, flow_terms, occluded = {}, [], 0
    for i, cam in enumerate(seq.cameras):
        k = cam.viewpoint_index
        for n, g in ((ta, ga), (tb, gb)):
            channels = _channels(seq)
            offsets = None
            if n == ta and k in flow_views:
                channels = channels | {"flow"}
                offsets = project(gb, cam)[0] - project(ga, cam)[0]
            out = rasterize(g, cam, channels, flow_offsets=offsets)
            _accumulate(bucket, _image_terms(out, seq, n, i))
            if offsets is not None:
                ref, occ = flows.get(k, ta, tb)
                t = L.flow_loss(out.flow_map(), ref, occ)
                flow_terms.append(t)
                occluded += t.skipped
    values, counts = _reduce(bucket)
    if flow_terms:
        values["flow"] = sum(t.value for t in flow_terms) / len(flow_terms)
        counts["flow"] = sum(t.count for t in flow_terms)
    values["arap"] = arap_energy(f, ta, tb)
    counts["arap"] = len(f.arap_edges)
    return values, counts, occluded, (ta, tb)


# ---------------------------------------------------------------- density control

def _grad_stats(state, outs):
    G = len(state.field.gaussians)
    if state.grad_accum is None or len(state.grad_accum) != G:
        state.grad_accum = torch.zeros(G, dtype=torch.float64)
        state.grad_count = torch.zeros(G, dtype=torch.float64)
    for out in outs:
        if out.means2d is None or out.means2d.grad is None:
            continue
        g = out.means2d.grad.double().norm(dim=-1)
        seen = torch.as_tensor(out.radii > 0)
        state.grad_accum += torch.where(seen, g, torch.zeros_like(g))
        state.grad_count += seen.double()


def densify(state, config, extent):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones."""
    f = state.field
    g = f.gaussians.detach()
    G = len(g)
    grads = state.grad_accum / state.grad_count.clamp_min(1.0)
    big = (grads >= config.densify_grad_threshold).numpy()
    max_scale = torch.exp(g.log_scales).max(1).values.numpy()
    small = max_scale <= config.densify_scale_fraction * extent
    room = max(0, config.max_gaussians - G)
    cand = np.flatnonzero(big)
    if len(cand) > room:
        order = np.argsort(-grads.numpy()[cand], kind="stable")
        cand = np.sort(cand[order[:room]])
    clone = cand[small[cand]]
    split = cand[~small[cand]]

    keep = np.setdiff1d(np.arange(G), split)
    parts = [g.select(torch.as_tensor(keep)), g.select(torch.as_tensor(clone))]
    if len(split):
        src = g.select(torch.as_tensor(np.repeat(split, 2)))
        std = torch.exp(src.log_scales)
        z = torch.randn(src.positions.shape, generator=state.torch_rng, dtype=std.dtype)
        offset = (quat_to_rotmat(src.orientations) @ (std * z)[..., None])[..., 0]
        parts.append(Gaussians(src.positions + offset, src.orientations,
                               src.log_scales - math.log(1.6), src.opacity_logits, src.colors))
    grown = Gaussians.cat(parts)
    index = np.concatenate([keep, clone])
    extra = 2 * len(split)

    alive = (torch.sigmoid(grown.opacity_logits) >= config.prune_opacity).numpy()
    if not alive.any():
        alive[int(torch.argmax(grown.opacity_logits))] = True
    grown = grown.select(torch.as_tensor(np.flatnonzero(alive)))
    for name in GAUSSIAN_PARAMS:
        state.optimizer.remap(name, torch.as_tensor(index), extra)
        state.optimizer.select(name, torch.as_tensor(alive))
    f.gaussians = grown.map(lambda t: t.detach().clone().requires_grad_())
    state.grad_accum = None
    state.grad_count = None
    return len(clone), len(split), int((~alive).sum())


# ---------------------------------------------------------------- driver

def _learning_rates(state, config, stage):
    total = config.stage_iters(stage)
    i = state.iteration
    lrs = {
        "positions": exponential_lr(config.position_lr, config.position_lr_final, i, total),
        "orientations": config.rotation_lr,
        "log_scales": config.scale_lr,
        "opacity_logits": config.opacity_lr,
        "colors": config.color_lr,
        "rbf_log_radii": config.rbf_lr,
    }
    if stage != "static":
        for name in ("positions", "orientations", "log_scales", "opacity_logits", "colors"):
            lrs[name] *= config.canonical_lr_scale
    net_lr = exponential_lr(config.net_lr, config.net_lr_final, i, total)
    eps = {name: config.adam_eps for name in lrs}
    for name in state.parameters():
        if name.startswith("net."):
            lrs[name] = net_lr
            eps[name] = config.net_adam_eps
    return lrs, eps


def current_net_lr(state, config):
    return exponential_lr(config.net_lr, config.net_lr_final, state.iteration, config.stage_iters(state.stage))


def _require_grad(state):
    for p in state.parameters().values():
        p.requires_grad_(True)
        p.grad = None


def enter_stage(state, stage, config):
    """Switch ``state`` to ``stage``; a new stage restarts its schedule at iteration 0."""
    if stage not in STAGES:
        raise InvalidArgument(f"unknown stage {stage!r}")
    if state.stage == stage:
        return state
    if STAGES.index(stage) < STAGES.index(state.stage):
        raise InvalidArgument(f"cannot go back from {state.stage} to {stage}")
    if not state.field.has_controls:
        _attach(state, config)
    state.stage = stage
    state.iteration = 0
    return state


def _attach(state, config):
    f = state.field
    f.gaussians = f.gaussians.detach()
    attach_controls(f, config.num_controls, seed_index=0, arap_degree=config.arap_degree, seed=config.seed)
    f.rbf_log_radii = f.rbf_log_radii.float()
    f.deformation = f.deformation.float()


def train_stage(state, sequence, stage, config, log=None, checkpoint=None, checkpoint_every=0,
                max_iterations=None, abort_path=None):
    """Run (or resume) ``stage`` until its iteration budget is spent.

    Args:
        state: TrainState; moved into ``stage`` if it is in an earlier one.
        sequence: MultiviewSequence with every slot the stage reads.
        log: callable receiving one LossReport per iteration.
        checkpoint: callable(state) invoked every ``checkpoint_every`` iterations
            and at the end of the stage.
        max_iterations: stop early after this many iterations (for resumable runs).
        abort_path: where to write a diagnostic checkpoint on a non-finite loss.

    Returns:
        The same state, advanced.
    """
    enter_stage(state, stage, config)
    total = config.stage_iters(stage)
    weights = config.weights
    extent = max(c.half_extent for c in sequence.cameras)
    flows = _FlowCache(sequence, config.occlusion_threshold)
    done = 0
    _require_grad(state)
    while state.iteration < total:
        if max_iterations is not None and done >= max_iterations:
            return state
        it = state.iteration
        track = (stage == "static" and config.densify
                 and config.densify_from <= it < config.densify_until)
        if stage == "static":
            values, counts, occluded, outs = static_iteration(state, sequence, config, track)
        else:
            values, counts, occluded, _ = dynamic_iteration(state, sequence, config, stage, flows)
            outs = []
        try:
            loss = L.total_loss(values, weights)
        except TrainingAborted as exc:
            path = None
            if abort_path is not None:
                from .checkpoint import save_checkpoint
                save_checkpoint(state, abort_path)
                path = abort_path
            raise TrainingAborted(exc.term, path) from None
        loss.backward()
        if track:
            _grad_stats(state, outs)
        lrs, eps = _learning_rates(state, config, stage)
        state.optimizer.step(state.parameters(), lrs, eps)
        with torch.no_grad():
            o = state.field.gaussians.orientations
            o.copy_(normalize_quat(o))
        for p in state.parameters().values():
            p.grad = None
        state.iteration += 1
        done += 1
        if track and state.iteration % config.densify_interval == 0:
            densify(state, config, extent)
            _require_grad(state)
        if log is not None:
            log(L.LossReport(it, {k: float(v.detach()) for k, v in values.items()},
                             float(loss.detach()), counts, occluded, stage))
        if checkpoint is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
            checkpoint(state)
    if stage == "static" and not state.field.has_controls:
        _attach(state, config)
        _require_grad(state)
    if checkpoint is not None:
        checkpoint(state)
    return state


def init_static(sequence, config, log=None):
    """Fit the keyframe's static Gaussians and attach controls; returns the field."""
    state = new_state(sequence, config)
    train_stage(state, sequence, "static", config, log=log)
    return state.field


def train_all(sequence, config, log=None, refine_sequence=None):
    """Static then coarse (then refine when ``refine_sequence`` is given)."""
    state = new_state(sequence, config)
    train_stage(state, sequence, "static", config, log=log)
    train_stage(state, sequence, "coarse", config, log=log)
    if refine_sequence is not None:
        train_stage(state, refine_sequence, "refine", config, log=log)
    return state
