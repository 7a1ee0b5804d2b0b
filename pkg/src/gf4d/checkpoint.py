"""GF4D checkpoint container.

Layout (little-endian):

    "GF4D"  u32 version
    u32 G, M, E, num_frames, canonical_frame
    u32 pos_bands, time_bands, width, depth          (zeros without a net)
    counted arrays, each u32 count then values:
        positions f32, orientations f32, log_scales f32, opacity_logits f32,
        colors f32, control rest positions f32, rbf_log_radii f32,
        knn u32, deformation-net weights f32 (layer by layer), arap edges u32
    optional training-state trailer:
        "TRST" u32 n, n bytes of JSON metadata, then the raw arrays it lists
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
import torch

from .errors import FormatError
from .field import DeformationNet, Gaussians, GaussianField
from .formats import atomic_write
from .optim import Adam
from .trainer import GAUSSIAN_PARAMS, TrainState

MAGIC = b"GF4D"
VERSION = 1
TRAILER = b"TRST"


def _f32(t):
    return np.ascontiguousarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t,
                                dtype="<f4").reshape(-1)


def _u32(t):
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    return np.ascontiguousarray(a, dtype="<u4").reshape(-1)


def encode_field(field):
    g = field.gaussians
    G = len(g)
    net = field.deformation
    has = field.has_controls
    M = len(field.control_positions) if has else 0
    E = len(field.arap_edges) if has else 0
    arch = net.architecture() if has else (0, 0, 0, 0)
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    out.write(struct.pack("<5I", G, M, E, field.num_frames, field.canonical_frame))
    out.write(struct.pack("<4I", *arch))
    empty = np.zeros(0)
    arrays = [_f32(getattr(g, name)) for name in GAUSSIAN_PARAMS] + [
        _f32(field.control_positions if has else empty),
        _f32(field.rbf_log_radii if has else empty),
        _u32(field.knn if has else empty),
        _f32(net.flat_parameters() if has else empty),
        _u32(field.arap_edges if has else empty),
    ]
    for a in arrays:
        out.write(struct.pack("<I", a.size))
        out.write(a.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, payload):
        self.buf = payload
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, n=1):
        v = struct.unpack(f"<{n}I", self.take(4 * n))
        return v if n > 1 else v[0]

    def array(self, dtype, expected, name):
        count = self.u32()
        if count != expected:
            raise FormatError(f"{name}: header implies {expected} values, array holds {count}")
        return np.frombuffer(self.take(4 * count), dtype=dtype).copy()


def decode_field(reader):
    if reader.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    G, M, E, N, canonical = reader.u32(5)
    arch = reader.u32(4)
    t = lambda a, *shape: torch.from_numpy(a.astype(np.float32)).reshape(*shape)
    pos = t(reader.array("<f4", 3 * G, "positions"), G, 3)
    ori = t(reader.array("<f4", 4 * G, "orientations"), G, 4)
    scl = t(reader.array("<f4", 3 * G, "log_scales"), G, 3)
    opa = t(reader.array("<f4", G, "opacity_logits"), G)
    col = t(reader.array("<f4", 3 * G, "colors"), G, 3)
    field = GaussianField(Gaussians(pos, ori, scl, opa, col), N, canonical_frame=canonical)
    ctl = reader.array("<f4", 3 * M, "control positions")
    rbf = reader.array("<f4", M, "rbf_log_radii")
    knn = reader.array("<u4", 3 * G if M else 0, "knn")
    net = DeformationNet(*arch) if M else None
    n_net = sum(p.numel() for p in net.parameters()) if M else 0
    weights = reader.array("<f4", n_net, "deformation weights")
    edges = reader.array("<u4", 2 * E, "arap edges")
    if M:
        if knn.size and knn.max() >= M:
            raise FormatError("knn index exceeds control count")
        net.load_flat_parameters(torch.from_numpy(weights))
        field.control_positions = t(ctl, M, 3)
        field.rbf_log_radii = t(rbf, M)
        field.knn = torch.from_numpy(knn.astype(np.int64)).reshape(G, 3)
        field.deformation = net
        field.arap_edges = torch.from_numpy(edges.astype(np.int64)).reshape(E, 2)
    return field


def _state_trailer(state):
    arrays = []
    for name in sorted(state.optimizer.m):
        arrays.append(("m/" + name, _f32(state.optimizer.m[name]), list(state.optimizer.m[name].shape)))
        arrays.append(("v/" + name, _f32(state.optimizer.v[name]), list(state.optimizer.v[name].shape)))
    tstate = state.torch_rng.get_state().numpy()
    arrays.append(("torch_rng", tstate.astype(np.uint8), [tstate.size]))
    if state.grad_accum is not None:
        arrays.append(("grad_accum", np.asarray(state.grad_accum.numpy(), "<f8"), [len(state.grad_accum)]))
        arrays.append(("grad_count", np.asarray(state.grad_count.numpy(), "<f8"), [len(state.grad_count)]))
    meta = {
        "stage": state.stage,
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "betas": [state.optimizer.beta1, state.optimizer.beta2],
        "steps": {k: state.optimizer.steps[k] for k in sorted(state.optimizer.steps)},
        "arrays": [[name, a.dtype.str, shape] for name, a, shape in arrays],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    return TRAILER + struct.pack("<I", len(blob)) + blob + b"".join(a.tobytes() for _, a, _ in arrays)


def encode_checkpoint(state):
    return encode_field(state.field) + _state_trailer(state)


def decode_checkpoint(payload):
    """TrainState from checkpoint bytes (a bare field yields a fresh optimizer)."""
    reader = _Reader(payload)
    field = decode_field(reader)
    if reader.pos == len(payload):
        return TrainState(field, Adam())
    if reader.take(4) != TRAILER:
        raise FormatError("unexpected bytes after field section")
    try:
        meta = json.loads(reader.take(reader.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("corrupt training-state metadata") from exc
    arrays = {}
    for name, dtype, shape in meta["arrays"]:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(reader.take(dt.itemsize * n), dtype=dt).reshape(shape).copy()
    if reader.pos != len(payload):
        raise FormatError("trailing bytes after training state")
    opt = Adam(*meta["betas"])
    for name, steps in meta["steps"].items():
        opt.steps[name] = steps
        opt.m[name] = torch.from_numpy(arrays["m/" + name].astype(np.float32))
        opt.v[name] = torch.from_numpy(arrays["v/" + name].astype(np.float32))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    tgen = torch.Generator()
    tgen.set_state(torch.from_numpy(arrays["torch_rng"]))
    state = TrainState(field, opt, meta["iteration"], meta["stage"], rng, tgen)
    if "grad_accum" in arrays:
        state.grad_accum = torch.from_numpy(arrays["grad_accum"].astype(np.float64))
        state.grad_count = torch.from_numpy(arrays["grad_count"].astype(np.float64))
    return state


def save_checkpoint(state, path):
    atomic_write(path, encode_checkpoint(state))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def save_field(field, path):
    atomic_write(path, encode_field(field))
