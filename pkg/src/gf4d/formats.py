"""On-disk formats: PFM, 8-bit PNG, and the FLO4 / FTV1 raw containers.

Every writer goes through :func:`atomic_write` so a slot is never left
half-written.
"""

import io
import os
import struct
import tempfile

import numpy as np
from PIL import Image

from .data import FlowMap
from .errors import FormatError

FLO4_MAGIC = b"FLO4"
FTV1_MAGIC = b"FTV1"


def atomic_write(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pfm(data):
    """PFM bytes for an (H, W), (H, W, 1) or (H, W, 3) float array. Two-channel input is zero-padded to three."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 3 and a.shape[2] == 2:
        a = np.concatenate([a, np.zeros_like(a[..., :1])], -1)
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError(f"PFM cannot hold array of shape {a.shape}")
    h, w = a.shape[:2]
    body = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    return header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body


def decode_pfm(payload):
    buf = io.BytesIO(payload)
    kind = buf.readline().strip()
    if kind not in (b"PF", b"Pf"):
        raise FormatError("not a PFM file")
    try:
        w, h = (int(v) for v in buf.readline().split())
        scale = float(buf.readline().strip())
    except ValueError as exc:
        raise FormatError("malformed PFM header") from exc
    ch = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = buf.read()
    if len(body) != 4 * w * h * ch:
        raise FormatError("PFM payload size does not match header")
    a = np.frombuffer(body, dtype=dtype).reshape(h, w, ch)[::-1].astype(np.float32)
    return a[..., 0] if ch == 1 else a


def write_pfm(path, data):
    atomic_write(path, encode_pfm(data))


def read_pfm(path):
    with open(path, "rb") as f:
        return decode_pfm(f.read())


def write_png(path, data):
    """Quantize [0, 1] floats (H, W) or (H, W, 3) to 8-bit PNG."""
    a = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    a = np.round(a * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def encode_flo4(flow_map):
    fm = flow_map.numpy()
    h, w = fm.valid.shape
    return (FLO4_MAGIC + struct.pack("<II", w, h)
            + fm.flow.astype("<f4").tobytes() + fm.valid.astype(np.uint8).tobytes())


def decode_flo4(payload):
    if payload[:4] != FLO4_MAGIC:
        raise FormatError("bad FLO4 magic")
    if len(payload) < 12:
        raise FormatError("truncated FLO4 header")
    w, h = struct.unpack("<II", payload[4:12])
    n = w * h
    if len(payload) != 12 + 8 * n + n:
        raise FormatError("FLO4 payload size does not match header")
    flow = np.frombuffer(payload, dtype="<f4", count=2 * n, offset=12).reshape(h, w, 2)
    valid = np.frombuffer(payload, dtype=np.uint8, count=n, offset=12 + 8 * n).reshape(h, w)
    return FlowMap(flow.astype(np.float32), valid != 0)


def write_flo4(path, flow_map):
    atomic_write(path, encode_flo4(flow_map))


def read_flo4(path):
    with open(path, "rb") as f:
        return decode_flo4(f.read())


def encode_ftv1(grid, frame, view, step):
    g = np.asarray(grid, dtype="<f4")
    h, w, c = g.shape
    return FTV1_MAGIC + struct.pack("<6I", h, w, c, frame, view, step) + g.tobytes()


def decode_ftv1(payload):
    """Returns (grid, frame, view, step)."""
    if payload[:4] != FTV1_MAGIC:
        raise FormatError("bad FTV1 magic")
    if len(payload) < 28:
        raise FormatError("truncated FTV1 header")
    h, w, c, n, k, t = struct.unpack("<6I", payload[4:28])
    if len(payload) != 28 + 4 * h * w * c:
        raise FormatError("FTV1 payload size does not match header")
    grid = np.frombuffer(payload, dtype="<f4", offset=28).reshape(h, w, c).astype(np.float32)
    return grid, n, k, t
