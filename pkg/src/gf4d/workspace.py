"""On-disk workspace: slot layout, sequence I/O, manifest and lock.

::

    root/
      inputs/      images/ masks/ normals/ flow_fwd/ flow_bwd/  + sequence.json
      heldout/     same layout, ground truth for evaluation only
      regenerated/ same layout, written by regeneration
      checkpoints/ renders/ features/ logs/
      manifest.txt

Every per-(frame, view) file is named ``frame{n:03}_view{k}.{ext}``.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .data import FlowMap, MultiviewSequence
from .errors import InvalidArgument, MissingInput
from .formats import atomic_write, read_flo4, read_pfm, read_png, write_flo4, write_pfm, write_png
from .render import Camera

SUBDIRS = ("inputs", "heldout", "regenerated", "checkpoints", "renders", "features", "logs")
META = "sequence.json"
LOCK = ".gf4d.lock"


def slot(n, k, ext):
    return f"frame{n:03}_view{k}.{ext}"


def _sequence_slots(meta):
    N = meta["num_frames"]
    out = []
    for cam in meta["cameras"]:
        k = int(cam[15])
        for n in range(1, N + 1):
            out += [os.path.join("images", slot(n, k, "png")), os.path.join("masks", slot(n, k, "png"))]
            if meta["normals"]:
                out.append(os.path.join("normals", slot(n, k, "pfm")))
        if k in meta["flow_views"]:
            for n in range(1, N):
                out += [os.path.join("flow_fwd", slot(n, k, "flo4")), os.path.join("flow_bwd", slot(n, k, "flo4"))]
    return out


def write_sequence(directory, seq):
    """Write ``seq`` under ``directory``; returns the written paths (relative to it)."""
    meta = {
        "num_frames": seq.num_frames,
        "cameras": [c.to_array().tolist() for c in seq.cameras],
        "normals": seq.normals is not None,
        "flow_views": seq.flow_views(),
    }
    written = []

    def put(rel, writer, data):
        writer(os.path.join(directory, rel), data)
        written.append(rel)

    for i, cam in enumerate(seq.cameras):
        k = cam.viewpoint_index
        for n in range(1, seq.num_frames + 1):
            put(os.path.join("images", slot(n, k, "png")), write_png, seq.images[n - 1, i])
            put(os.path.join("masks", slot(n, k, "png")), write_png, seq.masks[n - 1, i].astype(np.float64))
            if seq.normals is not None:
                nrm = seq.normals[n - 1, i]
                if seq.normal_valid is not None:
                    nrm = np.where(seq.normal_valid[n - 1, i][..., None], nrm, 0.0)
                put(os.path.join("normals", slot(n, k, "pfm")), write_pfm, nrm)
        if k in meta["flow_views"]:
            for n in range(1, seq.num_frames):
                put(os.path.join("flow_fwd", slot(n, k, "flo4")), write_flo4, seq.forward[(n, k)])
                put(os.path.join("flow_bwd", slot(n, k, "flo4")), write_flo4, seq.backward[(n, k)])
    atomic_write(os.path.join(directory, META), json.dumps(meta, indent=1, sort_keys=True).encode())
    written.append(META)
    return written


def missing_slots(directory):
    """Relative paths that a complete sequence under ``directory`` still lacks."""
    path = os.path.join(directory, META)
    if not os.path.exists(path):
        return [META]
    with open(path) as f:
        meta = json.load(f)
    return [rel for rel in _sequence_slots(meta) if not os.path.exists(os.path.join(directory, rel))]


def read_sequence(directory):
    """Load a sequence after checking that every slot exists (all gaps are reported at once)."""
    missing = missing_slots(directory)
    if missing:
        raise MissingInput([os.path.join(directory, m) for m in missing])
    with open(os.path.join(directory, META)) as f:
        meta = json.load(f)
    cams = [Camera.from_array(a) for a in meta["cameras"]]
    N, K = meta["num_frames"], len(cams)
    W, H = cams[0].width, cams[0].height
    images = np.zeros((N, K, H, W, 3), np.float32)
    masks = np.zeros((N, K, H, W), bool)
    normals = np.zeros((N, K, H, W, 3), np.float32) if meta["normals"] else None
    valid = np.zeros((N, K, H, W), bool) if meta["normals"] else None
    seq = MultiviewSequence(cams, images, masks, normals, valid)
    for i, cam in enumerate(cams):
        k = cam.viewpoint_index
        for n in range(1, N + 1):
            images[n - 1, i] = read_png(os.path.join(directory, "images", slot(n, k, "png")))[..., :3]
            masks[n - 1, i] = read_png(os.path.join(directory, "masks", slot(n, k, "png"))) > 0.5
            if normals is not None:
                nrm = read_pfm(os.path.join(directory, "normals", slot(n, k, "pfm")))
                normals[n - 1, i] = nrm
                valid[n - 1, i] = np.linalg.norm(nrm, axis=-1) > 0.5
        if k in meta["flow_views"]:
            for n in range(1, N):
                seq.forward[(n, k)] = read_flo4(os.path.join(directory, "flow_fwd", slot(n, k, "flo4")))
                seq.backward[(n, k)] = read_flo4(os.path.join(directory, "flow_bwd", slot(n, k, "flo4")))
    return seq


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root, paths):
    """``sha256  relpath`` per emitted slot, sorted by path."""
    lines = [f"{file_digest(os.path.join(root, p))}  {p}" for p in sorted(paths)]
    atomic_write(os.path.join(root, "manifest.txt"), ("\n".join(lines) + "\n").encode())


def read_manifest(root):
    with open(os.path.join(root, "manifest.txt")) as f:
        return [line.split("  ", 1)[1] for line in f.read().splitlines() if line]


def prepare(root, force=False):
    """Create the workspace tree; a non-empty ``root`` needs ``force``."""
    if os.path.isdir(root) and any(n != LOCK for n in os.listdir(root)) and not force:
        raise InvalidArgument(f"{root} is not empty (use --force to overwrite)")
    for d in SUBDIRS:
        os.makedirs(os.path.join(root, d), exist_ok=True)


class WorkspaceLock:
    """Exclusive lock file; a lock left by a dead process is taken over."""

    def __init__(self, root):
        self.path = os.path.join(root, LOCK)
        self.held = False

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    os.unlink(self.path)
                    continue
                raise InvalidArgument(f"workspace is locked by another command ({self.path})") from None
            with os.fdopen(fd, "w") as f:
                f.write(str(os.getpid()))
            self.held = True
            return self
        raise InvalidArgument(f"could not acquire {self.path}")

    def _stale(self):
        try:
            with open(self.path) as f:
                pid = int(f.read().strip() or 0)
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError):
            return True
        except (PermissionError, FileNotFoundError):
            return False
        return pid == os.getpid()

    def __exit__(self, *exc):
        if self.held:
            os.unlink(self.path)
            self.held = False
