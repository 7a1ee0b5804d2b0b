"""Evaluation metrics on numpy arrays: PSNR, SSIM and flow endpoint error."""

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidArgument, UndefinedResult
from .losses import LUMA, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW

PSNR_CAP = 100.0


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise InvalidArgument(f"mask shape {m.shape} does not match image shape {shape}")
    return m


def psnr(a, b, mask=None, peak=1.0):
    """10 log10(peak^2 / MSE) over masked pixels, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = _mask(mask, a.shape[:2])
    if not m.any():
        raise UndefinedResult("psnr over an empty mask")
    mse = np.mean((a[m] - b[m]) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gray(x):
    x = np.asarray(x, dtype=np.float64)
    return x @ np.asarray(LUMA) if x.ndim == 3 else x


def ssim_map(a, b):
    """Per-pixel SSIM of two (H, W) images with a zero-padded Gaussian window."""
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    w = np.exp(-r * r / (2 * SSIM_SIGMA ** 2))
    w /= w.sum()

    def blur(x):
        return correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
            / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)))


def ssim(a, b, mask=None):
    """Mean SSIM over masked pixels; RGB inputs are reduced to luminance."""
    ga, gb = _gray(a), _gray(b)
    m = _mask(mask, ga.shape)
    if not m.any():
        raise UndefinedResult("ssim over an empty mask")
    return float(ssim_map(ga, gb)[m].mean())


def endpoint_error(flow_a, flow_b, mask=None):
    """Mean Euclidean distance between two flows over mutually valid, masked pixels.

    Accepts FlowMap objects or plain (H, W, 2) arrays.
    """
    fa, va = _unpack(flow_a)
    fb, vb = _unpack(flow_b)
    m = va & vb & _mask(mask, va.shape)
    if not m.any():
        raise UndefinedResult("endpoint error over an empty overlap")
    return float(np.linalg.norm(fa[m] - fb[m], axis=-1).mean())


def _unpack(f):
    if hasattr(f, "valid"):
        f = f.numpy()
        return f.flow, f.valid
    f = np.asarray(f, dtype=np.float64)
    return f, np.ones(f.shape[:2], dtype=bool)


EVAL_FIELDS = ("set", "view", "frame", "psnr", "ssim", "epe")


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def evaluate(predicted, truth, name="train"):
    """Per-(view, frame) rows comparing two MultiviewSequences with matching cameras.

    Image metrics use the ground-truth mask; EPE compares consecutive forward
    flows over the ground-truth mask where both exist (NaN otherwise).
    """
    rows = []
    for i, cam in enumerate(truth.cameras):
        k = cam.viewpoint_index
        j = predicted.view_position(k)
        for n in range(1, truth.num_frames + 1):
            m = truth.masks[n - 1, i]
            a, b = predicted.images[n - 1, j], truth.images[n - 1, i]
            epe = float("nan")
            if (n, k) in truth.forward and (n, k) in predicted.forward:
                try:
                    epe = endpoint_error(predicted.forward[(n, k)], truth.forward[(n, k)], m)
                except UndefinedResult:
                    pass
            rows.append({"set": name, "view": k, "frame": n, "psnr": psnr(a, b, m), "ssim": ssim(a, b, m),
                         "epe": epe})
    return rows


def aggregate(rows, name=None):
    """Mean of each metric over ``rows`` (NaN EPEs skipped)."""
    out = {"set": name if name is not None else "all", "rows": len(rows)}
    for key in ("psnr", "ssim", "epe"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        finite = vals[~np.isnan(vals)]
        out[key] = float(finite.mean()) if finite.size else float("nan")
    return out


def format_report(rows):
    """Text report: one ``key=value`` row per (set, view, frame), then per-set and overall means."""
    lines = [" ".join(f"{k}={_fmt(r[k])}" for k in EVAL_FIELDS) for r in rows]
    sets = list(dict.fromkeys(r["set"] for r in rows))
    for s in sets + ([] if len(sets) == 1 else [None]):
        agg = aggregate([r for r in rows if s is None or r["set"] == s], s)
        lines.append("mean " + " ".join(f"{k}={_fmt(agg[k])}" for k in ("set", "rows", "psnr", "ssim", "epe")))
    return "\n".join(lines) + "\n"


def parse_report(text):
    """(rows, means) back from :func:`format_report` output."""
    rows, means = [], []
    for line in text.splitlines():
        mean = line.startswith("mean ")
        rec = dict(tok.split("=", 1) for tok in (line[5:] if mean else line).split())
        for key in ("view", "frame", "rows"):
            if key in rec:
                rec[key] = int(rec[key])
        for key in ("psnr", "ssim", "epe"):
            rec[key] = float(rec[key])
        (means if mean else rows).append(rec)
    return rows, means
