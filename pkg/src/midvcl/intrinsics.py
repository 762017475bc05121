"""Retinex-style intrinsic image decomposition.

An image is factored as ``I = R * S`` where ``R`` is a three-channel
reflectance and ``S`` a single-channel (achromatic) shading.  Work happens in
the log-luminance domain: large gradients are attributed to reflectance, small
ones to shading, and the shading log-image is recovered from its gradient
field with a least-squares Poisson solve.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, SolverError

DEFAULT_GRAD_THRESHOLD = 0.075
DEFAULT_EPSILON_FLOOR = 1e-3
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class IntrinsicPair:
    reflectance: np.ndarray  # (H, W, 3)
    shading: np.ndarray  # (H, W, 1)
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR

    def shading_rgb(self):
        """Shading replicated to three channels, for encoders expecting RGB."""
        return np.repeat(self.shading, 3, axis=-1)


def validate_image(img, min_size=8):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise InvalidInputError(f"image must be at least {min_size}x{min_size}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite pixels")
    return img


def luminance(img):
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def log_luminance(img, epsilon_floor=DEFAULT_EPSILON_FLOOR):
    clamped = np.clip(np.asarray(img, dtype=np.float64), epsilon_floor, 1.0)
    return np.log(luminance(clamped))


def _forward_diff(s):
    return s[:, 1:] - s[:, :-1], s[1:, :] - s[:-1, :]


def _adjoint_diff(gx, gy):
    """Transpose of the forward-difference operator applied to (gx, gy)."""
    h, w = gy.shape[0] + 1, gx.shape[1] + 1
    out = np.zeros((h, w))
    out[:, 1:] += gx
    out[:, :-1] -= gx
    out[1:, :] += gy
    out[:-1, :] -= gy
    return out


def _laplacian(s):
    return _adjoint_diff(*_forward_diff(s))


def solve_poisson(gx, gy, rtol=1e-6, max_iters=None):
    """Least-squares integration of a gradient field.

    Minimises ``||Dx s - gx||^2 + ||Dy s - gy||^2`` by conjugate gradients on
    the normal equations, restricted to mean-zero ``s`` (the operator's null
    space is the constants).  Returns ``(s, n_iters)``.
    """
    h, w = gy.shape[0] + 1, gx.shape[1] + 1
    if max_iters is None:
        max_iters = 10 * h * w
    b = _adjoint_diff(gx, gy)
    b -= b.mean()
    b_norm = np.linalg.norm(b)
    s = np.zeros((h, w))
    if b_norm == 0.0:
        return s, 0

    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r)
    for it in range(1, max_iters + 1):
        lp = _laplacian(p)
        step = rr / np.vdot(p, lp)
        s += step * p
        r -= step * lp
        r -= r.mean()
        rr_new = np.vdot(r, r)
        if np.sqrt(rr_new) <= rtol * b_norm:
            s -= s.mean()
            return s, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise SolverError(f"Poisson solve did not converge in {max_iters} iterations",
                      float(np.sqrt(rr) / b_norm))


def split_gradients(log_lum, grad_threshold):
    """Partition log-luminance gradients into (reflectance, shading) parts.

    A gradient goes to reflectance iff its magnitude is strictly greater than
    the threshold; every gradient lands in exactly one of the two fields.
    """
    gx, gy = _forward_diff(log_lum)
    refl_x = np.abs(gx) > grad_threshold
    refl_y = np.abs(gy) > grad_threshold
    return {
        "reflectance": (np.where(refl_x, gx, 0.0), np.where(refl_y, gy, 0.0)),
        "shading": (np.where(refl_x, 0.0, gx), np.where(refl_y, 0.0, gy)),
        "masks": (refl_x, refl_y),
    }


def decompose_retinex(img, grad_threshold=DEFAULT_GRAD_THRESHOLD,
                      epsilon_floor=DEFAULT_EPSILON_FLOOR):
    """Split ``img`` into reflectance and shading.

    The shading log-image is integrated from the sub-threshold gradients,
    then shifted so that its maximum is exactly 1.  Reflectance is the
    per-channel ratio ``I / S``.  Where the integrated shading falls below the
    brightest channel of the (clamped) input, it is raised to that value so
    that reflectance stays within (0, 1] and ``R * S`` reproduces the input.
    """
    if not grad_threshold > 0:
        raise InvalidInputError("grad_threshold must be positive")
    if not 0 < epsilon_floor <= 0.1:
        raise InvalidInputError("epsilon_floor must lie in (0, 0.1]")
    img = validate_image(img)
    clamped = np.clip(img, epsilon_floor, 1.0)

    parts = split_gradients(np.log(luminance(clamped)), grad_threshold)
    log_s, _ = solve_poisson(*parts["shading"])
    log_s -= log_s.max()
    shading = np.exp(log_s)
    shading = np.maximum(shading, clamped.max(axis=-1))

    reflectance = np.clip(clamped / shading[..., None], epsilon_floor, 1.0)
    return IntrinsicPair(reflectance=reflectance, shading=shading[..., None],
                         epsilon_floor=epsilon_floor)


def reconstruct(pair):
    return np.clip(pair.reflectance * pair.shading, 0.0, 1.0)


def reconstruction_error(img, pair):
    """Relative L2 error between ``clamp(img, eps, 1)`` and ``R * S``."""
    target = np.clip(np.asarray(img, dtype=np.float64), pair.epsilon_floor, 1.0)
    return float(np.linalg.norm(target - pair.reflectance * pair.shading) / np.linalg.norm(target))


def _luma_levels(rng, n_regions, min_gap):
    # log-luminance levels spread over [log 0.1, log 0.6] with a guaranteed gap
    lo, hi = np.log(0.1), np.log(0.6)
    slack = (hi - lo) - min_gap * (n_regions - 1)
    offsets = np.sort(rng.uniform(0.0, slack, size=n_regions))
    levels = lo + offsets + min_gap * np.arange(n_regions)
    return np.exp(rng.permutation(levels))


def _smooth_log_shading(rng, h, w, max_grad):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = yy / (h - 1) - 0.5
    xx = xx / (w - 1) - 0.5
    if rng.random() < 0.5:
        a, b, c = rng.uniform(-1, 1, size=3)
        field = a * xx + b * yy + c * xx * yy
    else:
        cy, cx = rng.uniform(-0.3, 0.3, size=2)
        width = rng.uniform(0.25, 0.5)
        field = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
    gx, gy = _forward_diff(field)
    peak = max(np.abs(gx).max(), np.abs(gy).max(), 1e-12)
    field = field * (max_grad / peak)
    field -= field.max()
    return np.maximum(field, np.log(0.3))


def make_synthetic_intrinsic(seed, h, w, grad_threshold=DEFAULT_GRAD_THRESHOLD):
    """Random image with a known reflectance/shading factorisation.

    Reflectance is piecewise constant over 2-5 Voronoi regions whose
    log-luminance levels differ by at least twice ``grad_threshold``; shading
    is a smooth low-order polynomial or Gaussian bump whose per-pixel
    log-gradient stays below half the threshold.
    """
    if h < 16 or w < 16:
        raise InvalidInputError("synthetic images must be at least 16x16")
    rng = np.random.default_rng(seed)
    n_regions = int(rng.integers(2, 6))

    seeds = rng.uniform(0, 1, size=(n_regions, 2)) * [h, w]
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    regions = np.argmin(d2, axis=-1)

    levels = _luma_levels(rng, n_regions, min_gap=2.5 * grad_threshold)
    chroma = rng.uniform(0.7, 1.0, size=(n_regions, 3))
    albedo = chroma * (levels / (chroma @ LUMA_WEIGHTS))[:, None]
    reflectance = albedo[regions]

    log_s = _smooth_log_shading(rng, h, w, max_grad=0.4 * grad_threshold)
    shading = np.exp(log_s)[..., None]

    image = np.clip(reflectance * shading, 0.0, 1.0)
    pair = IntrinsicPair(reflectance=reflectance, shading=shading)
    return image, pair


def shading_pearson(estimated, truth):
    return float(np.corrcoef(np.ravel(estimated), np.ravel(truth))[0, 1])


def scale_invariant_rmse(estimated, truth):
    """RMSE after the best global rescaling of ``estimated``, relative to ``truth``'s RMS."""
    e = np.ravel(estimated)
    t = np.ravel(truth)
    alpha = np.dot(e, t) / np.dot(e, e)
    return float(np.sqrt(np.mean((alpha * e - t) ** 2)) / np.sqrt(np.mean(t**2)))


# -- on-disk cache -----------------------------------------------------------

def cache_paths(root, name):
    root = Path(root)
    return root / "reflectance" / f"{name}.png", root / "shading" / f"{name}.png"


def save_pair(root, name, pair):
    from PIL import Image as PILImage

    refl_path, shad_path = cache_paths(root, name)
    refl_path.parent.mkdir(parents=True, exist_ok=True)
    shad_path.parent.mkdir(parents=True, exist_ok=True)
    refl8 = np.round(pair.reflectance * 255).astype(np.uint8)
    PILImage.fromarray(refl8, mode="RGB").save(refl_path)
    shad16 = np.round(pair.shading[..., 0] * 65535).astype(np.uint16)
    PILImage.fromarray(shad16).save(shad_path)


def load_pair(root, name, epsilon_floor=DEFAULT_EPSILON_FLOOR):
    from PIL import Image as PILImage

    refl_path, shad_path = cache_paths(root, name)
    refl = np.asarray(PILImage.open(refl_path).convert("RGB"), dtype=np.float64) / 255.0
    shad = np.asarray(PILImage.open(shad_path), dtype=np.float64) / 65535.0
    refl = np.clip(refl, epsilon_floor, 1.0)
    shad = np.clip(shad, epsilon_floor, 1.0)[..., None]
    return IntrinsicPair(reflectance=refl, shading=shad, epsilon_floor=epsilon_floor)


def write_cache_metadata(root, grad_threshold, epsilon_floor):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"grad_threshold": grad_threshold, "epsilon_floor": epsilon_floor}
    (root / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_cache_metadata(root):
    return json.loads((Path(root) / "metadata.json").read_text())
