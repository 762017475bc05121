"""Procedural shape x texture data, silhouettes, cue-conflict stimuli and corruptions."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError, InvalidInputError, MissingMaskError

SHAPE_FAMILY = ("circle", "triangle", "square", "star", "ellipse", "cross", "hexagon", "crescent")
TEXTURE_FAMILY = ("stripes", "checker", "dots", "noise_bands", "rings", "zigzag")

MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.98

# severity ladders, index 0 is severity 1
CORRUPTION_LADDERS = {
    "noise": (0.03, 0.06, 0.10, 0.14, 0.20),  # additive Gaussian std
    "blur": (0.5, 1.0, 1.5, 2.0, 3.0),  # Gaussian blur sigma (pixels)
    "contrast": (0.75, 0.55, 0.40, 0.30, 0.20),  # factor of affine map toward 0.5
    "grayscale": (1.0, 0.9, 0.8, 0.7, 0.6),  # luma replicated, then contrast factor
    "highpass": (3.0, 2.0, 1.5, 1.0, 0.7),  # sigma of the removed low-pass
}
CORRUPTION_KINDS = tuple(CORRUPTION_LADDERS)


@dataclass(frozen=True)
class SilhouetteMask:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise InvalidInputError("silhouette must be a 2-D array")
        if not np.isin(m, (0, 1)).all():
            raise InvalidInputError("silhouette values must be 0 or 1")
        frac = float(m.mean())
        if not MIN_FOREGROUND <= frac <= MAX_FOREGROUND:
            raise DatasetError(f"degenerate silhouette (foreground fraction {frac:.3f})")
        object.__setattr__(self, "mask", m.astype(np.uint8))

    @property
    def foreground_fraction(self):
        return float(self.mask.mean())


@dataclass(frozen=True)
class LabeledSample:
    name: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    silhouette: SilhouetteMask | None
    shape_label: int
    texture_label: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise InvalidInputError(f"unknown split {self.split!r}")
        if self.silhouette is not None and self.silhouette.mask.shape != self.image.shape[:2]:
            raise DatasetError(f"{self.name}: mask shape {self.silhouette.mask.shape} "
                               f"does not match image shape {self.image.shape[:2]}")


@dataclass(frozen=True)
class CueConflictStimulus:
    image: np.ndarray
    mask: np.ndarray
    shape_label: int
    texture_label: int

    def __post_init__(self):
        if self.shape_label == self.texture_label:
            raise InvalidInputError("cue-conflict stimulus needs distinct shape and texture labels")


# -- shape rendering ---------------------------------------------------------

def _regular_polygon(n, radius=1.0, phase=np.pi / 2):
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(t), radius * np.sin(t)], axis=1)


def _star_polygon(points=5, outer=1.0, inner=0.45):
    t = np.pi / 2 + np.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _inside_polygon(u, v, poly):
    """Even-odd rule point-in-polygon test, vectorised over points."""
    inside = np.zeros(u.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = (y1 > v) != (y0 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x0 - x1) * (v - y1) / (y0 - y1) + x1
        inside ^= crosses & (u < x_at)
        x0, y0 = x1, y1
    return inside


def shape_region(shape_id, u, v):
    """Membership of canonical coordinates ``(u, v)`` in shape ``shape_id``.

    Shapes live roughly inside the unit disc.
    """
    name = SHAPE_FAMILY[shape_id]
    if name == "circle":
        return u**2 + v**2 <= 0.9**2
    if name == "triangle":
        return _inside_polygon(u, v, _regular_polygon(3, 1.05))
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.72
    if name == "star":
        return _inside_polygon(u, v, _star_polygon(5, 1.05, 0.45))
    if name == "ellipse":
        return (u / 1.0) ** 2 + (v / 0.45) ** 2 <= 1.0
    if name == "cross":
        arm = 0.3
        return ((np.abs(u) <= arm) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= arm) & (np.abs(u) <= 0.95))
    if name == "hexagon":
        return _inside_polygon(u, v, _regular_polygon(6, 0.9, phase=0.0))
    if name == "crescent":
        return (u**2 + v**2 <= 0.9**2) & ((u - 0.45) ** 2 + v**2 > 0.7**2)
    raise InvalidInputError(f"unknown shape id {shape_id}")


@dataclass(frozen=True)
class ShapePose:
    cy: float  # centre, in pixels
    cx: float
    scale: float  # radius of the canonical unit disc, in pixels
    angle: float  # radians


def random_pose(rng, h, w):
    size = min(h, w)
    return ShapePose(
        cy=h / 2 + rng.uniform(-0.06, 0.06) * h,
        cx=w / 2 + rng.uniform(-0.06, 0.06) * w,
        scale=rng.uniform(0.32, 0.38) * size,
        angle=rng.uniform(-np.pi / 12, np.pi / 12),
    )


def render_mask(shape_id, pose, h, w):
    """Exact binary region of a posed shape, sampled at pixel centres."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - pose.cy, xx - pose.cx
    c, s = np.cos(pose.angle), np.sin(pose.angle)
    # inverse rotation, image y axis flipped so that +v points up
    u = (c * dx - s * dy) / pose.scale
    v = (-s * dx - c * dy) / pose.scale
    return shape_region(shape_id, u, v).astype(np.uint8)


# -- textures ----------------------------------------------------------------

def texture_pattern(texture_id, rng, h, w):
    """Scalar pattern in [0, 1] for texture class ``texture_id``.

    Frequencies and phases are drawn within class-specific bands so that a
    class keeps a recognisable spectral signature.
    """
    name = TEXTURE_FAMILY[texture_id]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    if name == "stripes":
        period = rng.uniform(4.0, 5.5)
        theta = rng.uniform(-0.3, 0.3)
        t = xx * np.cos(theta) + yy * np.sin(theta)
        return (np.sin(2 * np.pi * t / period + phase) > 0).astype(np.float64)
    if name == "checker":
        period = rng.uniform(7.0, 9.0)
        oy, ox = rng.uniform(0, period, size=2)
        a = np.floor((yy + oy) / (period / 2)) + np.floor((xx + ox) / (period / 2))
        return (a % 2).astype(np.float64)
    if name == "dots":
        period = rng.uniform(5.0, 6.5)
        oy, ox = rng.uniform(0, period, size=2)
        fy = ((yy + oy) % period) - period / 2
        fx = ((xx + ox) % period) - period / 2
        return (fy**2 + fx**2 <= (0.3 * period) ** 2).astype(np.float64)
    if name == "noise_bands":
        noise = rng.standard_normal((h, w))
        noise = ndimage.gaussian_filter(noise, sigma=(0.6, 3.0), mode="wrap")
        return (noise > 0).astype(np.float64)
    if name == "rings":
        period = rng.uniform(5.0, 7.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = np.hypot(yy - cy, xx - cx)
        return (np.sin(2 * np.pi * r / period + phase) > 0).astype(np.float64)
    if name == "zigzag":
        period = rng.uniform(6.0, 8.0)
        amp = rng.uniform(1.5, 2.5)
        tri = np.abs(((xx / period) % 1.0) - 0.5) * 2 * amp
        return (np.sin(2 * np.pi * (yy + tri) / 4.0 + phase) > 0).astype(np.float64)
    raise InvalidInputError(f"unknown texture id {texture_id}")


def _random_color_pair(rng):
    hue = rng.uniform(0, 1)
    base = 0.5 + 0.5 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
    light = 0.55 + 0.45 * base
    dark = 0.35 * base * rng.uniform(0.3, 1.0)
    return dark, light


def render_texture(texture_id, rng, h, w):
    pattern = texture_pattern(texture_id, rng, h, w)
    dark, light = _random_color_pair(rng)
    return dark + pattern[..., None] * (light - dark)


def render_background(rng, h, w):
    """Low-contrast, smooth clutter unlike any foreground texture class."""
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(4, 4, 0), mode="wrap")
    noise /= np.abs(noise).max() + 1e-12
    base = rng.uniform(0.35, 0.65, size=3)
    return np.clip(base + 0.12 * noise, 0.0, 1.0)


def compose(mask, foreground, background):
    return np.where(mask[..., None].astype(bool), foreground, background)


def _cell_rng(seed, *key):
    return np.random.default_rng([seed, *key])


def make_shape_texture_dataset(seed, n_shapes=4, n_textures=4, per_cell=10, h=32, w=32):
    """Render a balanced shape x texture dataset.

    Every (shape, texture) cell gets ``per_cell`` samples; 80% of each cell
    goes to the train split.  Each sample's silhouette is the exact region the
    foreground texture was painted into.
    """
    if n_shapes < 2 or n_textures < 2 or per_cell < 1:
        raise InvalidInputError("need n_shapes >= 2, n_textures >= 2 and per_cell >= 1")
    if n_shapes > len(SHAPE_FAMILY):
        raise InvalidInputError(f"only {len(SHAPE_FAMILY)} shape classes are implemented")
    if n_textures > len(TEXTURE_FAMILY):
        raise InvalidInputError(f"only {len(TEXTURE_FAMILY)} texture classes are implemented")

    n_train = int(round(0.8 * per_cell))
    samples = []
    for s in range(n_shapes):
        for t in range(n_textures):
            split_rng = _cell_rng(seed, s, t, 1_000_003)
            train_slots = set(split_rng.permutation(per_cell)[:n_train].tolist())
            for k in range(per_cell):
                rng = _cell_rng(seed, s, t, k)
                pose = random_pose(rng, h, w)
                mask = render_mask(s, pose, h, w)
                image = compose(mask, render_texture(t, rng, h, w), render_background(rng, h, w))
                samples.append(LabeledSample(
                    name=f"s{s}_t{t}_{k:04d}",
                    image=image,
                    silhouette=SilhouetteMask(mask),
                    shape_label=s,
                    texture_label=t,
                    split="train" if k in train_slots else "val",
                ))
    return samples


def make_cue_conflict(seed, samples, n_stimuli):
    """Silhouettes of shape class ``a`` filled with the texture of class ``b != a``.

    Shape class ``a`` is paired with texture class ``a``; stimuli cycle
    through all off-diagonal (a, b) pairs so the set is balanced.
    """
    shapes = sorted({x.shape_label for x in samples})
    textures = sorted({x.texture_label for x in samples})
    if len(shapes) < 2 or len(textures) < 2:
        raise InvalidInputError("cue conflict needs at least 2 shape and 2 texture classes")
    by_shape = {a: [x for x in samples if x.shape_label == a and x.silhouette is not None] for a in shapes}
    pairs = [(a, b) for a in shapes for b in textures if b != a]
    if not pairs or any(not v for v in by_shape.values()):
        raise InvalidInputError("no valid (shape, texture) pairing is available")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    stimuli = []
    for i in range(n_stimuli):
        a, b = pairs[order[i % len(pairs)]]
        donor = by_shape[a][rng.integers(len(by_shape[a]))]
        mask = donor.silhouette.mask
        h, w = mask.shape
        image = compose(mask, render_texture(b, rng, h, w), render_background(rng, h, w))
        stimuli.append(CueConflictStimulus(image=image, mask=mask.copy(), shape_label=a, texture_label=b))
    return stimuli


def texture_signature(patch):
    """Normalised, DC-free FFT magnitude of a grayscale patch."""
    g = np.asarray(patch, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=-1)
    g = g - g.mean()
    mag = np.abs(np.fft.fft2(g))
    mag[0, 0] = 0.0
    return mag / (np.linalg.norm(mag) + 1e-12)


def masked_signature(image, mask):
    """Texture signature of the masked region; the rest is filled with its mean."""
    gray = np.asarray(image).mean(axis=-1)
    fg = mask.astype(bool)
    return texture_signature(np.where(fg, gray, gray[fg].mean()))


def texture_templates(samples):
    """Per-texture-class mean signature over the silhouettes of clean samples."""
    sigs = {}
    for x in samples:
        sigs.setdefault(x.texture_label, []).append(masked_signature(x.image, x.silhouette.mask))
    templates = {}
    for t, group in sorted(sigs.items()):
        m = np.mean(group, axis=0)
        templates[t] = m / np.linalg.norm(m)
    return templates


def classify_texture(image, mask, templates):
    """Nearest texture template for the masked region of ``image``."""
    sig = masked_signature(image, mask)
    scores = {t: float(np.sum(sig * tpl)) for t, tpl in templates.items()}
    return max(scores, key=scores.get)


# -- corruptions -------------------------------------------------------------

def corrupt(img, kind, severity, seed=0):
    """Apply corruption ``kind`` at ``severity`` (1..5) following ``CORRUPTION_LADDERS``.

    ``kind="identity"`` returns a clipped copy and is accepted so that clean
    baselines can share a corruption grid.
    """
    if not 1 <= int(severity) <= 5 or int(severity) != severity:
        raise InvalidInputError("severity must be an integer in 1..5")
    img = np.asarray(img, dtype=np.float64)
    if kind == "identity":
        return np.clip(img, 0.0, 1.0)
    if kind not in CORRUPTION_LADDERS:
        raise InvalidInputError(f"unknown corruption kind {kind!r}")
    level = CORRUPTION_LADDERS[kind][severity - 1]
    if kind == "noise":
        rng = np.random.default_rng(seed)
        out = img + rng.normal(0.0, level, size=img.shape)
    elif kind == "blur":
        out = ndimage.gaussian_filter(img, sigma=(level, level, 0), mode="reflect")
    elif kind == "contrast":
        out = 0.5 + level * (img - 0.5)
    elif kind == "grayscale":
        luma = img @ np.array([0.299, 0.587, 0.114])
        out = np.repeat((0.5 + level * (luma - 0.5))[..., None], 3, axis=-1)
    else:  # highpass
        low = ndimage.gaussian_filter(img, sigma=(level, level, 0), mode="reflect")
        out = img - low + 0.5
    return np.clip(out, 0.0, 1.0)


# -- disk layout -------------------------------------------------------------

MANIFEST_COLUMNS = ("name", "shape_label", "texture_label", "split")


def write_dataset(root, samples):
    from PIL import Image as PILImage

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for x in samples:
            img8 = np.round(np.clip(x.image, 0, 1) * 255).astype(np.uint8)
            PILImage.fromarray(img8, mode="RGB").save(root / "images" / f"{x.name}.png")
            if x.silhouette is not None:
                PILImage.fromarray(x.silhouette.mask * 255).save(root / "masks" / f"{x.name}.png")
            writer.writerow([x.name, x.shape_label, x.texture_label, x.split])


def read_manifest(root):
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(MANIFEST_COLUMNS) - set(rows[0]):
        raise DatasetError(f"manifest must have columns {MANIFEST_COLUMNS}")
    return rows


def load_image(path):
    from PIL import Image as PILImage

    return np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path):
    from PIL import Image as PILImage

    raw = np.asarray(PILImage.open(path).convert("L"), dtype=np.float64) / 255.0
    return (raw >= 0.5).astype(np.uint8)


def load_dataset(root, require_masks=True):
    """Load ``images/``, ``masks/`` and ``manifest.csv`` from ``root``, in manifest order."""
    root = Path(root)
    samples = []
    for row in read_manifest(root):
        name = row["name"]
        image_path = root / "images" / f"{name}.png"
        if not image_path.exists():
            raise DatasetError(f"missing image file: {image_path}")
        image = load_image(image_path)
        mask_path = root / "masks" / f"{name}.png"
        silhouette = None
        if mask_path.exists():
            mask = load_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise DatasetError(f"{mask_path}: mask shape {mask.shape} does not match image {image.shape[:2]}")
            silhouette = SilhouetteMask(mask)
        elif require_masks:
            raise MissingMaskError(f"missing mask file: {mask_path}")
        samples.append(LabeledSample(
            name=name,
            image=image,
            silhouette=silhouette,
            shape_label=int(row["shape_label"]),
            texture_label=int(row["texture_label"]),
            split=row["split"],
        ))
    return samples


def canonical_mask(mask, size=64, n_angles=180):
    """Centre, area-normalise and return rotated copies of a mask for alignment."""
    m = mask.astype(np.float64)
    cy, cx = ndimage.center_of_mass(m)
    radius = np.sqrt(m.sum() / np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    base = (np.stack([yy, xx]) - size / 2) / (size / 4)  # unit radius = size / 4
    out = []
    for a in np.linspace(0, 2 * np.pi, n_angles, endpoint=False):
        c, s = np.cos(a), np.sin(a)
        ry = c * base[0] - s * base[1]
        rx = s * base[0] + c * base[1]
        coords = np.stack([cy - 0.5 + ry * radius, cx - 0.5 + rx * radius])
        out.append(ndimage.map_coordinates(m, coords, order=0, mode="constant") > 0.5)
    return out


def aligned_iou(mask_a, mask_b, size=64, n_angles=180):
    """Best IoU over rotations after centroid and area normalisation."""
    ref = canonical_mask(mask_a, size, 1)[0]
    best = 0.0
    for cand in canonical_mask(mask_b, size, n_angles):
        inter = np.logical_and(ref, cand).sum()
        union = np.logical_or(ref, cand).sum()
        best = max(best, inter / union)
    return float(best)
