"""Space-time cropping in input space and in feature space.

Input-space tubes slice pixels and are followed by a bilinear resize and
photometric jitter; feature-space tubes slice cells of an intermediate
feature map directly (no resize), so gradients flow only into the
sliced region. A crop plan describes how many medium/small feature
views to draw per large view and their spatial/temporal sizes.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, concat

__all__ = [
    "CropTube",
    "CropPlan",
    "ViewSet",
    "AugmentParams",
    "sample_crop_tube",
    "input_crop_resize",
    "bilinear_resize",
    "photometric_augment",
    "audio_augment",
    "feature_crop",
    "sample_view_sets",
    "parse_time_spec",
]

INPUT_SPACE = "input"
FEATURE_SPACE = "feature"


@dataclass(frozen=True)
class CropTube:
    """Space-time box with max-exclusive integer bounds, constant over time."""

    x_min: int
    x_max: int
    y_min: int
    y_max: int
    t_min: int
    t_max: int
    domain: str = INPUT_SPACE

    def __post_init__(self):
        if self.domain not in (INPUT_SPACE, FEATURE_SPACE):
            raise ValueError(f"unknown tube domain {self.domain!r}")
        for lo, hi, name in ((self.x_min, self.x_max, "x"),
                             (self.y_min, self.y_max, "y"),
                             (self.t_min, self.t_max, "t")):
            if lo < 0 or lo >= hi:
                raise ValueError(f"empty or negative tube on {name}: [{lo}, {hi})")

    def check_bounds(self, extents):
        """extents = (T, H, W); raises if the tube leaves the volume."""
        t, h, w = extents
        if self.t_max > t or self.y_max > h or self.x_max > w:
            raise ValueError(f"tube {self} out of bounds for extents {extents}")

    @property
    def spatial_size(self):
        return (self.y_max - self.y_min, self.x_max - self.x_min)

    @property
    def t_len(self):
        return self.t_max - self.t_min


def sample_crop_tube(extents, area_range, aspect_range, t_len, rng):
    """Random spatial box by area fraction and aspect ratio, plus a uniform
    temporal window of `t_len`; falls back to a centered square after 10
    rejected attempts."""
    t, h, w = extents
    if t_len > t:
        raise ValueError(f"temporal length {t_len} > extent {t}")
    lo, hi = area_range
    a_lo, a_hi = aspect_range
    box = None
    for _ in range(10):
        area = rng.uniform(lo, hi) * h * w
        aspect = np.exp(rng.uniform(np.log(a_lo), np.log(a_hi)))
        bw = int(round(np.sqrt(area * aspect)))
        bh = int(round(np.sqrt(area / aspect)))
        if 1 <= bw <= w and 1 <= bh <= h:
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            box = (x0, x0 + bw, y0, y0 + bh)
            break
    if box is None:
        side = min(h, w)
        x0, y0 = (w - side) // 2, (h - side) // 2
        box = (x0, x0 + side, y0, y0 + side)
    t0 = int(rng.integers(0, t - t_len + 1))
    return CropTube(*box, t0, t0 + t_len, domain=INPUT_SPACE)


def bilinear_resize(frames, out_h, out_w):
    """Resize the trailing (H, W) axes of an ndarray by bilinear sampling
    at pixel centers. Constants are preserved; same-size input is copied
    bit-identically."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target {out_h}x{out_w} < 1")
    h, w = frames.shape[-2:]
    if (h, w) == (out_h, out_w):
        return frames.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    v00 = frames[..., y0[:, None], x0[None, :]]
    v01 = frames[..., y0[:, None], x1[None, :]]
    v10 = frames[..., y1[:, None], x0[None, :]]
    v11 = frames[..., y1[:, None], x1[None, :]]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def input_crop_resize(video, tube, out_hw):
    """Slice an input-space tube from (C, T, H, W) pixels, then bilinear
    resize every kept frame to `out_hw` with one shared spatial mapping."""
    if tube.domain != INPUT_SPACE:
        raise ValueError("input_crop_resize needs an input-space tube")
    c, t, h, w = video.shape
    tube.check_bounds((t, h, w))
    out_h, out_w = out_hw
    crop = video[:, tube.t_min:tube.t_max, tube.y_min:tube.y_max, tube.x_min:tube.x_max]
    return bilinear_resize(crop, out_h, out_w)


@dataclass
class AugmentParams:
    """Per-clip-consistent photometric jitter strengths; zeros mean identity."""

    flip_prob: float = 0.5
    brightness: float = 0.0
    contrast: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: float = 1.0
    audio_gain: float = 0.0


def _gaussian_kernel1d(sigma):
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def photometric_augment(video, params, rng):
    """Clip-consistent flip, brightness/contrast jitter, optional blur.

    Each transform applies identically to every frame; zero strengths
    leave the clip bit-identical.
    """
    v = video
    if params.flip_prob > 0 and rng.random() < params.flip_prob:
        v = v[..., ::-1].copy()
    if params.brightness > 0:
        v = v + params.brightness * rng.uniform(-1.0, 1.0)
    if params.contrast > 0:
        factor = 1.0 + params.contrast * rng.uniform(-1.0, 1.0)
        mean = v.mean()
        v = (v - mean) * factor + mean
    if params.blur_prob > 0 and rng.random() < params.blur_prob:
        k = _gaussian_kernel1d(params.blur_sigma)
        pad = len(k) // 2
        vp = np.pad(v, [(0, 0)] * (v.ndim - 2) + [(pad, pad), (pad, pad)], mode="edge")
        vp = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), -2, vp)
        v = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), -1, vp)
    return v if v is not video else video.copy()


def audio_augment(audio, params, rng):
    """Global volume jitter."""
    if params.audio_gain > 0:
        return audio * (1.0 + params.audio_gain * rng.uniform(-1.0, 1.0))
    return audio.copy()


def feature_crop(feat, tube):
    """Slice a feature-space tube from (..., D, T1, H1, W1); pure slicing,
    channels untouched, gradients scatter only into the kept cells."""
    if tube.domain != FEATURE_SPACE:
        raise ValueError("feature_crop needs a feature-space tube")
    if isinstance(feat, np.ndarray):
        feat = Tensor(feat)
    if feat.ndim not in (4, 5):
        raise ShapeError(f"feature map rank {feat.ndim}, need 4 or 5")
    tube.check_bounds(feat.shape[-3:])
    key = (slice(tube.t_min, tube.t_max), slice(tube.y_min, tube.y_max),
           slice(tube.x_min, tube.x_max))
    if feat.ndim == 5:
        return feat[(slice(None), slice(None)) + key]
    return feat[(slice(None),) + key]


def parse_time_spec(text):
    """Parse temporal crop counts like "2x3+1x2" into [(2, 3), (1, 2)]."""
    text = text.strip()
    if not text:
        return []
    out = []
    for part in text.split("+"):
        m = re.fullmatch(r"\s*(\d+)\s*x\s*(\d+)\s*", part)
        if not m:
            raise ValueError(f"bad time spec component {part!r}")
        out.append((int(m.group(1)), int(m.group(2))))
    return out


@dataclass
class CropPlan:
    """How many medium/small feature views to draw and at what sizes.

    `time_spec` lists (count, temporal size) pairs consumed by the crops
    in order (mediums first); crops beyond the listed counts span the
    source grid's full temporal extent.
    """

    m: int = 1
    n: int = 2
    medium_size: int = 6
    small_size: int = 4
    time_spec: list = field(default_factory=lambda: [(2, 3), (1, 2)])
    grid: tuple = (4, 7, 7)

    def __post_init__(self):
        t1, h1, w1 = self.grid
        if self.m < 0 or self.n < 0:
            raise ValueError("crop counts must be non-negative")
        if self.m and self.medium_size > min(h1, w1):
            raise ValueError(
                f"medium crop size {self.medium_size} exceeds feature grid {min(h1, w1)}"
            )
        if self.n and self.small_size > min(h1, w1):
            raise ValueError(
                f"small crop size {self.small_size} exceeds feature grid {min(h1, w1)}"
            )
        for _, size in self.time_spec:
            if size > t1 or size < 1:
                raise ValueError(f"temporal crop size {size} infeasible for T1={t1}")

    def crop_specs(self):
        """Ordered (size_class, spatial_size, temporal_size) per view."""
        t1 = self.grid[0]
        tsizes = [s for count, s in self.time_spec for _ in range(count)]
        specs = []
        for i in range(self.m + self.n):
            cls = "medium" if i < self.m else "small"
            spatial = self.medium_size if cls == "medium" else self.small_size
            temporal = tsizes[i] if i < len(tsizes) else t1
            specs.append((cls, spatial, temporal))
        return specs


@dataclass
class ViewSet:
    """Embeddings of one large crop and its feature-space views."""

    source_id: int
    views: list  # [(size_class, embedding Tensor (N, d))]

    def __post_init__(self):
        counts = {"large": 0, "medium": 0, "small": 0}
        for cls, _ in self.views:
            counts[cls] += 1
        if counts["large"] != 1:
            raise ValueError(f"view set needs exactly one large view, got {counts['large']}")
        self._counts = counts

    @property
    def large(self):
        return next(z for cls, z in self.views if cls == "large")

    def crop_views(self):
        """Medium and small views in stable order."""
        return [(cls, z) for cls, z in self.views if cls != "large"]


def sample_crop_offsets(grid, spatial, temporal, n, rng):
    """Uniform per-sample (t0, y0, x0) offsets for a view of the given sizes."""
    t1, h1, w1 = grid
    if temporal > t1 or spatial > min(h1, w1):
        raise ValueError(f"crop {spatial}x{spatial}x{temporal} infeasible for grid {grid}")
    t0s = rng.integers(0, t1 - temporal + 1, size=n)
    y0s = rng.integers(0, h1 - spatial + 1, size=n)
    x0s = rng.integers(0, w1 - spatial + 1, size=n)
    return t0s, y0s, x0s


def _per_sample_crop(feat, spatial, temporal, rng):
    """Slice one (spatial, temporal) view at per-sample uniform offsets."""
    n = feat.shape[0]
    t0s, y0s, x0s = sample_crop_offsets(feat.shape[-3:], spatial, temporal, n, rng)
    parts = [
        feat[i : i + 1, :, t0s[i] : t0s[i] + temporal,
             y0s[i] : y0s[i] + spatial, x0s[i] : x0s[i] + spatial]
        for i in range(n)
    ]
    return concat(parts, axis=0), t0s


def sample_view_sets(feat1, feat2, plan, rng, embed_fn):
    """Build both view sets from the two large-crop feature maps.

    `embed_fn(view_feat, time_offsets)` pools and projects one view; the
    large view keeps the full grid, every feature crop is drawn at
    independent uniform offsets per sample.
    """
    for feat in (feat1, feat2):
        if tuple(feat.shape[-3:]) != tuple(plan.grid):
            raise ValueError(f"feature grid {feat.shape[-3:]} != plan grid {plan.grid}")
    sets = []
    for source_id, feat in ((1, feat1), (2, feat2)):
        n = feat.shape[0]
        views = [("large", embed_fn(feat, np.zeros(n, dtype=int)))]
        for cls, spatial, temporal in plan.crop_specs():
            view, t0s = _per_sample_crop(feat, spatial, temporal, rng)
            views.append((cls, embed_fn(view, t0s)))
        sets.append(ViewSet(source_id, views))
    return tuple(sets)
