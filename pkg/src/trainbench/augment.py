"""Flip, rotation, shear, zoom and brightness augmentation.

Geometric transforms share one affine kernel (inverse mapping about the image
centre, bilinear interpolation, nearest-edge fill). Flips and rotations by
multiples of 90 degrees are exact index permutations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import Dataset, Image, RngStream

SCALE_MIN, SCALE_MAX = 0.05, 2.0
FAMILIES = ("flip", "rotation", "shear", "zoom", "brightness")


@dataclass(frozen=True)
class AugmentSpec:
    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotation_range: float = 0.0
    shear_range: float = 0.0
    zoom_range: float = 0.0
    brightness_range: float = 0.0

    def __post_init__(self):
        for name in ("rotation_range", "shear_range", "zoom_range", "brightness_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.shear_range >= 90:
            raise ValueError("shear_range must be < 90 degrees")

    @property
    def is_identity(self) -> bool:
        return self == AugmentSpec()

    def families(self) -> list[str]:
        out = []
        if self.horizontal_flip or self.vertical_flip:
            out.append("flip")
        for fam, value in (("rotation", self.rotation_range), ("shear", self.shear_range),
                           ("zoom", self.zoom_range), ("brightness", self.brightness_range)):
            if value > 0:
                out.append(fam)
        return out

    def merge(self, other: "AugmentSpec") -> "AugmentSpec":
        """Union of two specs; for each field the enabled/larger setting wins."""
        return AugmentSpec(
            self.horizontal_flip or other.horizontal_flip,
            self.vertical_flip or other.vertical_flip,
            max(self.rotation_range, other.rotation_range),
            max(self.shear_range, other.shear_range),
            max(self.zoom_range, other.zoom_range),
            max(self.brightness_range, other.brightness_range),
        )

    def label(self) -> str:
        parts = []
        if self.horizontal_flip:
            parts.append("hflip")
        if self.vertical_flip:
            parts.append("vflip")
        if self.rotation_range:
            parts.append(f"rot{self.rotation_range:g}")
        if self.shear_range:
            parts.append(f"shear{self.shear_range:g}")
        if self.zoom_range:
            parts.append(f"zoom{100 * self.zoom_range:g}%")
        if self.brightness_range:
            parts.append(f"bright{100 * self.brightness_range:g}%")
        return "+".join(parts) or "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "AugmentSpec":
        return cls(**obj)


@dataclass(frozen=True)
class TransformParams:
    flip_h: bool = False
    flip_v: bool = False
    angle: float = 0.0
    shear: float = 0.0
    scale: float = 1.0
    brightness: float = 1.0


def sample_params(spec: AugmentSpec, rng: RngStream) -> TransformParams:
    """Draw one set of transform parameters from ``spec``.

    Six uniforms are always consumed so that the stream position does not
    depend on which families are enabled.
    """
    u = rng.random(6)
    scale = 1.0 + spec.zoom_range * (2.0 * u[4] - 1.0)
    brightness = 1.0 + spec.brightness_range * (2.0 * u[5] - 1.0)
    return TransformParams(
        flip_h=bool(spec.horizontal_flip and u[0] < 0.5),
        flip_v=bool(spec.vertical_flip and u[1] < 0.5),
        angle=spec.rotation_range * (2.0 * u[2] - 1.0),
        shear=spec.shear_range * (2.0 * u[3] - 1.0),
        scale=float(min(max(scale, SCALE_MIN), SCALE_MAX)),
        brightness=float(max(brightness, 0.0)),
    )


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    # snap multiples of 90 degrees so the permutation fast paths are reachable
    quarter = angle_deg / 90.0
    if quarter == round(quarter):
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(round(quarter)) % 4]
    t = math.radians(angle_deg)
    return math.cos(t), math.sin(t)


def rotation_matrix(angle_deg: float) -> np.ndarray:
    """Rotation in pixel coordinates (x right, y down): clockwise on screen for positive angles."""
    c, s = _cos_sin(angle_deg)
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def shear_matrix(shear_deg: float) -> np.ndarray:
    """Horizontal shear x' = x + tan(theta) * y."""
    return np.array([[1.0, math.tan(math.radians(shear_deg)), 0.0], [0.0, 1.0, 0.0]])


def scale_matrix(scale: float) -> np.ndarray:
    return np.array([[scale, 0.0, 0.0], [0.0, scale, 0.0]])


def compose(*mats: np.ndarray) -> np.ndarray:
    """Compose 2x3 affine matrices; the leftmost is applied last."""
    out = np.eye(3)
    for m in mats:
        out = out @ np.vstack([m, [0.0, 0.0, 1.0]])
    return out[:2]


def _permutation_path(data: np.ndarray, matrix: np.ndarray):
    if matrix[0, 2] != 0.0 or matrix[1, 2] != 0.0:
        return None
    lin = matrix[:, :2]
    h, w = data.shape[:2]
    if np.array_equal(lin, [[1.0, 0.0], [0.0, 1.0]]):
        return data.copy()
    if np.array_equal(lin, [[-1.0, 0.0], [0.0, -1.0]]):
        return data[::-1, ::-1].copy()
    if h == w:
        if np.array_equal(lin, [[0.0, -1.0], [1.0, 0.0]]):
            return np.rot90(data, k=-1).copy()
        if np.array_equal(lin, [[0.0, 1.0], [-1.0, 0.0]]):
            return np.rot90(data, k=1).copy()
    return None


def warp_affine(image: Image, matrix, exact_paths: bool = True) -> Image:
    """Apply a 2x3 affine (about the image centre) with bilinear sampling.

    Output pixel q takes the source value at A^-1 (q - c - t) + c; source
    coordinates outside the image are clamped to the nearest edge pixel.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    lin = matrix[:, :2]
    det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
    if not math.isfinite(det) or abs(det) < 1e-12:
        raise ValueError("affine matrix is singular")
    data = image.data
    if exact_paths:
        fast = _permutation_path(data, matrix)
        if fast is not None:
            return Image(fast)
    h, w = data.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    inv = np.linalg.inv(lin)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ox = xs - cx - matrix[0, 2]
    oy = ys - cy - matrix[1, 2]
    sx = np.clip(inv[0, 0] * ox + inv[0, 1] * oy + cx, 0.0, w - 1.0)
    sy = np.clip(inv[1, 0] * ox + inv[1, 1] * oy + cy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    # lerp form: equal neighbours reproduce their value exactly
    top = data[y0, x0] + fx * (data[y0, x1] - data[y0, x0])
    bottom = data[y1, x0] + fx * (data[y1, x1] - data[y1, x0])
    out = top + fy * (bottom - top)
    return Image(np.clip(out, 0.0, 1.0))


def affine_for(params: TransformParams) -> np.ndarray:
    return compose(rotation_matrix(params.angle), shear_matrix(params.shear), scale_matrix(params.scale))


def apply(image: Image, params: TransformParams) -> Image:
    """Flips, then the combined rotate/shear/zoom affine, then brightness."""
    data = image.data
    if params.flip_h:
        data = data[:, ::-1]
    if params.flip_v:
        data = data[::-1]
    out = Image(data) if (params.flip_h or params.flip_v) else image
    out = warp_affine(out, affine_for(params))
    if params.brightness != 1.0:
        out = Image(np.clip(out.data * params.brightness, 0.0, 1.0))
    return out


def augment_batch(dataset: Dataset, indices, spec: AugmentSpec, rng: RngStream) -> list[Image]:
    """One fresh transform per sample; the stream advances with every call."""
    out = []
    for i in indices:
        img = Image(dataset.images[int(i)])
        if spec.is_identity:
            out.append(img)
            continue
        out.append(apply(img, sample_params(spec, rng)))
    return out


def augment_array(images: np.ndarray, spec: AugmentSpec, rng: RngStream) -> np.ndarray:
    """Array form of :func:`augment_batch` used by the training loop."""
    if spec.is_identity:
        return images
    return np.stack([apply(Image(img), sample_params(spec, rng)).data for img in images])
