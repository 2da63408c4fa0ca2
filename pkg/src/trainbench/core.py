"""Images, datasets, deterministic random streams and the synthetic data generator."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MASK64 = (1 << 64) - 1

SHAPES = ("rectangle", "circle", "triangle", "ring", "stripes")


class DatasetError(ValueError):
    """Raised for unreadable or inconsistent dataset trees and image files."""


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_hash(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")


class RngStream:
    """A named random stream derived from a master seed.

    Two streams with the same ``(master_seed, stream_key)`` produce the same
    values on every platform. Child streams are derived by extending the key,
    so parallel work never shares a generator.
    """

    def __init__(self, master_seed: int, stream_key: str):
        self.master_seed = int(master_seed) & MASK64
        self.stream_key = stream_key
        s0 = splitmix64(self.master_seed ^ splitmix64(_key_hash(stream_key)))
        s1 = splitmix64(s0)
        self.generator = np.random.Generator(np.random.PCG64([s0, s1]))

    def child(self, key: str) -> "RngStream":
        return RngStream(self.master_seed, f"{self.stream_key}/{key}")

    def provenance(self) -> dict:
        return {"master_seed": self.master_seed, "stream_key": self.stream_key}

    # thin pass-throughs so callers never reach into the generator directly
    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream({self.master_seed}, {self.stream_key!r})"


def derive_rng(master_seed: int, stream_key: str) -> RngStream:
    return RngStream(master_seed, stream_key)


@dataclass(frozen=True)
class Image:
    """A height x width x channels image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0 or not np.isfinite(data).all()):
            raise ValueError("image values must lie in [0, 1]")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabeledSample:
    image: Image
    label: int


class Dataset:
    """An ordered, immutable collection of labelled images of uniform shape.

    Images are stored stacked as an ``(N, H, W, C)`` float64 array.
    """

    def __init__(self, images: np.ndarray, labels: Sequence[int], class_names: Sequence[str]):
        images = np.ascontiguousarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        class_names = tuple(class_names)
        if not class_names:
            raise DatasetError("zero classes")
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise DatasetError(f"images {images.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
            raise DatasetError("label out of range of class_names")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.class_names = class_names

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(Image(self.images[i]), int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_counts(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.n_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_names)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.class_names).encode())
        h.update(self.labels.tobytes())
        h.update(self.images.tobytes())
        return h.hexdigest()[:16]


# -- PPM / PGM -----------------------------------------------------------------


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] reals to bytes with round-half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def save_ppm(image: Image, path) -> None:
    """Write ``image`` as binary P6 (3 channels) or P5 (1 channel), maxval 255."""
    magic = b"P6" if image.channels == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (image.width, image.height)
    payload = quantize(image.data).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header + payload)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def _header_tokens(buf: bytes, path) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DatasetError(f"malformed PPM header: {path}")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise DatasetError(f"malformed PPM header: {path}")
    return tokens, pos + 1


def load_ppm(path) -> Image:
    """Read a binary P6 or P5 file into an Image scaled to [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    tokens, offset = _header_tokens(buf, path)
    magic = tokens[0]
    if magic not in (b"P6", b"P5"):
        raise DatasetError(f"malformed PPM header (magic {magic!r}): {path}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"malformed PPM header: {path}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise DatasetError(f"malformed PPM header (size/maxval): {path}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise DatasetError(f"truncated raster: {path}")
    data = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return Image(data.astype(np.float64) / maxval)


def load_dataset(root_dir) -> Dataset:
    """Load ``root/<class>/<file>.ppm|.pgm`` into a Dataset.

    Classes are sorted lexicographically and samples by (class, filename).
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"missing directory: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"zero classes: {root}")
    images, labels, shape, first = [], [], None, None
    for label, name in enumerate(classes):
        files = sorted(
            f for f in (root / name).iterdir()
            if f.is_file() and f.suffix.lower() in (".ppm", ".pgm")
        )
        for f in files:
            img = load_ppm(f)
            if shape is None:
                shape, first = img.data.shape, f
            elif img.data.shape != shape:
                raise DatasetError(f"mixed dimensions: {f} is {img.data.shape}, {first} is {shape}")
            images.append(img.data)
            labels.append(label)
    if not images:
        raise DatasetError(f"no images found under {root}")
    return Dataset(np.stack(images), labels, classes)


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the desk-scale stand-in dataset.

    Each class is one shape drawn in one base hue. The pose fields add
    per-sample variation; all default to zero so a noiseless render is
    identical within a class.
    """

    classes: int = 5
    per_class: int = 50
    side: int = 32
    noise: float = 0.05
    hue_jitter: float = 0.0  # degrees
    rotation: float = 0.0  # degrees, per-sample pose drawn from [-r, r]
    shear: float = 0.0  # degrees
    scale_jitter: float = 0.0
    shift: float = 0.0  # fraction of half-width
    hflip_prob: float = 0.0
    hue_offset: float = 0.0  # degrees; a different offset gives a different task
    shape_shift: int = 0  # rotates the class -> shape assignment

    def __post_init__(self):
        if not 1 <= self.classes <= len(SHAPES):
            raise ValueError(f"classes must be in [1, {len(SHAPES)}]")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.side < 16:
            raise ValueError("side must be >= 16")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _hsv_to_rgb(h_deg: float, s: float, v: float) -> np.ndarray:
    h = (h_deg % 360.0) / 60.0
    c = v * s
    x = c * (1 - abs(h % 2 - 1))
    sector = int(h) % 6
    rgb = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector]
    return np.array(rgb) + (v - c)


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "rectangle":
        return (np.abs(u) <= 0.7) & (np.abs(v) <= 0.4)
    if shape == "circle":
        return u * u + v * v <= 0.6 ** 2
    if shape == "triangle":
        # apex at the top (v = -0.65), base at v = 0.55
        return (v >= -0.65) & (v <= 0.55) & (np.abs(u) <= (v + 0.65) * 0.6)
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 >= 0.35 ** 2) & (r2 <= 0.68 ** 2)
    if shape == "stripes":
        inside = (np.abs(u) <= 0.7) & (np.abs(v) <= 0.7)
        return inside & (np.floor((v + 0.7) / 0.28).astype(int) % 2 == 0)
    raise ValueError(shape)


def class_names_for(spec: SyntheticSpec) -> list[str]:
    return [f"c{c}_{SHAPES[(c + spec.shape_shift) % len(SHAPES)]}" for c in range(spec.classes)]


BACKGROUND = 0.15


def render(shape: str, hue: float, side: int, angle=0.0, shear=0.0, scale=1.0, dx=0.0, dy=0.0,
           flip=False) -> np.ndarray:
    """Noiseless render of one shape on a flat grey background."""
    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    if flip:
        x = -x
    x = x - dx
    y = y - dy
    # invert rotation, then shear, then scale (the pose is scale -> shear -> rotate)
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    u = c * x + s * y
    v = -s * x + c * y
    u = u - math.tan(math.radians(shear)) * v
    u, v = u / scale, v / scale
    mask = _shape_mask(shape, u, v)
    color = _hsv_to_rgb(hue, 0.8, 0.9)
    img = np.full((side, side, 3), BACKGROUND)
    img[mask] = color
    return img


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> Dataset:
    """Render ``spec.per_class`` images for each of ``spec.classes`` shape/hue classes."""
    names = class_names_for(spec)
    images = np.empty((spec.classes * spec.per_class, spec.side, spec.side, 3))
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    k = 0
    for c in range(spec.classes):
        shape = SHAPES[(c + spec.shape_shift) % len(SHAPES)]
        base_hue = spec.hue_offset + 360.0 * c / spec.classes
        for _ in range(spec.per_class):
            # fixed draw order keeps streams aligned whatever the ranges are
            u = rng.uniform(-1.0, 1.0, size=7)
            img = render(
                shape,
                base_hue + spec.hue_jitter * u[0],
                spec.side,
                angle=spec.rotation * u[1],
                shear=spec.shear * u[2],
                scale=1.0 + spec.scale_jitter * u[3],
                dx=spec.shift * u[4],
                dy=spec.shift * u[5],
                flip=bool((u[6] + 1.0) / 2.0 < spec.hflip_prob),
            )
            noise = rng.normal(0.0, 1.0, size=img.shape) * spec.noise
            images[k] = np.clip(img + noise, 0.0, 1.0)
            k += 1
    return Dataset(images, labels, names)


def save_dataset(dataset: Dataset, root, spec: SyntheticSpec | None = None, seed: int | None = None) -> Path:
    """Write a dataset tree plus ``manifest.json`` describing it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files: dict[str, list[str]] = {name: [] for name in dataset.class_names}
    counters = {name: 0 for name in dataset.class_names}
    for sample in dataset:
        name = dataset.class_names[sample.label]
        ext = ".ppm" if sample.image.channels == 3 else ".pgm"
        fname = f"{counters[name]:05d}{ext}"
        counters[name] += 1
        (root / name).mkdir(exist_ok=True)
        save_ppm(sample.image, root / name / fname)
        files[name].append(fname)
    manifest = {
        "spec": spec.to_dict() if spec is not None else None,
        "seed": seed,
        "class_names": list(dataset.class_names),
        "files": files,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


def default_output_dir() -> str:
    return os.environ.get("TRAINBENCH_OUT", "trainbench_out")
