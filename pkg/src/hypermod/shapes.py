"""Procedural captioned-shape dataset.

Renders 32x32 RGB images of a single colored shape on a plain background,
with exact attribute labels and template captions drawn from a small closed
vocabulary. Rendering is a pure function of the scene description, so the
same description always yields the bit-identical image.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "white")
SIZES = ("small", "large")
BACKGROUNDS = ("dark", "light")

IMAGE_SIZE = 32
SUPERSAMPLE = 4
JITTER_LIMIT = 0.15

FILL_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.78, 0.16),
    "blue": (0.15, 0.22, 0.85),
    "yellow": (0.92, 0.86, 0.12),
    "white": (0.95, 0.95, 0.95),
}
BACKGROUND_RGB = {
    "dark": (0.06, 0.06, 0.09),
    "light": (0.84, 0.84, 0.87),
}
# Circumscribed-circle radius as a fraction of image width. Largest extent is
# the cross corner at ~1.05*r, so 0.5 + JITTER_LIMIT + 1.05*0.28 < 1 keeps
# every shape fully on canvas.
SIZE_RADIUS = {"small": 0.16, "large": 0.28}

CAPTION_TEMPLATES = {
    "full": "a {size} {color} {shape} on {background} background",
    "shape": "a {shape}",
    "color_shape": "a {color} {shape}",
    "size_shape": "a {size} {shape}",
    "background_shape": "a {shape} on {background} background",
}
# Attributes each template names, used for round-trip parsing checks.
TEMPLATE_FIELDS = {
    "full": ("shape", "color", "size", "background"),
    "shape": ("shape",),
    "color_shape": ("shape", "color"),
    "size_shape": ("shape", "size"),
    "background_shape": ("shape", "background"),
}

VOCABULARY = tuple(sorted({"a", "on", "background"} | set(SHAPES) | set(COLORS) | set(SIZES) | set(BACKGROUNDS)))
_VOCAB_SET = frozenset(VOCABULARY)


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of one renderable scene."""

    shape: str
    color: str
    size: str
    background: str
    jitter: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        jx, jy = self.jitter
        if abs(jx) > JITTER_LIMIT or abs(jy) > JITTER_LIMIT:
            raise ValueError(f"jitter {self.jitter} exceeds +/-{JITTER_LIMIT}")
        if not 0.0 <= self.rotation < 360.0:
            raise ValueError(f"rotation {self.rotation} outside [0, 360)")


@dataclass
class CaptionedSample:
    """A rendered image, its caption, and the exact generating labels."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    caption: str
    labels: SceneSpec


def _coverage(spec: SceneSpec, size: int) -> np.ndarray:
    """Fractional shape coverage per pixel via supersampled inside tests."""
    n = size * SUPERSAMPLE
    # Sample-point coordinates in units of image width, origin top-left.
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    x = coords[None, :]
    y = coords[:, None]

    cx = 0.5 + spec.jitter[0]
    cy = 0.5 + spec.jitter[1]
    dx = x - cx
    dy = y - cy

    # Rotate world offsets into the shape's local frame.
    t = math.radians(spec.rotation)
    u = math.cos(t) * dx + math.sin(t) * dy
    v = -math.sin(t) * dx + math.cos(t) * dy

    r = SIZE_RADIUS[spec.size]
    if spec.shape == "circle":
        inside = u * u + v * v <= r * r
    elif spec.shape == "square":
        half = r / math.sqrt(2.0)
        inside = (np.abs(u) <= half) & (np.abs(v) <= half)
    elif spec.shape == "triangle":
        # Equilateral triangle with circumradius r, one vertex pointing up.
        verts = [(r * math.cos(a), r * math.sin(a)) for a in (math.radians(d) for d in (-90, 30, 150))]
        inside = np.ones_like(u, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    elif spec.shape == "cross":
        arm = 0.3 * r
        inside = ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    else:  # pragma: no cover - blocked by SceneSpec validation
        raise ValueError(spec.shape)

    frac = inside.astype(np.float64).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return frac


def render(spec: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render a scene to an (size, size, 3) float32 array in [0, 1]."""
    alpha = _coverage(spec, size)[:, :, None]
    fill = np.asarray(FILL_RGB[spec.color], dtype=np.float64)
    bg = np.asarray(BACKGROUND_RGB[spec.background], dtype=np.float64)
    img = bg[None, None, :] * (1.0 - alpha) + fill[None, None, :] * alpha
    return img.astype(np.float32)


def caption(spec: SceneSpec, template: str = "full") -> str:
    """Fill a caption template from the scene's attributes.

    Templates other than ``full`` omit attributes, which is how prompt pairs
    such as ("a circle", "a red circle") are produced.
    """
    if template not in CAPTION_TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {sorted(CAPTION_TEMPLATES)}")
    return CAPTION_TEMPLATES[template].format(
        shape=spec.shape, color=spec.color, size=spec.size, background=spec.background
    )


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization; every token must be in the closed vocabulary."""
    from .errors import VocabularyError

    tokens = text.split()
    for tok in tokens:
        if tok not in _VOCAB_SET:
            raise VocabularyError(tok)
    return tokens


def parse_caption(text: str) -> dict[str, str]:
    """Recover the attribute values named in a caption."""
    found: dict[str, str] = {}
    for tok in tokenize(text):
        for field, values in (("shape", SHAPES), ("color", COLORS), ("size", SIZES), ("background", BACKGROUNDS)):
            if tok in values:
                found[field] = tok
    return found


def generate_dataset(n: int, seed: int, template: str = "full") -> list[CaptionedSample]:
    """Draw n scenes with uniformly sampled attributes and render them.

    All random draws happen up front from one seeded generator, so the sample
    order is fixed by the seed no matter how the renders are scheduled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = rng.choice(SHAPES, size=n)
    colors = rng.choice(COLORS, size=n)
    sizes = rng.choice(SIZES, size=n)
    backgrounds = rng.choice(BACKGROUNDS, size=n)
    jitters = rng.uniform(-JITTER_LIMIT, JITTER_LIMIT, size=(n, 2))
    rotations = rng.uniform(0.0, 360.0, size=n)

    samples = []
    for i in range(n):
        spec = SceneSpec(
            shape=str(shapes[i]),
            color=str(colors[i]),
            size=str(sizes[i]),
            background=str(backgrounds[i]),
            jitter=(float(jitters[i, 0]), float(jitters[i, 1])),
            rotation=float(rotations[i]),
        )
        samples.append(CaptionedSample(image=render(spec), caption=caption(spec, template), labels=spec))
    return samples


MANIFEST_COLUMNS = ("index", "caption", "shape", "color", "size", "background")


def save_dataset(samples: list[CaptionedSample], out_dir: str | Path) -> None:
    """Persist samples as images/%06d.png plus manifest.csv."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for i, s in enumerate(samples):
            arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(out / "images" / f"{i:06d}.png")
            writer.writerow([i, s.caption, s.labels.shape, s.labels.color, s.labels.size, s.labels.background])


def load_dataset(data_dir: str | Path) -> list[CaptionedSample]:
    """Load a persisted dataset.

    Images come back 8-bit quantized. The manifest stores only the categorical
    attributes, so jitter and rotation on the loaded labels default to zero.
    """
    root = Path(data_dir)
    samples = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = np.asarray(Image.open(root / "images" / f"{int(row['index']):06d}.png"), dtype=np.float32) / 255.0
            spec = SceneSpec(shape=row["shape"], color=row["color"], size=row["size"], background=row["background"])
            samples.append(CaptionedSample(image=img, caption=row["caption"], labels=spec))
    return samples
