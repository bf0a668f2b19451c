"""Procedural lesion-image dataset with structured captions.

Each record is driven by three appearance attributes in [0, 1]:
asymmetry, border irregularity, and color variation. Benign draws live in
[0, 0.5], malignant draws in [0.4, 1.0]; the overlap band keeps the
classification task learnable but not separable on a single attribute.

Rendering is a pure function of (params, resolution). Captions are
deterministic template renderings of the bucketed attributes and are
exactly invertible by `encode_caption`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CaptionParseError, ConfigError, DataError
from .rng import Rng, derive_seed

RESOLUTIONS = (16, 32)
LABELS = ("benign", "malignant")
ATTRIBUTE_RANGES = {"benign": (0.0, 0.5), "malignant": (0.4, 1.0)}

# rendering constants
SKIN_RGB = np.array([224.0, 198.0, 170.0])
LESION_RGB = np.array([101.0, 67.0, 48.0])
SPOT_RGB = np.array([62.0, 40.0, 30.0])
BACKGROUND_NOISE_AMPLITUDE = 6.0
COLOR_NOISE_SCALE = 70.0
RADIUS_FRACTION = 0.30          # base lesion radius as a fraction of width
CENTER_SHIFT_FRACTION = 0.15    # asymmetry-driven center displacement
ASYMMETRY_GAIN = 0.5
HARMONICS = (2, 3, 4, 5, 6)
SPOT_COLOR_THRESHOLD = 0.5

# per-record sub-stream tags
_TAG_BACKGROUND = 101
_TAG_BOUNDARY = 102
_TAG_INTERIOR = 103
_TAG_SPOTS = 104
_TAG_DATASET = 110


@dataclass(frozen=True)
class LesionParams:
    """Ground-truth attributes for one rendered lesion."""

    asymmetry: float
    border: float
    color: float
    label: str
    seed: int

    def __post_init__(self):
        for name in ("asymmetry", "border", "color"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.label not in LABELS:
            raise ConfigError(f"label must be one of {LABELS}, got {self.label!r}")


def sample_params(label: str, rng: Rng) -> LesionParams:
    """Draw attributes uniformly from the label's range; record a render seed."""
    if label not in LABELS:
        raise ConfigError(f"label must be one of {LABELS}, got {label!r}")
    lo, hi = ATTRIBUTE_RANGES[label]
    a = lo + (hi - lo) * rng.uniform()
    b = lo + (hi - lo) * rng.uniform()
    c = lo + (hi - lo) * rng.uniform()
    return LesionParams(a, b, c, label, rng.next_u64())


# ---------------------------------------------------------------------------
# rendering


def _value_noise(rng: Rng, height: int, width: int, cells: int) -> np.ndarray:
    """Smooth noise in [-1, 1]: bilinear interpolation of a random lattice."""
    lattice = (rng.uniforms((cells + 1) * (cells + 1)) * 2.0 - 1.0).reshape(cells + 1, cells + 1)
    ys = (np.arange(height) + 0.5) / height * cells
    xs = (np.arange(width) + 0.5) / width * cells
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v00 = lattice[np.ix_(y0, x0)]
    v01 = lattice[np.ix_(y0, x0 + 1)]
    v10 = lattice[np.ix_(y0 + 1, x0)]
    v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def _boundary_coefficients(params: LesionParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Seeded boundary shape: (asymmetry angle, harmonic weights, harmonic phases).

    Draw order is fixed: phi_a, then (w_k, phi_k) per harmonic.
    """
    rng = Rng(derive_seed(params.seed, _TAG_BOUNDARY))
    phi_a = 2.0 * math.pi * rng.uniform()
    w = np.empty(len(HARMONICS))
    phi = np.empty(len(HARMONICS))
    for i in range(len(HARMONICS)):
        w[i] = rng.uniform() * 2.0 - 1.0
        phi[i] = 2.0 * math.pi * rng.uniform()
    return phi_a, w, phi


def boundary_radius(params: LesionParams, theta: np.ndarray, width: int) -> np.ndarray:
    """Lesion boundary in polar form about the lesion center.

    r(theta) = R0 * (1 + 0.5*a*cos(theta - phi_a))
                  * (1 + b * sum_k (w_k / k) * sin(k*theta + phi_k))
    """
    phi_a, w, phi = _boundary_coefficients(params)
    r0 = RADIUS_FRACTION * width
    asym = 1.0 + ASYMMETRY_GAIN * params.asymmetry * np.cos(theta - phi_a)
    wiggle = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for k, wk, pk in zip(HARMONICS, w, phi):
        wiggle = wiggle + (wk / k) * np.sin(k * np.asarray(theta) + pk)
    return r0 * asym * (1.0 + params.border * wiggle)


def lesion_center(params: LesionParams, width: int, height: int) -> tuple[float, float]:
    """Center displaced from the image center by 0.15*a*width along phi_a."""
    phi_a, _, _ = _boundary_coefficients(params)
    shift = CENTER_SHIFT_FRACTION * params.asymmetry * width
    return (width / 2.0 + shift * math.cos(phi_a), height / 2.0 + shift * math.sin(phi_a))


def render_lesion(params: LesionParams, resolution: int) -> np.ndarray:
    """Render one lesion image; returns uint8 array of shape (res, res, 3)."""
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    w = h = resolution

    bg_noise = _value_noise(Rng(derive_seed(params.seed, _TAG_BACKGROUND)), h, w, cells=4)
    img = SKIN_RGB[None, None, :] + BACKGROUND_NOISE_AMPLITUDE * bg_noise[:, :, None]

    cx, cy = lesion_center(params, w, h)
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    inside = rho <= boundary_radius(params, theta, w)

    interior_rng = Rng(derive_seed(params.seed, _TAG_INTERIOR))
    tint = np.stack([_value_noise(interior_rng, h, w, cells=8) for _ in range(3)], axis=-1)
    interior = LESION_RGB[None, None, :] + COLOR_NOISE_SCALE * params.color * tint
    img = np.where(inside[:, :, None], interior, img)

    if params.color > SPOT_COLOR_THRESHOLD:
        spot_rng = Rng(derive_seed(params.seed, _TAG_SPOTS))
        r0 = RADIUS_FRACTION * w
        for _ in range(2):
            ang = 2.0 * math.pi * spot_rng.uniform()
            dist = 0.5 * r0 * spot_rng.uniform()
            radius = (0.06 + 0.04 * spot_rng.uniform()) * w
            sx = cx + dist * math.cos(ang)
            sy = cy + dist * math.sin(ang)
            spot = (np.hypot(xs[None, :] - sx, ys[:, None] - sy) <= radius) & inside
            img = np.where(spot[:, :, None], SPOT_RGB[None, None, :], img)

    return np.rint(np.clip(img, 0.0, 255.0)).astype(np.uint8)


# ---------------------------------------------------------------------------
# captions and condition vectors

LEVELS = ("low", "medium", "high")

ASYMMETRY_SENTENCES = {
    "low": "The mole is largely symmetrical, with both halves appearing similar.",
    "medium": "The mole shows moderate asymmetry, with one half somewhat larger than the other.",
    "high": "The mole exhibits a notable degree of asymmetry, with one half significantly larger than the other.",
}
BORDER_SENTENCES = {
    "low": "The border is smooth and well defined around the whole lesion.",
    "medium": "The border is relatively smooth, with a few areas of slight irregularity and small notches.",
    "high": "The border is irregular and jagged, with a rough, uneven texture.",
}
COLOR_SENTENCES = {
    "low": "The color is a uniform brown with little variation.",
    "medium": "The color is primarily brown, with some lighter and darker shades throughout.",
    "high": "The coloration is irregular, featuring a mix of dark brown and black patches scattered throughout the lesion.",
}
CLOSING_SENTENCES = {
    "benign": "Overall, the lesion appears benign.",
    "malignant": "Overall, the appearance suggests a potential malignancy.",
}

CONDITION_DIM = 10  # three level one-hots plus one label bit


@dataclass(frozen=True)
class CaptionRecord:
    text: str
    levels: tuple[str, str, str]  # (asymmetry, border, color)
    label: str


def bucket(value: float) -> str:
    """Half-open buckets: low [0, 1/3), medium [1/3, 2/3), high [2/3, 1]."""
    if value < 1.0 / 3.0:
        return "low"
    if value < 2.0 / 3.0:
        return "medium"
    return "high"


def caption(params: LesionParams) -> CaptionRecord:
    """Deterministic caption text for the params' attribute buckets."""
    levels = (bucket(params.asymmetry), bucket(params.border), bucket(params.color))
    text = " ".join(
        [
            ASYMMETRY_SENTENCES[levels[0]],
            BORDER_SENTENCES[levels[1]],
            COLOR_SENTENCES[levels[2]],
            CLOSING_SENTENCES[params.label],
        ]
    )
    return CaptionRecord(text, levels, params.label)


def generation_prompt(label: str) -> str:
    """The label-only prompt used for image generation."""
    if label not in LABELS:
        raise ConfigError(f"label must be one of {LABELS}, got {label!r}")
    return f"This is an image containing a {label} lesion."


def condition_vector(levels: tuple[str, str, str], label: str) -> np.ndarray:
    """One-hot condition vector: 3 level triples + 1 label bit."""
    vec = np.zeros(CONDITION_DIM)
    for i, level in enumerate(levels):
        vec[3 * i + LEVELS.index(level)] = 1.0
    vec[9] = 1.0 if label == "malignant" else 0.0
    return vec


def encode_caption(text: str) -> np.ndarray:
    """Parse caption text back into its condition vector.

    Accepts either the full four-sentence template rendering or the
    label-only generation prompt; the latter gets medium levels for every
    attribute by convention.
    """
    stripped = text.strip()
    for label in LABELS:
        if stripped == generation_prompt(label):
            return condition_vector(("medium", "medium", "medium"), label)

    remaining = stripped
    levels = []
    for bank in (ASYMMETRY_SENTENCES, BORDER_SENTENCES, COLOR_SENTENCES):
        matched = None
        for level in LEVELS:
            sentence = bank[level]
            if remaining.startswith(sentence):
                matched = level
                remaining = remaining[len(sentence):].lstrip()
                break
        if matched is None:
            frag = remaining.split(".")[0] + "." if remaining else "<empty>"
            raise CaptionParseError(f"unrecognized caption sentence: {frag!r}", sentence=frag)
        levels.append(matched)

    for label in LABELS:
        if remaining == CLOSING_SENTENCES[label]:
            return condition_vector(tuple(levels), label)
    frag = remaining if remaining else "<empty>"
    raise CaptionParseError(f"unrecognized closing sentence: {frag!r}", sentence=frag)


# ---------------------------------------------------------------------------
# image files


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ConfigError(f"write_ppm needs (h, w, 3) uint8, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM file")
    parts = blob.split(b"\n", 3)
    if len(parts) < 4:
        raise DataError(f"{path}: truncated PPM header")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise DataError(f"{path}: unsupported maxval {parts[2]!r}")
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetConfig:
    n_per_class: int = 100
    resolutions: tuple[int, ...] = (16,)
    test_fraction: float = 0.2
    seed: int = 1

    def validate(self) -> None:
        if self.n_per_class < 2:
            raise ConfigError(f"n_per_class must be >= 2, got {self.n_per_class}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if not self.resolutions:
            raise ConfigError("at least one resolution is required")
        for r in self.resolutions:
            if r not in RESOLUTIONS:
                raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {r}")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    resolution: int
    label: str
    a: float
    b: float
    c: float
    caption: str
    split: str


class Manifest:
    """Ordered dataset records plus the directory their paths are relative to."""

    def __init__(self, records: list[ManifestRecord], root: Path):
        self.records = records
        self.root = Path(root)

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r.__dict__) + "\n")

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(ManifestRecord(**json.loads(line)))
        return cls(records, path.parent)

    def select(self, split: str | None = None, resolution: int | None = None,
               label: str | None = None) -> list[ManifestRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if resolution is not None:
            out = [r for r in out if r.resolution == resolution]
        if label is not None:
            out = [r for r in out if r.label == label]
        return out

    def subset(self, records: list[ManifestRecord]) -> "Manifest":
        return Manifest(list(records), self.root)

    def load_image(self, record: ManifestRecord) -> np.ndarray:
        return read_ppm(self.root / record.image_path)

    def check(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")
        for r in self.records:
            if not (self.root / r.image_path).exists():
                raise DataError(f"missing image file: {r.image_path}")
        train = {r.id for r in self.records if r.split == "train"}
        test = {r.id for r in self.records if r.split == "test"}
        if train & test:
            raise DataError("train/test splits overlap")


def build_dataset(config: DatasetConfig, out_dir: Path) -> Manifest:
    """Render the full dataset to `out_dir` and write its manifest.

    A pure function of the config: repeated runs produce byte-identical
    images and manifest. `out_dir` is created, but its parent must exist.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    images_dir = out / "images"
    images_dir.mkdir(exist_ok=True)

    master = Rng(derive_seed(config.seed, _TAG_DATASET))
    records: list[ManifestRecord] = []
    n = config.n_per_class
    n_test = int(round(n * config.test_fraction))
    for resolution in config.resolutions:
        for label in LABELS:
            params_list = [sample_params(label, master) for _ in range(n)]
            perm = master.permutation(n)
            test_idx = set(int(i) for i in perm[:n_test])
            for i, params in enumerate(params_list):
                rec_id = f"{label}-{resolution}-{i:05d}"
                rel_path = f"images/{rec_id}.ppm"
                write_ppm(out / rel_path, render_lesion(params, resolution))
                records.append(
                    ManifestRecord(
                        id=rec_id,
                        image_path=rel_path,
                        resolution=resolution,
                        label=label,
                        a=params.asymmetry,
                        b=params.border,
                        c=params.color,
                        caption=caption(params).text,
                        split="test" if i in test_idx else "train",
                    )
                )

    manifest = Manifest(records, out)
    manifest.save(out / "manifest.jsonl")
    return manifest
