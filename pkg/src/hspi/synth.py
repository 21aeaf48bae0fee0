"""Fundus-like synthetic images with pixel-level lesion masks.

Each image is a dark background with a bright circular "fundus" disc, a few
curved dark vessels and, for diseased samples, one to ``max_lesions``
elliptical lesion blobs.  The lesion footprint is recorded exactly in the
ground-truth mask.  Images are quantised to 8 bits so that a dataset written
to disk and read back is identical to the in-memory one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

NORMAL, DISEASED = 0, 1

BACKGROUND = np.array([0.04, 0.03, 0.03])
DISC = np.array([0.78, 0.38, 0.18])
VESSEL = np.array([0.45, 0.10, 0.08])
BRIGHT_LESION = np.array([0.98, 0.90, 0.50])
DARK_LESION = np.array([0.30, 0.05, 0.04])


@dataclass
class SynthConfig:
    image_size: int = 64
    n_normal: int = 250
    n_diseased: int = 250
    max_lesions: int = 3
    multi_lesion_prob: float = 0.5
    lesion_radius: tuple[float, float] = (12.0, 18.0)
    disc_radius: tuple[float, float] = (0.42, 0.47)  # fraction of image size
    vessel_count: int = 4
    noise: float = 0.03
    lesion_polarity: str = "bright"  # "bright", "dark" or "mixed"
    seed: int = 0

    def __post_init__(self):
        self.lesion_radius = tuple(float(v) for v in self.lesion_radius)
        self.disc_radius = tuple(float(v) for v in self.disc_radius)
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")
        if self.n_normal < 0 or self.n_diseased < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.max_lesions < 1:
            raise ConfigError("max_lesions must be at least 1")
        lo, hi = self.lesion_radius
        if not 1 <= lo <= hi:
            raise ConfigError(f"lesion radius range {self.lesion_radius} is empty or below 1 px")
        dlo, dhi = self.disc_radius
        if not 0 < dlo <= dhi <= 0.5:
            raise ConfigError(f"disc radius range {self.disc_radius} must lie in (0, 0.5]")
        # the first lesion must always fit, centre at least one radius (+1 px) inside the disc edge
        if hi + 1 > dlo * self.image_size:
            raise ConfigError(
                f"lesion radius {hi} does not fit inside the smallest disc "
                f"(radius {dlo * self.image_size:.1f} px)"
            )
        if self.lesion_polarity not in ("bright", "dark", "mixed"):
            raise ConfigError(f"unknown lesion polarity {self.lesion_polarity!r}")
        if self.noise < 0 or self.vessel_count < 0 or not 0 <= self.multi_lesion_prob <= 1:
            raise ConfigError("noise, vessel_count and multi_lesion_prob must be non-negative (prob <= 1)")


@dataclass
class Lesion:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    bright: bool


@dataclass
class Sample:
    name: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: int
    gt_mask: np.ndarray  # H x W uint8 in {0, 1}
    seed: int = 0
    lesions: list[Lesion] = field(default_factory=list)
    disc: tuple[float, float, float] = (0.0, 0.0, 0.0)  # centre row, centre col, radius


def ellipse_mask(size: int, lesion: Lesion) -> np.ndarray:
    """Pixels whose centre lies inside the (rotated) ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - lesion.cy, xx - lesion.cx
    c, s = np.cos(lesion.angle), np.sin(lesion.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / lesion.rx) ** 2 + (v / lesion.ry) ** 2 <= 1.0).astype(np.uint8)


def _vessel(rng, size, cy, cx, radius, yy, xx):
    """Darkening field for one curved vessel (quadratic Bezier from near the centre outwards)."""
    a0 = rng.uniform(0, 2 * np.pi)
    p0 = np.array([cy, cx]) + rng.uniform(0, 0.25 * radius) * np.array([np.sin(a0), np.cos(a0)])
    a2 = a0 + rng.uniform(-0.6, 0.6)
    p2 = np.array([cy, cx]) + radius * 1.05 * np.array([np.sin(a2), np.cos(a2)])
    mid = (p0 + p2) / 2
    normal = np.array([-(p2 - p0)[1], (p2 - p0)[0]])
    normal /= np.linalg.norm(normal) + 1e-12
    p1 = mid + normal * rng.uniform(-0.3, 0.3) * radius
    t = np.linspace(0, 1, 4 * size)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    width = rng.uniform(0.7, 1.3)
    d2 = np.full(yy.shape, np.inf)
    for py, px in pts:
        d2 = np.minimum(d2, (yy - py) ** 2 + (xx - px) ** 2)
    return np.clip(1.0 - np.sqrt(d2) / width, 0.0, 1.0) * 0.8


def _place_lesions(rng, cfg: SynthConfig, cy, cx, disc_r, count) -> list[Lesion]:
    lesions: list[Lesion] = []
    # k lesions share the area budget of one, so several disjoint blobs fit in the disc
    lo, hi = (v / np.sqrt(count) for v in cfg.lesion_radius)
    for _ in range(count):
        for _attempt in range(200):
            ry, rx = rng.uniform(lo, hi, size=2)
            r = max(ry, rx)
            # keep the centre at least one radius inside the disc edge
            dist = (disc_r - r - 1.0) * np.sqrt(rng.uniform())
            theta = rng.uniform(0, 2 * np.pi)
            ly, lx = cy + dist * np.sin(theta), cx + dist * np.cos(theta)
            if all(np.hypot(ly - o.cy, lx - o.cx) >= r + max(o.ry, o.rx) + 2.0 for o in lesions):
                if cfg.lesion_polarity == "mixed":
                    bright = bool(rng.uniform() < 0.5)
                else:
                    bright = cfg.lesion_polarity == "bright"
                lesions.append(Lesion(ly, lx, ry, rx, rng.uniform(0, np.pi), bright))
                break
    return lesions


def render_sample(
    cfg: SynthConfig, diseased: bool, seed: int, name: str = "", lesions: list[Lesion] | None = None
) -> Sample:
    """Render one sample.  ``lesions`` overrides the random lesion placement of a diseased sample."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    disc_r = rng.uniform(*cfg.disc_radius) * size
    cy = size / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    cx = size / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    rad = np.hypot(yy - cy, xx - cx)
    disc = np.clip(disc_r + 0.5 - rad, 0.0, 1.0)

    tint = 1.0 + rng.uniform(-0.08, 0.08, size=3)
    shade = 1.05 - 0.35 * (rad / disc_r) ** 2
    img = BACKGROUND + disc[..., None] * (DISC * tint * shade[..., None] - BACKGROUND)

    for _ in range(cfg.vessel_count):
        v = _vessel(rng, size, cy, cx, disc_r, yy, xx) * disc
        img = img + v[..., None] * (VESSEL - img)

    gt = np.zeros((size, size), dtype=np.uint8)
    if not diseased:
        lesions = []
    elif lesions is None:
        count = 1
        if cfg.max_lesions > 1 and rng.uniform() < cfg.multi_lesion_prob:
            count = int(rng.integers(2, min(cfg.max_lesions, 3) + 1))
        lesions = _place_lesions(rng, cfg, cy, cx, disc_r, count)
    if diseased:
        for les in lesions:
            m = ellipse_mask(size, les).astype(bool)
            color = BRIGHT_LESION if les.bright else DARK_LESION
            img[m] = 0.15 * img[m] + 0.85 * color
            gt |= m
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Sample(name, img.astype(np.float32), int(diseased), gt, seed, list(lesions), (cy, cx, disc_r))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate(cfg: SynthConfig, prefix: str = "img") -> list[Sample]:
    """Normal samples first, then diseased ones; deterministic for a given config."""
    samples = []
    total = cfg.n_normal + cfg.n_diseased
    for k in range(total):
        diseased = k >= cfg.n_normal
        s = sample_seed(cfg.seed, k)
        samples.append(render_sample(cfg, diseased, s, f"{prefix}{k:04d}"))
    return samples


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(images, labels, gt_masks)`` arrays for a list of samples."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    masks = np.stack([s.gt_mask for s in samples]).astype(np.uint8)
    return images, labels, masks


# --------------------------------------------------------------------------
# on-disk layout: manifest.json + <name>.png (RGB) + <name>_mask.png (0/255)
# --------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def save_dataset(samples: list[Sample], directory, config: SynthConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        Image.fromarray(to_uint8(s.image), mode="RGB").save(directory / f"{s.name}.png")
        write_mask(s.gt_mask, directory / f"{s.name}_mask.png")
        entries.append(
            {
                "name": s.name,
                "image": f"{s.name}.png",
                "mask": f"{s.name}_mask.png",
                "label": "diseased" if s.label == DISEASED else "normal",
                "seed": s.seed,
                "n_lesions": len(s.lesions),
            }
        )
    manifest = {"version": 1, "samples": entries}
    if config is not None:
        manifest["config"] = asdict(config)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = []
    for e in manifest["samples"]:
        label = DISEASED if e["label"] == "diseased" else NORMAL
        out.append(
            Sample(
                e["name"],
                read_image(directory / e["image"]),
                label,
                read_mask(directory / e["mask"]),
                e.get("seed", 0),
            )
        )
    return out
