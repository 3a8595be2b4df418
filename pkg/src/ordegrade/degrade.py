"""First-order degradation synthesis: blur -> downsample -> noise -> JPEG.

Images are HxWx3 uint8 arrays.  Every stage is a pure function of its inputs;
the only randomness (additive noise) comes from an explicit generator.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import (
    EmptyCorpusError,
    ImageTooSmallError,
    InvalidQualityError,
    InvalidRecipeError,
    IOFailure,
)

MANIFEST_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DegradationType(str, enum.Enum):
    """The four degradation families, declared in pipeline order."""

    BLUR = "Blur"
    DOWNSAMPLE = "Downsample"
    NOISY = "Noisy"
    JPEG = "JPEG"

    @property
    def order(self) -> int:
        return TYPES.index(self)

    def __lt__(self, other):
        if not isinstance(other, DegradationType):
            return NotImplemented
        return self.order < other.order


TYPES: tuple[DegradationType, ...] = tuple(DegradationType)


@dataclass(frozen=True)
class LevelRange:
    type: DegradationType
    min: float
    max: float
    severity_increasing: bool = True
    # parameter value at which the stage is a no-op (None: no such value)
    identity: float | None = None

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError("LevelRange requires min < max")

    def normalize(self, level: float) -> float:
        """Map a raw level to [0, 1] severity, 0 = mild."""
        u = (level - self.min) / (self.max - self.min)
        return u if self.severity_increasing else 1.0 - u

    def denormalize(self, level_norm: float) -> float:
        u = level_norm if self.severity_increasing else 1.0 - level_norm
        return self.min + u * (self.max - self.min)

    def contains(self, level: float, tol: float = 1e-9) -> bool:
        return self.min - tol <= level <= self.max + tol

    def admissible(self, level: float) -> bool:
        """In range, or equal to / between the identity value and the range."""
        if self.contains(level):
            return True
        if self.identity is None:
            return False
        lo, hi = sorted((self.identity, self.min if self.severity_increasing else self.max))
        return lo <= level <= hi


LEVEL_RANGES: dict[DegradationType, LevelRange] = {
    DegradationType.BLUR: LevelRange(DegradationType.BLUR, 0.1, 4.0, True, identity=0.0),
    DegradationType.DOWNSAMPLE: LevelRange(DegradationType.DOWNSAMPLE, 1.1, 7.0, True, identity=1.0),
    DegradationType.NOISY: LevelRange(DegradationType.NOISY, 1.0, 40.0, True, identity=0.0),
    DegradationType.JPEG: LevelRange(DegradationType.JPEG, 30.0, 95.0, False),
}


def as_type(t) -> DegradationType:
    if isinstance(t, DegradationType):
        return t
    try:
        return DegradationType(t)
    except ValueError:
        for member in DegradationType:
            if member.name == str(t).upper():
                return member
        raise


@dataclass(frozen=True)
class DegradationRecipe:
    """Per-type levels for one image plus the seed driving its noise draw."""

    entries: Mapping[DegradationType, float]
    seed: int = 0

    def __post_init__(self):
        entries = {as_type(k): float(v) for k, v in dict(self.entries).items()}
        if not entries:
            raise InvalidRecipeError("a recipe needs at least one degradation entry")
        for t, level in entries.items():
            if not math.isfinite(level) or not LEVEL_RANGES[t].admissible(level):
                raise InvalidRecipeError(f"{t.value} level {level} outside its range")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidRecipeError("recipe seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "entries", dict(sorted(entries.items())))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def types(self) -> tuple[DegradationType, ...]:
        return tuple(self.entries)

    def to_json(self) -> dict:
        return {"entries": {t.value: v for t, v in self.entries.items()}, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DegradationRecipe":
        return cls(entries=obj["entries"], seed=obj.get("seed", 0))


def _check_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype != np.uint8 or a.ndim != 3 or a.shape[2] != 3:
        raise TypeError("expected an HxWx3 uint8 image")
    return a


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_blur(img, sigma: float) -> np.ndarray:
    """Isotropic Gaussian blur, radius ceil(3 sigma), reflect-padded."""
    img = _check_image(img)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    if min(img.shape[:2]) < k.size:
        raise ImageTooSmallError(f"image {img.shape[:2]} smaller than blur kernel {k.size}")
    x = img.astype(np.float64)
    x = correlate1d(x, k, axis=0, mode="reflect")
    x = correlate1d(x, k, axis=1, mode="reflect")
    return _to_uint8(x)


def apply_downsample(img, scale: float) -> np.ndarray:
    """Bicubic downscale by ``scale`` then bicubic upscale back to the input size."""
    img = _check_image(img)
    if scale < 1.0:
        raise ValueError("scale must be >= 1")
    h, w = img.shape[:2]
    small = (int(math.floor(w / scale)), int(math.floor(h / scale)))
    if min(small) < 8:
        raise ImageTooSmallError(f"downsampling {img.shape[:2]} by {scale} leaves < 8 px")
    if small == (w, h):
        return img.copy()
    pil = Image.fromarray(img)
    down = pil.resize(small, Image.Resampling.BICUBIC)
    return np.asarray(down.resize((w, h), Image.Resampling.BICUBIC)).copy()


def apply_noise(img, level: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise with std ``level`` on the 8-bit scale."""
    img = _check_image(img)
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return img.copy()
    noise = rng.normal(0.0, level, size=img.shape)
    return _to_uint8(img.astype(np.float64) + noise)


def jpeg_bytes(img, quality: int) -> bytes:
    img = _check_image(img)
    q = int(quality)
    if q != quality or not 1 <= q <= 100:
        raise InvalidQualityError(f"JPEG quality must be an integer in [1, 100], got {quality}")
    buf = io.BytesIO()
    # subsampling=2 is 4:2:0; Pillow scales the Annex K tables by quality
    Image.fromarray(img).save(buf, format="JPEG", quality=q, subsampling=2, optimize=False)
    return buf.getvalue()


def apply_jpeg(img, quality: int) -> np.ndarray:
    """Baseline JPEG encode (4:2:0, standard tables) followed by decode."""
    data = jpeg_bytes(img, quality)
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB")).copy()


def synthesize(img, recipe: DegradationRecipe) -> np.ndarray:
    """Apply the recipe's stages in canonical order, skipping absent ones."""
    out = _check_image(img).copy()
    rng = np.random.default_rng(recipe.seed)
    e = recipe.entries
    if DegradationType.BLUR in e:
        out = apply_blur(out, e[DegradationType.BLUR])
    if DegradationType.DOWNSAMPLE in e:
        out = apply_downsample(out, e[DegradationType.DOWNSAMPLE])
    if DegradationType.NOISY in e:
        out = apply_noise(out, e[DegradationType.NOISY], rng)
    if DegradationType.JPEG in e:
        out = apply_jpeg(out, int(round(e[DegradationType.JPEG])))
    return out


# ----------------------------------------------------------------------------
# image IO and manifests


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).copy()
    except OSError as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc


def save_png(path, img) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_check_image(img)).save(path, format="PNG")
    except OSError as exc:
        raise IOFailure(f"cannot write image {path}: {exc}") from exc


@dataclass
class ManifestRecord:
    lq_path: str
    gt_path: str
    recipe: DegradationRecipe | None
    conf_gt: dict[str, int]
    level_gt: dict[str, float]

    def __post_init__(self):
        active = set(self.recipe.entries) if self.recipe is not None else set()
        for t in TYPES:
            expected = int(t in active)
            if int(self.conf_gt.get(t.value, -1)) != expected:
                raise InvalidRecipeError(f"conf_gt[{t.value}] inconsistent with recipe")
            if (t.value in self.level_gt) != bool(expected):
                raise InvalidRecipeError(f"level_gt[{t.value}] inconsistent with conf_gt")

    @classmethod
    def from_recipe(cls, lq_path: str, gt_path: str, recipe: DegradationRecipe | None) -> "ManifestRecord":
        entries = recipe.entries if recipe is not None else {}
        return cls(
            lq_path=lq_path,
            gt_path=gt_path,
            recipe=recipe,
            conf_gt={t.value: int(t in entries) for t in TYPES},
            level_gt={t.value: float(v) for t, v in entries.items()},
        )

    def active(self) -> tuple[DegradationType, ...]:
        return tuple(t for t in TYPES if self.conf_gt[t.value])

    def to_json(self) -> dict:
        return {
            "lq_path": self.lq_path,
            "gt_path": self.gt_path,
            "recipe": self.recipe.to_json() if self.recipe is not None else None,
            "conf_gt": dict(self.conf_gt),
            "level_gt": dict(self.level_gt),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ManifestRecord":
        recipe = obj.get("recipe")
        return cls(
            lq_path=obj["lq_path"],
            gt_path=obj["gt_path"],
            recipe=DegradationRecipe.from_json(recipe) if recipe is not None else None,
            conf_gt={k: int(v) for k, v in obj["conf_gt"].items()},
            level_gt={k: float(v) for k, v in obj["level_gt"].items()},
        )


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    format_version: int = MANIFEST_FORMAT_VERSION
    root: Path = Path(".")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.format_version, self.root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [json.dumps({"format_version": manifest.format_version}, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidRecipeError(f"manifest {path} has no header line")
    header = json.loads(lines[0])
    version = header.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise InvalidRecipeError(f"unsupported manifest format_version {version!r}")
    records = [ManifestRecord.from_json(json.loads(ln)) for ln in lines[1:]]
    return DatasetManifest(records, version, path.parent)


# ----------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetConfig:
    """How to cut and degrade patches.

    ``level_grid`` maps a type name to the discrete levels sampled for it; types
    without a grid draw uniformly from their range (JPEG rounded to an integer).
    ``clean_ratio`` emits undegraded patches with an all-zero conf_gt.
    """

    count: int
    seed: int = 0
    patch_size: int = 224
    mixture_ratio: float = 0.5
    level_grid: dict[str, list[float]] | None = None
    clean_ratio: float = 0.0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.patch_size < 64:
            raise ValueError("patch_size must be >= 64")
        if not 0.0 <= self.mixture_ratio <= 1.0:
            raise ValueError("mixture_ratio must lie in [0, 1]")
        if not 0.0 <= self.clean_ratio < 1.0:
            raise ValueError("clean_ratio must lie in [0, 1)")
        if self.level_grid:
            grid = {}
            for name, levels in self.level_grid.items():
                t = as_type(name)
                levels = [float(v) for v in levels]
                if not levels or not all(LEVEL_RANGES[t].contains(v) for v in levels):
                    raise ValueError(f"level grid for {t.value} empty or outside its range")
                grid[t.value] = levels
            self.level_grid = grid


def linear_level_grid(t: DegradationType, n: int) -> list[float]:
    """``n`` evenly spaced levels covering the type's range (JPEG as integers)."""
    r = LEVEL_RANGES[t]
    levels = np.linspace(r.min, r.max, n)
    if t is DegradationType.JPEG:
        levels = np.unique(np.rint(levels))
    return [float(v) for v in levels]


def _sample_level(t: DegradationType, rng: np.random.Generator, config: DatasetConfig) -> float:
    grid = (config.level_grid or {}).get(t.value)
    if grid is not None:
        return float(grid[int(rng.integers(len(grid)))])
    r = LEVEL_RANGES[t]
    v = float(rng.uniform(r.min, r.max))
    return float(round(v)) if t is DegradationType.JPEG else v


_MIXED_SUBSETS = [
    tuple(t for i, t in enumerate(TYPES) if mask >> i & 1)
    for mask in range(1, 16)
    if bin(mask).count("1") >= 2
]


def sample_recipe(rng: np.random.Generator, config: DatasetConfig) -> DegradationRecipe | None:
    u = rng.random()
    if u < config.clean_ratio:
        return None
    u = (u - config.clean_ratio) / (1.0 - config.clean_ratio)
    if u < 1.0 - config.mixture_ratio:
        active = (TYPES[int(rng.integers(len(TYPES)))],)
    else:
        active = _MIXED_SUBSETS[int(rng.integers(len(_MIXED_SUBSETS)))]
    entries = {t: _sample_level(t, rng, config) for t in active}
    return DegradationRecipe(entries, seed=int(rng.integers(2**63)))


def list_images(clean_dir) -> list[Path]:
    d = Path(clean_dir)
    if not d.is_dir():
        raise IOFailure(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def generate_dataset(clean_dir, out_dir, config: DatasetConfig) -> DatasetManifest:
    """Crop patches from ``clean_dir``, degrade them and write PNGs plus a manifest.

    Record ``i`` draws all its randomness from ``(config.seed, i)``, so the output
    does not depend on processing order.
    """
    paths = list_images(clean_dir)
    if not paths:
        raise EmptyCorpusError(f"no images found in {clean_dir}")
    out_dir = Path(out_dir)
    images = [load_image(p) for p in paths]
    p = config.patch_size
    for path, im in zip(paths, images):
        if min(im.shape[:2]) < p:
            raise ImageTooSmallError(f"{path.name} is smaller than patch size {p}")

    records = []
    for i in range(config.count):
        rng = np.random.default_rng([config.seed, i])
        im = images[int(rng.integers(len(images)))]
        y = int(rng.integers(im.shape[0] - p + 1))
        x = int(rng.integers(im.shape[1] - p + 1))
        gt = np.ascontiguousarray(im[y : y + p, x : x + p])
        recipe = sample_recipe(rng, config)
        lq = synthesize(gt, recipe) if recipe is not None else gt.copy()
        gt_rel = f"gt/{i:06d}.png"
        lq_rel = f"lq/{i:06d}.png"
        save_png(out_dir / gt_rel, gt)
        save_png(out_dir / lq_rel, lq)
        records.append(ManifestRecord.from_recipe(lq_rel, gt_rel, recipe))

    manifest = DatasetManifest(records, MANIFEST_FORMAT_VERSION, out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest
