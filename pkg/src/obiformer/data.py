"""Dataset ingestion, procedural degradation, augmentation and skeleton
ground truth.

Images are float32 numpy arrays in [0, 1] laid out channel-first
(``3 x H x W`` for photographs, ``1 x H x W`` for skeletons).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ConfigurationError, FormatError, IngestionError

NOISE_KINDS = ("stroke_broken", "bone_cracked", "abnormal_edges", "dense_white")
ALL_NOISE_KINDS = NOISE_KINDS + ("mixed",)
TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")
LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_SIZE = (256, 256)


@dataclass
class SampleRecord:
    id: str
    noisy: np.ndarray
    clean: np.ndarray
    skeleton_gt: np.ndarray
    source: str = ""
    split: str = "train"

    def __post_init__(self):
        hw = {self.noisy.shape[-2:], self.clean.shape[-2:], self.skeleton_gt.shape[-2:]}
        if len(hw) != 1:
            raise FormatError(f"sample {self.id}: image sizes differ {sorted(hw)}")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "mixed"
    intensity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}; choose from {ALL_NOISE_KINDS}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigurationError(f"noise intensity must lie in [0, 1], got {self.intensity}")


# -- binarisation and thinning ---------------------------------------------

def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(LUMA, image, axes=1)
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    if image.ndim == 2:
        return image
    raise ConfigurationError(f"expected H x W, 1 x H x W or 3 x H x W image, got {image.shape}")


def otsu_threshold(values: np.ndarray) -> float | None:
    """Exact Otsu over the distinct levels; pixels ``<= t`` form the dark class.

    Returns None when there is a single level.
    """
    levels, counts = np.unique(np.asarray(values, dtype=np.float64).ravel(), return_counts=True)
    if levels.size < 2:
        return None
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    mu = np.cumsum(p * levels)
    mu_t = mu[-1]
    mu0 = mu[:-1] / w0
    mu1 = (mu_t - mu[:-1]) / (1.0 - w0)
    between = w0 * (1.0 - w0) * (mu0 - mu1) ** 2
    return float(levels[int(np.argmax(between))])


def binarize(image: np.ndarray) -> np.ndarray:
    """Otsu mask with the minority class as foreground (ink).

    Ties go to the bright class, the usual ink polarity of rubbings.
    """
    gray = luminance(image)
    t = otsu_threshold(gray)
    if t is None:
        return np.zeros(gray.shape, dtype=bool)
    bright = gray > t
    return bright if bright.mean() <= 0.5 else ~bright


def _neighbours(img: np.ndarray):
    """P2..P9 (clockwise from north) of every pixel, zero outside the image."""
    p = np.pad(img, 1)
    h, w = img.shape
    s = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return [s(-1, 0), s(-1, 1), s(0, 1), s(1, 1), s(1, 0), s(1, -1), s(0, -1), s(-1, -1)]


def _zhang_suen_pass(img: np.ndarray, first: bool) -> np.ndarray:
    n = _neighbours(img)
    p2, p3, p4, p5, p6, p7, p8, p9 = n
    count = sum(n)
    ring = n + [p2]
    transitions = sum(((a == 0) & (b == 1)).astype(np.uint8) for a, b in zip(ring[:-1], ring[1:]))
    if first:
        c3, c4 = p2 * p4 * p6, p4 * p6 * p8
    else:
        c3, c4 = p2 * p4 * p8, p2 * p6 * p8
    return (img == 1) & (count >= 2) & (count <= 6) & (transitions == 1) & (c3 == 0) & (c4 == 0)


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning until a full iteration deletes nothing."""
    img = np.asarray(mask).astype(bool).astype(np.uint8)
    if img.ndim != 2:
        raise ConfigurationError(f"skeletonize expects a 2-D mask, got shape {img.shape}")
    while True:
        changed = False
        for first in (True, False):
            delete = _zhang_suen_pass(img, first)
            if delete.any():
                img[delete] = 0
                changed = True
        if not changed:
            return img.astype(bool)


def skeleton_of(clean: np.ndarray) -> np.ndarray:
    """1 x H x W float skeleton ground truth of a clean image."""
    return skeletonize(binarize(clean))[None].astype(np.float32)


# -- procedural degradation ------------------------------------------------

def value_noise(shape, rng, octaves: int = 4, base_cells: int = 4) -> np.ndarray:
    """Multi-octave bilinear value noise scaled to [0, 1]."""
    h, w = shape
    total = np.zeros(shape)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        grid = rng.random((cells + 1, cells + 1))
        total += amp * ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=1, grid_mode=True,
                                    mode="nearest")[:h, :w]
        norm += amp
        amp *= 0.5
    total /= norm
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def _blob(shape, cy, cx, radius, rng) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, math.pi)
    a = radius * rng.uniform(0.7, 1.3)
    b = radius * rng.uniform(0.5, 1.0)
    dy, dx = yy - cy, xx - cx
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    ragged = 0.35 * (value_noise(shape, rng, octaves=2) - 0.5)
    return np.clip((1.0 + ragged - (u * u + v * v)) / 0.25, 0.0, 1.0)


def _stroke_broken(clean, intensity, rng):
    shape = clean.shape[-2:]
    scale = min(shape) / 64.0
    ink = binarize(clean)
    near = ndimage.binary_dilation(ink, iterations=max(1, round(2 * scale)))
    centres = np.argwhere(near)
    mask = np.zeros(shape)
    if centres.size == 0:
        return mask
    for _ in range(math.ceil(10 * intensity)):
        cy, cx = centres[rng.integers(len(centres))]
        radius = scale * rng.uniform(1.5, 4.0) * (0.5 + intensity)
        mask = np.maximum(mask, _blob(shape, cy, cx, radius, rng))
    return mask


def _bone_cracked(clean, intensity, rng):
    h, w = clean.shape[-2:]
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    width = max(1, round(min(h, w) * (0.01 + 0.04 * intensity)))
    for _ in range(1 + int(2 * intensity)):
        horizontal = rng.random() < 0.5
        if horizontal:
            y, x, heading = rng.uniform(0.25, 0.75) * h, 0.0, rng.normal(0.0, 0.3)
        else:
            y, x, heading = 0.0, rng.uniform(0.25, 0.75) * w, math.pi / 2 + rng.normal(0.0, 0.3)
        points = [(x, y)]
        step = max(1.0, min(h, w) / 32)
        while 0 <= x < w and 0 <= y < h and len(points) < 10 * (h + w):
            heading += rng.normal(0.0, 0.25)
            # drift back toward the crossing direction so the crack spans the image
            target = 0.0 if horizontal else math.pi / 2
            heading += 0.2 * (target - heading)
            x += step * math.cos(heading)
            y += step * math.sin(heading)
            points.append((x, y))
        draw.line(points, fill=255, width=width, joint="curve")
    return np.asarray(canvas, dtype=np.float64) / 255.0


def _abnormal_edges(clean, intensity, rng):
    h, w = clean.shape[-2:]
    mask = np.zeros((h, w))
    if intensity <= 0:
        return mask
    sides = rng.permutation(4)[: 1 + rng.integers(0, 1 + math.ceil(3 * intensity))]
    yy, xx = np.mgrid[0:h, 0:w]
    for side in sides:
        length = w if side in (0, 2) else h
        base = min(h, w) * 0.12 * intensity
        profile = base * (0.4 + 1.2 * value_noise((1, length), rng, octaves=3, base_cells=3)[0])
        if side == 0:
            dist, along = yy, xx
        elif side == 2:
            dist, along = h - 1 - yy, xx
        elif side == 1:
            dist, along = w - 1 - xx, yy
        else:
            dist, along = xx, yy
        depth = profile[along]
        mask = np.maximum(mask, np.clip((depth - dist) / 1.5, 0.0, 1.0))
    return mask


def _dense_white(clean, intensity, rng):
    shape = clean.shape[-2:]
    if intensity <= 0:
        return np.zeros(shape)
    noise = value_noise(shape, rng)
    threshold = 1.0 - 0.6 * intensity
    return np.clip((noise - threshold) / (1.0 - threshold) * 1.5, 0.0, 1.0) * rng.uniform(0.6, 0.9)


_GENERATORS = {
    "stroke_broken": _stroke_broken,
    "bone_cracked": _bone_cracked,
    "abnormal_edges": _abnormal_edges,
    "dense_white": _dense_white,
}


def noise_mask(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """H x W occlusion strength in [0, 1]; zero means untouched."""
    clean = np.asarray(clean)
    if spec.intensity == 0:
        return np.zeros(clean.shape[-2:])
    if spec.kind == "mixed":
        rng = np.random.default_rng([spec.seed, len(NOISE_KINDS)])
        chosen = [k for k in NOISE_KINDS if rng.random() < 0.5] or [NOISE_KINDS[rng.integers(4)]]
        masks = [noise_mask(clean, NoiseSpec(k, spec.intensity, spec.seed)) for k in chosen]
        return np.maximum.reduce(masks)
    rng = np.random.default_rng([spec.seed, NOISE_KINDS.index(spec.kind)])
    return _GENERATORS[spec.kind](clean, spec.intensity, rng)


def synthesize_noise(clean: np.ndarray, spec: NoiseSpec, white: float = 0.95) -> np.ndarray:
    """Whiten ``clean`` under a seeded occlusion mask; never darkens a pixel."""
    clean = np.asarray(clean, dtype=np.float32)
    if clean.min() < 0 or clean.max() > 1:
        raise ConfigurationError("clean image must lie in [0, 1]")
    mask = noise_mask(clean, spec).astype(np.float32)
    return np.maximum(clean, np.clip(white * mask, 0.0, 1.0)[None] if clean.ndim == 3 else white * mask)


# -- synthetic glyphs --------------------------------------------------------

def render_glyph(size: int = 64, seed: int = 0, ink: float = 0.9, ground: float = 0.1) -> np.ndarray:
    """A rubbing-like 3 x size x size glyph: light strokes on a dark ground."""
    rng = np.random.default_rng(seed)
    ss = 4
    big = size * ss
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    width = max(ss, round(big * rng.uniform(0.045, 0.07)))
    lo, hi = 0.18 * big, 0.82 * big
    for _ in range(rng.integers(3, 7)):
        n_pts = rng.integers(2, 4)
        start = rng.uniform(lo, hi, 2)
        pts = [tuple(start)]
        for _ in range(n_pts - 1):
            if rng.random() < 0.5:
                nxt = (rng.uniform(lo, hi), pts[-1][1]) if rng.random() < 0.5 else (pts[-1][0], rng.uniform(lo, hi))
            else:
                nxt = tuple(rng.uniform(lo, hi, 2))
            pts.append(nxt)
        draw.line(pts, fill=255, width=width, joint="curve")
    if rng.random() < 0.4:
        r = rng.uniform(0.08, 0.18) * big
        cx, cy = rng.uniform(lo + r, hi - r, 2)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=255, width=width)
    small = np.asarray(canvas.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    img = ground + (ink - ground) * small
    return np.repeat(img[None], 3, axis=0).astype(np.float32)


def make_synthetic_pairs(count: int, size: int = 64, seed: int = 0, kind: str = "mixed",
                         intensity: float | tuple[float, float] = (0.4, 0.9)) -> list[SampleRecord]:
    """Seeded (noisy, clean, skeleton) records built from procedural glyphs."""
    rng = np.random.default_rng([seed, 7])
    records = []
    for i in range(count):
        clean = render_glyph(size, seed=int(rng.integers(2 ** 31)))
        level = intensity if np.isscalar(intensity) else float(rng.uniform(*intensity))
        spec = NoiseSpec(kind, float(level), int(rng.integers(2 ** 31)))
        records.append(SampleRecord(f"syn{i:05d}", synthesize_noise(clean, spec), clean, skeleton_of(clean),
                                    source=f"synthetic:{kind}"))
    return records


# -- augmentation ------------------------------------------------------------

def _transform(img: np.ndarray, name: str) -> np.ndarray:
    if name == "identity":
        out = img
    elif name.startswith("rot"):
        out = np.rot90(img, k=int(name[3:]) // 90, axes=(-2, -1))
    elif name == "hflip":
        out = img[..., ::-1]
    elif name == "vflip":
        out = img[..., ::-1, :]
    else:
        raise ConfigurationError(f"unknown transform {name!r}")
    return np.ascontiguousarray(out)


def augment(sample: SampleRecord, seed: int, transform: str | None = None) -> SampleRecord:
    """Apply one seeded right-angle rotation or flip to all three images alike."""
    if transform is None:
        transform = TRANSFORMS[np.random.default_rng(seed).integers(len(TRANSFORMS))]
    return replace(sample, noisy=_transform(sample.noisy, transform), clean=_transform(sample.clean, transform),
                   skeleton_gt=_transform(sample.skeleton_gt, transform))


# -- files -------------------------------------------------------------------

def read_png(path, channels: int = 3) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) if channels == 3 else arr[None]


def write_png(path, image: np.ndarray) -> None:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim == 3:
        image = image[0] if image.shape[0] == 1 else image.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(path)


def resize(image: np.ndarray, size: tuple[int, int], resample=Image.BILINEAR) -> np.ndarray:
    h, w = size
    if image.shape[-2:] == (h, w):
        return image
    planes = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((w, h), resample)) for c in image]
    return np.clip(np.stack(planes), 0.0, 1.0).astype(np.float32)


def split_pair(paired: np.ndarray, noisy_side: str = "left") -> tuple[np.ndarray, np.ndarray]:
    """Cut a side-by-side pair into ``(noisy, clean)`` halves."""
    width = paired.shape[-1]
    if width % 2:
        raise FormatError(f"paired image width must be even, got {width}")
    if noisy_side not in ("left", "right"):
        raise ConfigurationError(f"noisy_side must be 'left' or 'right', got {noisy_side!r}")
    left, right = paired[..., : width // 2], paired[..., width // 2:]
    return (left, right) if noisy_side == "left" else (right, left)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class DatasetManifest:
    root: Path
    layout: str = "triplet_dirs"
    ids: list[str] = field(default_factory=list)
    ratios: tuple[float, ...] = (0.8, 0.1, 0.1)
    seed: int = 0
    noisy_side: str = "left"

    def __post_init__(self):
        self.root = Path(self.root)
        if self.layout not in ("triplet_dirs", "paired_sidebyside"):
            raise ConfigurationError(f"unknown layout {self.layout!r}")
        if not 1 <= len(self.ratios) <= 3 or any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ConfigurationError(f"bad split ratios {self.ratios}")
        if not self.ids:
            self.ids = self.discover()
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("manifest ids must be unique")

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        kv = parse_key_values(path.read_text())
        root = Path(kv.get("root", "."))
        return cls(
            root=root if root.is_absolute() else path.parent / root,
            layout=kv.get("layout", "triplet_dirs"),
            ids=[i for i in kv.get("ids", "").split(",") if i],
            ratios=tuple(float(r) for r in kv.get("split", "0.8,0.1,0.1").split(",")),
            seed=int(kv.get("seed", 0)),
            noisy_side=kv.get("noisy_side", "left"),
        )

    @property
    def listing_dir(self) -> Path:
        return self.root / ("pairs" if self.layout == "paired_sidebyside" else "noisy")

    def discover(self) -> list[str]:
        if not self.listing_dir.is_dir():
            raise IngestionError(f"dataset directory {self.listing_dir} not found")
        return sorted(p.stem for p in self.listing_dir.glob("*.png"))

    @property
    def split_names(self) -> tuple[str, ...]:
        return {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}[len(self.ratios)]

    def assign_splits(self) -> dict[str, str]:
        """Seeded id -> split map; counts follow the ratios by largest remainder."""
        n = len(self.ids)
        ratios = np.asarray(self.ratios, dtype=np.float64) / sum(self.ratios)
        exact = ratios * n
        counts = np.floor(exact + 1e-9).astype(int)
        for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
            counts[i] += 1
        order = np.random.default_rng(self.seed).permutation(n)
        ids = sorted(self.ids)
        out, start = {}, 0
        for name, k in zip(self.split_names, counts):
            for j in order[start:start + k]:
                out[ids[j]] = name
            start += k
        return out


def _load_record(manifest: DatasetManifest, rid: str, size) -> SampleRecord:
    root = manifest.root
    if manifest.layout == "paired_sidebyside":
        path = root / "pairs" / f"{rid}.png"
        if not path.is_file():
            raise IngestionError(f"record {rid}: missing {path}")
        noisy, clean = split_pair(read_png(path), manifest.noisy_side)
        skel_path = None
    else:
        paths = {k: root / k / f"{rid}.png" for k in ("noisy", "clean")}
        for k, p in paths.items():
            if not p.is_file():
                raise IngestionError(f"record {rid}: missing {k} image {p}")
        noisy, clean = read_png(paths["noisy"]), read_png(paths["clean"])
        skel_path = root / "skeleton" / f"{rid}.png"
    noisy, clean = resize(noisy, size), resize(clean, size)
    if skel_path is not None and skel_path.is_file():
        skeleton = (resize(read_png(skel_path, 1), size, Image.NEAREST) > 0.5).astype(np.float32)
    else:
        skeleton = skeleton_of(clean)
    return SampleRecord(rid, noisy, clean, skeleton, source=str(root))


def load_dataset(manifest: DatasetManifest, target_size: tuple[int, int] = DEFAULT_SIZE) -> list[SampleRecord]:
    """Decode, resize and split every record, ordered by id."""
    splits = manifest.assign_splits()
    records = []
    for rid in sorted(manifest.ids):
        record = _load_record(manifest, rid, tuple(target_size))
        record.split = splits[rid]
        records.append(record)
    return records


def by_split(records: Sequence[SampleRecord], split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


def write_triplets(records: Sequence[SampleRecord], root) -> None:
    root = Path(root)
    for r in records:
        write_png(root / "noisy" / f"{r.id}.png", r.noisy)
        write_png(root / "clean" / f"{r.id}.png", r.clean)
        write_png(root / "skeleton" / f"{r.id}.png", r.skeleton_gt)
