"""Procedural shapes-world domains for adaptation experiments.

Every image is a textured background (class 0) with a handful of flat-colored
geometric shapes on top. The shape class of each instance is drawn from a
power law, so the last class is the rarest. A :class:`DomainShiftSpec` then
changes appearance only, which is how the target domain is produced.

Datasets live on disk as::

    root/manifest.json
    root/images/{split}/{id}.png   # 8-bit RGB
    root/labels/{split}/{id}.png   # 8-bit gray, value = class index, 255 = ignore
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

IGNORE_INDEX = 255
MANIFEST_FORMAT = "ccda-dataset"
MANIFEST_VERSION = 1

# Shape kinds assigned to foreground classes 1..C-1, cycling.
SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross", "diamond")


class DatasetError(Exception):
    """Raised for malformed manifests, missing rasters and invalid labels."""

    def __init__(self, message: str, path: Optional[Path | str] = None):
        self.path = None if path is None else str(path)
        super().__init__(message if path is None else f"{message}: {path}")


@dataclass(frozen=True)
class SceneSpec:
    image_height: int = 64
    image_width: int = 64
    num_classes: int = 5
    class_frequency_skew: float = 1.5
    shapes_per_image: tuple[int, int] = (2, 5)
    shape_radius: tuple[float, float] = (7.0, 14.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        object.__setattr__(self, "shape_radius", tuple(float(v) for v in self.shape_radius))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > IGNORE_INDEX:
            raise ValueError(f"num_classes must be < {IGNORE_INDEX}")
        if self.image_height < 32 or self.image_width < 32:
            raise ValueError("image height and width must be >= 32")
        if self.class_frequency_skew < 0:
            raise ValueError("class_frequency_skew must be >= 0")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        rlo, rhi = self.shape_radius
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"bad shape_radius range {self.shape_radius}")

    def class_probabilities(self) -> np.ndarray:
        """Sampling probabilities of the foreground classes 1..C-1."""
        ranks = np.arange(1, self.num_classes, dtype=np.float64)
        weights = ranks ** (-self.class_frequency_skew)
        return weights / weights.sum()


@dataclass(frozen=True)
class DomainShiftSpec:
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    hue_rotation: float = 0.0
    noise_stddev: float = 0.0
    texture_frequency: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.noise_stddev <= 1.0:
            raise ValueError("noise_stddev must lie in [0, 1]")
        if self.contrast_scale < 0:
            raise ValueError("contrast_scale must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self == DomainShiftSpec()


@dataclass(eq=False)
class Sample:
    id: str
    image: np.ndarray  # H x W x 3, float32 on the 1/255 grid
    labels: Optional[np.ndarray] = None  # H x W, uint8

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        if self.id != other.id or not np.array_equal(self.image, other.image):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


@dataclass(eq=False)
class Dataset:
    num_classes: int
    splits: dict[str, list[Sample]] = field(default_factory=dict)
    spec: Optional[SceneSpec] = None
    shift: Optional[DomainShiftSpec] = None
    ignore_index: int = IGNORE_INDEX

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.ignore_index == other.ignore_index
            and self.spec == other.spec
            and self.shift == other.shift
            and list(self.splits) == list(other.splits)
            and all(self.splits[k] == other.splits[k] for k in self.splits)
        )

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]

    def merged(self, other: "Dataset") -> "Dataset":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge datasets with different class counts")
        splits = dict(self.splits)
        for name, samples in other.splits.items():
            splits[name] = splits.get(name, []) + list(samples)
        return replace(self, splits=splits)

    def without_labels(self) -> "Dataset":
        splits = {k: [replace(s, labels=None) for s in v] for k, v in self.splits.items()}
        return replace(self, splits=splits)

    def class_pixel_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in self.splits[split]:
            if s.labels is None:
                continue
            lab = s.labels[s.labels != self.ignore_index]
            counts += np.bincount(lab.ravel(), minlength=self.num_classes)[: self.num_classes]
        return counts


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _palette(num_classes: int) -> np.ndarray:
    """Class base colors; background is a muted gray-green."""
    colors = np.zeros((num_classes, 3))
    colors[0] = (0.42, 0.47, 0.40)
    n_fg = num_classes - 1
    for k in range(1, num_classes):
        hue = (k - 1) / max(n_fg, 1)
        colors[k] = _hsv_to_rgb(hue, 0.65, 0.85)
    return colors


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: str, yy, xx, cy: float, cx: float, r: float) -> np.ndarray:
    # Size parameters are scaled so that every kind has area ~ pi r^2.
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        a = r * math.sqrt(math.pi) / 2
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    if kind == "diamond":
        d = r * math.sqrt(math.pi / 2)
        return np.abs(dx) + np.abs(dy) <= d
    if kind == "ring":
        inner = 0.4
        ro = r / math.sqrt(1 - inner**2)
        d2 = dx * dx + dy * dy
        return (d2 <= ro * ro) & (d2 >= (inner * ro) ** 2)
    if kind == "cross":
        a = r * math.sqrt(9 * math.pi / 20)
        w = a / 3
        return ((np.abs(dx) <= w) & (np.abs(dy) <= a)) | ((np.abs(dy) <= w) & (np.abs(dx) <= a))
    if kind == "triangle":
        b = r * math.sqrt(math.pi / math.sqrt(3))
        h = b * math.sqrt(3)
        top = cy - 2 * h / 3
        bottom = cy + h / 3
        inside_y = (yy >= top) & (yy <= bottom)
        half = b * (yy - top) / h
        return inside_y & (np.abs(dx) <= half)
    raise ValueError(f"unknown shape kind {kind!r}")


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _shift_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 1])


def render_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Source-domain rendering of sample ``index``: (float64 image, uint8 labels)."""
    rng = _scene_rng(spec.seed, index)
    H, W, C = spec.image_height, spec.image_width, spec.num_classes
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    colors = _palette(C)

    # background: base color, a gentle gradient and faint stripes
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * xx / W + np.sin(angle) * yy / H)[..., None]
    freq = rng.uniform(2.0, 4.0)
    stripes = np.sin(2 * math.pi * freq * (xx + yy) / (H + W))[..., None]
    image = colors[0] + 0.08 * ramp + 0.03 * stripes
    labels = np.zeros((H, W), dtype=np.uint8)

    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    if C > 1 and n_shapes > 0:
        classes = rng.choice(np.arange(1, C), size=n_shapes, p=spec.class_probabilities())
        for k in classes:
            k = int(k)
            r = rng.uniform(*spec.shape_radius)
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            mask = _shape_mask(SHAPE_KINDS[(k - 1) % len(SHAPE_KINDS)], yy, xx, cy, cx, r)
            color = np.clip(colors[k] + rng.uniform(-0.05, 0.05, size=3), 0, 1)
            image[mask] = color
            labels[mask] = k
    return image, labels


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    # Rodrigues rotation about the gray axis (1,1,1)/sqrt(3)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + (1 - c) * k, k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + (1 - c) * k],
    ])


def apply_shift(image: np.ndarray, shift: DomainShiftSpec, rng: np.random.Generator) -> np.ndarray:
    """Appearance transform; every stage is skipped when it is the identity."""
    out = image
    if shift.hue_rotation != 0.0:
        out = out @ _hue_rotation_matrix(shift.hue_rotation).T
    if shift.contrast_scale != 1.0:
        out = (out - 0.5) * shift.contrast_scale + 0.5
    if shift.brightness_offset != 0.0:
        out = out + shift.brightness_offset
    if shift.texture_frequency != 0.0:
        H, W = out.shape[:2]
        yy, xx = np.mgrid[0:H, 0:W]
        pattern = np.sin(2 * math.pi * shift.texture_frequency * (xx / W)) * np.cos(
            2 * math.pi * shift.texture_frequency * (yy / H)
        )
        out = out + 0.08 * pattern[..., None]
    if shift.noise_stddev > 0.0:
        out = out + rng.normal(0.0, shift.noise_stddev, size=out.shape)
    return out


def _quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def make_sample(spec: SceneSpec, shift: DomainShiftSpec, index: int) -> Sample:
    image, labels = render_scene(spec, index)
    image = apply_shift(image, shift, _shift_rng(spec.seed, index))
    return Sample(id=f"{index:06d}", image=_quantize(image), labels=labels)


def generate_domain(
    spec: SceneSpec,
    shift: DomainShiftSpec,
    n: int,
    *,
    split: str = "train",
    first_index: int = 0,
    stride: int = 8,
    workers: int = 1,
) -> Dataset:
    """Render ``n`` samples with indices ``first_index .. first_index+n-1``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if spec.image_height % stride or spec.image_width % stride:
        raise ValueError(
            f"image size {spec.image_height}x{spec.image_width} is not divisible by "
            f"encoder stride {stride}"
        )
    indices = range(first_index, first_index + n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda i: make_sample(spec, shift, i), indices))
    else:
        samples = [make_sample(spec, shift, i) for i in indices]
    return Dataset(num_classes=spec.num_classes, splits={split: samples}, spec=spec, shift=shift)


def generate_pair(
    spec: SceneSpec,
    shift: DomainShiftSpec,
    n_train: int,
    n_val: int,
    *,
    stride: int = 8,
    workers: int = 1,
) -> tuple[Dataset, Dataset]:
    """Source and target datasets with train/val splits.

    The target uses a different scene seed so its scenes are not copies of the
    source scenes; only the target gets the appearance shift.
    """
    target_spec = replace(spec, seed=spec.seed + 1)
    out = []
    for sp, sh in ((spec, DomainShiftSpec()), (target_spec, shift)):
        ds = generate_domain(sp, sh, n_train, split="train", stride=stride, workers=workers)
        if n_val > 0:
            val = generate_domain(
                sp, sh, n_val, split="val", first_index=n_train, stride=stride, workers=workers
            )
            ds = ds.merged(val)
        out.append(ds)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _spec_to_json(spec: Optional[SceneSpec]):
    if spec is None:
        return None
    d = asdict(spec)
    d["shapes_per_image"] = list(spec.shapes_per_image)
    d["shape_radius"] = list(spec.shape_radius)
    return d


def write_dataset(dataset: Dataset, root: Path | str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_classes": dataset.num_classes,
        "ignore_index": dataset.ignore_index,
        "scene": _spec_to_json(dataset.spec),
        "shift": None if dataset.shift is None else asdict(dataset.shift),
        "splits": {},
    }
    for split, samples in dataset.splits.items():
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        has_labels = all(s.labels is not None for s in samples)
        if has_labels:
            (root / "labels" / split).mkdir(parents=True, exist_ok=True)
        for s in samples:
            rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(root / "images" / split / f"{s.id}.png")
            if has_labels:
                Image.fromarray(s.labels.astype(np.uint8), mode="L").save(
                    root / "labels" / split / f"{s.id}.png"
                )
        manifest["splits"][split] = {"ids": [s.id for s in samples], "labels": has_labels}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_manifest(path: Path) -> dict:
    if not path.is_file():
        raise DatasetError("manifest not found", path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"corrupt manifest ({exc})", path) from None
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError("not a dataset manifest", path)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}", path)
    C = manifest.get("num_classes")
    if not isinstance(C, int) or C < 2:
        raise DatasetError("manifest num_classes must be an integer >= 2", path)
    splits = manifest.get("splits")
    if not isinstance(splits, dict):
        raise DatasetError("manifest splits must be a mapping", path)
    for name, entry in splits.items():
        if not isinstance(entry, dict) or not isinstance(entry.get("ids"), list):
            raise DatasetError(f"manifest split {name!r} is malformed", path)
    return manifest


def _spec_from_json(d) -> Optional[SceneSpec]:
    if d is None:
        return None
    known = {f.name for f in fields(SceneSpec)}
    return SceneSpec(**{k: v for k, v in d.items() if k in known})


def read_dataset(
    manifest_path: Path | str,
    *,
    withhold_labels: bool = False,
    splits: Optional[list[str]] = None,
) -> Dataset:
    """Load a dataset written by :func:`write_dataset`.

    ``withhold_labels`` drops label maps after validation, which is how target
    data is handed to the trainer.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = _load_manifest(path)
    root = path.parent
    C = manifest["num_classes"]
    ignore = manifest.get("ignore_index", IGNORE_INDEX)
    out: dict[str, list[Sample]] = {}
    for split, entry in manifest["splits"].items():
        if splits is not None and split not in splits:
            continue
        samples = []
        for sid in entry["ids"]:
            img_path = root / "images" / split / f"{sid}.png"
            if not img_path.is_file():
                raise DatasetError("missing image raster", img_path)
            with Image.open(img_path) as im:
                if im.mode != "RGB":
                    raise DatasetError(f"image must be 8-bit RGB, got mode {im.mode}", img_path)
                image = (np.asarray(im, dtype=np.uint8) / 255.0).astype(np.float32)
            labels = None
            if entry.get("labels", False):
                lab_path = root / "labels" / split / f"{sid}.png"
                if not lab_path.is_file():
                    raise DatasetError("missing label raster", lab_path)
                with Image.open(lab_path) as im:
                    if im.mode != "L":
                        raise DatasetError(f"label must be 8-bit gray, got mode {im.mode}", lab_path)
                    labels = np.asarray(im, dtype=np.uint8).copy()
                if labels.shape != image.shape[:2]:
                    raise DatasetError("label raster size does not match image", lab_path)
                bad = (labels >= C) & (labels != ignore)
                if bad.any():
                    raise DatasetError(
                        f"label value {int(labels[bad].max())} out of range for {C} classes", lab_path
                    )
                if withhold_labels:
                    labels = None
            samples.append(Sample(id=sid, image=image, labels=labels))
        out[split] = samples
    shift = manifest.get("shift")
    return Dataset(
        num_classes=C,
        splits=out,
        spec=_spec_from_json(manifest.get("scene")),
        shift=None if shift is None else DomainShiftSpec(**shift),
        ignore_index=ignore,
    )
