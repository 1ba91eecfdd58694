"""Synthetic nuclei scenes and the JSON centroid-annotation manifest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

MANIFEST_VERSION = 1

# per-category RGB signature and radius range (pixels)
CATEGORY_STYLES = [
    ((0.42, 0.12, 0.45), (2.5, 3.5)),
    ((0.12, 0.18, 0.55), (3.5, 4.5)),
    ((0.62, 0.30, 0.20), (4.0, 5.0)),
    ((0.20, 0.45, 0.25), (3.0, 4.0)),
    ((0.55, 0.50, 0.10), (2.5, 4.0)),
]
BACKGROUND = (0.92, 0.80, 0.88)


class DensityError(ValueError):
    pass


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class Centroid:
    x: float
    y: float
    category: int


@dataclass
class AnnotationRecord:
    id: str
    path: str
    width: int
    height: int
    centroids: list[Centroid] = field(default_factory=list)

    def points_uv(self) -> torch.Tensor:
        """Pixel ``(u, v)`` = ``(y, x)`` coordinates as a float tensor ``(N, 2)``."""
        return torch.tensor([[c.y, c.x] for c in self.centroids], dtype=torch.float32).reshape(-1, 2)

    def categories(self) -> torch.Tensor:
        return torch.tensor([c.category for c in self.centroids], dtype=torch.long)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "width": self.width,
            "height": self.height,
            "centroids": [{"x": c.x, "y": c.y, "category": c.category} for c in self.centroids],
        }


@dataclass
class SynthConfig:
    image_size: int = 64
    num_classes: int = 3
    nuclei_mean: float = 15.0
    nuclei_spread: float = 3.0
    radius_min: float = 2.5
    radius_max: float = 5.0
    min_separation: float = 9.0
    noise: float = 0.03
    class_weights: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.min_separation < 1:
            raise ValueError("min_separation must be >= 1 px")
        if self.radius_min < 1 or self.radius_max < self.radius_min:
            raise ValueError("radii must satisfy 1 <= radius_min <= radius_max")
        if not 1 <= self.num_classes <= len(CATEGORY_STYLES):
            raise ValueError(f"num_classes must be in [1, {len(CATEGORY_STYLES)}]")
        if self.class_weights and len(self.class_weights) != self.num_classes:
            raise ValueError("class_weights needs one entry per category")


def _place_centers(rng, count: int, size: int, sep: float, margin: float, attempts: int = 2000):
    centers: list[tuple[float, float]] = []
    tries = 0
    while len(centers) < count:
        tries += 1
        if tries > attempts * count:
            raise DensityError(
                f"could not place {count} nuclei with separation {sep} px in a {size}px image"
            )
        c = rng.uniform(margin, size - margin, size=2)
        if all((c[0] - u) ** 2 + (c[1] - v) ** 2 >= sep * sep for u, v in centers):
            centers.append((float(c[0]), float(c[1])))
    return centers


def _radius(cfg: SynthConfig, category: int, rng) -> float:
    lo, hi = CATEGORY_STYLES[category][1]
    lo, hi = max(lo, cfg.radius_min), min(hi, cfg.radius_max)
    if hi < lo:
        lo = hi = min(max(lo, cfg.radius_min), cfg.radius_max)
    return float(rng.uniform(lo, hi))


def render_scene(cfg: SynthConfig, rng: np.random.Generator):
    """One image ``(H, W, 3)`` float in ``[0, 1]`` plus its centroids."""
    size = cfg.image_size
    count = max(0, int(round(rng.normal(cfg.nuclei_mean, cfg.nuclei_spread))))
    centers = _place_centers(rng, count, size, cfg.min_separation, margin=2.0)
    weights = np.asarray(cfg.class_weights or [1.0] * cfg.num_classes)
    cats = rng.choice(cfg.num_classes, size=len(centers), p=weights / weights.sum())
    uu, vv = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND
    img *= 1.0 + 0.05 * rng.standard_normal((size, size, 1))
    centroids = []
    for (u, v), k in zip(centers, cats):
        color, _ = CATEGORY_STYLES[k]
        r = _radius(cfg, int(k), rng)
        d = np.hypot(uu - u, vv - v)
        alpha = np.clip(r + 0.5 - d, 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + np.asarray(color) * alpha
        centroids.append(Centroid(x=v, y=u, category=int(k)))
    img += cfg.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), centroids


def synth_generate(cfg: SynthConfig, count: int):
    """``count`` scenes; returns (list of float images (H, W, 3), list of records)."""
    rng = np.random.default_rng(cfg.seed)
    images, records = [], []
    for i in range(count):
        img, cents = render_scene(cfg, rng)
        images.append(img)
        records.append(AnnotationRecord(f"synth_{i:05d}", f"images/synth_{i:05d}.png",
                                        cfg.image_size, cfg.image_size, cents))
    return images, records


def category_names(num_classes: int) -> list[str]:
    return [f"class{k}" for k in range(num_classes)]


def write_synthetic_dataset(out_dir, cfg: SynthConfig, splits: dict[str, int]) -> dict[str, Path]:
    """Write PNGs and one manifest per split; split seeds are derived from ``cfg.seed``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for offset, (split, count) in enumerate(splits.items()):
        split_cfg = SynthConfig(**{**cfg.__dict__, "seed": cfg.seed * 1000 + offset})
        images, records = synth_generate(split_cfg, count)
        for img, rec in zip(images, records):
            rec.id = f"{split}_{rec.id}"
            rec.path = f"images/{rec.id}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out_dir / rec.path)
        path = out_dir / f"{split}.json"
        write_manifest(path, records, category_names(cfg.num_classes))
        manifests[split] = path
    return manifests


def write_manifest(path, records: list[AnnotationRecord], categories: list[str]) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "categories": list(categories),
        "images": [r.to_json() for r in records],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def _validate(doc, source: str) -> list[str]:
    problems = []
    if not isinstance(doc, dict):
        return [f"{source}: top level must be an object"]
    if doc.get("version") != MANIFEST_VERSION:
        problems.append(f"{source}: version {doc.get('version')!r}, expected {MANIFEST_VERSION}")
    cats = doc.get("categories")
    if not isinstance(cats, list):
        problems.append(f"{source}: 'categories' must be a list")
        cats = []
    images = doc.get("images", [])
    if not isinstance(images, list):
        return problems + [f"{source}: 'images' must be a list"]
    for i, rec in enumerate(images):
        where = f"{source}: images[{i}]"
        if not isinstance(rec, dict):
            problems.append(f"{where}: not an object")
            continue
        missing = [k for k in ("id", "path", "width", "height", "centroids") if k not in rec]
        if missing:
            problems.append(f"{where}: missing {', '.join(missing)}")
            continue
        where = f"{where} (id {rec['id']!r})"
        W, H = rec["width"], rec["height"]
        for j, c in enumerate(rec["centroids"]):
            try:
                x, y, k = float(c["x"]), float(c["y"]), c["category"]
            except (KeyError, TypeError, ValueError):
                problems.append(f"{where}: centroid {j} needs numeric x, y and a category")
                continue
            if not (0 <= x <= W and 0 <= y <= H):
                problems.append(f"{where}: centroid {j} at ({x}, {y}) outside {W}x{H}")
            if not isinstance(k, int) or not 0 <= k < len(cats):
                problems.append(f"{where}: centroid {j} category {k!r} not in [0, {len(cats)})")
    return problems


@dataclass
class Dataset:
    root: Path
    categories: list[str]
    records: list[AnnotationRecord]

    def __len__(self) -> int:
        return len(self.records)

    def image(self, index: int) -> torch.Tensor:
        """Load image ``index`` lazily as a ``(3, H, W)`` float tensor."""
        rec = self.records[index]
        arr = np.asarray(Image.open(self.root / rec.path).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1).contiguous()

    def training_arrays(self):
        images = [self.image(i) for i in range(len(self))]
        return images, [r.points_uv() for r in self.records], [r.categories() for r in self.records]


def load_dataset(path) -> Dataset:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return Dataset(path.parent, [], [])
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}:{exc.lineno}: {exc.msg}"]) from exc
    problems = _validate(doc, str(path))
    if problems:
        raise ManifestError(problems)
    records = [
        AnnotationRecord(
            id=str(r["id"]),
            path=str(r["path"]),
            width=int(r["width"]),
            height=int(r["height"]),
            centroids=[Centroid(float(c["x"]), float(c["y"]), int(c["category"])) for c in r["centroids"]],
        )
        for r in doc.get("images", [])
    ]
    return Dataset(path.parent, list(doc["categories"]), records)
