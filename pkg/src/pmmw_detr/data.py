"""Synthetic PMMW-like scenes, augmentations and dataset files.

Scenes show a bright body ellipse with uneven brightness over a cold
background; concealed objects appear as darker silhouettes.  Additive Gaussian
noise and horizontal scan stripes mimic the sensor.  Four templates stand in
for the four classes: wrench (thin bar), bottle (rounded rectangle), knife
(elongated triangle) and pistol (L-shape).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import SeededRng

CLASS_NAMES = ("wrench", "bottle", "knife", "pistol")
AUGMENT_OPS = ("hflip", "rotate90", "gaussian_blur", "brightness")


class PlacementError(RuntimeError):
    """An object could not be placed inside the body region."""


class DatasetFormatError(ValueError):
    """A dataset or image file could not be parsed."""


@dataclass
class SceneSpec:
    size: int = 128
    placement_prob: float = 0.5
    noise_sigma: float = 0.03
    stripe_amplitude: float = 0.03
    contrast: tuple = (0.25, 0.4)
    body_brightness: float = 0.6
    background: float = 0.12
    max_tries: int = 100
    classes: tuple = (0, 1, 2, 3)


@dataclass
class DatasetRecord:
    image_id: int
    file: str
    width: int
    height: int
    annotations: list = field(default_factory=list)   # (class_id, (x1, y1, x2, y2)) in pixels

    def __post_init__(self):
        for cls, (x1, y1, x2, y2) in self.annotations:
            if not (0 <= x1 < x2 <= self.width and 0 <= y1 < y2 <= self.height):
                raise ValueError(f"box {(x1, y1, x2, y2)} outside {self.width}x{self.height}")

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b for _, b in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for c, _ in self.annotations], dtype=np.int64)


# ---------------------------------------------------------------------------
# object templates

def template_mask(cls: int, rng: SeededRng) -> np.ndarray:
    """Boolean silhouette, tight to its bounding box."""
    if cls == 0:      # wrench: thin bar with a small jaw at one end
        length, thick = rng.integers(26, 35), rng.integers(5, 8)
        m = np.zeros((thick + 4, length), dtype=bool)
        m[2:2 + thick, :] = True
        m[:, :5] = True
    elif cls == 1:    # bottle: rounded rectangle with a neck
        w, h = rng.integers(14, 19), rng.integers(24, 31)
        yy, xx = np.mgrid[0:h, 0:w]
        r = w / 3.0
        body = np.ones((h, w), dtype=bool)
        for cy, cx in ((r, r), (r, w - 1 - r), (h - 1 - r, r), (h - 1 - r, w - 1 - r)):
            corner = ((yy < r) if cy == r else (yy > h - 1 - r)) & ((xx < r) if cx == r else (xx > w - 1 - r))
            body &= ~(corner & ((yy - cy) ** 2 + (xx - cx) ** 2 > r * r))
        neck = np.zeros((6, w), dtype=bool)
        neck[:, w // 2 - 2:w // 2 + 3] = True
        m = np.concatenate([neck, body], axis=0)
    elif cls == 2:    # knife: elongated triangle
        w, h = rng.integers(8, 11), rng.integers(26, 33)
        yy, xx = np.mgrid[0:h, 0:w]
        half = (w / 2.0) * (yy + 1) / h
        m = np.abs(xx - (w - 1) / 2.0) <= half + 0.5
    elif cls == 3:    # pistol: barrel plus grip
        w, h = rng.integers(24, 29), rng.integers(18, 23)
        m = np.zeros((h, w), dtype=bool)
        m[:7, :] = True
        m[:, :9] = True
    else:
        raise ValueError(f"unknown class {cls}")
    if cls in (0, 2) and rng.random() < 0.5:
        m = m.T
    ys, xs = np.nonzero(m)
    return m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def _body(spec: SceneSpec, rng: SeededRng):
    n = spec.size
    cy = n * (0.52 + rng.uniform(-0.03, 0.03))
    cx = n * (0.5 + rng.uniform(-0.04, 0.04))
    ay = n * rng.uniform(0.40, 0.46)
    ax = n * rng.uniform(0.28, 0.34)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    inside = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    gradient = 1.0 - 0.25 * (yy - (cy - ay)) / (2 * ay)
    chest = 0.12 * np.exp(-(((yy - (cy - 0.35 * ay)) / (0.3 * ay)) ** 2 + ((xx - cx) / (0.5 * ax)) ** 2))
    body = spec.body_brightness * gradient + chest
    img = np.where(inside, body, spec.background)
    extent = (int(np.floor(cy - ay)), int(np.ceil(cy + ay)), int(np.floor(cx - ax)), int(np.ceil(cx + ax)))
    return gaussian_filter(img, 1.5), inside, extent


def synth_scene(spec: SceneSpec, seed: int, image_id: int = 0):
    """Deterministic (image in [0, 1], DatasetRecord) for ``seed``."""
    rng = SeededRng(seed)
    n = spec.size
    img, inside, (top, bottom, left, right) = _body(spec, rng)
    occupied = np.zeros((n, n), dtype=bool)
    annotations = []
    present = [c for c in spec.classes if rng.random() < spec.placement_prob]
    masks = {c: template_mask(c, rng) for c in present}
    # largest silhouettes first so small ones fill the remaining gaps
    for cls in sorted(present, key=lambda c: (-masks[c].size, c)):
        mask = masks[cls]
        mh, mw = mask.shape
        for _ in range(spec.max_tries):
            y = rng.integers(max(0, top), max(1, min(n, bottom) - mh + 1))
            x = rng.integers(max(0, left), max(1, min(n, right) - mw + 1))
            region = (slice(y, y + mh), slice(x, x + mw))
            pad = (slice(max(0, y - 3), y + mh + 3), slice(max(0, x - 3), x + mw + 3))
            if inside[region].all() and not occupied[pad].any():
                break
        else:
            raise PlacementError(f"could not place class {cls} after {spec.max_tries} tries")
        occupied[region] |= True
        contrast = rng.uniform(*spec.contrast)
        patch = img[region]
        img[region] = np.where(mask, patch - contrast, patch)
        annotations.append((cls, (x, y, x + mw, y + mh)))
    annotations.sort(key=lambda a: a[0])
    img = gaussian_filter(img, 0.7)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, (n, n))
    if spec.stripe_amplitude > 0:
        rows = spec.stripe_amplitude * (rng.normal(0.0, 1.0, n)
                                        + np.sin(np.arange(n) * rng.uniform(0.3, 0.9)))
        img = img + rows[:, None]
    img = np.clip(img, 0.0, 1.0)
    record = DatasetRecord(image_id, f"img_{image_id:05d}.pgm", n, n, annotations)
    return img, record


def synth_dataset(spec: SceneSpec, count: int, seed: int):
    """``count`` scenes; scene i uses a seed derived from (seed, i).

    A scene that hits a placement failure is redrawn from (seed, i, attempt).
    """
    base = SeededRng(seed)
    out = []
    for i in range(count):
        for attempt in range(10):
            sub = base.child(i) if attempt == 0 else base.child(i, attempt)
            try:
                out.append(synth_scene(spec, sub.seed, i))
                break
            except PlacementError:
                if attempt == 9:
                    raise
    return out


# ---------------------------------------------------------------------------
# augmentation

def augment(image: np.ndarray, record: DatasetRecord, op: str, seed: int = 0):
    """Apply one augmentation to an image and its boxes.

    ``rotate90`` turns the image counter-clockwise: pixel (row, col) moves to
    (W - 1 - col, row), so box (x1, y1, x2, y2) becomes (y1, W - x2, y2, W - x1).
    """
    rng = SeededRng(seed)
    h, w = image.shape
    anns = record.annotations
    if op == "hflip":
        out = image[:, ::-1].copy()
        anns = [(c, (w - x2, y1, w - x1, y2)) for c, (x1, y1, x2, y2) in anns]
        width, height = w, h
    elif op == "rotate90":
        out = np.rot90(image).copy()
        anns = [(c, (y1, w - x2, y2, w - x1)) for c, (x1, y1, x2, y2) in anns]
        width, height = h, w
    elif op == "gaussian_blur":
        sigma = (0.5, 1.0)[rng.integers(0, 2)]
        out = gaussian_filter(image, sigma)
        width, height = w, h
    elif op == "brightness":
        out = np.clip(image * (1.0 + rng.uniform(-0.2, 0.2)), 0.0, 1.0)
        width, height = w, h
    else:
        raise ValueError(f"unknown augmentation {op!r}")
    return out, DatasetRecord(record.image_id, record.file, width, height, list(anns))


# ---------------------------------------------------------------------------
# files

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) from values in [0, 1]."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm_u8(path, data: np.ndarray) -> None:
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """P5 image scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated PGM header at offset {pos}")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise DatasetFormatError(f"{path}: not a binary PGM (offset 0)")
    try:
        w, h, maxval = (int(x) for x in fields[1:])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: bad PGM header near offset {pos}") from exc
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit PGM supported")
    pos += 1
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise DatasetFormatError(f"{path}: pixel data truncated at offset {pos + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def annotations_json(records: list) -> dict:
    images, anns = [], []
    for r in records:
        images.append({"id": r.image_id, "file": r.file, "width": r.width, "height": r.height})
        for cls, (x1, y1, x2, y2) in r.annotations:
            anns.append({"image_id": r.image_id, "category_id": int(cls),
                         "bbox": [x1, y1, x2 - x1, y2 - y1]})
    cats = [{"id": i, "name": n} for i, n in enumerate(CLASS_NAMES)]
    return {"images": images, "annotations": anns, "categories": cats}


def save_dataset(path, samples: list) -> Path:
    """Write ``samples`` [(image, record)] as PGMs plus ``annotations.json`` under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for image, record in samples:
        write_pgm(root / record.file, image)
    doc = annotations_json([r for _, r in samples])
    out = root / "annotations.json"
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def parse_annotations(text: str, source: str = "<annotations>") -> list:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        records = {}
        for im in doc["images"]:
            records[int(im["id"])] = DatasetRecord(int(im["id"]), str(im["file"]),
                                                   int(im["width"]), int(im["height"]))
        for i, a in enumerate(doc["annotations"]):
            x, y, w, h = a["bbox"]
            if not (w > 0 and h > 0):
                raise DatasetFormatError(f"{source}: annotation {i} has non-positive size")
            cls = int(a["category_id"])
            if not 0 <= cls < len(CLASS_NAMES):
                raise DatasetFormatError(f"{source}: annotation {i} has unknown category {cls}")
            rec = records[int(a["image_id"])]
            box = (x, y, x + w, y + h)
            rec.annotations.append((cls, box))
            DatasetRecord(rec.image_id, rec.file, rec.width, rec.height, [(cls, box)])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{source}: malformed annotation document ({exc})") from exc
    return [records[k] for k in sorted(records)]


def load_dataset(path, with_images: bool = True) -> list:
    """[(image or None, record)] from a dataset directory or annotation file."""
    p = Path(path)
    ann = p / "annotations.json" if p.is_dir() else p
    records = parse_annotations(ann.read_text(), str(ann))
    out = []
    for r in records:
        img = read_pgm(ann.parent / r.file) if with_images else None
        if img is not None and img.shape != (r.height, r.width):
            raise DatasetFormatError(f"{r.file}: size {img.shape} disagrees with annotation")
        out.append((img, r))
    return out


def record_to_targets(record: DatasetRecord):
    """Normalised cxcywh boxes and labels for training."""
    b = record.boxes
    if len(b) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    cx = (b[:, 0] + b[:, 2]) / 2 / record.width
    cy = (b[:, 1] + b[:, 3]) / 2 / record.height
    w = (b[:, 2] - b[:, 0]) / record.width
    h = (b[:, 3] - b[:, 1]) / record.height
    return np.stack([cx, cy, w, h], -1), record.labels


def draw_boxes(image: np.ndarray, boxes, value: int = 255) -> np.ndarray:
    """8-bit copy of ``image`` with 1-px rectangle outlines rasterised."""
    out = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = out.shape
    for x1, y1, x2, y2 in boxes:
        x1, y1 = int(np.clip(round(x1), 0, w - 1)), int(np.clip(round(y1), 0, h - 1))
        x2, y2 = int(np.clip(round(x2) - 1, 0, w - 1)), int(np.clip(round(y2) - 1, 0, h - 1))
        out[y1, x1:x2 + 1] = value
        out[y2, x1:x2 + 1] = value
        out[y1:y2 + 1, x1] = value
        out[y1:y2 + 1, x2] = value
    return out
