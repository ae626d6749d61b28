"""Deterministic synthetic image corpus with query/box annotations.

Scenes are simple colored shapes (squares, circles, triangles, stripe and
noise patches) on solid or gradient backgrounds. Visual complexity is
controlled by object count and texture frequency so the corpus spans a wide
range of the Laplacian-variance complexity metric. Every rendered object
carries one query sample naming its color, shape, and coarse location,
plus a tight bounding box; every scene also carries a "null" query with no
boxes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class CorpusError(Exception):
    pass


class PlacementError(CorpusError):
    """Object placement failed after bounded retries."""


class DimensionError(CorpusError):
    """Image dimensions incompatible with the requested patch multiple."""


class UnsupportedFormatError(CorpusError):
    pass


class SceneSpecError(CorpusError):
    pass


# ---------------------------------------------------------------------------
# Vocabulary

COLOR_TABLE = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.9),
    "yellow": (0.95, 0.9, 0.2),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.2, 0.85, 0.9),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.55, 0.1),
}

SHAPE_KINDS = ("square", "circle", "triangle", "stripes", "noise")

LOCATION_GRID = (
    ("top-left", "top", "top-right"),
    ("left", "center", "right"),
    ("bottom-left", "bottom", "bottom-right"),
)

PAD_WORD = "<pad>"
NULL_WORD = "null"

VOCAB: tuple[str, ...] = (
    (PAD_WORD, NULL_WORD)
    + tuple(COLOR_TABLE)
    + SHAPE_KINDS
    + tuple(w for row in LOCATION_GRID for w in row)
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_TO_ID[PAD_WORD]
NULL_ID = WORD_TO_ID[NULL_WORD]


def words_to_ids(words) -> list[int]:
    try:
        return [WORD_TO_ID[w] for w in words]
    except KeyError as e:
        raise CorpusError(f"unknown query word {e.args[0]!r}") from None


def ids_to_words(ids) -> list[str]:
    return [VOCAB[i] for i in ids]


# ---------------------------------------------------------------------------
# Scene specification


Box = tuple[int, int, int, int]  # (x0, y0, x1, y1), inclusive, origin top-left


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    box: Box | None = None          # None -> placed from the seed at render time
    texture_freq: float = 4.0       # cycles per canvas, for stripe patches


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 32
    objects: tuple[ObjectSpec, ...] = ()
    background: str = "gradient"    # "solid" or "gradient"
    bg_colors: tuple | None = None  # up to two RGB triples; None -> seeded

    @property
    def object_count(self) -> int:
        return len(self.objects)

    def validate(self) -> None:
        if self.canvas <= 0:
            raise SceneSpecError(f"canvas must be positive, got {self.canvas}")
        if self.background not in ("solid", "gradient"):
            raise SceneSpecError(f"unknown background {self.background!r}")
        for i, obj in enumerate(self.objects):
            if obj.shape not in SHAPE_KINDS:
                raise SceneSpecError(f"object {i}: unknown shape {obj.shape!r}")
            if obj.color not in COLOR_TABLE:
                raise SceneSpecError(f"object {i}: unknown color {obj.color!r}")
            if obj.box is not None:
                x0, y0, x1, y1 = obj.box
                if not (0 <= x0 <= x1 < self.canvas and 0 <= y0 <= y1 < self.canvas):
                    raise SceneSpecError(f"object {i}: box {obj.box} outside {self.canvas}px canvas")


@dataclass
class QuerySample:
    tokens: list[int]
    boxes: list[Box]
    image_id: str = ""

    @property
    def words(self) -> list[str]:
        return ids_to_words(self.tokens)

    @property
    def is_null(self) -> bool:
        return self.tokens == [NULL_ID]


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, salt])


def _location_word(box: Box, canvas: int) -> str:
    cx = 0.5 * (box[0] + box[2])
    cy = 0.5 * (box[1] + box[3])
    col = 0 if cx < canvas / 3 else (2 if cx >= 2 * canvas / 3 else 1)
    row = 0 if cy < canvas / 3 else (2 if cy >= 2 * canvas / 3 else 1)
    return LOCATION_GRID[row][col]


def _boxes_overlap(a: Box, b: Box, margin: int = 1) -> bool:
    return not (a[2] + margin < b[0] or b[2] + margin < a[0]
                or a[3] + margin < b[1] or b[3] + margin < a[1])


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.canvas
    names = list(COLOR_TABLE)
    if spec.bg_colors is not None:
        colors = [np.asarray(c, dtype=np.float32) for c in spec.bg_colors]
    else:
        picks = rng.choice(len(names), size=2, replace=False)
        colors = [np.asarray(COLOR_TABLE[names[int(p)]], dtype=np.float32) * 0.6 for p in picks]
    if spec.background == "solid" or len(colors) == 1:
        return np.broadcast_to(colors[0], (n, n, 3)).astype(np.float32).copy()
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    alpha = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    return (colors[0] * (1 - alpha[..., None]) + colors[1] * alpha[..., None]).astype(np.float32)


def _object_mask(shape: str, box: Box) -> np.ndarray:
    """Boolean mask of the object's pixels within its box, box-local coords."""
    x0, y0, x1, y1 = box
    h, w = y1 - y0 + 1, x1 - x0 + 1
    if shape in ("square", "stripes", "noise"):
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if shape == "circle":
        rx, ry = max((w - 1) / 2.0, 0.5), max((h - 1) / 2.0, 0.5)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0 + 1e-9
    if shape == "triangle":
        # apex top-center, base along the bottom row
        cx = (w - 1) / 2.0
        half = np.where(h > 1, (yy / max(h - 1, 1)) * (w - 1) / 2.0, (w - 1) / 2.0)
        return np.abs(xx - cx) <= half + 1e-9
    raise SceneSpecError(f"unknown shape {shape!r}")


def _paint_object(img: np.ndarray, obj: ObjectSpec, box: Box, canvas: int,
                  rng: np.random.Generator) -> None:
    x0, y0, x1, y1 = box
    mask = _object_mask(obj.shape, box)
    color = np.asarray(COLOR_TABLE[obj.color], dtype=np.float32)
    h, w = mask.shape
    if obj.shape == "stripes":
        theta = rng.uniform(0.0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        phase = 2.0 * np.pi * obj.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta)) / canvas
        on = np.sin(phase) >= 0.0
        patch = np.where(on[..., None], color, color * 0.2).astype(np.float32)
    elif obj.shape == "noise":
        patch = (rng.random((h, w, 1)).astype(np.float32) * color).astype(np.float32)
    else:
        patch = np.broadcast_to(color, (h, w, 3)).astype(np.float32)
    region = img[y0:y1 + 1, x0:x1 + 1]
    region[mask] = patch[mask]


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, list[QuerySample]]:
    """Render a scene and its query annotations; pure in (spec, seed).

    Returns an (H, W, 3) float32 image in [0, 1] and one QuerySample per
    object (color + shape + coarse location, tight box) plus one "null"
    sample with no boxes.
    """
    spec.validate()
    n = spec.canvas
    rng = _rng(seed, 0x5CE)
    img = _render_background(spec, rng)

    occupied: list[Box] = [o.box for o in spec.objects if o.box is not None]
    boxes: list[Box] = []
    for i, obj in enumerate(spec.objects):
        if obj.box is not None:
            boxes.append(obj.box)
            continue
        lo, hi = max(4, n // 6), max(6, n // 3)
        box = None
        for _try in range(64):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, n - w))
            y0 = int(rng.integers(0, n - h))
            cand = (x0, y0, x0 + w - 1, y0 + h - 1)
            if not any(_boxes_overlap(cand, other) for other in occupied):
                box = cand
                break
        if box is None:
            raise PlacementError(f"could not place object {i} without overlap")
        occupied.append(box)
        boxes.append(box)

    queries: list[QuerySample] = []
    for obj, box in zip(spec.objects, boxes):
        _paint_object(img, obj, box, n, rng)
        words = [obj.color, obj.shape, _location_word(box, n)]
        queries.append(QuerySample(tokens=words_to_ids(words), boxes=[box]))
    queries.append(QuerySample(tokens=[NULL_ID], boxes=[]))
    np.clip(img, 0.0, 1.0, out=img)
    return img, queries


# ---------------------------------------------------------------------------
# Complexity metric

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def laplacian_variance(img: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response on the luminance channel.

    Kernel [[0,1,0],[1,-4,1],[0,1,0]], replicate-padded borders. Invariant
    to constant intensity shifts; scales as s^2 under pixel scaling by s.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (H,W,3) image, got {img.shape}")
    lum = img.astype(np.float64) @ _LUMA
    p = np.pad(lum, 1, mode="edge")
    resp = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * lum
    return float(resp.var())


# ---------------------------------------------------------------------------
# Image IO (PNG and binary PPM in, PNG out)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path, patch_multiple: int | None = None,
               resize_to: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    suffix = path.suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise UnsupportedFormatError(f"unsupported image format {suffix!r} (PNG or binary PPM)")
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        if resize_to is not None:
            im = im.resize((resize_to, resize_to), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if patch_multiple is not None:
        h, w = arr.shape[:2]
        if h % patch_multiple or w % patch_multiple:
            raise DimensionError(
                f"image is {h}x{w}; dimensions must be multiples of {patch_multiple}")
    return arr


# ---------------------------------------------------------------------------
# Augmentation toggles (off by default in training configs)


def bilinear_weight_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix for 1-D bilinear resampling.

    Uses half-pixel centers with edge clamping, so resizing is a plain
    linear map and differentiates through matmul.
    """
    if n_in < 1 or n_out < 1:
        raise DimensionError("bilinear_weight_matrix: sizes must be >= 1")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i1] += frac
    return m.astype(dtype)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rh = bilinear_weight_matrix(img.shape[0], out_h, dtype=np.float64)
    rw = bilinear_weight_matrix(img.shape[1], out_w, dtype=np.float64)
    out = np.einsum("oh,hwc,pw->opc", rh, img.astype(np.float64), rw)
    return out.astype(np.float32)


def augment(img: np.ndarray, rng: np.random.Generator,
            crop_jitter: float = 0.125, grayscale_prob: float = 0.1) -> np.ndarray:
    """Mild random crop (resized back) and occasional grayscale conversion."""
    h, w = img.shape[:2]
    max_dy, max_dx = int(h * crop_jitter), int(w * crop_jitter)
    if max_dy or max_dx:
        y0 = int(rng.integers(0, max_dy + 1))
        x0 = int(rng.integers(0, max_dx + 1))
        y1 = h - int(rng.integers(0, max_dy + 1))
        x1 = w - int(rng.integers(0, max_dx + 1))
        img = bilinear_resize(img[y0:y1, x0:x1], h, w)
    if rng.random() < grayscale_prob:
        lum = (img.astype(np.float64) @ _LUMA).astype(np.float32)
        img = np.repeat(lum[..., None], 3, axis=2)
    return img


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class ManifestEntry:
    label: int
    seed: int | None = None
    path: str | None = None
    queries: list[QuerySample] = field(default_factory=list)


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry]
    generator: dict = field(default_factory=dict)  # kind/canvas/max_objects for seeded entries

    @property
    def n_classes(self) -> int:
        return max((e.label for e in self.entries), default=-1) + 1

    def to_json(self) -> dict:
        ents = []
        for e in self.entries:
            d = {"label": e.label,
                 "queries": [{"tokens": q.words, "boxes": [list(b) for b in q.boxes]}
                             for q in e.queries]}
            if e.seed is not None:
                d["seed"] = e.seed
            else:
                d["path"] = e.path
            ents.append(d)
        return {"split": self.split, "entries": ents, "generator": self.generator}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        entries = []
        for d in obj["entries"]:
            if "seed" not in d and "path" not in d:
                raise CorpusError("manifest entry needs a 'seed' or a 'path'")
            queries = [QuerySample(tokens=words_to_ids(q["tokens"]),
                                   boxes=[tuple(b) for b in q.get("boxes", [])])
                       for q in d.get("queries", [])]
            entries.append(ManifestEntry(label=int(d["label"]), seed=d.get("seed"),
                                         path=d.get("path"), queries=queries))
        return cls(split=obj.get("split", "train"), entries=entries,
                   generator=obj.get("generator", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such manifest: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CorpusError(f"manifest {path} is not valid JSON: {e}") from None
        return cls.from_json(obj)


def scene_spec_from_seed(kind: str, seed: int, canvas: int = 32,
                         max_objects: int = 6) -> SceneSpec:
    """Derive a random scene layout from an entry seed, deterministically."""
    rng = _rng(seed, 0x11)
    colors = list(COLOR_TABLE)
    if kind == "complexity":
        count = int(rng.integers(0, max_objects + 1))
        shapes = [SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))] for _ in range(count)]
        background = "solid" if rng.random() < 0.3 else "gradient"
    elif kind == "shapes4":
        count = 1
        shapes = [SHAPE_KINDS[int(rng.integers(4))]]
        background = "solid" if rng.random() < 0.5 else "gradient"
    else:
        raise CorpusError(f"unknown corpus kind {kind!r}")
    objects = tuple(
        ObjectSpec(shape=s,
                   color=colors[int(rng.integers(len(colors)))],
                   texture_freq=float(rng.uniform(2.0, 10.0)))
        for s in shapes)
    return SceneSpec(canvas=canvas, objects=objects, background=background)


def entry_label(kind: str, spec: SceneSpec) -> int:
    if kind == "complexity":
        return spec.object_count
    if kind == "shapes4":
        return SHAPE_KINDS.index(spec.objects[0].shape)
    raise CorpusError(f"unknown corpus kind {kind!r}")


def build_manifest(kind: str, n: int, seed: int, canvas: int = 32,
                   max_objects: int = 6, split: str = "train") -> DatasetManifest:
    """Generate n seeded entries with labels and query annotations."""
    entries = []
    entry_seeds = _rng(seed, 0x22).integers(0, 2 ** 62, size=n) if n else []
    for i in range(n):
        entry_seed = int(entry_seeds[i])
        spec = scene_spec_from_seed(kind, entry_seed, canvas, max_objects)
        try:
            _img, queries = generate_scene(spec, entry_seed)
        except PlacementError:
            # dense scenes occasionally fail to place; retry with fewer objects
            spec = dataclasses.replace(spec, objects=spec.objects[:max(0, len(spec.objects) - 2)])
            _img, queries = generate_scene(spec, entry_seed)
        entries.append(ManifestEntry(label=entry_label(kind, spec), seed=entry_seed,
                                     queries=queries))
    return DatasetManifest(split=split, entries=entries,
                           generator={"kind": kind, "canvas": canvas,
                                      "max_objects": max_objects, "seed": seed})


def render_entry(manifest: DatasetManifest, entry: ManifestEntry,
                 patch_multiple: int | None = None) -> np.ndarray:
    """Materialize an entry's image, from its seed or from disk."""
    if entry.seed is not None:
        gen = manifest.generator
        spec = scene_spec_from_seed(gen.get("kind", "complexity"), entry.seed,
                                    gen.get("canvas", 32), gen.get("max_objects", 6))
        try:
            img, _ = generate_scene(spec, entry.seed)
        except PlacementError:
            spec = dataclasses.replace(spec, objects=spec.objects[:max(0, len(spec.objects) - 2)])
            img, _ = generate_scene(spec, entry.seed)
        return img
    img = load_image(entry.path, patch_multiple=patch_multiple,
                     resize_to=manifest.generator.get("canvas"))
    return img


def render_all(manifest: DatasetManifest) -> np.ndarray:
    """Stack every entry's image into one (N, H, W, 3) float32 array."""
    return np.stack([render_entry(manifest, e) for e in manifest.entries])
