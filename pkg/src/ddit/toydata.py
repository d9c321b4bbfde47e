"""Procedural multimodal toy corpus: flat-color face-like scenes.

Each sample is a small RGB image built from one elliptical face with a hair
band, two eye disks, and an optional pendant over a solid background, plus
the exact label map used while painting it, an edge sketch of that label
map, and a symbolic caption listing the attribute tokens.  Every region is
filled with a single palette color per (class, attribute) pair, so a
nearest-palette-color segmenter recovers the mask exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError, PersistenceError

# Semantic classes of the label map (painter's order).
BACKGROUND, SKIN, HAIR, EYES, ACCESSORY = range(5)
NUM_CLASSES = 5
CLASS_NAMES = ("background", "skin", "hair", "eyes", "accessory")

# Attribute fields in canonical caption order, with vocabulary sizes.
ATTRIBUTE_FIELDS = ("background", "face", "hair", "eyes", "accessory")
ATTRIBUTE_SIZES = {"background": 3, "face": 3, "hair": 4, "eyes": 3, "accessory": 2}

NULL_TOKEN = 0
VOCAB = (
    "<null>",
    "BG_BLUE", "BG_GREEN", "BG_PURPLE",
    "FACE_ROUND", "FACE_OVAL", "FACE_NARROW",
    "HAIR_BLACK", "HAIR_RED", "HAIR_BLOND", "HAIR_BLUE",
    "EYES_BLUE", "EYES_GREEN", "EYES_BROWN",
    "ACC_NONE", "ACC_PENDANT",
)
VOCAB_SIZE = len(VOCAB)
CAPTION_LENGTH = len(ATTRIBUTE_FIELDS)

# First token id of each attribute field.
_FIELD_BASE = {}
_base = 1
for _field in ATTRIBUTE_FIELDS:
    _FIELD_BASE[_field] = _base
    _base += ATTRIBUTE_SIZES[_field]

# Flat rendering palette, one color per (class, attribute value), ordered by
# class then value so that np.argmin tie-breaking favors the lowest class.
PALETTE = (
    (BACKGROUND, 0, "BG_BLUE", (70, 110, 230)),
    (BACKGROUND, 1, "BG_GREEN", (60, 180, 90)),
    (BACKGROUND, 2, "BG_PURPLE", (155, 80, 205)),
    (SKIN, 0, "FACE_ROUND", (250, 225, 185)),
    (SKIN, 1, "FACE_OVAL", (205, 150, 95)),
    (SKIN, 2, "FACE_NARROW", (135, 90, 60)),
    (HAIR, 0, "HAIR_BLACK", (25, 25, 25)),
    (HAIR, 1, "HAIR_RED", (220, 45, 40)),
    (HAIR, 2, "HAIR_BLOND", (240, 200, 60)),
    (HAIR, 3, "HAIR_BLUE", (45, 55, 160)),
    (EYES, 0, "EYES_BLUE", (0, 195, 255)),
    (EYES, 1, "EYES_GREEN", (80, 235, 120)),
    (EYES, 2, "EYES_BROWN", (100, 60, 10)),
    (ACCESSORY, 1, "ACC_PENDANT", (255, 85, 195)),
)
PALETTE_COLORS = np.array([entry[3] for entry in PALETTE], dtype=np.uint8)
PALETTE_CLASSES = np.array([entry[0] for entry in PALETTE], dtype=np.uint8)

# Canonical per-class colors used to rasterize masks as conditioning input
# and as the display palette of stored mask PNGs.  Constant across samples,
# so the condition raster never leaks attribute values.
CLASS_COLORS = np.array(
    [(0, 0, 0), (255, 255, 255), (255, 0, 0), (0, 255, 0), (0, 0, 255)], dtype=np.uint8
)

VALID_SIZES = (32, 64)
ID_WIDTH = 6


@dataclass(frozen=True)
class ToyAttributes:
    """Discrete scene attributes; one value per caption field."""

    background: int
    face: int
    hair: int
    eyes: int
    accessory: bool

    def __post_init__(self):
        for field in ("background", "face", "hair", "eyes"):
            value = getattr(self, field)
            if not 0 <= value < ATTRIBUTE_SIZES[field]:
                raise InputError(f"{field} index {value} outside vocabulary")

    def as_values(self) -> tuple[int, ...]:
        return (self.background, self.face, self.hair, self.eyes, int(self.accessory))


@dataclass
class ToySample:
    """One synthesized record: rasters plus symbolic annotations."""

    image: np.ndarray  # (S, S, 3) uint8
    mask: np.ndarray  # (S, S) uint8, labels in [0, NUM_CLASSES)
    sketch: np.ndarray  # (S, S) uint8 in {0, 1}
    caption: tuple[int, ...]
    attributes: ToyAttributes
    sample_id: int


def attributes_to_tokens(attrs: ToyAttributes) -> tuple[int, ...]:
    """Caption token ids in canonical field order."""
    return tuple(
        _FIELD_BASE[field] + value
        for field, value in zip(ATTRIBUTE_FIELDS, attrs.as_values())
    )


def tokens_to_attributes(tokens) -> ToyAttributes:
    """Decode a full-length caption back to its attributes."""
    toks = [int(t) for t in tokens if int(t) != NULL_TOKEN]
    if len(toks) != CAPTION_LENGTH:
        raise InputError(f"expected {CAPTION_LENGTH} attribute tokens, got {len(toks)}")
    values = []
    for field, tok in zip(ATTRIBUTE_FIELDS, toks):
        value = tok - _FIELD_BASE[field]
        if not 0 <= value < ATTRIBUTE_SIZES[field]:
            raise InputError(f"token {tok} is not a {field} token")
        values.append(value)
    return ToyAttributes(values[0], values[1], values[2], values[3], bool(values[4]))


def token_id(name: str) -> int:
    try:
        return VOCAB.index(name)
    except ValueError:
        raise InputError(f"unknown caption token {name!r}") from None


def palette_color(class_id: int, value: int) -> np.ndarray:
    for cls, val, _, rgb in PALETTE:
        if cls == class_id and val == value:
            return np.array(rgb, dtype=np.uint8)
    raise InputError(f"no palette entry for class {class_id} value {value}")


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def sketch_from_mask(mask: np.ndarray) -> np.ndarray:
    """Edge map of a label raster: any label change between 4-neighbors marks both pixels."""
    edges = np.zeros_like(mask, dtype=bool)
    horiz = mask[:, 1:] != mask[:, :-1]
    edges[:, 1:] |= horiz
    edges[:, :-1] |= horiz
    vert = mask[1:, :] != mask[:-1, :]
    edges[1:, :] |= vert
    edges[:-1, :] |= vert
    return edges.astype(np.uint8)


def synthesize_scene(seed: int, sample_id: int, size: int = 32) -> ToySample:
    """Render one deterministic scene for (seed, sample_id).

    Attributes are drawn from an RNG keyed on (seed, sample_id); geometry
    jitter is keyed on (seed, attributes), so the attribute tuple fully
    determines the rendered scene for a given seed.
    """
    if size not in VALID_SIZES:
        raise ConfigError(f"size must be one of {VALID_SIZES}, got {size}")

    attr_rng = np.random.default_rng((seed, sample_id))
    attrs = ToyAttributes(
        background=int(attr_rng.integers(ATTRIBUTE_SIZES["background"])),
        face=int(attr_rng.integers(ATTRIBUTE_SIZES["face"])),
        hair=int(attr_rng.integers(ATTRIBUTE_SIZES["hair"])),
        eyes=int(attr_rng.integers(ATTRIBUTE_SIZES["eyes"])),
        accessory=bool(attr_rng.integers(2)),
    )
    geom_rng = np.random.default_rng((seed, 101) + attrs.as_values())

    # generous placement/size jitter so masks differ substantially between
    # samples and spatial conditioning carries real information
    s = float(size)
    cy = s / 2.0 + geom_rng.uniform(-0.10, 0.10) * s
    cx = s / 2.0 + geom_rng.uniform(-0.10, 0.10) * s
    shape_ry, shape_rx = ((0.92, 0.92), (1.05, 0.78), (1.05, 0.60))[attrs.face]
    ry = 0.30 * s * shape_ry * (1.0 + geom_rng.uniform(-0.15, 0.15))
    rx = 0.30 * s * shape_rx * (1.0 + geom_rng.uniform(-0.15, 0.15))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.full((size, size), BACKGROUND, dtype=np.uint8)

    face = _ellipse(yy, xx, cy, cx, ry, rx)
    mask[face] = SKIN
    hair = face & (yy <= cy - 0.35 * ry)
    mask[hair] = HAIR
    eye_cy = cy - 0.05 * ry
    eye_dx = 0.45 * rx
    eye_r = max(1.2, 0.17 * rx)
    for side in (-1.0, 1.0):
        mask[_disk(yy, xx, eye_cy, cx + side * eye_dx, eye_r)] = EYES
    if attrs.accessory:
        acc_r = max(1.4, 0.20 * rx)
        mask[_disk(yy, xx, cy + 0.55 * ry, cx, acc_r)] = ACCESSORY

    colors = np.zeros((NUM_CLASSES, 3), dtype=np.uint8)
    colors[BACKGROUND] = palette_color(BACKGROUND, attrs.background)
    colors[SKIN] = palette_color(SKIN, attrs.face)
    colors[HAIR] = palette_color(HAIR, attrs.hair)
    colors[EYES] = palette_color(EYES, attrs.eyes)
    colors[ACCESSORY] = palette_color(ACCESSORY, 1) if attrs.accessory else 0
    image = colors[mask]

    return ToySample(
        image=image,
        mask=mask,
        sketch=sketch_from_mask(mask),
        caption=attributes_to_tokens(attrs),
        attributes=attrs,
        sample_id=sample_id,
    )


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    """Rasterize a label map with canonical class colors, (S, S, 3) uint8."""
    return CLASS_COLORS[mask]


def sketch_to_rgb(sketch: np.ndarray) -> np.ndarray:
    """Rasterize a {0,1} sketch as {0,255} grayscale replicated to RGB."""
    gray = (sketch.astype(np.uint8) * 255)[..., None]
    return np.repeat(gray, 3, axis=-1)


def _save_mask_png(mask: np.ndarray, path: Path) -> None:
    img = Image.fromarray(mask, mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[:NUM_CLASSES] = CLASS_COLORS
    img.putpalette(palette.flatten().tolist())
    img.save(path, format="PNG")


def _save_sketch_png(sketch: np.ndarray, path: Path) -> None:
    img = Image.fromarray((sketch * 255).astype(np.uint8), mode="L")
    img.convert("1", dither=Image.Dither.NONE).save(path, format="PNG")


def write_dataset(n: int, seed: int, out_dir, size: int = 32) -> dict:
    """Persist n samples under out_dir and return per-attribute counts.

    Layout: images/{id}.png, masks/{id}.png (paletted), sketches/{id}.png
    (bilevel), manifest.jsonl with one {id, caption_tokens, attributes}
    object per line, and vocab.json describing the caption token table.
    """
    if n < 1:
        raise InputError(f"need at least one sample, got n={n}")
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "sketches"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create dataset directory {out}: {exc}") from exc

    counts = {field: {} for field in ATTRIBUTE_FIELDS}
    try:
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as manifest:
            for i in range(n):
                sample = synthesize_scene(seed, i, size)
                stem = f"{i:0{ID_WIDTH}d}.png"
                Image.fromarray(sample.image, mode="RGB").save(out / "images" / stem, format="PNG")
                _save_mask_png(sample.mask, out / "masks" / stem)
                _save_sketch_png(sample.sketch, out / "sketches" / stem)
                record = {
                    "id": i,
                    "caption_tokens": list(sample.caption),
                    "attributes": asdict(sample.attributes),
                }
                manifest.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
                for field, tok in zip(ATTRIBUTE_FIELDS, sample.caption):
                    name = VOCAB[tok]
                    counts[field][name] = counts[field].get(name, 0) + 1
        vocab_info = {
            "tokens": list(VOCAB),
            "null_token": NULL_TOKEN,
            "caption_length": CAPTION_LENGTH,
            "fields": {f: ATTRIBUTE_SIZES[f] for f in ATTRIBUTE_FIELDS},
        }
        (out / "vocab.json").write_text(json.dumps(vocab_info, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"failed writing dataset under {out}: {exc}") from exc
    return {"n": n, "seed": seed, "size": size, "per_attribute": counts}


@dataclass
class LoadedSample:
    """One dataset record read back from disk."""

    sample_id: int
    image: np.ndarray
    mask: np.ndarray
    sketch: np.ndarray
    caption: tuple[int, ...]
    attributes: ToyAttributes


def load_dataset(dataset_dir) -> list[LoadedSample]:
    """Read every manifest record and its rasters, ordered by id."""
    root = Path(dataset_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise PersistenceError(f"missing manifest {manifest}")
    samples = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        i = int(record["id"])
        stem = f"{i:0{ID_WIDTH}d}.png"
        try:
            image = np.asarray(Image.open(root / "images" / stem).convert("RGB"))
            mask = np.asarray(Image.open(root / "masks" / stem)).astype(np.uint8)
            sketch = np.asarray(Image.open(root / "sketches" / stem)).astype(np.uint8)
        except OSError as exc:
            raise PersistenceError(f"cannot read rasters for id {i} under {root}: {exc}") from exc
        attrs = record["attributes"]
        samples.append(
            LoadedSample(
                sample_id=i,
                image=image,
                mask=mask,
                sketch=sketch,
                caption=tuple(int(t) for t in record["caption_tokens"]),
                attributes=ToyAttributes(
                    background=attrs["background"],
                    face=attrs["face"],
                    hair=attrs["hair"],
                    eyes=attrs["eyes"],
                    accessory=bool(attrs["accessory"]),
                ),
            )
        )
    samples.sort(key=lambda s: s.sample_id)
    return samples


def train_holdout_split(n: int) -> tuple[list[int], list[int]]:
    """Deterministic split: the last 10% of sample ids are held out."""
    held = max(1, n // 10)
    return list(range(n - held)), list(range(n - held, n))
