"""Dataset ingestion, manifests, the PPM codec, and a synthetic generator.

Images are stored as binary PPM (P6, maxval 255) so that decode/encode is
bit-exact and free of codec variance.  A manifest is a JSON-lines file, one
record per line:

    {"path": "images/x.ppm", "label": 3, "boxes": [[x, y, w, h, class], ...]}

``label`` is -1 for background (no-logo) images.  The synthetic generator
renders one colored glyph per foreground image over a procedural background
and writes the same manifest format, which makes desk-scale end-to-end runs
possible without the real corpus.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, LayoutError, ParameterError
from .tensor import Tensor, bilinear_resize, make_rng

NO_LOGO = -1

FLICKR_CLASSES = [
    "adidas", "aldi", "apple", "becks", "bmw", "carlsberg", "chimay",
    "cocacola", "corona", "dhl", "erdinger", "esso", "fedex", "ferrari",
    "ford", "fosters", "google", "guiness", "heineken", "hp", "milka",
    "nvidia", "paulaner", "pepsi", "rittersport", "shell", "singha",
    "starbucks", "stellaartois", "texaco", "tsingtao", "ups",
]


@dataclass
class BBox:
    """Axis-aligned box in pixel coordinates: top-left corner plus extents."""

    x: int
    y: int
    w: int
    h: int
    class_id: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def clamped(self, img_w: int, img_h: int) -> "BBox":
        """Clip to image bounds; degenerate results raise DataError."""
        x0 = max(0, self.x)
        y0 = max(0, self.y)
        x1 = min(self.x + self.w, img_w)
        y1 = min(self.y + self.h, img_h)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            raise DataError(
                f"box ({self.x}, {self.y}, {self.w}, {self.h}) has no area "
                f"inside a {img_w}x{img_h} image")
        return BBox(x0, y0, x1 - x0, y1 - y0, self.class_id)

    def to_list(self):
        return [self.x, self.y, self.w, self.h, self.class_id]


@dataclass
class ImageRecord:
    """One decoded image with its label and (possibly empty) box list."""

    id: str
    pixels: Tensor          # (1, 3, h, w) in [0, 1]
    label: int
    boxes: list[BBox] = field(default_factory=list)

    def validate(self):
        if self.label == NO_LOGO:
            if self.boxes:
                raise DataError(f"background record {self.id!r} carries boxes")
        else:
            if not self.boxes:
                raise DataError(f"foreground record {self.id!r} has no boxes")
            for b in self.boxes:
                if b.class_id != self.label:
                    raise DataError(
                        f"record {self.id!r}: box class {b.class_id} differs "
                        f"from record label {self.label}")


@dataclass
class ManifestEntry:
    path: str               # relative to the manifest's base directory
    label: int
    boxes: list[BBox]

    @property
    def id(self) -> str:
        stem = os.path.basename(self.path)
        return stem[:-4] if stem.endswith(".ppm") else stem


class Manifest:
    """An ordered split of dataset entries plus the class-name table."""

    def __init__(self, split: str, base_dir: str, entries: list[ManifestEntry],
                 class_names: list[str]):
        if len(set(class_names)) != len(class_names):
            raise DataError("class names must be unique")
        paths = [e.path for e in entries]
        if len(set(paths)) != len(paths):
            raise DataError(f"duplicate paths in manifest {split!r}")
        self.split = split
        self.base_dir = base_dir
        self.entries = entries
        self.class_names = class_names

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> set[str]:
        return {e.id for e in self.entries}

    def foreground(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label != NO_LOGO]

    def background(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == NO_LOGO]

    def counts(self) -> dict[str, int]:
        return {"foreground": len(self.foreground()),
                "background": len(self.background())}

    def load_record(self, index: int) -> ImageRecord:
        e = self.entries[index]
        pixels = decode_image(os.path.join(self.base_dir, e.path))
        rec = ImageRecord(e.id, pixels, e.label, list(e.boxes))
        rec.validate()
        return rec

    def save(self, path: str):
        with open(path, "w") as f:
            for e in self.entries:
                row = {"path": e.path, "label": e.label,
                       "boxes": [b.to_list() for b in e.boxes]}
                f.write(json.dumps(row, separators=(",", ":")) + "\n")


def load_manifest(path: str, class_names: list[str],
                  split: str | None = None) -> Manifest:
    """Read a JSON-lines manifest; paths resolve against the file's directory."""
    base_dir = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                boxes = [BBox(int(b[0]), int(b[1]), int(b[2]), int(b[3]),
                              int(b[4])) for b in row["boxes"]]
                entry = ManifestEntry(row["path"], int(row["label"]), boxes)
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line: {exc}")
            entries.append(entry)
    name = split or os.path.splitext(os.path.basename(path))[0]
    return Manifest(name, base_dir, entries, class_names)


# ---------------------------------------------------------------------------
# PPM codec
# ---------------------------------------------------------------------------

def encode_image(pixels: Tensor | np.ndarray, path: str):
    """Write a (1, 3, h, w) or (3, h, w) tensor in [0, 1] as binary PPM."""
    arr = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ParameterError(f"encode_image: expected 3-channel image, got "
                             f"shape {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape[1:]
    interleaved = quantized.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(interleaved)


def _read_ppm_token(f) -> bytes:
    """Next whitespace-delimited token, skipping # comments."""
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise FormatError("truncated PPM header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def decode_image(path: str) -> Tensor:
    """Read a binary PPM (P6, maxval 255) into a (1, 3, h, w) tensor in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise FormatError(f"{path}: not a binary PPM (magic {magic!r}, "
                              f"expected b'P6')")
        w = int(_read_ppm_token(f))
        h = int(_read_ppm_token(f))
        maxval = int(_read_ppm_token(f))
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval}")
        payload = f.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise FormatError(f"{path}: truncated pixel payload "
                              f"({len(payload)} of {3 * w * h} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return Tensor(arr.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess(record: ImageRecord, target_size: tuple[int, int],
               mean: np.ndarray) -> Tensor:
    """Bilinear-resize to target and subtract per-channel means."""
    th, tw = target_size
    if th < 8 or tw < 8:
        raise ParameterError(f"preprocess: target {th}x{tw} below 8x8 minimum")
    resized = bilinear_resize(record.pixels, th, tw)
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3, 1, 1)
    return Tensor(resized.data - mean)


def scale_boxes(boxes: list[BBox], sx: float, sy: float) -> list[BBox]:
    """Rescale box geometry by the same factors applied to the image."""
    return [BBox(int(round(b.x * sx)), int(round(b.y * sy)),
                 max(1, int(round(b.w * sx))), max(1, int(round(b.h * sy))),
                 b.class_id) for b in boxes]


def channel_means(manifest: Manifest, limit: int | None = None) -> np.ndarray:
    """Per-channel pixel means over a split (recorded in run configs)."""
    total = np.zeros(3)
    count = 0
    for i in range(len(manifest) if limit is None else min(limit, len(manifest))):
        rec = manifest.load_record(i)
        total += rec.pixels.data.mean(axis=(0, 2, 3))
        count += 1
    if count == 0:
        raise DataError("channel_means: empty manifest")
    return total / count


# ---------------------------------------------------------------------------
# FlickrLogos-32 layout
# ---------------------------------------------------------------------------

def _parse_bbox_file(path: str) -> list[tuple[int, int, int, int]]:
    """Parse `x y w h` lines; a leading header naming the columns is allowed."""
    boxes = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if lineno == 1 and not parts[0].lstrip("-").isdigit():
                continue  # column header like "x y width height"
            if len(parts) < 4:
                raise DataError(f"{path}:{lineno}: expected 'x y w h', got "
                                f"{line!r}")
            try:
                x, y, w, h = (int(p) for p in parts[:4])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer box field in "
                                f"{line!r}")
            boxes.append((x, y, w, h))
    return boxes


TABLE_COUNTS = {"trainval": (1280, 3000), "test": (960, 3000)}


def load_flickrlogos(root: str, warn=print) -> tuple[Manifest, Manifest]:
    """Load the FlickrLogos-32 directory layout.

    Expected under ``root``:

        trainvalset.txt / testset.txt   one relative image path per line
        jpg/<class>/<image>.ppm         foreground images (converted to PPM)
        jpg/no-logo/<image>.ppm         background images
        masks/<class>/<image>.ppm.bboxes.txt   annotations, `x y w h` rows

    Counts are compared against the published split sizes (1280/960
    foreground, 3000/3000 background); a mismatch warns but does not fail.
    """
    manifests = []
    for split in ("trainval", "test"):
        list_path = os.path.join(root, f"{split}set.txt")
        if not os.path.isfile(list_path):
            raise LayoutError(f"missing split list {list_path}")
        entries = []
        with open(list_path) as f:
            rel_paths = [line.strip() for line in f if line.strip()]
        for rel in rel_paths:
            img_path = os.path.join(root, rel)
            if not os.path.isfile(img_path):
                raise LayoutError(f"{list_path} references missing image {rel}")
            class_dir = os.path.basename(os.path.dirname(rel))
            if class_dir == "no-logo":
                entries.append(ManifestEntry(rel, NO_LOGO, []))
                continue
            if class_dir not in FLICKR_CLASSES:
                raise LayoutError(f"{rel}: unknown class directory "
                                  f"{class_dir!r}")
            label = FLICKR_CLASSES.index(class_dir)
            ann = os.path.join(root, "masks", class_dir,
                               os.path.basename(rel) + ".bboxes.txt")
            if not os.path.isfile(ann):
                raise LayoutError(f"missing bbox annotation {ann}")
            img = decode_image(img_path)
            img_h, img_w = img.shape[2], img.shape[3]
            boxes = [BBox(x, y, w, h, label).clamped(img_w, img_h)
                     for x, y, w, h in _parse_bbox_file(ann)]
            if not boxes:
                raise DataError(f"{ann}: no boxes for foreground image {rel}")
            entries.append(ManifestEntry(rel, label, boxes))
        manifest = Manifest(split, root, entries, list(FLICKR_CLASSES))
        fg, bg = manifest.counts()["foreground"], manifest.counts()["background"]
        want_fg, want_bg = TABLE_COUNTS[split]
        if (fg, bg) != (want_fg, want_bg):
            warn(f"warning: {split} counts fg={fg} bg={bg} differ from the "
                 f"published {want_fg}/{want_bg}")
        manifests.append(manifest)
    return manifests[0], manifests[1]


# ---------------------------------------------------------------------------
# synthetic glyph-logo generator
# ---------------------------------------------------------------------------

GLYPH_SIDE = 7
_GLYPH_ALPHABET_SEED = 0x1060
_GLYPH_ALPHABET_SIZE = 64
_MIN_HAMMING = 10


def glyph_alphabet(size: int = _GLYPH_ALPHABET_SIZE) -> np.ndarray:
    """Deterministic alphabet of distinct 7x7 binary glyph masks.

    Masks are rejection-sampled from a fixed internal seed with a minimum
    pairwise Hamming distance, so class identities are stable across runs
    and independent of any dataset seed.
    """
    rng = make_rng(_GLYPH_ALPHABET_SEED)
    glyphs: list[np.ndarray] = []
    while len(glyphs) < size:
        cand = (rng.random((GLYPH_SIDE, GLYPH_SIDE)) < 0.45)
        cand[GLYPH_SIDE // 2, GLYPH_SIDE // 2] = True
        # Touch all four bitmap edges so a glyph's pixel extent tracks its
        # nominal size.
        edge = rng.integers(0, GLYPH_SIDE, size=4)
        cand[0, edge[0]] = cand[GLYPH_SIDE - 1, edge[1]] = True
        cand[edge[2], 0] = cand[edge[3], GLYPH_SIDE - 1] = True
        if cand.sum() < 14:
            continue
        if all(np.count_nonzero(cand ^ g) >= _MIN_HAMMING for g in glyphs):
            glyphs.append(cand)
    return np.stack(glyphs)


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    """Saturated RGB color from an evenly spaced hue wheel."""
    hue = (class_id / max(1, num_classes)) * 6.0
    i = int(hue) % 6
    f = hue - int(hue)
    v, p, q, t = 0.95, 0.1, 0.95 * (1 - 0.9 * f), 0.1 + 0.85 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


@dataclass
class SyntheticConfig:
    num_classes: int = 8
    train_per_class: int = 40
    test_per_class: int = 20
    image_size: int = 64
    scale_range: tuple[float, float] = (0.05, 0.8)
    train_background: int = 0
    test_background: int = 0
    noise_level: float = 0.04
    class_offset: int = 0    # pick glyphs/colors from alphabet[offset:]

    def validate(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ParameterError(f"scale_range {self.scale_range} must lie "
                                 f"within (0, 1]")
        if self.num_classes + self.class_offset > _GLYPH_ALPHABET_SIZE:
            raise ParameterError(
                f"num_classes {self.num_classes} (+offset {self.class_offset}) "
                f"exceeds the glyph alphabet size {_GLYPH_ALPHABET_SIZE}")
        if self.num_classes < 1 or self.image_size < 16:
            raise ParameterError("need num_classes >= 1 and image_size >= 16")

    def to_json_dict(self):
        return {"num_classes": self.num_classes,
                "train_per_class": self.train_per_class,
                "test_per_class": self.test_per_class,
                "image_size": self.image_size,
                "scale_range": list(self.scale_range),
                "train_background": self.train_background,
                "test_background": self.test_background,
                "noise_level": self.noise_level,
                "class_offset": self.class_offset}


def _procedural_background(rng, size: int) -> np.ndarray:
    """Muted background: base tone plus two linear gradients."""
    base = rng.uniform(0.25, 0.7)
    img = np.full((3, size, size), base)
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, size),
                         np.linspace(-0.5, 0.5, size), indexing="ij")
    for _ in range(2):
        angle = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.15)
        channel_mix = rng.uniform(0.5, 1.0, size=3).reshape(3, 1, 1)
        img += amp * channel_mix * (np.cos(angle) * xx + np.sin(angle) * yy)
    return img


def _render_glyph(rng, mask: np.ndarray, glyph_px: int):
    """Rasterize a rotated, scaled glyph; returns a binary canvas.

    Rotations are quarter turns plus a small jitter so the rendered pixel
    extent stays close to the nominal glyph size.
    """
    quarter = int(rng.integers(0, 4))
    jitter = rng.uniform(-np.deg2rad(2.0), np.deg2rad(2.0))
    angle = quarter * (np.pi / 2) + jitter
    canvas_px = int(np.ceil(glyph_px * 1.1)) + 2
    center = (canvas_px - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(canvas_px), np.arange(canvas_px),
                         indexing="ij")
    dy, dx = ys - center, xs - center
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    src_y = (cos_a * dy - sin_a * dx) / glyph_px * GLYPH_SIDE + GLYPH_SIDE / 2.0
    src_x = (sin_a * dy + cos_a * dx) / glyph_px * GLYPH_SIDE + GLYPH_SIDE / 2.0
    iy = np.floor(src_y).astype(int)
    ix = np.floor(src_x).astype(int)
    inside = (iy >= 0) & (iy < GLYPH_SIDE) & (ix >= 0) & (ix < GLYPH_SIDE)
    canvas = np.zeros((canvas_px, canvas_px), dtype=bool)
    canvas[inside] = mask[iy[inside], ix[inside]]
    return canvas


def _render_foreground(rng, cfg: SyntheticConfig, glyphs, class_id: int):
    size = cfg.image_size
    img = _procedural_background(rng, size)
    mask = glyphs[cfg.class_offset + class_id]
    color = class_color(cfg.class_offset + class_id, _GLYPH_ALPHABET_SIZE)

    while True:
        scale = rng.uniform(*cfg.scale_range)
        glyph_px = max(3, int(round(scale * size)))
        canvas = _render_glyph(rng, mask, glyph_px)
        canvas_px = canvas.shape[0]
        if canvas_px >= size:
            canvas = canvas[:size, :size]
            canvas_px = size
        if canvas.any():
            break

    x0 = int(rng.integers(0, size - canvas_px + 1))
    y0 = int(rng.integers(0, size - canvas_px + 1))
    region = img[:, y0:y0 + canvas_px, x0:x0 + canvas_px]
    region[:, canvas] = color.reshape(3, 1)

    img += rng.normal(0.0, cfg.noise_level, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)

    ys, xs = np.nonzero(canvas)
    bx = x0 + xs.min()
    by = y0 + ys.min()
    box = BBox(int(bx), int(by), int(xs.max() - xs.min() + 1),
               int(ys.max() - ys.min() + 1), class_id)
    return img, box


def generate_synthetic(config: SyntheticConfig, seed, root: str
                       ) -> tuple[Manifest, Manifest]:
    """Render both splits to ``root`` and return their manifests.

    Foreground images hold exactly one glyph logo at a seeded scale,
    position, and rotation; the ground-truth box is the exact pixel bound
    of the rendered glyph.  A fixed seed reproduces files byte for byte.
    """
    config.validate()
    rng = make_rng(seed)
    glyphs = glyph_alphabet()
    os.makedirs(os.path.join(root, "images"), exist_ok=True)

    class_names = [f"class{config.class_offset + c:02d}"
                   for c in range(config.num_classes)]
    manifests = []
    plan = [("trainval", config.train_per_class, config.train_background),
            ("test", config.test_per_class, config.test_background)]
    for split, per_class, n_background in plan:
        entries = []
        for i in range(per_class):
            for c in range(config.num_classes):
                rec_id = f"{split}_c{c:02d}_{i:04d}"
                img, box = _render_foreground(rng, config, glyphs, c)
                rel = os.path.join("images", rec_id + ".ppm")
                encode_image(img, os.path.join(root, rel))
                decoded_box = box  # box refers to pre-quantization pixels
                entries.append(ManifestEntry(rel, c, [decoded_box]))
        for i in range(n_background):
            rec_id = f"{split}_bg_{i:04d}"
            img = _procedural_background(rng, config.image_size)
            img += rng.normal(0.0, config.noise_level, size=img.shape)
            np.clip(img, 0.0, 1.0, out=img)
            rel = os.path.join("images", rec_id + ".ppm")
            encode_image(img, os.path.join(root, rel))
            entries.append(ManifestEntry(rel, NO_LOGO, []))
        manifest = Manifest(split, root, entries, class_names)
        manifest.save(os.path.join(root, f"{split}.jsonl"))
        manifests.append(manifest)

    with open(os.path.join(root, "classes.json"), "w") as f:
        json.dump(class_names, f)
    with open(os.path.join(root, "synthetic_config.json"), "w") as f:
        json.dump({"seed": int(seed), **config.to_json_dict()}, f, indent=2)
    return manifests[0], manifests[1]


def load_synthetic_root(root: str) -> tuple[Manifest, Manifest]:
    """Reload manifests written by generate_synthetic."""
    classes_path = os.path.join(root, "classes.json")
    if not os.path.isfile(classes_path):
        raise LayoutError(f"{root}: missing classes.json (not a generated "
                          f"dataset root?)")
    with open(classes_path) as f:
        class_names = json.load(f)
    out = []
    for split in ("trainval", "test"):
        p = os.path.join(root, f"{split}.jsonl")
        if not os.path.isfile(p):
            raise LayoutError(f"{root}: missing {split}.jsonl")
        out.append(load_manifest(p, class_names, split))
    return out[0], out[1]
