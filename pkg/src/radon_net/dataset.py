"""Two-domain image collections: manifest I/O, class splits, preprocessing and
the synthetic glyph benchmark.

Domain 0 is the side/RGB source, domain 1 the overhead/IR source.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor

MANIFEST_FIELDS = ("image_path", "class_id", "domain", "split")
SPLITS = ("known", "novel")


class DatasetError(ValueError):
    pass


class ImageFormatError(DatasetError):
    pass


# ------------------------------------------------------------------ index


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    class_id: str
    domain: int
    path: Path


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[ImageRecord, ...]
    split: Mapping[str, str] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        by_cd: dict[tuple[str, int], list[ImageRecord]] = {}
        order: dict[str, None] = {}
        for rec in self.records:
            by_cd.setdefault((rec.class_id, rec.domain), []).append(rec)
            order.setdefault(rec.class_id)
        object.__setattr__(self, "_by_cd", by_cd)
        object.__setattr__(self, "_classes", tuple(sorted(order)))
        object.__setattr__(self, "_by_id", {r.image_id: r for r in self.records})

    @property
    def classes(self) -> tuple[str, ...]:
        return self._classes

    def images(self, class_id: str, domain: int) -> list[ImageRecord]:
        return self._by_cd.get((class_id, domain), [])

    def record(self, image_id: str) -> ImageRecord:
        return self._by_id[image_id]

    def counts(self) -> dict[str, tuple[int, int]]:
        return {c: (len(self.images(c, 0)), len(self.images(c, 1))) for c in self.classes}

    def positive_classes(self, classes: Optional[Iterable[str]] = None) -> list[str]:
        pool = self.classes if classes is None else classes
        return [c for c in pool if self.images(c, 0) and self.images(c, 1)]

    @property
    def is_split(self) -> bool:
        return bool(self.split)

    def split_of(self, class_id: str) -> str:
        return self.split.get(class_id, "")

    def classes_in(self, split: str) -> list[str]:
        return [c for c in self.classes if self.split.get(c) == split]

    @property
    def known_classes(self) -> list[str]:
        return self.classes_in("known")

    @property
    def novel_classes(self) -> list[str]:
        return self.classes_in("novel")


def _row_error(line: int, msg: str) -> DatasetError:
    return DatasetError(f"manifest line {line}: {msg}")


def load_index(manifest_path, check_files: bool = True) -> DatasetIndex:
    """Parse a manifest CSV (``image_path,class_id,domain[,split]``).

    Relative image paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"manifest {manifest_path} is empty") from None
        header = [h.strip() for h in header]
        missing = [h for h in MANIFEST_FIELDS[:3] if h not in header]
        if missing:
            raise _row_error(1, f"header lacks column(s) {missing}; got {header}")
        col = {h: i for i, h in enumerate(header)}
        records: list[ImageRecord] = []
        split: dict[str, str] = {}
        seen: set[str] = set()
        n_blank = 0
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise _row_error(line_no, f"expected {len(header)} fields, got {len(row)}")
            image_path = row[col["image_path"]].strip()
            class_id = row[col["class_id"]].strip()
            domain_s = row[col["domain"]].strip()
            if not image_path:
                raise _row_error(line_no, "empty image_path")
            if not class_id:
                raise _row_error(line_no, "empty class_id")
            if domain_s not in ("0", "1"):
                raise _row_error(line_no, f"domain must be 0 or 1, got {domain_s!r}")
            if image_path in seen:
                raise _row_error(line_no, f"duplicate image {image_path!r}")
            seen.add(image_path)
            path = Path(image_path)
            full = path if path.is_absolute() else root / path
            if check_files and not full.is_file():
                raise _row_error(line_no, f"image file not found: {full}")
            s = row[col["split"]].strip() if "split" in col else ""
            if s:
                if s not in SPLITS:
                    raise _row_error(line_no, f"split must be one of {SPLITS} or blank, got {s!r}")
                if split.setdefault(class_id, s) != s:
                    raise _row_error(line_no, f"class {class_id!r} assigned to both splits")
            else:
                n_blank += 1
            records.append(ImageRecord(image_path, class_id, int(domain_s), full))
    if not records:
        raise DatasetError(f"manifest {manifest_path} has no rows")
    if split and n_blank:
        raise DatasetError(f"manifest {manifest_path}: split column is only partially filled")
    return DatasetIndex(tuple(records), split, root)


def manifest_text(index: DatasetIndex) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for rec in index.records:
        writer.writerow([rec.image_id, rec.class_id, rec.domain, index.split_of(rec.class_id)])
    return buf.getvalue()


def write_manifest(index: DatasetIndex, path) -> Path:
    path = Path(path)
    path.write_text(manifest_text(index), encoding="utf-8")
    return path


def split_classes(index: DatasetIndex, novel_count: int, seed: int) -> DatasetIndex:
    """Hold out ``novel_count`` classes, drawn uniformly without replacement."""
    classes = list(index.classes)
    if not 0 < novel_count < len(classes):
        raise DatasetError(f"novel_count must be in 1..{len(classes) - 1}, got {novel_count}")
    rng = np.random.default_rng(seed)
    novel = set(rng.choice(len(classes), size=novel_count, replace=False).tolist())
    split = {c: ("novel" if i in novel else "known") for i, c in enumerate(classes)}
    return replace(index, split=split)


# ---------------------------------------------------------------- images


@dataclass(frozen=True)
class PreprocessSpec:
    crop_top_fraction: float = 1.0
    output_height: int = 64
    output_width: int = 64
    grayscale: bool = True

    def __post_init__(self):
        if not 0.0 < self.crop_top_fraction <= 1.0:
            raise DatasetError(f"crop_top_fraction must be in (0, 1], got {self.crop_top_fraction}")
        if self.output_height < 1 or self.output_width < 1:
            raise DatasetError(f"output size must be positive, got {self.output_height}x{self.output_width}")

    @property
    def channels(self) -> int:
        return 1 if self.grayscale else 3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.output_height, self.output_width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PreprocessSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown preprocess keys {sorted(unknown)}")
        return cls(**d)


def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) with maxval 255 to uint8 [H,W] or [H,W,3]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported image format (magic {magic!r}); need P5 or P6")
    tokens, start = _pnm_tokens(buf[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PNM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: empty image {w}x{h}")
    ch = 1 if magic == b"P5" else 3
    raster = buf[2 + start:]
    need = w * h * ch
    if len(raster) < need:
        raise ImageFormatError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster[:need], dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ImageFormatError(f"write_pnm expects uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"write_pnm expects [H,W] or [H,W,3], got {pixels.shape}")
    h, w = pixels.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes())


def nearest_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return img[rows][:, cols]


def preprocess(pixels: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Crop the top rows, convert, resize and scale uint8 pixels to float32 [C,H,W] in [-1, 1]."""
    h = pixels.shape[0]
    keep = int(round(spec.crop_top_fraction * h))
    if keep < 1:
        raise DatasetError(f"crop_top_fraction {spec.crop_top_fraction} leaves no rows of a {h}-row image")
    img = pixels[:keep].astype(np.float64)
    if img.ndim == 3:
        if spec.grayscale:
            img = img @ np.array([0.299, 0.587, 0.114])
        else:
            img = img.transpose(2, 0, 1)
    if img.ndim == 2:
        img = img[None] if spec.grayscale else np.repeat(img[None], 3, axis=0)
    img = np.stack([nearest_resize(c, spec.output_height, spec.output_width) for c in img])
    return ((img / 255.0 - 0.5) * 2.0).astype(np.float32)


def load_image(ref, spec: PreprocessSpec) -> Tensor:
    """Read and preprocess one image file into a [C,H,W] tensor."""
    path = ref.path if isinstance(ref, ImageRecord) else ref
    return Tensor(preprocess(read_pnm(path), spec))


class ImageCache:
    """Memoizing image loader keyed by image id."""

    def __init__(self, index: DatasetIndex, spec: PreprocessSpec):
        self.index = index
        self.spec = spec
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, image_id: str) -> np.ndarray:
        arr = self._cache.get(image_id)
        if arr is None:
            arr = preprocess(read_pnm(self.index.record(image_id).path), self.spec)
            arr.flags.writeable = False
            self._cache[image_id] = arr
        return arr

    def stack(self, image_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self(i) for i in image_ids])


# --------------------------------------------------------------- pairs


@dataclass(frozen=True)
class PairSample:
    ref_a: str
    ref_b: str
    label: int
    class_a: str
    class_b: str
    tensor_a: Optional[np.ndarray] = None
    tensor_b: Optional[np.ndarray] = None


def validate_pairs(index: DatasetIndex, pairs: Iterable[PairSample]) -> None:
    for p in pairs:
        if p.label != int(p.class_a == p.class_b):
            raise DatasetError(f"pair ({p.ref_a}, {p.ref_b}) has label {p.label} for classes {p.class_a}/{p.class_b}")
        ra, rb = index.record(p.ref_a), index.record(p.ref_b)
        if ra.domain != 0 or rb.domain != 1:
            raise DatasetError(f"pair ({p.ref_a}, {p.ref_b}) violates domain order ({ra.domain}, {rb.domain})")
        if ra.class_id != p.class_a or rb.class_id != p.class_b:
            raise DatasetError(f"pair ({p.ref_a}, {p.ref_b}) carries wrong class ids")


# ------------------------------------------------------------- synthetic


def _segment_distance(x, y, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(x - (x0 + t * dx), y - (y0 + t * dy))


def _glyph_primitives(rng: np.random.Generator) -> list[dict]:
    prims = []
    for _ in range(int(rng.integers(2, 5))):
        kind = ("rect", "ellipse", "stroke")[int(rng.integers(0, 3))]
        p = {
            "kind": kind,
            "cx": rng.uniform(-0.45, 0.45),
            "cy": rng.uniform(-0.45, 0.45),
            "angle": rng.uniform(0.0, np.pi),
            "level": rng.uniform(0.55, 1.0),
        }
        if kind == "stroke":
            p["length"] = rng.uniform(0.4, 1.0)
            p["width"] = rng.uniform(0.06, 0.14)
        else:
            p["a"] = rng.uniform(0.12, 0.4)
            p["b"] = rng.uniform(0.12, 0.4)
        prims.append(p)
    return prims


def render_glyph(prims: Sequence[dict], size: int, shift=(0.0, 0.0), rotation: float = 0.0) -> np.ndarray:
    """Rasterize primitives on a [-1,1]^2 canvas, returning intensities in [0,1]."""
    centers = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gy, gx = np.meshgrid(centers, centers, indexing="ij")
    c, s = np.cos(-rotation), np.sin(-rotation)
    px, py = gx - shift[0], gy - shift[1]
    x, y = c * px - s * py, s * px + c * py
    soft = 2.0 / size
    out = np.zeros((size, size))
    for p in prims:
        ca, sa = np.cos(p["angle"]), np.sin(p["angle"])
        u = ca * (x - p["cx"]) + sa * (y - p["cy"])
        v = -sa * (x - p["cx"]) + ca * (y - p["cy"])
        if p["kind"] == "rect":
            dist = np.maximum(np.abs(u) - p["a"], np.abs(v) - p["b"])
        elif p["kind"] == "ellipse":
            r = np.hypot(u / p["a"], v / p["b"])
            dist = (r - 1.0) * min(p["a"], p["b"])
        else:
            half = p["length"] / 2
            dist = _segment_distance(u, v, -half, 0.0, half, 0.0) - p["width"] / 2
        cover = np.clip(0.5 - dist / soft, 0.0, 1.0)
        out = np.maximum(out, p["level"] * cover)
    return out


def box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    return sum(padded[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def _jittered(prims, size, rng) -> np.ndarray:
    shift = rng.uniform(-0.2, 0.2, size=2)  # 10% of width on a 2-unit canvas
    rotation = np.deg2rad(rng.uniform(-10.0, 10.0))
    gain = rng.uniform(0.75, 1.0)
    offset = rng.uniform(0.0, 0.15)
    return np.clip(offset + gain * render_glyph(prims, size, shift, rotation), 0.0, 1.0)


def synth_domain0(prims, size, rng) -> np.ndarray:
    return _jittered(prims, size, rng)


def synth_domain1(prims, size, rng) -> np.ndarray:
    return box_blur3(1.0 - _jittered(prims, size, rng))


def make_synthetic(out_dir, n_classes: int, imgs_per_class_per_domain: int, seed: int,
                   size: int = 64) -> Path:
    """Write a two-domain glyph dataset of PGM files plus ``manifest.csv``.

    Domain 0 is the grayscale glyph; domain 1 is the same glyph inverted and
    box-blurred.  Each image gets its own translation, rotation and
    brightness jitter.
    """
    if n_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {n_classes}")
    if imgs_per_class_per_domain < 1:
        raise DatasetError(f"need at least 1 image per class per domain, got {imgs_per_class_per_domain}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {img_dir}: {exc}") from exc
    width = len(str(n_classes - 1))
    records = []
    for ci in range(n_classes):
        prims = _glyph_primitives(np.random.default_rng([seed, ci, 0]))
        class_id = f"c{ci:0{max(width, 3)}d}"
        for domain, render in ((0, synth_domain0), (1, synth_domain1)):
            rng = np.random.default_rng([seed, ci, domain + 1])
            for k in range(imgs_per_class_per_domain):
                pixels = np.round(render(prims, size, rng) * 255.0).astype(np.uint8)
                rel = f"images/{class_id}_d{domain}_{k:03d}.pgm"
                try:
                    write_pnm(out_dir / rel, pixels)
                except OSError as exc:
                    raise DatasetError(f"cannot write {out_dir / rel}: {exc}") from exc
                records.append(ImageRecord(rel, class_id, domain, out_dir / rel))
    manifest = out_dir / "manifest.csv"
    write_manifest(DatasetIndex(tuple(records), {}, out_dir), manifest)
    return manifest


def write_run_metadata(path, **fields) -> Path:
    path = Path(path)
    path.write_text(json.dumps(fields, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
