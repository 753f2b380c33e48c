"""Synthetic multi-digit benchmark on large single-channel images.

Each image places five digit glyphs, three of one class and two of other
classes, plus a configurable number of short noise strokes, and carries
four labels derived from the placements:

  majority     the class placed three times
  max_digit    the numerically largest class present
  top          the class of the topmost digit (smallest ink-top y,
               ties broken by smallest x)
  multi        a 10-bit presence mask over classes

Noise strokes are 2-4 segment polylines of digit-stroke thickness. They
never paint inside a digit's bounding box, so labels recomputed from the
placement metadata always match the stored ones.

On-disk layout of a dataset directory:

  spec.json           generation parameters (UTF-8 JSON)
  <split>_images.bin  b"IPSD", version u32, count u32, side u32, dtype u8
                      (0 = f32), then count * side * side little-endian f32
  <split>_labels.bin  b"IPSL", version u32, count u32, digits u8, then per
                      image: majority u8, max u8, top u8, multi u16, and
                      per digit (class u8, y u16, x u16)

Everything is deterministic in (seed, split, image index): images are
generated from independent named streams, so regenerating a dataset with
the same spec is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError, GenerationError
from ..grad.rng import named_stream
from .glyphs import glyph_set, ink_bbox

IMAGES_MAGIC = b"IPSD"
LABELS_MAGIC = b"IPSL"
FORMAT_VERSION = 1
_PLACE_RETRIES = 1000


def default_noise_count(image_side: int) -> int:
    """Noise strokes scale linearly with the image side (50 at side 1500)."""
    return int(round(50 * image_side / 1500))


@dataclass
class MegaMnistSpec:
    image_side: int
    noise_line_count: int | None = None
    train_count: int = 1000
    test_count: int = 200
    seed: int = 0
    digit_size: int = 28
    digits_per_image: int = 5
    same_class_count: int = 3

    def __post_init__(self):
        if self.noise_line_count is None:
            self.noise_line_count = default_noise_count(self.image_side)
        if self.image_side < self.digit_size:
            raise ContractError(
                f"image side {self.image_side} smaller than digit size {self.digit_size}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MegaMnistSpec":
        return cls(**json.loads(text))


@dataclass
class TaskLabels:
    majority: int
    max_digit: int
    top: int
    multi: int  # 10-bit presence mask

    def multi_vector(self) -> np.ndarray:
        return np.array([(self.multi >> c) & 1 for c in range(10)], dtype=np.float32)


@dataclass
class Placement:
    cls: int
    y: int
    x: int


def labels_from_placements(placements, glyphs) -> TaskLabels:
    """Recompute all four task labels from placement metadata."""
    classes = [p.cls for p in placements]
    counts = np.bincount(classes, minlength=10)
    majority = int(np.argmax(counts))
    top_key = None
    top_cls = -1
    for p in placements:
        ink_top = p.y + ink_bbox(glyphs[p.cls])[0]
        key = (ink_top, p.x)
        if top_key is None or key < top_key:
            top_key = key
            top_cls = p.cls
    multi = 0
    for c in set(classes):
        multi |= 1 << c
    return TaskLabels(majority=majority, max_digit=int(max(classes)),
                      top=top_cls, multi=multi)


def _place_digits(spec: MegaMnistSpec, rng: np.random.Generator) -> list[Placement]:
    ds = spec.digit_size
    majority = int(rng.integers(10))
    others = []
    for _ in range(spec.digits_per_image - spec.same_class_count):
        c = int(rng.integers(9))
        others.append(c if c < majority else c + 1)
    classes = [majority] * spec.same_class_count + others

    boxes: list[tuple[int, int]] = []
    placements = []
    limit = spec.image_side - ds
    for cls in classes:
        for attempt in range(_PLACE_RETRIES):
            y = int(rng.integers(limit + 1))
            x = int(rng.integers(limit + 1))
            if all(abs(y - by) >= ds or abs(x - bx) >= ds for by, bx in boxes):
                boxes.append((y, x))
                placements.append(Placement(cls=cls, y=y, x=x))
                break
        else:
            raise GenerationError(
                f"could not place {spec.digits_per_image} digits of size {ds} "
                f"in a {spec.image_side}px image after {_PLACE_RETRIES} retries")
    return placements


def _draw_noise(canvas, spec, boxes, rng) -> None:
    side = spec.image_side
    ds = spec.digit_size
    thickness = max(2, ds // 7)
    half = thickness // 2
    seg_lo, seg_hi = 0.4 * ds, 1.0 * ds
    forbidden = np.zeros_like(canvas, dtype=bool)
    for by, bx in boxes:
        forbidden[by : by + ds, bx : bx + ds] = True

    for _ in range(spec.noise_line_count):
        y = float(rng.uniform(0, side))
        x = float(rng.uniform(0, side))
        for _ in range(int(rng.integers(2, 5))):
            angle = float(rng.uniform(0, 2 * np.pi))
            length = float(rng.uniform(seg_lo, seg_hi))
            steps = max(2, int(length))
            dy = np.sin(angle) * length / steps
            dx = np.cos(angle) * length / steps
            for _step in range(steps):
                yi, xi = int(round(y)), int(round(x))
                y0, y1 = max(0, yi - half), min(side, yi + half + 1)
                x0, x1 = max(0, xi - half), min(side, xi + half + 1)
                if y0 < y1 and x0 < x1:
                    block = canvas[y0:y1, x0:x1]
                    keep = ~forbidden[y0:y1, x0:x1]
                    block[keep] = np.maximum(block[keep], 1.0)
                y += dy
                x += dx


def generate_image(spec: MegaMnistSpec, split: str, index: int, glyphs):
    """One deterministic (image, labels, placements) triple."""
    rng = named_stream(spec.seed, f"megamnist.{split}.{index}")
    placements = _place_digits(spec, rng)
    canvas = np.zeros((spec.image_side, spec.image_side), dtype=np.float32)
    ds = spec.digit_size
    for p in placements:
        region = canvas[p.y : p.y + ds, p.x : p.x + ds]
        np.maximum(region, glyphs[p.cls], out=region)
    _draw_noise(canvas, spec, [(p.y, p.x) for p in placements], rng)
    labels = labels_from_placements(placements, glyphs)
    return canvas, labels, placements


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _split_count(spec: MegaMnistSpec, split: str) -> int:
    if split == "train":
        return spec.train_count
    if split == "test":
        return spec.test_count
    raise ContractError(f"unknown split {split!r}")


def generate_megamnist(spec: MegaMnistSpec, out_dir, splits=("train", "test"),
                       glyph_loader=None) -> "MegaMnistDataset":
    """Generate and persist the dataset, then return a handle onto it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "spec.json").write_text(spec.to_json(), encoding="utf-8")
    glyphs = glyph_set(spec.digit_size, loader=glyph_loader)

    for split in splits:
        count = _split_count(spec, split)
        with open(out_dir / f"{split}_images.bin", "wb") as img_fh, \
             open(out_dir / f"{split}_labels.bin", "wb") as lab_fh:
            img_fh.write(IMAGES_MAGIC)
            img_fh.write(struct.pack("<IIIB", FORMAT_VERSION, count, spec.image_side, 0))
            lab_fh.write(LABELS_MAGIC)
            lab_fh.write(struct.pack("<IIB", FORMAT_VERSION, count, spec.digits_per_image))
            for i in range(count):
                image, labels, placements = generate_image(spec, split, i, glyphs)
                img_fh.write(image.astype("<f4").tobytes())
                lab_fh.write(struct.pack("<BBBH", labels.majority, labels.max_digit,
                                         labels.top, labels.multi))
                for p in placements:
                    lab_fh.write(struct.pack("<BHH", p.cls, p.y, p.x))
    return MegaMnistDataset(out_dir)


class MegaMnistSplit:
    """Images (memory-mapped) and labels of one split."""

    def __init__(self, directory: Path, split: str):
        directory = Path(directory)
        img_path = directory / f"{split}_images.bin"
        lab_path = directory / f"{split}_labels.bin"
        header = img_path.open("rb").read(17)
        if header[:4] != IMAGES_MAGIC:
            raise ContractError(f"{img_path}: bad image file magic")
        version, count, side, dtype_code = struct.unpack("<IIIB", header[4:17])
        if version != FORMAT_VERSION or dtype_code != 0:
            raise ContractError(f"{img_path}: unsupported format")
        self.count = count
        self.side = side
        self.images = np.memmap(img_path, dtype="<f4", mode="r", offset=17,
                                shape=(count, side, side))

        blob = lab_path.read_bytes()
        if blob[:4] != LABELS_MAGIC:
            raise ContractError(f"{lab_path}: bad label file magic")
        _, lab_count, digits = struct.unpack("<IIB", blob[4:13])
        if lab_count != count:
            raise ContractError(f"{lab_path}: label/image count mismatch")
        self.labels: list[TaskLabels] = []
        self.placements: list[list[Placement]] = []
        offset = 13
        for _ in range(count):
            majority, max_digit, top, multi = struct.unpack_from("<BBBH", blob, offset)
            offset += 5
            self.labels.append(TaskLabels(majority, max_digit, top, multi))
            ps = []
            for _ in range(digits):
                cls, y, x = struct.unpack_from("<BHH", blob, offset)
                offset += 5
                ps.append(Placement(cls, y, x))
            self.placements.append(ps)

    def label_arrays(self) -> dict[str, np.ndarray]:
        return {
            "majority": np.array([l.majority for l in self.labels], dtype=np.int64),
            "max_digit": np.array([l.max_digit for l in self.labels], dtype=np.int64),
            "top": np.array([l.top for l in self.labels], dtype=np.int64),
            "multi": np.stack([l.multi_vector() for l in self.labels]),
        }


class MegaMnistDataset:
    def __init__(self, directory):
        self.directory = Path(directory)
        spec_path = self.directory / "spec.json"
        if not spec_path.exists():
            raise ContractError(f"{self.directory}: not a dataset directory (no spec.json)")
        self.spec = MegaMnistSpec.from_json(spec_path.read_text(encoding="utf-8"))
        self._splits: dict[str, MegaMnistSplit] = {}

    def split(self, name: str) -> MegaMnistSplit:
        if name not in self._splits:
            self._splits[name] = MegaMnistSplit(self.directory, name)
        return self._splits[name]
