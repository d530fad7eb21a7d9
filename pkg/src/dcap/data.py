"""Single-band image and label IO, dataset splits, and the synthetic corpus generator.

On-disk layout of a corpus::

    images/{id}.pgm      binary PGM (P5, maxval 255)
    labels/{id}.txt      one ``class cx cy w h`` line per box, normalized
    manifest.csv         id, n_object, n_noise
    splits/{train,val,test}.txt
"""

from __future__ import annotations

import csv
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DcapError, FormatError
from .metrics import BoxXYXY

CLASS_NAMES = ("object", "noise")
LABEL_SLACK = 1e-6


class GenerationError(DcapError, RuntimeError):
    """Instances could not be placed without overlap."""


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray  # H x W float in [0, 1]
    boxes: list[tuple[int, BoxXYXY]] = field(default_factory=list)


# -- coordinates -----------------------------------------------------------------

def xyxy_to_cxcywh(box: Sequence[float], img_size: float) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise ValueError(f"zero-area box {tuple(box)}")
    s = float(img_size)
    return ((x1 + x2) / (2 * s), (y1 + y2) / (2 * s), (x2 - x1) / s, (y2 - y1) / s)


def cxcywh_to_xyxy(cx: float, cy: float, w: float, h: float, img_size: float) -> BoxXYXY:
    if w <= 0 or h <= 0:
        raise ValueError(f"zero-area box (w={w}, h={h})")
    s = float(img_size)
    return BoxXYXY((cx - w / 2) * s, (cy - h / 2) * s, (cx + w / 2) * s, (cy + h / 2) * s)


# -- PGM -----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm_bytes(path) -> np.ndarray:
    """Raw uint8 pixel array of a binary PGM."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: unsupported PGM format {buf[:2]!r} (only binary P5)", offset=0)
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None or not m.group(1).isdigit():
            raise FormatError(f"{path}: malformed PGM header at byte {pos}", offset=pos)
        values.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)", offset=pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PGM header at byte {pos}", offset=pos)
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"{path}: truncated payload at byte {len(buf)}, expected {need} bytes from {pos}",
                          offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def read_image(path) -> np.ndarray:
    """Read a P5 PGM as float32 intensities in [0, 1]."""
    return read_pgm_bytes(path).astype(np.float32) / np.float32(255.0)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, pixels: np.ndarray) -> None:
    """Write intensities in [0, 1] (or uint8) as a P5 PGM."""
    arr = pixels if pixels.dtype == np.uint8 else quantize(pixels)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


# -- labels ---------------------------------------------------------------------

def format_label_line(class_id: int, box: Sequence[float], img_size: int) -> str:
    cx, cy, w, h = xyxy_to_cxcywh(box, img_size)
    return f"{class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"


def parse_label_line(line: str, img_size: int, num_classes: int = len(CLASS_NAMES),
                     lineno: int | None = None) -> tuple[int, BoxXYXY]:
    where = f"line {lineno}: " if lineno is not None else ""
    parts = line.split()
    if len(parts) != 5:
        raise FormatError(f"{where}expected 5 fields, got {len(parts)}", line=lineno)
    try:
        cls_f = float(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError:
        raise FormatError(f"{where}non-numeric token in {line.strip()!r}", line=lineno) from None
    if not all(math.isfinite(v) for v in (cls_f, cx, cy, w, h)) or cls_f != int(cls_f):
        raise FormatError(f"{where}invalid values in {line.strip()!r}", line=lineno)
    cls = int(cls_f)
    if not 0 <= cls < num_classes:
        raise FormatError(f"{where}class {cls} out of range [0, {num_classes})", line=lineno)
    if w <= 0:
        raise FormatError(f"{where}zero-width box", line=lineno)
    if h <= 0:
        raise FormatError(f"{where}zero-height box", line=lineno)
    lo = -LABEL_SLACK
    hi = 1 + LABEL_SLACK
    if cx - w / 2 < lo or cx + w / 2 > hi or cy - h / 2 < lo or cy + h / 2 > hi:
        raise FormatError(f"{where}box escapes the unit square", line=lineno)
    # no clamping: a box may sit up to LABEL_SLACK outside the frame, which keeps
    # parse and format exact inverses on 6-decimal lines
    return cls, cxcywh_to_xyxy(cx, cy, w, h, img_size)


def parse_labels(path, img_size: int, num_classes: int = len(CLASS_NAMES)) -> list[tuple[int, BoxXYXY]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(parse_label_line(line, img_size, num_classes, lineno))
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}", line=lineno) from None
    return out


def write_labels(path, boxes: Sequence[tuple[int, Sequence[float]]], img_size: int) -> None:
    Path(path).write_text("".join(format_label_line(c, b, img_size) + "\n" for c, b in boxes))


# -- splits -------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def split_dataset(ids: Sequence[str], seed: int) -> tuple[list[str], list[str], list[str]]:
    """Seeded 70:20:10 split; sizes are floor(0.7n), floor(0.2n) and the remainder."""
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 items to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = (7 * n) // 10
    n_val = (2 * n) // 10
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def write_splits(root, splits: Sequence[Sequence[str]]) -> None:
    d = Path(root) / "splits"
    d.mkdir(parents=True, exist_ok=True)
    for name, ids in zip(SPLIT_NAMES, splits):
        (d / f"{name}.txt").write_text("".join(i + "\n" for i in ids))


def read_split(root, name: str) -> list[str]:
    path = Path(root) / "splits" / f"{name}.txt"
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_corpus(root, ids: Sequence[str] | None = None, num_classes: int = len(CLASS_NAMES)) -> list[LabeledImage]:
    root = Path(root)
    if ids is None:
        ids = [row["id"] for row in read_manifest(root)]
    out = []
    for i in ids:
        pixels = read_image(root / "images" / f"{i}.pgm")
        boxes = parse_labels(root / "labels" / f"{i}.txt", pixels.shape[0], num_classes)
        out.append(LabeledImage(i, pixels, boxes))
    return out


def read_manifest(root) -> list[dict[str, str]]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))


# -- synthetic generator --------------------------------------------------------------

@dataclass
class SynthSpec:
    """Parameters of a synthetic single-band corpus; ``seed`` fixes everything."""

    count: int = 64
    image_size: int = 64
    objects_per_image: tuple[int, int] = (1, 2)
    mode: str = "wave"  # wave | ellipse | mixed
    object_size: tuple[float, float] = (16.0, 32.0)
    wavelength: tuple[float, float] = (4.0, 8.0)
    amplitude: tuple[float, float] = (0.35, 0.65)
    orientation: tuple[float, float] = (0.0, math.pi)
    clutter_count: tuple[int, int] = (0, 2)
    clutter_intensity: tuple[float, float] = (0.5, 0.9)
    clutter_sigma: tuple[float, float] = (2.0, 3.5)
    background: float = 0.15
    noise_sigma: float = 0.04
    margin: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("objects_per_image", "object_size", "wavelength", "amplitude",
                     "orientation", "clutter_count", "clutter_intensity", "clutter_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if self.count < 1 or self.image_size < 8:
            raise ConfigError("count must be >= 1 and image_size >= 8")
        if self.objects_per_image[0] < 0 or self.clutter_count[0] < 0:
            raise ConfigError("instance counts must be non-negative")
        if self.mode not in ("wave", "ellipse", "mixed"):
            raise ConfigError(f"unknown synthesis mode {self.mode!r}")
        if self.object_size[1] >= self.image_size:
            raise ConfigError("object_size must stay below image_size")


# instance pixels brighter than this fraction of the instance peak define its box
MASK_FRACTION = 0.1
MAX_PLACEMENT_TRIES = 50
MAX_LAYOUT_RESTARTS = 20


def _wave_patch(rng, spec, size):
    w = rng.uniform(*spec.object_size)
    h = rng.uniform(*spec.object_size)
    lam = rng.uniform(*spec.wavelength)
    theta = rng.uniform(*spec.orientation)
    amp = rng.uniform(*spec.amplitude)
    cx = rng.uniform(w / 2, size - w / 2)
    cy = rng.uniform(h / 2, size - h / 2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (xx - cx) / (w / 2)
    v = (yy - cy) / (h / 2)
    r2 = u * u + v * v
    envelope = np.clip(1.0 - r2, 0.0, None) ** 0.5
    phase = 2 * math.pi * ((xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)) / lam
    return amp * envelope * (0.6 + 0.4 * np.cos(phase)), amp


def _ellipse_patch(rng, spec, size):
    w = rng.uniform(*spec.object_size)
    h = rng.uniform(*spec.object_size)
    amp = rng.uniform(*spec.amplitude)
    cx = rng.uniform(w / 2, size - w / 2)
    cy = rng.uniform(h / 2, size - h / 2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r2 = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2
    # bright rim, dimmer core
    layer = np.where(r2 <= 1.0, 0.5 + 0.5 * r2, 0.0)
    return amp * layer, amp


def _clutter_patch(rng, spec, size):
    sigma = rng.uniform(*spec.clutter_sigma)
    amp = rng.uniform(*spec.clutter_intensity)
    reach = sigma * 3
    cx = rng.uniform(reach, size - reach)
    cy = rng.uniform(reach, size - reach)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if rng.random() < 0.5:
        layer = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    else:
        # short streak: elongated gaussian
        ang = rng.uniform(0, math.pi)
        along = (xx - cx) * math.cos(ang) + (yy - cy) * math.sin(ang)
        across = -(xx - cx) * math.sin(ang) + (yy - cy) * math.cos(ang)
        layer = np.exp(-(along ** 2) / (2 * (2.0 * sigma) ** 2) - across ** 2 / (2 * (0.8 * sigma) ** 2))
    return amp * layer, amp


def instance_box(layer: np.ndarray, peak: float) -> BoxXYXY | None:
    """Tight pixel box around the instance's super-threshold pixels."""
    ys, xs = np.nonzero(layer > MASK_FRACTION * peak)
    if ys.size == 0:
        return None
    return BoxXYXY(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _overlaps(box, others, margin):
    for o in others:
        if (box.x1 < o.x2 + margin and o.x1 < box.x2 + margin
                and box.y1 < o.y2 + margin and o.y1 < box.y2 + margin):
            return True
    return False


def _place(rng, spec, kinds):
    boxes, layers, peaks = [], [], []
    for kind in kinds:
        for _ in range(MAX_PLACEMENT_TRIES):
            layer, peak = kind(rng, spec, spec.image_size)
            box = instance_box(layer, peak)
            if box is not None and not _overlaps(box, [b for _, b in boxes], spec.margin):
                break
        else:
            return None
        boxes.append((1 if kind is _clutter_patch else 0, box))
        layers.append(layer)
        peaks.append(peak)
    return boxes, layers, peaks


@dataclass
class SynthImage:
    pixels: np.ndarray
    boxes: list[tuple[int, BoxXYXY]]
    layers: list[np.ndarray]  # per-instance pattern, same order as boxes
    peaks: list[float]


def synth_image(spec: SynthSpec, index: int) -> SynthImage:
    """Render image ``index`` of the corpus; depends only on (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    n_clutter = int(rng.integers(spec.clutter_count[0], spec.clutter_count[1] + 1))
    kinds = []
    for _ in range(n_obj):
        if spec.mode == "mixed":
            kinds.append(_wave_patch if rng.random() < 0.5 else _ellipse_patch)
        else:
            kinds.append(_wave_patch if spec.mode == "wave" else _ellipse_patch)
    kinds += [_clutter_patch] * n_clutter

    for _ in range(MAX_LAYOUT_RESTARTS):
        placed = _place(rng, spec, kinds)
        if placed is not None:
            break
    else:
        raise GenerationError(
            f"image {index}: could not place {len(kinds)} non-overlapping instances "
            f"after {MAX_LAYOUT_RESTARTS} restarts of {MAX_PLACEMENT_TRIES} tries each"
        )
    boxes, layers, peaks = placed

    pixels = spec.background + rng.normal(0.0, spec.noise_sigma, size=(size, size))
    for layer in layers:
        pixels = pixels + layer
    return SynthImage(np.clip(pixels, 0.0, 1.0), boxes, layers, peaks)


def image_id(index: int) -> str:
    return f"img{index:05d}"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DCAP_THREADS", "1")))
    except ValueError:
        return 1


def synth_generate(spec: SynthSpec, out_dir) -> list[str]:
    """Write a synthetic corpus plus manifest; returns the image ids in order."""
    spec.validate()
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    def render(i):
        img = synth_image(spec, i)
        iid = image_id(i)
        write_image(root / "images" / f"{iid}.pgm", img.pixels)
        write_labels(root / "labels" / f"{iid}.txt", img.boxes, spec.image_size)
        counts = [sum(1 for c, _ in img.boxes if c == k) for k in range(len(CLASS_NAMES))]
        return iid, counts

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(render, range(spec.count)))

    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "n_object", "n_noise"])
        for iid, counts in rows:
            w.writerow([iid, *counts])
    return [iid for iid, _ in rows]
