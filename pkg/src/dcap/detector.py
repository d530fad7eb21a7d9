"""Toy single-scale grid detector built from the blocks in :mod:`dcap.blocks`.

Backbone: three stride-2 downsampling layers (ConvBlock or MDRC), each
followed by a C3 unit; optional SSCA after every MDRC-bearing layer; an
optional neck (SPPF or AaSP); a 1x1 head predicting ``5 + num_classes``
logits per grid cell against a single anchor.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import AaSPBlock, C3Block, ConvBlock, MDRCBlock, SPPFBlock, SSCABlock, observe_convs
from .errors import ConfigError, FormatError, ShapeError, TrainingDivergedError
from .metrics import BoxXYXY, iou
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("base", "mdrc", "aasp", "dcap", "mdrc_ssca", "spp")
PLACEMENTS = ("conv_layers", "c3_layers")

# which variants carry MDRC, and which neck each uses
_USES_MDRC = {"base": False, "mdrc": True, "aasp": False, "dcap": True, "mdrc_ssca": True, "spp": False}
_NECK = {"base": None, "mdrc": None, "aasp": "aasp", "dcap": "aasp", "mdrc_ssca": None, "spp": "sppf"}

LOSS_WEIGHTS = {"box": 0.05, "obj": 1.0, "cls": 0.5}


@dataclass
class ModelConfig:
    variant: str = "dcap"
    dilations: tuple[int, ...] = (2, 3)
    mdrc_placement: str = "conv_layers"
    channels: tuple[int, ...] = (8, 16, 32)
    num_classes: int = 2
    image_size: int = 64
    anchor: tuple[float, float] = (16.0, 16.0)
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.channels = tuple(int(c) for c in self.channels)
        self.anchor = tuple(float(a) for a in self.anchor)

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.mdrc_placement not in PLACEMENTS:
            raise ConfigError(f"unknown mdrc_placement {self.mdrc_placement!r}")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be positive integers, got {self.dilations}")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be positive integers, got {self.channels}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.image_size % self.stride:
            raise ConfigError(f"image_size {self.image_size} not divisible by stride {self.stride}")
        if min(self.anchor) <= 0:
            raise ConfigError("anchor sides must be positive")

    def arch_dict(self) -> dict:
        """Fields that determine the parameter layout (everything but the seed)."""
        d = asdict(self)
        d.pop("seed")
        return d

    def hash(self) -> bytes:
        canon = ";".join(f"{k}={v}" for k, v in sorted(self.arch_dict().items()))
        return hashlib.sha256(canon.encode()).digest()


@dataclass
class Detection:
    box: BoxXYXY
    score: float
    class_id: int


class DetectorModel:
    def __init__(self, cfg: ModelConfig, stages: list, neck, head: ConvBlock):
        self.cfg = cfg
        self.stages = stages  # list of lists of blocks, applied in order
        self.neck = neck
        self.head = head

    def blocks(self):
        for stage in self.stages:
            yield from stage
        if self.neck is not None:
            yield self.neck
        yield self.head

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks() for p in b.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"detector expects N x 1 x H x W input, got {x.shape}")
        for block in self.blocks():
            x = block(x)
        return x

    __call__ = forward


def build_model(cfg: ModelConfig, dtype=np.float32) -> DetectorModel:
    """Assemble the backbone/neck/head for ``cfg`` with seeded Kaiming-uniform init."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    mdrc = _USES_MDRC[cfg.variant]
    mdrc_in_conv = mdrc and cfg.mdrc_placement == "conv_layers"
    mdrc_in_c3 = mdrc and cfg.mdrc_placement == "c3_layers"
    ssca = cfg.variant == "mdrc_ssca"

    stages = []
    c_prev = 1
    for c in cfg.channels:
        if mdrc_in_conv:
            down = MDRCBlock.create(c_prev, c, rng, dilations=cfg.dilations, stride=2, dtype=dtype)
        else:
            down = ConvBlock.create(c_prev, c, 3, rng, stride=2, dtype=dtype)
        c3 = C3Block.create(c, c, rng, n=1, use_mdrc=mdrc_in_c3, dilations=cfg.dilations, dtype=dtype)
        stage = [down]
        if ssca and mdrc_in_conv:
            stage.append(SSCABlock.create(c, rng, dtype=dtype))
        stage.append(c3)
        if ssca and mdrc_in_c3:
            stage.append(SSCABlock.create(c, rng, dtype=dtype))
        stages.append(stage)
        c_prev = c

    neck = None
    if _NECK[cfg.variant] == "aasp":
        neck = AaSPBlock.create(c_prev, c_prev, rng, dtype=dtype)
    elif _NECK[cfg.variant] == "sppf":
        neck = SPPFBlock.create(c_prev, c_prev, rng, dtype=dtype)
    head = ConvBlock.create(c_prev, 5 + cfg.num_classes, 1, rng, activation=None, dtype=dtype)
    return DetectorModel(cfg, stages, neck, head)


class _Seen(Exception):
    pass


CALIB_IMAGES = 16


def calibrate_init(model: DetectorModel, dataset: Sequence, target_std: float = 1.0,
                   head_std: float = 0.01, iters: int = 2) -> DetectorModel:
    """Data-dependent init, in place: unit-variance conv outputs and an objectness prior.

    Without batch normalisation the silu stack shrinks activations block by
    block. Each ConvBlock before the head is visited in forward order and its
    weights are rescaled until its pre-activation std over the first
    ``CALIB_IMAGES`` training images is ``target_std`` (LSUV). The head is
    scaled to output std ``head_std`` and its objectness bias set to the logit
    of the mean positive-cell rate. Deterministic.
    """
    cfg = model.cfg
    items = list(dataset)[:CALIB_IMAGES]
    if not items:
        raise ValueError("calibration needs at least one image")
    dtype = model.parameters()[0].dtype
    x = images_to_tensor([im.pixels for im in items], dtype)

    order: dict[int, ConvBlock] = {}
    with T.no_grad(), observe_convs(lambda b, y: order.setdefault(id(b), b)):
        model(x)
    convs = [b for b in order.values() if b is not model.head]

    for block in convs:
        for _ in range(iters):
            box = {}

            def grab(b, y, target=block):
                if b is target:
                    box["std"] = float(y.data.std())
                    raise _Seen

            with T.no_grad(), observe_convs(grab):
                try:
                    model(x)
                except _Seen:
                    pass
            std = box["std"]
            if not math.isfinite(std) or std < 1e-12:
                break
            block.params.weight.data *= np.asarray(target_std / std, dtype=dtype)

    # small head: every cell starts near the anchor-sized default box
    seen = {}
    with T.no_grad(), observe_convs(lambda b, y: seen.setdefault("std", float(y.data.std()))
                                    if b is model.head else None):
        model(x)
    if seen.get("std", 0.0) > 1e-12:
        model.head.params.weight.data *= np.asarray(head_std / seen["std"], dtype=dtype)

    n_pos = sum(len(assign_targets(im.boxes, cfg).cells) for im in items)
    rate = min(max(n_pos / (len(items) * cfg.grid ** 2), 1e-4), 0.5)
    model.head.params.bias.data[4] = math.log(rate / (1.0 - rate))
    return model


# -- decode -----------------------------------------------------------------------

def _sigmoid(v):
    return T._sigmoid_np(np.asarray(v, dtype=np.float64))


def decode(raw: Tensor | np.ndarray, cfg: ModelConfig) -> list[list[Detection]]:
    """Turn head logits into one Detection per grid cell for each image."""
    r = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    n, ch, s, s2 = r.shape
    if ch != 5 + cfg.num_classes:
        raise ShapeError(f"raw has {ch} channels, expected {5 + cfg.num_classes}")
    stride = cfg.stride
    aw, ah = cfg.anchor
    size = float(cfg.image_size)
    gy, gx = np.mgrid[0:s, 0:s2]
    sig = _sigmoid(r)
    bx = (2 * sig[:, 0] - 0.5 + gx) * stride
    by = (2 * sig[:, 1] - 0.5 + gy) * stride
    bw = (2 * sig[:, 2]) ** 2 * aw
    bh = (2 * sig[:, 3]) ** 2 * ah
    cls_p = sig[:, 5:]
    cls_id = cls_p.argmax(axis=1)
    score = sig[:, 4] * cls_p.max(axis=1)
    x1 = np.clip(bx - bw / 2, 0, size)
    y1 = np.clip(by - bh / 2, 0, size)
    x2 = np.clip(bx + bw / 2, 0, size)
    y2 = np.clip(by + bh / 2, 0, size)
    out = []
    for i in range(n):
        dets = [
            Detection(BoxXYXY(float(x1[i, a, b]), float(y1[i, a, b]), float(x2[i, a, b]), float(y2[i, a, b])),
                      float(score[i, a, b]), int(cls_id[i, a, b]))
            for a in range(s) for b in range(s2)
        ]
        out.append(dets)
    return out


def nms(dets: Sequence[Detection], iou_thresh: float = 0.45, conf_thresh: float = 0.25) -> list[Detection]:
    """Class-aware greedy non-maximum suppression."""
    order = sorted(
        ((i, d) for i, d in enumerate(dets) if d.score >= conf_thresh),
        key=lambda p: (-p[1].score, p[1].class_id, p[0]),
    )
    kept: list[Detection] = []
    for _, d in order:
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


# -- targets and loss ------------------------------------------------------------------

@dataclass
class GridAssignment:
    """Targets for one image: objectness map plus the assigned cells."""

    obj: np.ndarray  # S x S in {0, 1}
    cells: list[tuple[int, int, int, BoxXYXY]] = field(default_factory=list)  # (gy, gx, class, box)


def assign_targets(gt: Sequence[tuple[int, Sequence[float]]], cfg: ModelConfig) -> GridAssignment:
    """Each GT goes to the cell holding its center; larger area wins a shared cell."""
    s = cfg.grid
    stride = cfg.stride
    best: dict[tuple[int, int], tuple[float, int, BoxXYXY]] = {}
    for cls, box in gt:
        box = BoxXYXY(*box)
        cx = (box.x1 + box.x2) / 2
        cy = (box.y1 + box.y2) / 2
        key = (min(max(int(cy // stride), 0), s - 1), min(max(int(cx // stride), 0), s - 1))
        if key not in best or box.area > best[key][0]:
            best[key] = (box.area, int(cls), box)
    obj = np.zeros((s, s), dtype=np.float64)
    cells = []
    for (gy, gx), (_, cls, box) in sorted(best.items()):
        obj[gy, gx] = 1.0
        cells.append((gy, gx, cls, box))
    return GridAssignment(obj, cells)


def ciou(pred: Sequence[Tensor], gt: np.ndarray, eps: float = 1e-9) -> Tensor:
    """Complete IoU between predicted (cx, cy, w, h) tensors and GT xyxy rows."""
    pcx, pcy, pw, ph = pred
    gt = np.asarray(gt, dtype=pcx.dtype).reshape(-1, 4)
    gx1, gy1, gx2, gy2 = (gt[:, i] for i in range(4))
    gw, gh = gx2 - gx1, gy2 - gy1
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5

    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter + eps
    iou_t = inter / union

    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    chh = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    diag2 = cw * cw + chh * chh + eps
    dx = pcx - (gx1 + gx2) * 0.5
    dy = pcy - (gy1 + gy2) * 0.5
    rho2 = dx * dx + dy * dy
    dv = T.atan(Tensor(gw / gh)) - T.atan(pw / ph)
    v = dv * dv * (4 / math.pi ** 2)
    alpha = v / (v - iou_t + (1 + eps))
    return iou_t - (rho2 / diag2 + v * alpha)


def box_ciou(a: Sequence[float], b: Sequence[float]) -> float:
    """Scalar CIoU of two xyxy boxes (float64)."""
    a = np.asarray(a, dtype=np.float64)
    pred = [Tensor(np.array([(a[0] + a[2]) / 2])), Tensor(np.array([(a[1] + a[3]) / 2])),
            Tensor(np.array([a[2] - a[0]])), Tensor(np.array([a[3] - a[1]]))]
    return ciou(pred, np.asarray(b, dtype=np.float64)).item()


@dataclass
class LossBreakdown:
    box_loss: float
    obj_loss: float
    cls_loss: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def compute_loss(raw: Tensor, assignments: Sequence[GridAssignment], cfg: ModelConfig) -> LossBreakdown:
    """Weighted CIoU box loss + BCE objectness + BCE classification."""
    n, ch, s, _ = raw.shape
    if len(assignments) != n or ch != 5 + cfg.num_classes or s != cfg.grid:
        raise ShapeError(f"raw {raw.shape} inconsistent with {len(assignments)} assignments / config")
    obj_t = np.stack([a.obj for a in assignments])
    obj_loss = T.bce_with_logits(raw[:, 4], obj_t).mean()

    pos = [(i, gy, gx, c, b) for i, a in enumerate(assignments) for gy, gx, c, b in a.cells]
    if pos:
        ni = np.array([p[0] for p in pos])
        gy = np.array([p[1] for p in pos])
        gx = np.array([p[2] for p in pos])
        p = raw[ni, :, gy, gx]  # P x (5 + C)
        sig = T.sigmoid(p[:, 0:4])
        stride = float(cfg.stride)
        cx = (sig[:, 0] * 2.0 - 0.5 + gx.astype(raw.dtype)) * stride
        cy = (sig[:, 1] * 2.0 - 0.5 + gy.astype(raw.dtype)) * stride
        tw = sig[:, 2] * 2.0
        th = sig[:, 3] * 2.0
        w = tw * tw * cfg.anchor[0]
        h = th * th * cfg.anchor[1]
        gt_boxes = np.array([p[4] for p in pos], dtype=raw.dtype)
        box_loss = (1.0 - ciou([cx, cy, w, h], gt_boxes)).mean()
        onehot = np.zeros((len(pos), cfg.num_classes))
        onehot[np.arange(len(pos)), [p[3] for p in pos]] = 1.0
        cls_loss = T.bce_with_logits(p[:, 5:], onehot).mean()
    else:
        box_loss = cls_loss = Tensor(np.zeros((), dtype=raw.dtype))

    total = box_loss * LOSS_WEIGHTS["box"] + obj_loss * LOSS_WEIGHTS["obj"] + cls_loss * LOSS_WEIGHTS["cls"]
    return LossBreakdown(box_loss.item(), obj_loss.item(), cls_loss.item(), total.item(), total)


def encode_box(box: Sequence[float], cfg: ModelConfig) -> tuple[int, int, np.ndarray]:
    """Logits (tx, ty, tw, th) that decode exactly to ``box`` at its assigned cell."""
    x1, y1, x2, y2 = box
    cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
    s, stride = cfg.grid, cfg.stride
    gx = min(int(cx // stride), s - 1)
    gy = min(int(cy // stride), s - 1)

    def logit(p):
        return math.log(p / (1 - p))

    t = np.array([
        logit((cx / stride - gx + 0.5) / 2),
        logit((cy / stride - gy + 0.5) / 2),
        logit(math.sqrt(w / cfg.anchor[0]) / 2),
        logit(math.sqrt(h / cfg.anchor[1]) / 2),
    ])
    return gy, gx, t


# -- training --------------------------------------------------------------------------

def images_to_tensor(images: Sequence, dtype=np.float32) -> Tensor:
    arr = np.stack([np.asarray(im.pixels if hasattr(im, "pixels") else im, dtype=dtype) for im in images])
    return Tensor(arr[:, None])


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    grad_clip: float | None = 10.0


def train(model: DetectorModel, dataset: Sequence, epochs: int, lr: float, seed: int,
          batch_size: int = 4, momentum: float = 0.9, grad_clip: float | None = 10.0,
          ) -> tuple[DetectorModel, list[LossBreakdown]]:
    """SGD with momentum over ``dataset`` (LabeledImage-like items), in place.

    Returns the model and one epoch-averaged LossBreakdown per epoch.
    """
    if not dataset:
        raise ValueError("training split is empty")
    cfg = model.cfg
    params = model.parameters()
    dtype = params[0].dtype
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    assignments = [assign_targets(im.boxes, cfg) for im in dataset]
    pixels = np.stack([np.asarray(im.pixels, dtype=dtype) for im in dataset])[:, None]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        sums = np.zeros(4)
        nb = 0
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            model.zero_grad()
            raw = model(Tensor(pixels[idx]))
            lb = compute_loss(raw, [assignments[i] for i in idx], cfg)
            if not math.isfinite(lb.total):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            lb.tensor.backward()
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            if grad_clip is not None:
                norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                if not math.isfinite(norm):
                    raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}, batch {b}", epoch, b)
                if norm > grad_clip:
                    scale = grad_clip / norm
                    grads = [g * scale for g in grads]
            for p, v, g in zip(params, velocity, grads):
                v *= momentum
                v += g
                p.data -= (lr * v).astype(dtype)
            sums += (lb.box_loss, lb.obj_loss, lb.cls_loss, lb.total)
            nb += 1
        avg = sums / nb
        history.append(LossBreakdown(*avg))
        log.debug("epoch %d loss %.5f", epoch, avg[3])
    model.zero_grad()
    return model, history


def loss_log_csv(history: Sequence[LossBreakdown]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "box_loss", "obj_loss", "cls_loss", "total"])
    for e, lb in enumerate(history):
        w.writerow([e, f"{lb.box_loss:.8f}", f"{lb.obj_loss:.8f}", f"{lb.cls_loss:.8f}", f"{lb.total:.8f}"])
    return buf.getvalue()


def predict(model: DetectorModel, images: Sequence, conf_thresh: float = 0.001,
            iou_thresh: float = 0.45, batch_size: int = 32) -> list[list[Detection]]:
    """Forward, decode and NMS for each image."""
    out = []
    dtype = model.parameters()[0].dtype
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            raw = model(images_to_tensor(images[start:start + batch_size], dtype))
            out.extend(nms(d, iou_thresh, conf_thresh) for d in decode(raw, model.cfg))
    return out


# -- checkpoints -------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DCAPC\x00"


class CheckpointMismatchError(FormatError):
    """Checkpoint was written for a different model configuration."""


def checkpoint_bytes(model: DetectorModel) -> bytes:
    params = model.parameters()
    parts = [CHECKPOINT_MAGIC, model.cfg.hash(), struct.pack("<I", len(params))]
    parts += [T.tensor_to_bytes(p) for p in params]
    return b"".join(parts)


def save_checkpoint(path, model: DetectorModel) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path, cfg: ModelConfig) -> DetectorModel:
    """Rebuild the model for ``cfg`` and fill it from ``path``."""
    buf = Path(path).read_bytes()
    m = len(CHECKPOINT_MAGIC)
    if buf[:m] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    digest = buf[m:m + 32]
    if digest != cfg.hash():
        raise CheckpointMismatchError(f"{path}: checkpoint config hash does not match the given config")
    pos = m + 32
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    model = build_model(cfg)
    params = model.parameters()
    if count != len(params):
        raise FormatError(f"{path}: {count} tensors stored, model has {len(params)}", offset=pos)
    for p in params:
        t, pos = T.tensor_from_bytes(buf, pos)
        if t.shape != p.shape:
            raise FormatError(f"{path}: tensor shape {t.shape} != expected {p.shape}", offset=pos)
        p.data[...] = t.data
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes", offset=pos)
    return model
