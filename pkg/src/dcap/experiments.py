"""Corpus, training, evaluation and ablation runs driven by a RunConfig."""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import blocks
from . import tensor as T
from .config import RunConfig
from .data import load_corpus, read_split, split_dataset, synth_generate, write_splits
from .detector import (DetectorModel, ModelConfig, build_model, calibrate_init, loss_log_csv, predict,
                       save_checkpoint, train)
from .metrics import REPORT_FIELDS, EvalReport, aggregate_runs, evaluate
from .tensor import Tensor


def make_corpus(cfg: RunConfig, out_dir) -> list[str]:
    ids = synth_generate(cfg.synth, out_dir)
    write_splits(out_dir, split_dataset(ids, cfg.synth.seed))
    return ids


def load_split(data_dir, split: str, num_classes: int):
    return load_corpus(data_dir, read_split(data_dir, split), num_classes)


def train_model(cfg: RunConfig, data_dir, model_cfg: ModelConfig | None = None):
    """Build, calibrate and train on the corpus' train split; returns (model, loss history)."""
    mc = model_cfg or cfg.model
    dataset = load_split(data_dir, "train", mc.num_classes)
    model = calibrate_init(build_model(mc), dataset)
    tc = cfg.train
    return train(model, dataset, tc.epochs, tc.lr, mc.seed, batch_size=tc.batch_size,
                 momentum=tc.momentum, grad_clip=tc.grad_clip)


def train_to_dir(cfg: RunConfig, data_dir, out_dir) -> DetectorModel:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train_model(cfg, data_dir)
    save_checkpoint(out / "model.ckpt", model)
    (out / "train_log.csv").write_text(loss_log_csv(history))
    return model


def evaluate_model(model: DetectorModel, cfg: RunConfig, data_dir, split: str) -> EvalReport:
    images = load_split(data_dir, split, model.cfg.num_classes)
    dets = predict(model, [im.pixels for im in images], cfg.eval.conf_thresh, cfg.eval.iou_thresh)
    return evaluate(dets, [im.boxes for im in images])


# -- ablation ---------------------------------------------------------------------------

# row name -> ModelConfig overrides (the dilation-placement and single-dilation axes included)
ABLATION_GRID = {
    "base": dict(variant="base"),
    "mdrc_conv": dict(variant="mdrc", mdrc_placement="conv_layers", dilations=(2, 3)),
    "mdrc_c3": dict(variant="mdrc", mdrc_placement="c3_layers", dilations=(2, 3)),
    "mdrc_d2": dict(variant="mdrc", mdrc_placement="conv_layers", dilations=(2,)),
    "dcap": dict(variant="dcap", mdrc_placement="conv_layers"),
    "mdrc_ssca": dict(variant="mdrc_ssca", mdrc_placement="conv_layers"),
    "spp": dict(variant="spp"),
}


@dataclass
class AblationRow:
    name: str
    reports: list[EvalReport]

    def stats(self) -> dict[str, tuple[float, float | None]]:
        if len(self.reports) >= 2:
            return aggregate_runs(self.reports)
        return {k: (getattr(self.reports[0], k), None) for k in REPORT_FIELDS}


def run_ablation(cfg: RunConfig, data_dir, names: Sequence[str] | None = None, n_seeds: int = 3,
                 split: str = "val", progress=None) -> list[AblationRow]:
    names = list(names or ABLATION_GRID)
    unknown = [n for n in names if n not in ABLATION_GRID]
    if unknown:
        raise KeyError(f"unknown ablation rows: {', '.join(unknown)}")
    rows = []
    for name in names:
        reports = []
        for i in range(n_seeds):
            mc = dataclasses.replace(cfg.model, seed=cfg.model.seed + i, **ABLATION_GRID[name])
            model, _ = train_model(cfg, data_dir, mc)
            reports.append(evaluate_model(model, cfg, data_dir, split))
            if progress:
                progress(name, i, reports[-1])
        rows.append(AblationRow(name, reports))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    with_std = all(len(r.reports) >= 2 for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["variant"]
    for k in REPORT_FIELDS:
        header += [k, f"{k}_std"] if with_std else [k]
    w.writerow(header)
    for r in rows:
        st = r.stats()
        line = [r.name]
        for k in REPORT_FIELDS:
            mean, std = st[k]
            line += [f"{mean:.6f}", f"{std:.6f}"] if with_std else [f"{mean:.6f}"]
        w.writerow(line)
    return buf.getvalue()


def ablation_table(rows: Sequence[AblationRow]) -> str:
    width = max(len(r.name) for r in rows + [AblationRow("variant", [])])
    lines = [f"{'variant':<{width}}" + "".join(f"{k:>16}" for k in REPORT_FIELDS)]
    for r in rows:
        cells = []
        for k in REPORT_FIELDS:
            mean, std = r.stats()[k]
            cells.append(f"{100 * mean:.2f}" if std is None else f"{100 * mean:.2f}±{100 * std:.2f}")
        lines.append(f"{r.name:<{width}}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines) + "\n"


# -- benchmark ---------------------------------------------------------------------------

BENCH_SHAPES = [
    ((2, 3, 17, 17), (4, 3, 3, 3), 1, 1, 1),
    ((1, 4, 16, 16), (8, 4, 3, 3), 2, 2, 2),
    ((2, 2, 12, 15), (3, 2, 3, 3), 1, 3, 3),
    ((1, 8, 9, 9), (8, 8, 1, 1), 1, 0, 1),
    ((1, 2, 20, 20), (1, 2, 7, 7), 1, 3, 1),
]


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def conv_equivalence(seed: int = 0) -> list[float]:
    """Max |im2col - direct| (float32) on the fixed benchmark shapes."""
    rng = np.random.default_rng(seed)
    errs = []
    for xs, ws, stride, pad, dil in BENCH_SHAPES:
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        b = rng.normal(size=ws[0]).astype(np.float32)
        fast = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
        slow = T.conv2d_direct(x, w, b, stride, pad, dil)
        errs.append(float(np.abs(fast - slow).max()))
    return errs


def run_bench(repeats: int = 5, seed: int = 0) -> tuple[list[tuple[str, float, float]], list[float]]:
    """Timing pairs (name, seconds A, seconds B) and the conv equivalence errors."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 16, 32, 32)).astype(np.float32))
    w = Tensor(rng.normal(size=(16, 16, 3, 3)).astype(np.float32))
    b = Tensor(np.zeros(16, dtype=np.float32))
    plain = blocks.ConvBlock.create(16, 16, 3, rng)
    mdrc = blocks.MDRCBlock.create(16, 16, rng)
    aasp = blocks.AaSPBlock.create(16, 16, rng)
    sppf = blocks.SPPFBlock.create(16, 16, rng)
    with T.no_grad():
        pairs = [
            ("conv2d im2col vs direct",
             _median_time(lambda: T.conv2d(x, w, b, 1, 2, 2), repeats),
             _median_time(lambda: T.conv2d_direct(x.data, w.data, b.data, 1, 2, 2), repeats)),
            ("MDRC vs plain conv", _median_time(lambda: mdrc(x), repeats), _median_time(lambda: plain(x), repeats)),
            ("AaSP vs SPPF", _median_time(lambda: aasp(x), repeats), _median_time(lambda: sppf(x), repeats)),
        ]
    return pairs, conv_equivalence(seed)


def bench_table(pairs) -> str:
    width = max(len(p[0]) for p in pairs)
    lines = [f"{'pair':<{width}}  {'A ms':>9}  {'B ms':>9}  {'A/B':>6}"]
    for name, a, b in pairs:
        lines.append(f"{name:<{width}}  {1e3 * a:9.3f}  {1e3 * b:9.3f}  {a / b:6.2f}")
    return "\n".join(lines)
