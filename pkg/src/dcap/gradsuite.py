"""Float64 finite-difference checks over every op, block and the tiny detector."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import AaSPBlock, C3Block, ConvBlock, MDRCBlock, SEAttention, SPPFBlock, SSCABlock
from .detector import ModelConfig, assign_targets, build_model, compute_loss
from .tensor import Tensor, gradcheck

OP_TOL = 1e-6
BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-5


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rand(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def _block_check(make: Callable, shape, seed: int) -> float:
    rng = np.random.default_rng(seed)
    block = make(rng)
    x = _rand(rng, *shape)
    proj = np.random.default_rng(seed + 1000).normal(size=block(x).shape)
    return gradcheck(lambda t: (block(t) * proj).sum(), x, EPS, wrt=block.parameters())


def _op_items():
    def conv(d, s, p):
        def run():
            rng = np.random.default_rng(10 + d + s)
            x, w, b = _rand(rng, 1, 2, 7, 7), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
            proj = rng.normal(size=T.conv2d(x, w, b, s, p, d).shape)
            return gradcheck(lambda a, ww, bb: (T.conv2d(a, ww, bb, s, p, d) * proj).sum(), [x, w, b], EPS)
        return run

    def maxpool():
        rng = np.random.default_rng(20)
        x = _rand(rng, 1, 2, 6, 6)
        proj = rng.normal(size=(1, 2, 6, 6))
        return gradcheck(lambda a: (T.maxpool2d(a, 3, 1, 1) * proj).sum(), x, EPS)

    def gap():
        rng = np.random.default_rng(21)
        x = _rand(rng, 2, 3, 4, 5)
        proj = rng.normal(size=(2, 3, 1, 1))
        return gradcheck(lambda a: (T.global_avg_pool(a) * proj).sum(), x, EPS)

    def dense():
        rng = np.random.default_rng(22)
        x, w, b = _rand(rng, 3, 4), _rand(rng, 4, 2), _rand(rng, 2)
        proj = rng.normal(size=(3, 2))
        return gradcheck(lambda a, ww, bb: (T.dense(a, ww, bb) * proj).sum(), [x, w, b], EPS)

    def act(kind):
        def run():
            rng = np.random.default_rng(23)
            # keep relu probes away from the kink
            v = rng.uniform(0.2, 2.0, size=(2, 3, 3, 3)) * rng.choice([-1.0, 1.0], size=(2, 3, 3, 3))
            proj = rng.normal(size=v.shape)
            return gradcheck(lambda a: (T.activate(a, kind) * proj).sum(), Tensor(v), EPS)
        return run

    def concat():
        rng = np.random.default_rng(24)
        a, b = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 1, 3, 3)
        proj = rng.normal(size=(1, 3, 3, 3))
        return gradcheck(lambda p, q: (T.concat_channels([p, q]) * proj).sum(), [a, b], EPS)

    def bmul():
        rng = np.random.default_rng(25)
        x, s = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 1, 1)
        proj = rng.normal(size=(2, 3, 4, 4))
        return gradcheck(lambda p, q: (T.elementwise(p, q, "mul") * proj).sum(), [x, s], EPS)

    def bce():
        rng = np.random.default_rng(26)
        z = _rand(rng, 3, 4, low=-3, high=3)
        t = rng.integers(0, 2, size=(3, 4))
        return gradcheck(lambda a: T.bce_with_logits(a, t).sum(), z, EPS)

    items = [
        ("conv2d d=1", conv(1, 1, 1)), ("conv2d d=2", conv(2, 1, 2)), ("conv2d d=3", conv(3, 1, 3)),
        ("conv2d d=2 stride 2", conv(2, 2, 2)), ("maxpool2d", maxpool), ("global_avg_pool", gap),
        ("dense", dense), ("relu", act("relu")), ("sigmoid", act("sigmoid")), ("silu", act("silu")),
        ("concat_channels", concat), ("broadcast mul", bmul), ("bce_with_logits", bce),
    ]
    return [(name, fn, OP_TOL) for name, fn in items]


def _block_items():
    items = [
        ("ConvBlock", lambda r: ConvBlock.create(2, 3, 3, r, dtype=np.float64), (1, 2, 6, 6)),
        ("MDRC residual", lambda r: MDRCBlock.create(2, 2, r, dtype=np.float64), (1, 2, 7, 7)),
        ("MDRC stride 2", lambda r: MDRCBlock.create(2, 3, r, stride=2, dtype=np.float64), (1, 2, 8, 8)),
        ("SE", lambda r: SEAttention.create(4, r, dtype=np.float64), (2, 4, 3, 3)),
        ("AaSP", lambda r: AaSPBlock.create(4, 4, r, dtype=np.float64), (1, 4, 5, 5)),
        ("SSCA", lambda r: SSCABlock.create(3, r, dtype=np.float64), (1, 3, 5, 5)),
        ("SPPF", lambda r: SPPFBlock.create(4, 3, r, dtype=np.float64), (1, 4, 5, 5)),
        ("C3", lambda r: C3Block.create(2, 4, r, dtype=np.float64), (1, 2, 5, 5)),
        ("C3 with MDRC", lambda r: C3Block.create(2, 4, r, use_mdrc=True, dtype=np.float64), (1, 2, 6, 6)),
    ]
    return [(name, (lambda m=make, s=shape, k=i: _block_check(m, s, 100 + k)), BLOCK_TOL)
            for i, (name, make, shape) in enumerate(items)]


def tiny_model_loss_check(variant: str = "dcap", seed: int = 0) -> float:
    cfg = ModelConfig(variant=variant, channels=(2, 4, 4), image_size=16, anchor=(6.0, 6.0), seed=seed)
    model = build_model(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 50)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 16, 16)))
    gts = [[(0, (1.0, 2.0, 9.0, 8.0)), (1, (10.0, 9.0, 15.0, 15.0))], [(1, (3.0, 3.0, 8.0, 11.0))]]
    assignments = [assign_targets(g, cfg) for g in gts]
    return gradcheck(lambda t: compute_loss(model(t), assignments, cfg).tensor, x, EPS, wrt=model.parameters())


def _model_items():
    return [("detector loss (tiny dcap)", tiny_model_loss_check, MODEL_TOL)]


def all_items():
    return _op_items() + _block_items() + _model_items()


def run_suite(items=None, fault_ops=()) -> list[GradResult]:
    """Run each check; ``fault_ops`` names ops whose backward gets corrupted."""
    results = []
    with T.precision(np.float64), T.inject_grad_fault(*fault_ops):
        for name, fn, tol in items if items is not None else all_items():
            t0 = time.perf_counter()
            err = fn()
            results.append(GradResult(name, err, tol, time.perf_counter() - t0))
    return results


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'item':<{width}}  {'max rel err':>12}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.tol:8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
