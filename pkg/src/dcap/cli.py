"""Command-line entry point: ``dcap {generate,train,eval,predict,gradcheck,bench,ablate}``.

Exit codes: 0 ok, 1 check failed, 2 config error, 3 IO error, 4 training
diverged, 5 evaluation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as X
from . import gradsuite
from .config import RunConfig, load_run_config
from .data import CLASS_NAMES, GenerationError, read_split, parse_labels
from .detector import CheckpointMismatchError, load_checkpoint, predict
from .errors import ConfigError, FormatError, ReportUndefinedError, TrainingDivergedError
from .metrics import evaluate, read_predictions, write_predictions

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_EVAL = 0, 1, 2, 3, 4, 5

log = logging.getLogger("dcap")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError("--out is required", EXIT_CONFIG)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}", EXIT_IO) from None
    return out


def _data_dir(args) -> Path:
    if not args.data:
        raise CliError("--data is required", EXIT_CONFIG)
    root = Path(args.data)
    if not (root / "manifest.csv").is_file():
        raise CliError(f"no corpus at {root} (manifest.csv missing)", EXIT_IO)
    return root


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_IO) from None


def _load_model(args, cfg):
    if not args.ckpt:
        raise CliError("--ckpt is required", EXIT_CONFIG)
    try:
        return load_checkpoint(args.ckpt, cfg.model)
    except CheckpointMismatchError as exc:
        raise CliError(str(exc), EXIT_EVAL) from None
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.ckpt}: {exc.strerror}", EXIT_IO) from None


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    try:
        ids = X.make_corpus(cfg, out)
    except OSError as exc:
        raise CliError(f"cannot write corpus under {out}: {exc.strerror} ({exc.filename})", EXIT_IO) from None
    except GenerationError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    print(f"wrote {len(ids)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    out = _out_dir(args)
    try:
        X.train_to_dir(cfg, data, out)
    except TrainingDivergedError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    print(f"checkpoint: {out / 'model.ckpt'}\nloss log: {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    out = _out_dir(args)
    try:
        ids = read_split(data, args.split)
    except OSError as exc:
        raise CliError(f"cannot read split {args.split}: {exc.strerror}", EXIT_IO) from None
    try:
        if args.predictions:
            pred_dir = Path(args.predictions)
            dets = [read_predictions(pred_dir / f"{i}.txt") for i in ids]
            size = cfg.model.image_size
            gts = [parse_labels(data / "labels" / f"{i}.txt", size, cfg.model.num_classes) for i in ids]
            report = evaluate(dets, gts)
        else:
            model = _load_model(args, cfg)
            report = X.evaluate_model(model, cfg, data, args.split)
    except ReportUndefinedError as exc:
        raise CliError(f"split {args.split!r}: {exc}", EXIT_EVAL) from None
    except FormatError as exc:
        raise CliError(str(exc), EXIT_EVAL) from None
    _write(out / f"eval_{args.split}.csv", report.to_csv())
    table = report.to_table()
    _write(out / f"eval_{args.split}.txt", table)
    print(table, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    out = _out_dir(args)
    model = _load_model(args, cfg)
    images = X.load_split(data, args.split, cfg.model.num_classes)
    dets = predict(model, [im.pixels for im in images], args.conf, cfg.eval.iou_thresh)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for im, d in zip(images, dets):
        write_predictions(pred_dir / f"{im.id}.txt", d)
    print(f"wrote {len(images)} prediction files to {pred_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    faults = tuple(args.inject_fault or ())
    results = gradsuite.run_suite(fault_ops=faults)
    print(gradsuite.format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        culprit = f" (corrupted op: {', '.join(faults)})" if faults else ""
        print(f"FAILED: {', '.join(failed)}{culprit}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    pairs, errs = X.run_bench(repeats=args.repeats)
    print(X.bench_table(pairs))
    worst = max(errs)
    print(f"im2col vs direct on {len(errs)} shapes: max abs diff {worst:.2e}")
    if worst > 1e-5:
        print("conv2d im2col path disagrees with direct summation", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    out = _out_dir(args)
    names = args.variants.split(",") if args.variants else None
    try:
        rows = X.run_ablation(
            cfg, data, names, n_seeds=args.seeds, split=args.split,
            progress=lambda n, i, r: log.info("%s seed %d: map50 %.4f", n, i, r.map50),
        )
    except KeyError as exc:
        raise CliError(str(exc.args[0]), EXIT_CONFIG) from None
    except TrainingDivergedError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    except ReportUndefinedError as exc:
        raise CliError(str(exc), EXIT_EVAL) from None
    _write(out / "ablation.csv", X.ablation_csv(rows))
    table = X.ablation_table(rows)
    _write(out / "ablation.txt", table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, *, config=True, data=False, out=False, split=False, ckpt=False):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", metavar="PATH", help="key=value run configuration")
        if data:
            p.add_argument("--data", metavar="DIR", help="corpus directory")
        if out:
            p.add_argument("--out", metavar="PATH", help="output directory")
        if split:
            p.add_argument("--split", choices=("train", "val", "test"), default="val")
        if ckpt:
            p.add_argument("--ckpt", metavar="PATH", help="model checkpoint")
        p.set_defaults(func=fn)
        return p

    add("generate", cmd_generate, "synthesize a corpus and its splits", out=True)
    add("train", cmd_train, "train a detector", data=True, out=True)
    p = add("eval", cmd_eval, "evaluate a checkpoint or prediction files", data=True, out=True, split=True, ckpt=True)
    p.add_argument("--predictions", metavar="DIR", help="score stored prediction files instead of a model")
    p = add("predict", cmd_predict, "write per-image prediction files", data=True, out=True, split=True, ckpt=True)
    p.add_argument("--conf", type=float, default=0.25, help="confidence threshold")
    p = add("gradcheck", cmd_gradcheck, "float64 gradient checks of all ops and blocks", config=False)
    p.add_argument("--inject-fault", action="append", metavar="OP", help=argparse.SUPPRESS)
    p = add("bench", cmd_bench, "time conv/block pairs", config=False)
    p.add_argument("--repeats", type=int, default=5)
    p = add("ablate", cmd_ablate, "train and evaluate the ablation grid", data=True, out=True, split=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--variants", help="comma-separated subset of: " + ",".join(X.ABLATION_GRID))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dcap: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"dcap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"dcap: IO error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
