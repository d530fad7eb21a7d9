"""
Training a small detector end to end
====================================

Generates a synthetic single-band corpus, trains the dcap variant for a few
epochs and evaluates it. Takes about a minute on one core. Pass a number of
epochs as the first argument to train longer.
"""

import sys
import tempfile
from pathlib import Path

from dcap import experiments as X
from dcap.config import parse_run_config
from dcap.detector import loss_log_csv

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

# The same key=value format the CLI reads.
cfg = parse_run_config(f"""
variant = dcap
count = 64
epochs = {epochs}
""")

with tempfile.TemporaryDirectory() as tmp:
    data = Path(tmp) / "corpus"
    ids = X.make_corpus(cfg, data)
    print(f"generated {len(ids)} images under {data}")

    model, history = X.train_model(cfg, data)
    log = loss_log_csv(history).splitlines()
    print("first and last epochs of the loss log:")
    print("\n".join([log[0], log[1], log[-1]]))

    for split in ("train", "val"):
        report = X.evaluate_model(model, cfg, data, split)
        print(f"{split}: mAP50 {report.map50:.3f}  mAP50-95 {report.map50_95:.3f}  IoU {report.mean_iou:.3f}")
