"""
Overfitting four pairs
======================

The reduced network on four synthetic pairs for a handful of epochs. Loss
should fall steadily; a longer run (150 epochs, about ten minutes on one
CPU) is what the acceptance suite does.

    python demos/05_overfit.py [epochs]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from fpdmnet.data import make_dataset
from fpdmnet.model import ModelConfig
from fpdmnet.training import TrainConfig, evaluate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

with tempfile.TemporaryDirectory() as tmp:
    data = make_dataset(4, seed=7, out_dir=Path(tmp) / "d")
    cfg = TrainConfig(epochs=epochs, batch_size=2, seed=1, model=ModelConfig(depth=2, base=8))

    def progress(row):
        print(f"epoch {row.epoch:3d} step {row.step:4d} lr {row.lr:.6f} loss {row.loss:.4f}")

    result = train(cfg, data, Path(tmp) / "run", progress=progress)
    means = result.log.epoch_means()
    print("epoch-mean loss %.4f -> %.4f" % (means[0], means[max(means)]))

    report = evaluate(result.model, data)
    print("training set: psnr %.2f dB, ssim %.4f" % (report.mean.psnr_db, report.mean.ssim))
    print("checkpoints:", [p.name for p in result.checkpoint_paths][-3:])
