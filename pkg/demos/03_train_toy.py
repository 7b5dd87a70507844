"""Build a small synthetic dataset and overfit a toy U-Net on it.

A 64 x 16 projection keeps this to well under a minute on one core.
"""

import tempfile
from pathlib import Path

from riunet.dataset import build_dataset, synthetic_sources
from riunet.metrics import format_table
from riunet.model import ModelConfig, build, parameter_count
from riunet.projection import ProjectionConfig
from riunet.scene import SceneSpec
from riunet.trainer import TrainConfig, evaluate, train

cfg = ProjectionConfig(width=64, height=16)
spec = SceneSpec(projection=cfg, spawn_range=(4.0, 15.0))

with tempfile.TemporaryDirectory() as tmp:
    manifest = build_dataset(synthetic_sources(6, seed=1, base=spec), Path(tmp) / "data", cfg, seed=1, n_val=2)
    print(f"train ids {manifest.split_ids('train')}, val ids {manifest.split_ids('val')}")

    model = build(ModelConfig(depth_levels=2, base_features=8, input_height=16, input_width=64), seed=1)
    print(f"{parameter_count(model)} parameters")

    report = train(model, manifest, TrainConfig(epochs=60, batch_size=4, learning_rate=1e-2), out_dir=Path(tmp) / "run")
    print(f"loss: epoch 1 {report.epoch_losses[0]:.4f}, epoch 60 {report.epoch_losses[-1]:.4f}")

    print(format_table(evaluate(model, manifest, "train"), title="train IoU (%)"))
    print(format_table(evaluate(model, manifest, "val"), title="val IoU (%)"))
