"""Command-line walkthrough: dataset, training, scoring, inference, pictures.

Equivalent shell session::

    riunet build-dataset --synth 6 --val 2 --width 128 --height 32 --out data
    riunet train --data data --depth-levels 2 --base-features 8 --epochs 20 --width 128 --height 32 --out run
    riunet eval --data data --checkpoint run/final.riuw --points --out eval
    riunet infer --data data --checkpoint run/final.riuw --input data/clouds/<id>.bin --out pred
    riunet render --input pred/<id>.rimg --out pictures
"""

import sys
import tempfile
from pathlib import Path

from riunet.cli import main

SIZE = ["--width", "128", "--height", "32"]


def step(*argv):
    print("$ riunet", " ".join(map(str, argv)))
    if main([str(a) for a in argv]) != 0:
        sys.exit(1)


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    step("build-dataset", "--synth", 6, "--val", 2, *SIZE, "--out", root / "data")
    step("train", "--data", root / "data", "--depth-levels", 2, "--base-features", 8, "--epochs", 20, "--lr", 0.01, *SIZE, "--out", root / "run")
    step("eval", "--data", root / "data", "--checkpoint", root / "run" / "final.riuw", "--points", "--out", root / "eval")
    cloud = sorted((root / "data" / "clouds").glob("*.bin"))[0]
    step("infer", "--data", root / "data", "--checkpoint", root / "run" / "final.riuw", "--input", cloud, "--out", root / "pred")
    step("render", "--input", root / "pred" / f"{cloud.stem}.rimg", "--out", Path.cwd() / "demo_pictures")
    print(f"picture written to demo_pictures/{cloud.stem}.ppm")
