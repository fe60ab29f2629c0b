"""End-to-end pipeline through the command-line interface.

Runs synth -> fit-gmm -> train -> predict -> evaluate on a small synthetic
cohort with one held-out fold, then prints the metric files.  Equivalent
shell commands are shown as they run.
"""

import sys
import tempfile
from pathlib import Path

from dpsurv.cli import main

root = Path(tempfile.mkdtemp(prefix="dpsurv_demo_"))
print(f"working under {root}\n")


def run(*args):
    cmd = [str(a) for a in args]
    print("$ dpsurv " + " ".join(cmd))
    code = main(cmd)
    if code != 0:
        sys.exit(code)


run("synth", "--n", 80, "--dim", 8, "--components", 3, "--patches", "64",
    "--censor-rate", 0.25, "--noise-sd", 0.3, "--seed", 1,
    "--out", root / "data")
run("fit-gmm", "--manifest", root / "data" / "manifest.json",
    "--out", root / "gmm", "--components", 3, "--folds", 2, "--seed", 1)
run("train", "--embeddings", root / "gmm" / "fold_0" / "embeddings.json",
    "--manifest", root / "data" / "manifest.json",
    "--out", root / "model", "--fold", 0, "--epochs", 20, "--seed", 1)
run("predict", "--model", root / "model" / "model.json",
    "--embeddings", root / "gmm" / "fold_0" / "embeddings.json",
    "--manifest", root / "data" / "manifest.json",
    "--out", root / "pred", "--subjects", "test", "--fold", 0)
run("evaluate", "--predictions", root / "pred" / "predictions.csv",
    "--manifest", root / "data" / "manifest.json", "--out", root / "eval")

print("\n--- metrics.csv ---")
print((root / "eval" / "metrics.csv").read_text())
print("--- calibration.csv (first rows) ---")
lines = (root / "eval" / "calibration.csv").read_text().splitlines()
print("\n".join(lines[:6]))
print(f"\nall outputs under {root}")
