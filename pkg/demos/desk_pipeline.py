"""Walk through the desk-scale pipeline with a short training run.

    python3 demos/desk_pipeline.py [out_dir] [epochs]

Generates 500 scenarios on the 63 x 20 grid, trains the heads model on the
80% split, evaluates on the held-out 20% and prints one prediction.
"""
import json
import sys
from pathlib import Path

from hotleg.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
epochs = sys.argv[2] if len(sys.argv) > 2 else "20"


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


run("gen-data", "--preset", "desk", "--seed", 0, "--out", out / "data")
run("train", "--data", out / "data", "--preset", "desk", "--epochs", epochs, "--out", out / "train")
run("eval", "--data", out / "data", "--checkpoint", out / "train" / "checkpoint", "--out", out / "eval")
run("infer", "--checkpoint", out / "train" / "checkpoint", "--v-in", 0.73, "--out", out / "predict.json")

doc = json.loads((out / "predict.json").read_text())
for name in doc["parameter_order"]:
    vals = doc[name]
    print(f"{name:>4}: min {min(vals):.5g}  max {max(vals):.5g}  ({doc['n_points']} nodes)")
print("metrics:", out / "eval" / "metrics.csv")
print("field plots:", out / "eval" / "artifacts" / "fields")
