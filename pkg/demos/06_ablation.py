"""The five-row perturbation ablation.

By default a three-seed miniature that finishes in under a minute.  With
``--desk`` it runs the five-seed desk recipe (about seven minutes on one core).
"""
import argparse
from pathlib import Path

from ggpvqa.config import ExperimentConfig
from ggpvqa.harness import run_ablation

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--desk", action="store_true", help="five seeds with configs/desk.cfg")
parser.add_argument("--out", default=None, help="keep ablation.csv, curves.csv and ablation.json here")
args = parser.parse_args()

root = Path(__file__).parents[1] / "configs"
if args.desk:
    cfg, seeds = ExperimentConfig.load(root / "desk.cfg"), range(5)
else:
    cfg, seeds = ExperimentConfig.load(root / "smoke.cfg"), range(3)

report = run_ablation(cfg, list(seeds), args.out)
print(f"{'row':<13} {'open':>15} {'closed':>15} {'overall':>15}")
for name, row in report["rows"].items():
    cells = " ".join(f"{row[k]['mean']:.3f} ± {row[k]['std']:.3f}".rjust(15)
                     for k in ("acc_open", "acc_closed", "acc_overall"))
    print(f"{name:<13} {cells}")
print("flags:", report["flags"] or "none")
print("mean accuracy per epoch, full configuration:",
      [round(v, 3) for v in report["rows"]["PT+FT+APM"]["curves"]])
