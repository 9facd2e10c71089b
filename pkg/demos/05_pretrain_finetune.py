"""Pre-train, checkpoint, fine-tune, and write metrics for one config.

Uses the seconds-long smoke config by default; pass another config file to
run something larger, e.g. ``python3 demos/05_pretrain_finetune.py configs/desk.cfg``.
"""
import sys
import tempfile
from pathlib import Path

from ggpvqa.config import ExperimentConfig
from ggpvqa.harness import read_metrics, run_pipeline

cfg_path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "configs" / "smoke.cfg"
cfg = ExperimentConfig.load(cfg_path).replace(**{"ggp.pretrain": True, "ggp.finetune": True})

with tempfile.TemporaryDirectory() as out:
    pre, fine = run_pipeline(cfg, out)
    print("files:", sorted(p.name for p in Path(out).iterdir()))
    for r in read_metrics(Path(out) / "metrics.csv"):
        losses = (f"itc {r.loss_itc:.3f} itm {r.loss_itm:.3f} mlm {r.loss_mlm:.3f}"
                  if r.phase == "pretrain" else f"lm {r.loss_lm:.3f} overall acc {r.acc_overall:.3f}")
        print(f"{r.phase:9} epoch {r.epoch:2d}  {losses}  |r| {r.perturb_norm:.2e} clipped {r.clip_frac:.2f}")
    print("fingerprints:", fine.fingerprint)
