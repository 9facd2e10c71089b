"""Full-length training runs on the default recipe.

These are slow (several minutes on one core) and check the two
training-outcome properties stated for the default configuration.
"""
import numpy as np
import pytest

from ggpvqa.config import ExperimentConfig
from ggpvqa.harness import evaluate, run_finetune, run_pretrain
from ggpvqa.synthdata import gen_vqa_set


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    cfg = ExperimentConfig().replace(**{"ggp.pretrain": False, "ggp.finetune": False})
    out = tmp_path_factory.mktemp("default")
    pre = run_pretrain(cfg, out)
    fine = run_finetune(cfg, pre.checkpoint, evaluate_every=cfg.finetune.epochs)
    return cfg, pre, fine


def test_default_pretraining_lowers_total_loss(default_runs):
    cfg, pre, _ = default_runs
    total = [r.loss_itc + r.loss_itm + r.loss_mlm for r in pre.records]
    print("pre-training total loss by epoch:", np.round(total, 4).tolist())
    assert len(total) == cfg.pretrain.epochs == 30
    assert total[-1] < total[0]


def test_default_finetuning_fits_training_split(default_runs):
    cfg, _, fine = default_runs
    train, _ = gen_vqa_set(cfg.seed, cfg.data.n_train, cfg.data.n_val)
    acc = evaluate(fine.model, train)
    print("training-split accuracy after 40 epochs:", acc,
          "| validation:", fine.records[-1].acc_overall)
    assert acc["acc_overall"] > 0.95
