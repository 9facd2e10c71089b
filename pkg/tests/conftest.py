import numpy as np
import pytest

from ggpvqa import autodiff as ad
from ggpvqa.nn import MultiModalModel
from ggpvqa.objectives import vqa_loss
from ggpvqa.optim import AdamW
from ggpvqa.synthdata import gen_vqa_set, pad_ids, stack_grids


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.current_tape().clear()
    yield
    ad.current_tape().clear()


@pytest.fixture(scope="session")
def overfit_single():
    """A model trained on one VQA sample until its answer loss drops below 0.01."""
    sample = gen_vqa_set(0, 1, 1)[0][0]
    images = stack_grids([sample.scene])
    q = pad_ids([sample.question_ids])
    a = pad_ids([sample.answer_ids])
    model = MultiModalModel(seed=0)
    opt = AdamW(model.params, lr=1e-3)
    losses = []
    for _ in range(500):
        opt.zero_grad()
        loss = vqa_loss(model, images, q, a)
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
        if losses[-1] < 0.01:
            break
    return model, sample, losses


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
