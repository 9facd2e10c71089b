"""The desk-scale model and its four training losses at initialization.

A freshly initialized model should sit near the uniform-guess values: ln 2
for the two-way matching head and about ln V for token prediction.
"""
import math

import numpy as np

from ggpvqa.nn import MomentumCopies, MultiModalModel
from ggpvqa.objectives import EmbeddingQueue, PretrainBatch, mlm_mask, pretrain_loss, vqa_loss
from ggpvqa.synthdata import VOCAB, gen_pretrain_set, gen_vqa_set, pad_ids, stack_grids

model = MultiModalModel(seed=0)
print(f"{model.num_parameters():,} parameters in {len(model.params)} tensors")
for comp in ("visual", "text", "fusion", "decoder"):
    print(f"  {comp:8} {sum(model.params[n].size for n in model.names(comp)):>7,}")

data = gen_pretrain_set(0, 16)
caps = pad_ids([c for _, c in data])
masked, pos = mlm_mask(caps, 0.15, rng=0)
batch = PretrainBatch(stack_grids([s for s, _ in data]), caps, masked, pos, itm_seed=0)
total, parts = pretrain_loss(model, batch, EmbeddingQueue(256), MomentumCopies(model))
print(f"\nITC {parts.itc:.3f} (uniform over 16 candidates would be {math.log(16):.3f})")
print(f"ITM {parts.itm:.3f} (ln 2 = {math.log(2):.3f})")
print(f"MLM {parts.mlm:.3f} (ln V = {math.log(len(VOCAB)):.3f})")

train, _ = gen_vqa_set(0, 16, 16)
lm = vqa_loss(model, stack_grids([s.scene for s in train]), pad_ids([s.question_ids for s in train]),
              pad_ids([s.answer_ids for s in train]))
print(f"LM  {lm.item():.3f} per answer token")

answers = model.greedy_decode(stack_grids([s.scene for s in train[:3]]),
                              pad_ids([s.question_ids for s in train[:3]]))
print("\nuntrained greedy answers:", [VOCAB.detokenize(a) for a in answers])
