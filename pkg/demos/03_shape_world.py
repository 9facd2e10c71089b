"""The synthetic shape-world corpus.

Prints a few scenes as character art with their captions, then a handful of
open and closed questions with answers, and basic split statistics.
"""
from collections import Counter

from ggpvqa.synthdata import VOCAB, gen_pretrain_set, gen_vqa_set

CHARS = {0.0: ".", 0.4: "o", 0.9: "#"}


def show(grid):
    for row in grid:
        print("   ", " ".join(CHARS[float(v)] for v in row))


for scene, caption in gen_pretrain_set(seed=0, n=3):
    show(scene.render())
    print("    caption:", " ".join(VOCAB.detokenize(caption[1:])), "\n")

train, val = gen_vqa_set(seed=0, n_train=256, n_val=256)
for s in train[:6]:
    q = " ".join(VOCAB.detokenize(s.question_ids[1:]))
    a = VOCAB.detokenize(s.answer_ids)[1]
    print(f"[{s.question_type:6}] {q}? -> {a}")

closed = Counter(VOCAB.words[s.answer_ids[1]] for s in train + val if s.question_type == "closed")
kinds = Counter(s.question_type for s in train + val)
print("\nquestion types:", dict(kinds), "| closed answers:", dict(closed))
print("shared scenes between splits:",
      len({s.grid.tobytes() for s in train} & {s.grid.tobytes() for s in val}))
