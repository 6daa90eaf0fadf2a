"""
Answer ranking on the planted dialog task
=========================================

The answer to each question sits behind two hops: the question names a history
round, the round names an image entity, and the right candidate is that
entity's feature plus noise. Without the history the entity is a guess.
"""
import numpy as np

from miat.decoders import ranking_metrics
from miat.harness import data as D
from miat.harness.config import preset
from miat.harness.train import train

train_set = D.gen_dialog_toy(0, D.DialogSizes(examples=2000))
valid_set = D.gen_dialog_toy(1, D.DialogSizes(examples=500))
print({k: v.shape for k, v in train_set.items()})

# reference points: follow the pointers, or skip the history and guess
planted = D.planted_solver(valid_set)
blind = D.blinded_solver(valid_set, np.random.default_rng(0))
print("planted-rule R@1:", np.mean(planted == valid_set["gold"]))
print("history-blind R@1:", np.mean(blind == valid_set["gold"]))

# ranking metrics of a single score vector; ties go to the lower index
print(ranking_metrics(np.array([0.1, 2.0, 0.3, 2.0]), gold=3, relevance=[0, 0.5, 0, 1]))

# twelve epochs with all three inputs, then the same without the history
# (the acceptance suite runs the full 30)
config = preset("dialog-toy", epochs=12)
for utilities in ("v,q,r", "v,q"):
    result = train(config.replace(utilities=utilities), train_set, valid_set,
                   log=None, write_checkpoints=False)
    r1 = [round(m["R@1"], 3) for m in result.metrics]
    print(utilities, "R@1 by epoch:", r1)
