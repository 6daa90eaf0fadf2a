"""
Fusing grid and region features in a caption layer
==================================================

Three ways for word features to read two visual sources, the sigmoid gates of
the parallel design, and the box-regression loss.
"""
import numpy as np

from miat.fusion import FusionLayer, ParallelCross, box_loss, parallel_gates, xe_loss
from miat.harness import data as D
from miat.harness.config import preset
from miat.harness.train import train
from miat.tensor import Tensor

rng = np.random.default_rng(0)
words, grid, region = rng.normal(size=(5, 16)), rng.normal(size=(9, 16)), rng.normal(size=(3, 16))

for design in ("concat", "sequential", "parallel"):
    layer = FusionLayer(16, 4, rng, design=design)
    print(design, layer(words, grid, region).shape, layer.num_parameters(), "parameters")

# gates are per feature, per word, and do not compete with each other
p = ParallelCross(16, 4, rng)
c_g, c_r = parallel_gates(Tensor(words), Tensor(grid[:5]), Tensor(region[[0, 1, 2, 0, 1]]), p)
print("grid gate mean %.3f, region gate mean %.3f" % (c_g.data.mean(), c_r.data.mean()))

# box loss: 5 * L1 + 2 * (1 - GIoU); disjoint unit boxes give 20 + 3
l1, giou, total = box_loss(np.array([0.0, 0.0, 1.0, 1.0]), np.array([1.0, 1.0, 2.0, 2.0]))
print("l1", l1.item(), "giou term", giou.item(), "total", total.item())

# uniform logits cost ln(vocab) per word
print("xe of 3 words over 7 tokens:", xe_loss(np.zeros((3, 7)), [0, 1, 2]).item(), 3 * np.log(7))

# copy task: the caption lists the region classes; grid cells are distractors
tr = D.gen_fusion_toy(0, D.FusionSizes(examples=400))
va = D.gen_fusion_toy(1, D.FusionSizes(examples=100))
result = train(preset("fusion-toy", epochs=4, d=32), tr, va, log=None, write_checkpoints=False)
print("token accuracy by epoch:", [round(m["accuracy"], 3) for m in result.metrics])
