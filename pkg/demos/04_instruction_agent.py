"""
An instruction-following agent on scripted episodes
===================================================

Per-view attention, gated view fusion, the instruction selector, and a short
imitation run. Navigation stops are only visible in the images, so the agent
has to look before it emits COMPLETE.
"""
import numpy as np

from miat.harness import data as D
from miat.harness.config import preset
from miat.harness.train import train
from miat.hierview import (InstructionState, advance_instruction, gated_view_fusion,
                           simplify_nav_sequence)
from miat.tensor import Tensor

rng = np.random.default_rng(0)

# five view summaries and an instruction vector
views, s, W = rng.normal(size=(5, 8)), rng.normal(size=8), rng.normal(size=(8, 8)) / 8
_, gates = gated_view_fusion(views, s, W, return_gates=True)
_, weights = gated_view_fusion(views, s, W, mode="softmax", return_gates=True)
print("independent gates:", gates.data.round(3), "sum", gates.data.sum().round(3))
print("softmax weights:  ", weights.data.round(3), "sum", weights.data.sum().round(3))

# the selector moves on only when COMPLETE wins the argmax
state = InstructionState(1, 3, Tensor(rng.normal(size=(3, 8))))
complete = D.COMPLETE
for a in [0, 0, complete, 3, complete, complete, complete]:
    p = np.full(complete + 1, 0.01)
    p[a] = 1.0 - 0.01 * complete
    state, _ = advance_instruction(state, p, complete)
    print(D.ACTIONS[a] if a < complete else "COMPLETE", "->", state.m, "(done)" if state.done else "")

print(simplify_nav_sequence(["RotateLeft", "MoveAhead", "MoveAhead", "RotateRight"],
                            ["RotateLeft", "RotateRight", "MoveAhead"]))

# one scripted episode
ep = D.gen_instruct_toy(0, 1)[0]
words = [[D.INSTRUCTION_VOCAB[t] for t in row if t] for row in ep.instructions]
print(words)
print([D.ACTIONS[a] if a < complete else "COMPLETE" for a in ep.actions])

# a short imitation run (the acceptance suite uses 500 episodes for 25 epochs)
tr, va = D.gen_instruct_toy(0, 200), D.gen_instruct_toy(1, 50)
result = train(preset("instruct-toy", epochs=6), tr, va, log=None, write_checkpoints=False)
for e, m in enumerate(result.metrics, 1):
    print(f"epoch {e}: action {m['action_accuracy']:.3f} mask {m['mask_accuracy']:.3f}")
