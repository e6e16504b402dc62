# coding: utf-8

# # Fine-tuning LoRA on synthetic grounding scenes
#
# Each scene is an 8x8 grid of patch features. One object is the referent of
# a query like "the ship on the left"; no distractor of the same class sits
# inside the queried region. We train rank-4 LoRA everywhere and watch
# precision at IoU 0.5 climb from zero.
#
# Takes about a minute on one core. Raise STEPS to 2000 for the full run.

# %%

import numpy as np

from vgpeft.data import SyntheticSpec, generate_synthetic
from vgpeft.model import ModelConfig, build_model
from vgpeft.peft import PeftSpec, inject
from vgpeft.train import TrainConfig, evaluate, train

STEPS = 600

train_set = generate_synthetic(SyntheticSpec(n_samples=512, seed=1))
test_set = generate_synthetic(SyntheticSpec(n_samples=128, seed=2))
print(train_set[0].query, train_set[0].bbox)

# %%

model = build_model(ModelConfig())
print(evaluate(model, test_set).render("untrained"))

# %%

inject(model, PeftSpec.lora(rank=4))
log = train(model, train_set, TrainConfig(steps=STEPS, lr=2e-3, eval_every=STEPS // 3),
            eval_data=test_set,
            progress=lambda s, v: print(f"step {s:4d}  loss {v:.4f}") if s % 100 == 0 else None)
print(log.summary())

# %% [markdown]
# The loss curve, smoothed over 50 steps.

# %%

curve = np.convolve(log.losses, np.ones(50) / 50, mode="valid")
for step in range(0, len(curve), 100):
    print(f"{step + 50:5d}  {curve[step]:.4f}  " + "#" * int(40 * curve[step] / curve[0]))

# %%

print(log.evals[-1][1].render("LoRA r=4"))
