# coding: utf-8

# # Where the trainable parameters live
#
# The grounding model has three tagged parts: a text encoder, an image
# encoder and a decoder (which owns the box head). A PEFT method is injected
# into any subset of them. This script counts trainable parameters for each
# method and placement and shows that injection leaves the output unchanged.

# %%

import numpy as np

from vgpeft.model import ModelConfig, build_model
from vgpeft.peft import PeftSpec, inject, param_report, placement_sweep, render_sweep

config = ModelConfig()
base = build_model(config)
print(f"base model: {base.num_parameters():,} parameters")

# %% [markdown]
# Four standard placements, LoRA rank 16.

# %%

placements = [{"image"}, {"decoder"}, {"image", "decoder"}, {"text", "image", "decoder"}]
print(render_sweep(placement_sweep(base, PeftSpec.lora(rank=16), placements)))

# %% [markdown]
# Same sweep for adapters and BitFit. BitFit only trains biases, so it is
# always the cheapest.

# %%

for spec in (PeftSpec.adapter(), PeftSpec.bitfit()):
    print(spec.method.value)
    print(render_sweep(placement_sweep(base, spec, placements)))

# %% [markdown]
# A freshly injected model computes exactly what the base computes: LoRA's B
# starts at zero, adapters' up-projection starts at zero, and BitFit changes
# nothing until training.

# %%

rng = np.random.default_rng(1)
patches = rng.standard_normal((5, config.patch_grid ** 2, config.patch_dim))
tokens = [[4, 9, 12], [7, 3], [20, 21, 22, 23], [5], [8, 8, 8]]
before = base.predict_batch(patches, tokens)
adapted = inject(build_model(config), PeftSpec.adapter())
print("identical outputs:", np.array_equal(adapted.predict_batch(patches, tokens), before))
print(param_report(adapted).render())
