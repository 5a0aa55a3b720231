"""
One encoder, a chain of prediction heads
========================================

In ``stack_fc`` every head after the first reads the encoder output plus
the previous head's raw scores. ``stack_fc_skip`` also feeds a shallower,
higher-resolution encoder map to the finer heads, so their output grows
in resolution. ``standalone`` and ``stack_full`` are the baselines.
"""

import numpy as np

from parsestack.autodiff import Tensor
from parsestack.hierarchy import bundled_hierarchy
from parsestack.model import BlockSpec, EncoderConfig, StackedHeadConfig, build_model, predict

h = bundled_hierarchy("geoscene")
encoder = EncoderConfig((BlockSpec(8), BlockSpec(16), BlockSpec(32), BlockSpec(32, downsample=False)))
heads = StackedHeadConfig.for_hierarchy(h, taps=(None, 1, 0), head_channels=16)
x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64)))

for mode in ("standalone", "stack_full", "stack_fc", "stack_fc_skip"):
    model = build_model(mode, encoder, heads, h, seed=0, level=2 if mode == "standalone" else None)
    scores = model.forward(x)
    n_params = sum(p.data.size for p in model.parameters())
    print(f"{mode:>14}: {n_params:7d} parameters, score maps {[s.shape[1:] for s in scores]}")

# predictions are argmax maps at input resolution, one per level
maps = predict(model, x)
print([m.shape for m in maps.maps])
