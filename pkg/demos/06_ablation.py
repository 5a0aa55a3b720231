"""
Comparing the four strategies
=============================

Every strategy gets the same data, seed and epoch budget. The standalone
row trains one independent network per level. This is a short budget to
keep the demo quick; the command line runs the full one:

    parsestack ablate -o out/
"""

from pathlib import Path

from parsestack.model import BlockSpec, EncoderConfig, StackedHeadConfig
from parsestack.svg import bar_chart
from parsestack.synth import GeoSceneSpec, generate
from parsestack.training import STRATEGY_NAMES, TrainConfig, run_ablation

ds = generate(GeoSceneSpec(count=60, seed=42))
tr, va = ds.split(48)
encoder = EncoderConfig((BlockSpec(8), BlockSpec(16), BlockSpec(32), BlockSpec(32, downsample=False)))
heads = StackedHeadConfig.for_hierarchy(ds.hierarchy, (None, 1, 0), head_channels=16)

res = run_ablation(tr, va, encoder, heads, TrainConfig(epochs=3, batch_size=8))
print(res.to_table())
print("cross-level consistency", {m: round(v, 4) for m, v in res.consistency.items()})

out = Path("ablation_demo.svg")
out.write_text(bar_chart("mIoU per level", res.level_names, {STRATEGY_NAMES[m]: v for m, v in res.miou.items()}))
print("chart written to", out)
