"""
A synthetic parsing dataset
===========================

Each image is a head with hair, two eyes, a nose and two lips. The left
and right eyes share one colour, as do the two lips, so telling them apart
needs the position inside the head rather than local appearance.
"""

import tempfile
from pathlib import Path

import numpy as np

from parsestack.synth import GeoSceneSpec, export_png, generate, load_dataset, save_dataset

ds = generate(GeoSceneSpec(count=8, seed=42))
print("images", ds.images.shape, ds.images.dtype, " fine labels", ds.fine.shape, ds.fine.dtype)

names = ds.hierarchy.levels[-1].class_names
counts = np.bincount(ds.fine[0].ravel(), minlength=len(names))
for name, n in zip(names, counts):
    print(f"{name:>10}: {n:5d} px")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "geo.psds"
    save_dataset(ds, path)
    back = load_dataset(path)
    print("file bytes", path.stat().st_size, " identical after reload:", np.array_equal(back.fine, ds.fine))

    export_png(ds, Path(tmp) / "png")
    print(sorted(p.name for p in (Path(tmp) / "png" / "lbl").iterdir()))
