"""Declarative run configuration: one TOML document merged with command-line overrides.

Layout::

    [data]    hierarchy, train_count, val_count, dir, plus any GeoSceneSpec field
    [model]   channels, convs_per_block, downsample, taps, head_channels, head_conv_layers
    [train]   any TrainConfig field

``taps`` lists the encoder block feeding each head below the coarsest one
(``-1`` for none). ``grad_clip = 0`` disables clipping and an empty
``loss_weights`` means unit weights.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from .hierarchy import LabelHierarchy, bundled_hierarchy, load_hierarchy
from .model import BlockSpec, EncoderConfig, StackedHeadConfig
from .synth import GeoSceneSpec
from .training import TrainConfig

# schema versions of the files a run writes, archived with the resolved config
OUTPUT_SCHEMAS = {"ablation_csv": 1, "metrics_csv": 1, "trainlog_csv": 1, "validation_csv": 1}


class ConfigError(ValueError):
    pass


_SPEC_FIELDS = {f.name for f in fields(GeoSceneSpec)} - {"count"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_MODEL_KEYS = {"channels", "convs_per_block", "downsample", "taps", "head_channels", "head_conv_layers"}
_DATA_KEYS = {"hierarchy", "train_count", "val_count", "dir"} | _SPEC_FIELDS


@dataclass(frozen=True)
class RunConfig:
    hierarchy_source: str
    spec: GeoSceneSpec
    train_count: int
    val_count: int
    data_dir: str
    encoder: EncoderConfig
    taps: tuple[int, ...]
    head_channels: int
    head_conv_layers: int
    train: TrainConfig
    levels: Optional[int] = None

    # derived views

    def full_hierarchy(self) -> LabelHierarchy:
        src = self.hierarchy_source
        if src.endswith(".hier") or "/" in src:
            return load_hierarchy(src)
        return bundled_hierarchy(src)

    def hierarchy(self) -> LabelHierarchy:
        """The hierarchy being trained, keeping the ``levels`` finest levels when set."""
        h = self.full_hierarchy()
        if self.levels is None or self.levels == h.num_levels:
            return h
        return LabelHierarchy(h.levels[-self.levels :])

    def heads(self) -> StackedHeadConfig:
        h = self.hierarchy()
        taps = [None] + [None if t < 0 else t for t in self.taps[len(self.taps) - (h.num_levels - 1) :]]
        return StackedHeadConfig.for_hierarchy(h, taps, self.head_channels, self.head_conv_layers)

    def validate(self) -> None:
        """Check every section together before any work starts."""
        try:
            full = self.full_hierarchy()
            if self.levels is not None and not 1 <= self.levels <= full.num_levels:
                raise ConfigError(f"--levels {self.levels} outside 1..{full.num_levels}")
            h = self.hierarchy()
            if len(self.taps) != full.num_levels - 1:
                raise ConfigError(f"model.taps needs {full.num_levels - 1} entries (one per head below the coarsest)")
            self.spec.check()
            if self.train_count < 1 or self.val_count < 0:
                raise ConfigError("data.train_count must be >= 1 and data.val_count >= 0")
            f = self.encoder.downsample_factor
            hh, ww = self.spec.image_size
            if hh % f or ww % f:
                raise ConfigError(f"image_size {self.spec.image_size} is not a multiple of the encoder stride {f}")
            self.heads().check(h, self.encoder)
            self.train.check(h.num_levels if self.train.mode != "standalone" else 1)
        except ConfigError:
            raise
        except (ValueError, OSError) as err:
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict[str, Any]:
        spec = self.spec.to_dict()
        spec.pop("count")
        spec["image_size"] = list(spec["image_size"])
        data = {"hierarchy": self.hierarchy_source, "train_count": self.train_count, "val_count": self.val_count}
        data["dir"] = self.data_dir
        data.update(spec)
        blocks = self.encoder.blocks
        model = {
            "channels": [b.channels for b in blocks],
            "convs_per_block": [b.convs for b in blocks],
            "downsample": [b.downsample for b in blocks],
            "taps": list(self.taps),
            "head_channels": self.head_channels,
            "head_conv_layers": self.head_conv_layers,
        }
        t = self.train
        train = {f.name: getattr(t, f.name) for f in fields(TrainConfig)}
        train["loss_weights"] = list(t.loss_weights or [])
        train["lr_milestones"] = list(t.lr_milestones)
        train["grad_clip"] = 0.0 if t.grad_clip is None else t.grad_clip
        out = {"data": data, "model": model, "train": train, "outputs": dict(OUTPUT_SCHEMAS)}
        if self.levels is not None:
            out["run"] = {"levels": self.levels}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dataset_spec(self) -> GeoSceneSpec:
        return replace(self.spec, count=self.train_count + self.val_count)


def _unknown(section: str, got: dict, allowed: set) -> None:
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")


def _per_block(value, n: int, name: str) -> list:
    if isinstance(value, list):
        if len(value) != n:
            raise ConfigError(f"model.{name} has {len(value)} entries for {n} blocks")
        return value
    return [value] * n


def from_dict(doc: dict[str, Any]) -> RunConfig:
    _unknown("top level", doc, {"data", "model", "train", "outputs", "run"})
    data = dict(doc.get("data", {}))
    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    _unknown("data", data, _DATA_KEYS)
    _unknown("model", model, _MODEL_KEYS)
    _unknown("train", train, _TRAIN_FIELDS)

    spec_kw = {k: data[k] for k in _SPEC_FIELDS if k in data}
    for k in ("image_size", "scale_range", "eye_offset", "eye_radii", "nose_box", "upper_lip_box", "lower_lip_box"):
        if k in spec_kw:
            spec_kw[k] = tuple(spec_kw[k])
    if "palette" in spec_kw:
        spec_kw["palette"] = {**GeoSceneSpec().palette, **{k: tuple(v) for k, v in spec_kw["palette"].items()}}
    try:
        spec = GeoSceneSpec(**spec_kw)
    except TypeError as err:
        raise ConfigError(f"[data]: {err}") from err

    channels = model.get("channels", [16, 32, 64, 64])
    n = len(channels)
    convs = _per_block(model.get("convs_per_block", 2), n, "convs_per_block")
    down = _per_block(model.get("downsample", [True] * (n - 1) + [False]), n, "downsample")
    try:
        encoder = EncoderConfig(tuple(BlockSpec(int(c), int(k), bool(d)) for c, k, d in zip(channels, convs, down)))
    except ValueError as err:
        raise ConfigError(f"[model]: {err}") from err

    if "loss_weights" in train:
        train["loss_weights"] = tuple(train["loss_weights"]) or None
    if "lr_milestones" in train:
        train["lr_milestones"] = tuple(train["lr_milestones"])
    if "grad_clip" in train:
        train["grad_clip"] = train["grad_clip"] or None

    run = doc.get("run", {})
    _unknown("run", run, {"levels"})
    return RunConfig(
        hierarchy_source=str(data.get("hierarchy", "geoscene")),
        spec=spec,
        train_count=int(data.get("train_count", 200)),
        val_count=int(data.get("val_count", 50)),
        data_dir=str(data.get("dir", "")),
        encoder=encoder,
        taps=tuple(int(t) for t in model.get("taps", [1, 0])),
        head_channels=int(model.get("head_channels", 32)),
        head_conv_layers=int(model.get("head_conv_layers", 2)),
        train=TrainConfig(**train),
        levels=run.get("levels"),
    )


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML file; ``None`` gives the bundled geoscene defaults."""
    if path is None:
        from importlib import resources

        text = resources.files("parsestack.data").joinpath("geoscene.toml").read_text(encoding="utf-8")
        return from_dict(tomllib.loads(text))
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return from_dict(tomllib.loads(p.read_text(encoding="utf-8")))
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{p}: {err}") from err


def with_overrides(cfg: RunConfig, seed=None, mode=None, levels=None) -> RunConfig:
    train = cfg.train
    if seed is not None:
        train = replace(train, seed=seed)
    if mode is not None:
        train = replace(train, mode=mode)
    return replace(cfg, train=train, levels=cfg.levels if levels is None else levels)
