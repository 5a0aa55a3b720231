"""Shared encoder with a chain of stacked prediction heads, plus the ablation variants.

Modes
-----
``standalone``
    one head on the encoder output, for a single hierarchy level.
``stack_fc``
    one head per level; head ``t > 0`` reads the encoder output and the
    raw score map of head ``t - 1``.
``stack_fc_skip``
    as ``stack_fc`` with an extra shallow encoder feature map per finer head.
``stack_full``
    independent standalone networks chained on the image; see :class:`StackFull`.
"""

from __future__ import annotations

import io
import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    BILINEAR_CONVENTION,
    Tensor,
    concat_channels,
    conv2d,
    default_dtype,
    maxpool2d,
    no_grad,
    read_tensor,
    relu,
    softmax,
    tape_scope,
    upsample_bilinear,
    write_tensor,
)
from .hierarchy import LabelHierarchy, LabelMapSet, hierarchy_from_text

MODES = ("standalone", "stack_full", "stack_fc", "stack_fc_skip")


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    convs: int = 2
    downsample: bool = True


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(BlockSpec(**b) if isinstance(b, dict) else b for b in self.blocks))
        if not self.blocks:
            raise ValueError("encoder needs at least one block")
        for b in self.blocks:
            if b.channels < 1 or b.convs < 1:
                raise ValueError(f"invalid block {b}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(b.downsample for b in self.blocks)

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].channels

    @classmethod
    def default(cls) -> "EncoderConfig":
        return cls((BlockSpec(16), BlockSpec(32), BlockSpec(64), BlockSpec(64, downsample=False)))


@dataclass(frozen=True)
class HeadLevel:
    num_classes: int
    tap_block: Optional[int] = None
    head_channels: int = 32
    head_conv_layers: int = 2


@dataclass(frozen=True)
class StackedHeadConfig:
    levels: tuple[HeadLevel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(HeadLevel(**v) if isinstance(v, dict) else v for v in self.levels))

    @classmethod
    def for_hierarchy(
        cls, h: LabelHierarchy, taps: Sequence[Optional[int]], head_channels: int = 32, head_conv_layers: int = 2
    ) -> "StackedHeadConfig":
        if len(taps) != h.num_levels:
            raise ValueError(f"{len(taps)} tap entries for {h.num_levels} levels")
        return cls(tuple(HeadLevel(n, t, head_channels, head_conv_layers) for n, t in zip(h.class_counts, taps)))

    def check(self, h: LabelHierarchy, encoder: EncoderConfig) -> None:
        if [lv.num_classes for lv in self.levels] != h.class_counts:
            raise ValueError(
                f"head class counts {[lv.num_classes for lv in self.levels]} differ from hierarchy {h.class_counts}"
            )
        if self.levels[0].tap_block is not None:
            raise ValueError("the coarsest head reads the encoder directly and takes no tap")
        prev = None
        for t, lv in enumerate(self.levels):
            if lv.head_conv_layers < 1 or lv.head_channels < 1:
                raise ValueError(f"head {t}: needs >= 1 conv layer and positive width")
            if lv.tap_block is None:
                continue
            if not 0 <= lv.tap_block < len(encoder.blocks):
                raise ValueError(f"head {t}: tap block {lv.tap_block} outside encoder of {len(encoder.blocks)} blocks")
            if prev is not None and lv.tap_block >= prev:
                raise ValueError(f"tap blocks must get shallower as levels get finer; head {t} taps {lv.tap_block} after {prev}")
            prev = lv.tap_block


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class ParserNet:
    """Encoder plus one or more prediction heads.

    Parameters are kept in an ordered dict named ``module.layer.parameter``.
    ``level`` picks the hierarchy level of a standalone net.
    """

    def __init__(
        self,
        encoder: EncoderConfig,
        heads: StackedHeadConfig,
        hierarchy: LabelHierarchy,
        mode: str = "stack_fc_skip",
        level: Optional[int] = None,
        in_channels: int = 3,
        seed: int = 0,
    ):
        if mode not in ("standalone", "stack_fc", "stack_fc_skip"):
            raise ValueError(f"ParserNet mode must be standalone / stack_fc / stack_fc_skip, got {mode!r}")
        heads.check(hierarchy, encoder)
        if mode == "standalone":
            level = hierarchy.finest if level is None else level
            if not 0 <= level < hierarchy.num_levels:
                raise ValueError(f"level {level} outside hierarchy of {hierarchy.num_levels} levels")
        elif level is not None:
            raise ValueError("level only applies to standalone nets")
        self.encoder = encoder
        self.heads = heads
        self.hierarchy = hierarchy
        self.mode = mode
        self.level = level
        self.in_channels = in_channels
        self.seed = seed
        self.conv_calls: Counter = Counter()
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    @property
    def levels(self) -> list[int]:
        """Hierarchy levels predicted by :meth:`forward`, in output order."""
        return [self.level] if self.mode == "standalone" else list(range(self.hierarchy.num_levels))

    def _add_conv(self, rng, name, cin, cout, k):
        self.params[f"{name}.weight"] = Tensor(he_uniform(rng, (cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")

    def head_in_channels(self, t: int) -> int:
        c = self.encoder.out_channels
        if self.mode == "standalone" or t == 0:
            return c
        c += self.heads.levels[t - 1].num_classes
        tap = self.heads.levels[t].tap_block
        if self.mode == "stack_fc_skip" and tap is not None:
            c += self.encoder.blocks[tap].channels
        return c

    def _head_indices(self) -> list[int]:
        return self.levels

    def _init_params(self, rng):
        cin = self.in_channels
        for b, blk in enumerate(self.encoder.blocks):
            for j in range(blk.convs):
                self._add_conv(rng, f"encoder.block{b}.conv{j}", cin, blk.channels, 3)
                cin = blk.channels
        for t in self._head_indices():
            lv = self.heads.levels[t]
            c = self.head_in_channels(t)
            for j in range(lv.head_conv_layers - 1):
                self._add_conv(rng, f"heads.{t}.conv{j}", c, lv.head_channels, 3)
                c = lv.head_channels
            self._add_conv(rng, f"heads.{t}.score", c, lv.num_classes, 1)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def _conv(self, name: str, x: Tensor, padding: int) -> Tensor:
        self.conv_calls[name] += 1
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 1, padding)

    def encode(self, image: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
        """One pass through the encoder: the deepest map and every tapped block's pre-pool output."""
        _, c, h, w = image.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got image of shape {image.shape}")
        f = self.encoder.downsample_factor
        if h % f or w % f:
            raise ValueError(f"image size {h}x{w} must be a multiple of {f} for this encoder")
        wanted = {lv.tap_block for lv in self.heads.levels if lv.tap_block is not None}
        if self.mode != "stack_fc_skip":
            wanted = set()
        taps: dict[int, Tensor] = {}
        x = image
        for b, blk in enumerate(self.encoder.blocks):
            for j in range(blk.convs):
                x = relu(self._conv(f"encoder.block{b}.conv{j}", x, 1))
            if b in wanted:
                taps[b] = x
            if blk.downsample:
                x = maxpool2d(x, 2, 2)
        return x, taps

    def head_forward(self, t: int, f0: Tensor, prev: Optional[Tensor] = None, tap: Optional[Tensor] = None) -> Tensor:
        """Apply head ``t`` to ``Up(f0) (+) Up(prev) (+) Up(tap)``, upsampling to the largest input."""
        parts = [p for p in (f0, prev, tap) if p is not None]
        out_h = max(p.shape[2] for p in parts)
        out_w = max(p.shape[3] for p in parts)
        x = concat_channels([upsample_bilinear(p, out_h, out_w) for p in parts])
        lv = self.heads.levels[t]
        for j in range(lv.head_conv_layers - 1):
            x = relu(self._conv(f"heads.{t}.conv{j}", x, 1))
        return self._conv(f"heads.{t}.score", x, 0)

    def forward(self, image: Tensor) -> list[Tensor]:
        if self.mode == "standalone":
            return [forward_standalone(self, image, self.level)]
        return forward_stacked(self, image)

    __call__ = forward

    def config_dict(self) -> dict:
        return {
            "mode": self.mode,
            "level": self.level,
            "in_channels": self.in_channels,
            "seed": self.seed,
            "encoder": [asdict(b) for b in self.encoder.blocks],
            "heads": [asdict(lv) for lv in self.heads.levels],
        }

    @classmethod
    def from_config(cls, cfg: dict, hierarchy: LabelHierarchy) -> "ParserNet":
        return cls(
            EncoderConfig(tuple(BlockSpec(**b) for b in cfg["encoder"])),
            StackedHeadConfig(tuple(HeadLevel(**lv) for lv in cfg["heads"])),
            hierarchy,
            mode=cfg["mode"],
            level=cfg["level"],
            in_channels=cfg.get("in_channels", 3),
            seed=cfg.get("seed", 0),
        )


def encode(net: ParserNet, image: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
    return net.encode(image)


def forward_stacked(net: ParserNet, image: Tensor) -> list[Tensor]:
    """Score maps of every level, coarse first, from a single encoder pass."""
    if net.mode not in ("stack_fc", "stack_fc_skip"):
        raise ValueError(f"forward_stacked needs a stack_fc or stack_fc_skip net, got {net.mode!r}")
    net.conv_calls.clear()
    f0, taps = net.encode(image)
    scores = [net.head_forward(0, f0)]
    for t in range(1, len(net.heads.levels)):
        tap_idx = net.heads.levels[t].tap_block
        tap = taps.get(tap_idx) if net.mode == "stack_fc_skip" and tap_idx is not None else None
        scores.append(net.head_forward(t, f0, scores[-1], tap))
    return scores


def forward_standalone(net: ParserNet, image: Tensor, level: int) -> Tensor:
    if net.mode != "standalone":
        raise ValueError(f"forward_standalone needs a standalone net, got {net.mode!r}")
    if level != net.level:
        raise ValueError(f"this standalone net predicts level {net.level}, not {level}")
    net.conv_calls.clear()
    f0, _ = net.encode(image)
    return net.head_forward(level, f0)


class StackFull:
    """Complete networks chained coarse to fine.

    Net ``t > 0`` sees the image concatenated with the softmax of the
    previous net's scores, upsampled to image resolution.
    """

    mode = "stack_full"

    def __init__(self, nets: Sequence[ParserNet]):
        nets = list(nets)
        if not nets:
            raise ValueError("stack_full needs at least one network")
        h = nets[0].hierarchy
        for t, net in enumerate(nets):
            if net.mode != "standalone" or net.level != t:
                raise ValueError(f"sub-network {t} must be a standalone net for level {t}")
            want = 3 if t == 0 else 3 + h.num_classes(t - 1)
            if net.in_channels != want:
                raise ValueError(f"sub-network {t} takes {net.in_channels} input channels, needs {want}")
        self.nets = nets
        self.hierarchy = h

    @classmethod
    def build(
        cls, encoder: EncoderConfig, heads: StackedHeadConfig, hierarchy: LabelHierarchy, seed: int = 0
    ) -> "StackFull":
        nets = []
        for t in range(hierarchy.num_levels):
            cin = 3 if t == 0 else 3 + hierarchy.num_classes(t - 1)
            nets.append(ParserNet(encoder, heads, hierarchy, "standalone", level=t, in_channels=cin, seed=seed + 7919 * t))
        return cls(nets)

    @property
    def levels(self) -> list[int]:
        return list(range(len(self.nets)))

    @property
    def encoder(self) -> EncoderConfig:
        return self.nets[0].encoder

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"nets.{t}.{name}", p) for t, net in enumerate(self.nets) for name, p in net.named_parameters()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def forward(self, image: Tensor) -> list[Tensor]:
        return forward_stack_full(self, image)

    __call__ = forward

    def config_dict(self) -> dict:
        return {"mode": "stack_full", "nets": [net.config_dict() for net in self.nets]}


def forward_stack_full(model: StackFull | Sequence[ParserNet], image: Tensor) -> list[Tensor]:
    nets = model.nets if isinstance(model, StackFull) else list(model)
    _, c, h, w = image.shape
    scores = []
    for t, net in enumerate(nets):
        if t == 0:
            x = image
        else:
            prob = upsample_bilinear(softmax(scores[-1], axis=1), h, w)
            x = concat_channels([image, prob])
        if x.shape[1] != net.in_channels:
            raise ValueError(f"sub-network {t} expects {net.in_channels} channels, got {x.shape[1]}")
        net.conv_calls.clear()
        f0, _ = net.encode(x)
        scores.append(net.head_forward(t, f0))
    return scores


Model = ParserNet | StackFull


def build_model(
    mode: str, encoder: EncoderConfig, heads: StackedHeadConfig, hierarchy: LabelHierarchy, seed: int = 0,
    level: Optional[int] = None,
) -> Model:
    if mode == "stack_full":
        return StackFull.build(encoder, heads, hierarchy, seed)
    return ParserNet(encoder, heads, hierarchy, mode, level=level, seed=seed)


def as_image_tensor(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr, dtype=default_dtype())


def predict(model: Model, image) -> LabelMapSet:
    """Per predicted level, the argmax of the score map upsampled to input size (ties -> lowest class)."""
    x = as_image_tensor(image)
    h, w = x.shape[2], x.shape[3]
    with tape_scope(), no_grad():
        scores = model.forward(x)
        maps = tuple(np.argmax(upsample_bilinear(s, h, w).data, axis=1) for s in scores)
    return LabelMapSet(maps)


# checkpoints

CKPT_MAGIC = b"PSCK"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path: str | Path, extra: Optional[dict] = None) -> None:
    """Header JSON (mode, configs, hierarchy, bilinear convention) then named tensor snapshots."""
    header = {
        "model": model.config_dict(),
        "hierarchy": model.hierarchy.to_text(),
        "hierarchy_hash": model.hierarchy.hexdigest(),
        "bilinear": BILINEAR_CONVENTION,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
    named = model.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)) + nb)
        write_tensor(buf, p)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version} unsupported")
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    f = io.BytesIO(raw)
    if f.read(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n = struct.unpack("<II", f.read(8))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} unsupported")
    header = json.loads(f.read(n).decode("utf-8"))
    if header.get("bilinear") != BILINEAR_CONVENTION:
        raise ValueError(f"{path}: checkpoint uses bilinear convention {header.get('bilinear')!r}")
    h = hierarchy_from_text(header["hierarchy"])
    cfg = header["model"]
    if cfg["mode"] == "stack_full":
        model: Model = StackFull([ParserNet.from_config(c, h) for c in cfg["nets"]])
    else:
        model = ParserNet.from_config(cfg, h)
    params = dict(model.named_parameters())
    (count,) = struct.unpack("<I", f.read(4))
    if count != len(params):
        raise ValueError(f"{path}: {count} tensors stored, model has {len(params)}")
    for _ in range(count):
        (ln,) = struct.unpack("<I", f.read(4))
        name = f.read(ln).decode("utf-8")
        t = read_tensor(f)
        if name not in params or params[name].shape != t.shape:
            raise ValueError(f"{path}: unexpected tensor {name} {t.shape}")
        params[name].data = t.data.astype(params[name].dtype, copy=False)
    return model, header
