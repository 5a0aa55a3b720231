"""Multi-granularity class taxonomies and label merging.

A hierarchy is an ordered list of levels, coarse first. Every level but
the finest carries a map from the class indices of the next finer level
onto its own classes; composing those maps turns a fine groundtruth map
into the label maps that supervise the coarser prediction heads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class HierarchyError(ValueError):
    """Structural problem with a hierarchy; ``kind`` names the violated rule."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class HierarchyParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Level:
    name: str
    class_names: tuple[str, ...]
    # finer-class index -> this-level class index; None on the finest level
    merge_from_finer: Optional[tuple[int, ...]] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class LabelHierarchy:
    levels: tuple[Level, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> int:
        return len(self.levels) - 1

    @property
    def class_counts(self) -> list[int]:
        return [lv.num_classes for lv in self.levels]

    def num_classes(self, level: int) -> int:
        return self.levels[level].num_classes

    def composed_map(self, target_level: int, source_level: Optional[int] = None) -> np.ndarray:
        """Lookup table from ``source_level`` (default finest) classes to ``target_level`` classes."""
        src = self.finest if source_level is None else source_level
        if not 0 <= target_level <= src <= self.finest:
            raise IndexError(f"cannot map level {src} onto level {target_level}")
        table = np.arange(self.num_classes(src))
        for k in range(src - 1, target_level - 1, -1):
            table = np.asarray(self.levels[k].merge_from_finer)[table]
        return table

    def to_text(self) -> str:
        return hierarchy_to_text(self)

    def digest(self) -> bytes:
        """SHA-256 of the canonical text form; identifies a taxonomy across files."""
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def hexdigest(self) -> str:
        return self.digest().hex()


def validate(h: LabelHierarchy) -> None:
    """Raise :class:`HierarchyError` unless every structural invariant holds."""
    if not h.levels:
        raise HierarchyError("empty", "hierarchy has no levels")
    for k, lv in enumerate(h.levels):
        if lv.num_classes == 0:
            raise HierarchyError("empty", f"level {lv.name!r} has no classes")
        if lv.class_names[0] != "background":
            raise HierarchyError(
                "background", f"class 0 of level {lv.name!r} is {lv.class_names[0]!r}, expected 'background'"
            )
        if k == h.finest:
            if lv.merge_from_finer is not None:
                raise HierarchyError("merge", f"finest level {lv.name!r} must not carry a merge map")
            continue
        finer = h.levels[k + 1]
        if finer.num_classes < lv.num_classes:
            raise HierarchyError(
                "decreasing",
                f"level {finer.name!r} has {finer.num_classes} classes, fewer than coarser "
                f"level {lv.name!r} with {lv.num_classes}",
            )
        m = lv.merge_from_finer
        if m is None or len(m) != finer.num_classes:
            have = 0 if m is None else len(m)
            missing = sorted(set(range(finer.num_classes)) - set(range(have)))
            raise HierarchyError(
                "non-total", f"merge into {lv.name!r} does not map finer classes {missing}"
            )
        bad = [v for v in m if not 0 <= v < lv.num_classes]
        if bad:
            raise HierarchyError("range", f"merge into {lv.name!r} targets unknown classes {bad}")
        missed = sorted(set(range(lv.num_classes)) - set(m))
        if missed:
            raise HierarchyError(
                "non-surjective", f"classes {missed} of level {lv.name!r} receive no finer class"
            )
        if m[0] != 0:
            raise HierarchyError("background", f"background of {finer.name!r} maps to class {m[0]} of {lv.name!r}")


def make_hierarchy(levels: Sequence[tuple[str, Sequence[str], Optional[Sequence[int]]]]) -> LabelHierarchy:
    """Build and validate a hierarchy from ``(name, class_names, merge_from_finer)`` triples."""
    h = LabelHierarchy(
        tuple(Level(name, tuple(names), None if m is None else tuple(int(v) for v in m)) for name, names, m in levels)
    )
    validate(h)
    return h


def merge_labels(fine: np.ndarray, h: LabelHierarchy, target_level: int) -> np.ndarray:
    """Relabel a finest-level map to ``target_level`` classes."""
    fine = np.asarray(fine)
    n = h.num_classes(h.finest)
    bad = (fine < 0) | (fine >= n)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {fine[pos]} at position {pos} outside [0, {n})")
    if target_level == h.finest:
        return fine.copy()
    return h.composed_map(target_level)[fine].astype(fine.dtype, copy=False)


@dataclass(frozen=True)
class LabelMapSet:
    """One integer label map per level, coarse first."""

    maps: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, level: int) -> np.ndarray:
        return self.maps[level]

    def check(self, h: LabelHierarchy) -> None:
        if len(self.maps) != h.num_levels:
            raise ValueError(f"{len(self.maps)} label maps for a {h.num_levels}-level hierarchy")
        shape = self.maps[0].shape
        for k, m in enumerate(self.maps):
            if m.shape != shape:
                raise ValueError(f"level {k} map has shape {m.shape}, expected {shape}")
            if m.min(initial=0) < 0 or m.max(initial=0) >= h.num_classes(k):
                raise ValueError(f"level {k} map has values outside [0, {h.num_classes(k)})")
        for k in range(h.finest):
            table = np.asarray(h.levels[k].merge_from_finer)
            if not np.array_equal(table[self.maps[k + 1]], self.maps[k]):
                raise ValueError(f"levels {k} and {k + 1} disagree with the merge map")


def expand_sample(fine: np.ndarray, h: LabelHierarchy) -> LabelMapSet:
    return LabelMapSet(tuple(merge_labels(fine, h, k) for k in range(h.num_levels)))


def hierarchy_to_text(h: LabelHierarchy) -> str:
    lines = []
    for lv in h.levels:
        lines.append(f"level {lv.name}")
        lines.extend(f"class {i} {name}" for i, name in enumerate(lv.class_names))
        if lv.merge_from_finer is not None:
            lines.extend(f"merge {i} -> {j}" for i, j in enumerate(lv.merge_from_finer))
    return "\n".join(lines) + "\n"


def hierarchy_from_text(doc: str) -> LabelHierarchy:
    """Parse the ``.hier`` format (coarse level first) and validate the result."""
    raw: list[dict] = []
    for lineno, line in enumerate(doc.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        rest = rest.strip()
        if keyword == "level":
            if not rest:
                raise HierarchyParseError(lineno, "level needs a name")
            raw.append({"name": rest, "classes": {}, "merge": {}, "line": lineno})
            continue
        if not raw:
            raise HierarchyParseError(lineno, f"{keyword!r} before any 'level' line")
        cur = raw[-1]
        if keyword == "class":
            idx, _, name = rest.partition(" ")
            if not idx.isdigit() or not name.strip():
                raise HierarchyParseError(lineno, "expected 'class <index> <name>'")
            if int(idx) in cur["classes"]:
                raise HierarchyParseError(lineno, f"duplicate class index {idx}")
            cur["classes"][int(idx)] = name.strip()
        elif keyword == "merge":
            parts = rest.split()
            if len(parts) != 3 or parts[1] != "->" or not parts[0].isdigit() or not parts[2].isdigit():
                raise HierarchyParseError(lineno, "expected 'merge <fine_index> -> <coarse_index>'")
            if int(parts[0]) in cur["merge"]:
                raise HierarchyParseError(lineno, f"class {parts[0]} merged twice")
            cur["merge"][int(parts[0])] = int(parts[2])
        else:
            raise HierarchyParseError(lineno, f"unknown keyword {keyword!r}")
    if not raw:
        raise HierarchyError("empty", "document defines no levels")

    levels = []
    for k, lv in enumerate(raw):
        idx = sorted(lv["classes"])
        if idx != list(range(len(idx))):
            raise HierarchyParseError(lv["line"], f"class indices of level {lv['name']!r} are not 0..n-1")
        names = tuple(lv["classes"][i] for i in idx)
        if k == len(raw) - 1:
            if lv["merge"]:
                raise HierarchyParseError(lv["line"], f"finest level {lv['name']!r} must not have merge lines")
            merge = None
        else:
            n_finer = len(raw[k + 1]["classes"])
            missing = [i for i in range(n_finer) if i not in lv["merge"]]
            if missing:
                raise HierarchyError("non-total", f"merge into {lv['name']!r} does not map finer classes {missing}")
            extra = [i for i in lv["merge"] if i >= n_finer]
            if extra:
                raise HierarchyError("range", f"merge into {lv['name']!r} maps unknown finer classes {extra}")
            merge = tuple(lv["merge"][i] for i in range(n_finer))
        levels.append(Level(lv["name"], names, merge))
    h = LabelHierarchy(tuple(levels))
    validate(h)
    return h


def load_hierarchy(path: str | Path) -> LabelHierarchy:
    return hierarchy_from_text(Path(path).read_text(encoding="utf-8"))


def save_hierarchy(h: LabelHierarchy, path: str | Path) -> None:
    Path(path).write_text(hierarchy_to_text(h), encoding="utf-8")


def bundled_hierarchy(name: str) -> LabelHierarchy:
    """Shipped taxonomies: ``helen3`` (a 3/6/11-class face hierarchy) and ``geoscene``."""
    text = resources.files("parsestack.data").joinpath(f"{name}.hier").read_text(encoding="utf-8")
    return hierarchy_from_text(text)
