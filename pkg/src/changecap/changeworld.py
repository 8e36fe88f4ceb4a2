"""Synthetic scene-pair world: symbolic grids, one semantic change per pair,
a simulated viewpoint change, template captions, and feature rendering.

A scene is an H x W grid of cells, each empty or holding an object with a
shape, color, and material.  The "after" view applies at most one semantic
change and then shifts the whole grid cyclically by a random offset, so
every token moves position while pairwise content is preserved; per-view
Gaussian feature noise keeps even unchanged cells from matching exactly.
Distractor pairs carry only the shift and noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .decoder import Vocabulary

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("red", "blue", "green", "yellow")
MATERIALS = ("rubber", "metal")
CHANGE_TYPES = ("color", "texture", "add", "drop", "move")
DISTRACTOR = "distractor"

TEMPLATE_WORDS = ("the", "a", "changed", "to", "became", "moved",
                  "was", "added", "removed", "no", "change", "made", "next")

MAX_RETRIES = 20


class GenerationError(RuntimeError):
    """A requested change could not be drawn within the retry bound."""


class DatasetError(ValueError):
    """A dataset file failed to parse or validate."""


@dataclass(frozen=True)
class Cell:
    shape: str
    color: str
    material: str

    def to_json(self) -> dict:
        return {"shape": self.shape, "color": self.color, "material": self.material}

    @classmethod
    def from_json(cls, obj) -> "Cell":
        return cls(obj["shape"], obj["color"], obj["material"])


@dataclass
class ScenePair:
    pair_id: int
    height: int
    width: int
    change_type: str
    before: list            # length H*W of Cell | None
    after: list             # post-shift view, same layout
    changed_before: int | None
    changed_after: int | None   # index in the shifted after view
    view_offset: tuple[int, int]
    caption: list[str]
    noise_seed: int

    def __post_init__(self):
        n = self.height * self.width
        if len(self.before) != n or len(self.after) != n:
            raise DatasetError("cell lists do not tile the grid")
        if self.change_type not in CHANGE_TYPES + (DISTRACTOR,):
            raise DatasetError(f"unknown change type {self.change_type!r}")
        if self.change_type == DISTRACTOR and (
                self.changed_before is not None or self.changed_after is not None):
            raise DatasetError("distractor pairs have no changed cells")

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def unshifted_after_index(self) -> int | None:
        """Map the changed after-view cell back into the before frame."""
        if self.changed_after is None:
            return None
        dy, dx = self.view_offset
        r, c = divmod(self.changed_after, self.width)
        return ((r - dy) % self.height) * self.width + (c - dx) % self.width


def shift_cells(cells: list, height: int, width: int, dy: int, dx: int) -> list:
    out = [None] * (height * width)
    for idx, cell in enumerate(cells):
        r, c = divmod(idx, width)
        out[((r + dy) % height) * width + (c + dx) % width] = cell
    return out


def _sample_scene(rng: np.random.Generator, height: int, width: int,
                  min_objects: int, max_objects: int) -> list:
    n = height * width
    if not 1 <= min_objects <= max_objects:
        raise GenerationError("object count range must satisfy 1 <= min <= max")
    if max_objects > n:
        raise GenerationError(f"cannot place {max_objects} objects on {n} cells")
    count = int(rng.integers(min_objects, max_objects + 1))
    cells = [None] * n
    for idx in rng.choice(n, size=count, replace=False):
        cells[int(idx)] = Cell(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            material=MATERIALS[rng.integers(len(MATERIALS))],
        )
    return cells


def _occupied(cells: list) -> list[int]:
    return [i for i, c in enumerate(cells) if c is not None]


def _empty(cells: list) -> list[int]:
    return [i for i, c in enumerate(cells) if c is None]


def _apply_change(rng: np.random.Generator, before: list, change_type: str):
    """Return (after cells in the before frame, changed_before, changed_after)."""
    after = list(before)
    occ = _occupied(before)
    emp = _empty(before)
    if change_type == "color":
        idx = int(rng.choice(occ))
        old = before[idx]
        new_color = str(rng.choice([c for c in COLORS if c != old.color]))
        after[idx] = Cell(old.shape, new_color, old.material)
        return after, idx, idx
    if change_type == "texture":
        idx = int(rng.choice(occ))
        old = before[idx]
        new_mat = str(rng.choice([m for m in MATERIALS if m != old.material]))
        after[idx] = Cell(old.shape, old.color, new_mat)
        return after, idx, idx
    if change_type == "add":
        if not emp:
            raise GenerationError("no empty cell to add into")
        idx = int(rng.choice(emp))
        after[idx] = Cell(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            material=MATERIALS[rng.integers(len(MATERIALS))],
        )
        return after, None, idx
    if change_type == "drop":
        idx = int(rng.choice(occ))
        after[idx] = None
        return after, idx, None
    if change_type == "move":
        if not emp:
            raise GenerationError("no empty cell to move into")
        src = int(rng.choice(occ))
        dst = int(rng.choice(emp))
        after[dst] = before[src]
        after[src] = None
        return after, src, dst
    raise ValueError(f"unknown change type {change_type!r}")


def _toroidal_distance(a: int, b: int, height: int, width: int) -> int:
    """Manhattan distance on the cyclic grid; the world wraps, so nearness
    must too (otherwise captions would not survive a coherent shift of both
    views)."""
    ra, ca = divmod(a, width)
    rb, cb = divmod(b, width)
    dr, dc = abs(ra - rb), abs(ca - cb)
    return min(dr, height - dr) + min(dc, width - dc)


def _referent_clause(before: list, anchor: int, subject: Cell,
                     height: int, width: int) -> list[str]:
    """Disambiguate by the nearest other object when a same-looking twin
    exists.  Distance ties break on attributes, which keeps the emitted
    phrase invariant under any cyclic relabeling of the cells."""
    twins = [i for i in _occupied(before)
             if i != anchor and before[i].color == subject.color
             and before[i].shape == subject.shape]
    if not twins:
        return []
    others = [i for i in _occupied(before) if i != anchor]
    ref = min(others, key=lambda i: (_toroidal_distance(anchor, i, height, width),
                                     before[i].color, before[i].shape,
                                     before[i].material, i))
    return ["next", "to", "the", before[ref].color, before[ref].shape]


def caption_for(pair: ScenePair) -> list[str]:
    """Deterministic template caption for a pair, with a referent clause when
    the changed object has a same-colored same-shaped twin."""
    if pair.change_type == DISTRACTOR:
        return ["no", "change", "was", "made"]
    before = pair.before
    width = pair.width
    if pair.change_type == "add":
        idx = pair.unshifted_after_index()
        subject = pair.after[pair.changed_after]
        words = ["a", subject.color, subject.shape, "was", "added"]
        return words + _referent_clause(before, idx, subject, pair.height, width)
    subject = before[pair.changed_before]
    anchor = pair.changed_before
    if pair.change_type == "color":
        new_color = pair.after[pair.changed_after].color
        words = ["the", subject.color, subject.shape, "changed", "to", new_color]
    elif pair.change_type == "texture":
        new_mat = pair.after[pair.changed_after].material
        words = ["the", subject.color, subject.shape, "became", new_mat]
    elif pair.change_type == "drop":
        words = ["the", subject.color, subject.shape, "was", "removed"]
    elif pair.change_type == "move":
        words = ["the", subject.color, subject.shape, "moved"]
    else:
        raise ValueError(f"unknown change type {pair.change_type!r}")
    return words + _referent_clause(before, anchor, subject, pair.height, width)


def generate_pair(seed, height: int = 4, width: int = 4,
                  distractor_rate: float = 0.2,
                  change_weights: dict[str, float] | None = None,
                  min_objects: int = 2, max_objects: int = 5,
                  pair_id: int = 0, max_shift: int = 1) -> ScenePair:
    """Draw one scene pair deterministically from ``seed`` (int, tuple, or
    SeedSequence).

    ``max_shift`` bounds the cyclic view offset per axis; the default of one
    cell mirrors a moderate viewpoint change, which still moves every token
    for three of four draws while keeping the offset identifiable.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        before = _sample_scene(rng, height, width, min_objects, max_objects)
        if rng.random() < distractor_rate:
            change_type = DISTRACTOR
            after_frame, cb, ca = list(before), None, None
        else:
            names = list(CHANGE_TYPES)
            if change_weights:
                w = np.array([change_weights.get(t, 0.0) for t in names], dtype=float)
                if w.sum() <= 0:
                    raise ValueError("change weights must include a positive entry")
                probs = w / w.sum()
            else:
                probs = np.full(len(names), 1.0 / len(names))
            change_type = str(rng.choice(names, p=probs))
            try:
                after_frame, cb, ca = _apply_change(rng, before, change_type)
            except GenerationError:
                continue
        dy = int(rng.integers(min(max_shift, height - 1) + 1))
        dx = int(rng.integers(min(max_shift, width - 1) + 1))
        after = shift_cells(after_frame, height, width, dy, dx)
        changed_after = None
        if ca is not None:
            r, c = divmod(ca, width)
            changed_after = ((r + dy) % height) * width + (c + dx) % width
        pair = ScenePair(
            pair_id=pair_id, height=height, width=width, change_type=change_type,
            before=before, after=after, changed_before=cb, changed_after=changed_after,
            view_offset=(dy, dx), caption=[], noise_seed=int(rng.integers(2 ** 31)),
        )
        pair.caption = caption_for(pair)
        return pair
    raise GenerationError(f"could not draw a {height}x{width} pair after {MAX_RETRIES} tries")


def generate_dataset(num_pairs: int, seed: int, height: int = 4, width: int = 4,
                     distractor_rate: float = 0.2,
                     change_weights: dict[str, float] | None = None,
                     min_objects: int = 2, max_objects: int = 5,
                     max_shift: int = 1) -> list[ScenePair]:
    return [
        generate_pair(np.random.SeedSequence((seed, i)), height, width,
                      distractor_rate, change_weights, min_objects, max_objects,
                      pair_id=i, max_shift=max_shift)
        for i in range(num_pairs)
    ]


@dataclass
class RenderSpec:
    """Attribute embeddings and noise level for turning cells into features."""

    dim: int
    sigma: float
    shape_emb: np.ndarray = field(repr=False, default=None)
    color_emb: np.ndarray = field(repr=False, default=None)
    material_emb: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_seed(cls, seed: int, dim: int = 32, sigma: float = 0.05) -> "RenderSpec":
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE)))
        return cls(
            dim=dim, sigma=sigma,
            shape_emb=rng.standard_normal((len(SHAPES), dim)),
            color_emb=rng.standard_normal((len(COLORS), dim)),
            material_emb=rng.standard_normal((len(MATERIALS), dim)),
        )


def cells_to_attrs(cells: list) -> np.ndarray:
    """Compact symbol encoding: (N, 3) int8 of shape/color/material indices,
    -1 on every axis for empty cells."""
    out = np.full((len(cells), 3), -1, dtype=np.int8)
    for i, cell in enumerate(cells):
        if cell is not None:
            out[i] = (SHAPES.index(cell.shape), COLORS.index(cell.color),
                      MATERIALS.index(cell.material))
    return out


def attrs_to_features(attrs: np.ndarray, spec: RenderSpec) -> np.ndarray:
    """Noise-free render of (..., N, 3) attribute indices to (..., N, dim)."""
    occupied = attrs[..., 0] >= 0
    safe = np.clip(attrs, 0, None)
    feats = (spec.shape_emb[safe[..., 0]] + spec.color_emb[safe[..., 1]]
             + spec.material_emb[safe[..., 2]])
    return np.where(occupied[..., None], feats, 0.0)


def render_features(cells: list, spec: RenderSpec, noise_seed) -> np.ndarray:
    """Sum of attribute embeddings per occupied cell plus i.i.d. noise.

    Empty cells render as pure noise around zero; with sigma == 0 renders
    are an exact function of the symbols.
    """
    out = attrs_to_features(cells_to_attrs(cells), spec)
    if spec.sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(noise_seed))
        out = out + spec.sigma * rng.standard_normal(out.shape)
    return out


def render_pair(pair: ScenePair, spec: RenderSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render both views with independent per-view noise."""
    bef = render_features(pair.before, spec, (pair.noise_seed, 0))
    aft = render_features(pair.after, spec, (pair.noise_seed, 1))
    return bef, aft


def build_vocabulary() -> Vocabulary:
    """Closed vocabulary of the template grammar; independent of any dataset."""
    return Vocabulary(TEMPLATE_WORDS + COLORS + SHAPES + MATERIALS)


def _cells_to_json(cells: list) -> list:
    return [c.to_json() if c is not None else None for c in cells]


def _cells_from_json(items, where: str) -> list:
    out = []
    for obj in items:
        if obj is None:
            out.append(None)
        else:
            try:
                out.append(Cell.from_json(obj))
            except (KeyError, TypeError) as exc:
                raise DatasetError(f"{where}: bad cell record: {exc}") from exc
    return out


def pair_to_json(pair: ScenePair) -> dict:
    return {
        "id": pair.pair_id,
        "grid": [pair.height, pair.width],
        "change_type": pair.change_type,
        "before_cells": _cells_to_json(pair.before),
        "after_cells": _cells_to_json(pair.after),
        "changed_before": pair.changed_before,
        "changed_after": pair.changed_after,
        "view_offset": list(pair.view_offset),
        "caption": list(pair.caption),
        "seed": pair.noise_seed,
    }


def pair_from_json(obj: dict, where: str = "record") -> ScenePair:
    try:
        height, width = obj["grid"]
        pair = ScenePair(
            pair_id=int(obj["id"]), height=int(height), width=int(width),
            change_type=obj["change_type"],
            before=_cells_from_json(obj["before_cells"], where),
            after=_cells_from_json(obj["after_cells"], where),
            changed_before=obj["changed_before"], changed_after=obj["changed_after"],
            view_offset=(int(obj["view_offset"][0]), int(obj["view_offset"][1])),
            caption=list(obj["caption"]), noise_seed=int(obj["seed"]),
        )
    except DatasetError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: {exc}") from exc
    return pair


def vocab_path_for(path) -> str:
    path = str(path)
    base = path[: -len(".jsonl")] if path.endswith(".jsonl") else path
    return base + ".vocab"


def write_dataset(pairs, path) -> None:
    """One JSON object per line, with the grammar vocabulary alongside."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair_to_json(pair), sort_keys=True) + "\n")
    build_vocabulary().save(vocab_path_for(path))


def read_dataset(path) -> list[ScenePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from exc
            pairs.append(pair_from_json(obj, where=f"line {lineno}"))
    return pairs
