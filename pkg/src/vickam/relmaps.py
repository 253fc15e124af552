"""Activity-action relation maps built from annotated, view-aligned samples.

Each annotated individual contributes an ``r x r`` block of +1 counts on
sub-map ``(group, action)`` around the (aligned) bottom centre of its box.
Sub-maps are then divided by their own maximum, so each lies in [0, 1].

Points are rounded to the nearest cell with ties going towards +inf, i.e.
``floor(t + 0.5)``, using the same continuous-index convention as ROI
pooling (cell ``(i, j)`` is centred at ``x=j, y=i``).
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .tensors import read_tensor, write_tensor


@dataclass(frozen=True)
class AffineTransform:
    """``(x, y) -> (a*x + b*y + tx, c*x + d*y + ty)`` in grid units."""

    a: float = 1.0
    b: float = 0.0
    tx: float = 0.0
    c: float = 0.0
    d: float = 1.0
    ty: float = 0.0

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite affine {vals}")
        if self.a * self.d - self.b * self.c == 0:
            raise ValueError(f"singular affine {vals}")

    def as_tuple(self):
        return (self.a, self.b, self.tx, self.c, self.d, self.ty)

    @classmethod
    def identity(cls):
        return cls()


def bottom_center(box):
    return ((box.x0 + box.x1) / 2.0, float(box.y1))


def apply_affine(t, pt):
    x, y = pt
    return (t.a * x + t.b * y + t.tx, t.c * x + t.d * y + t.ty)


def round_half_up(v):
    return int(math.floor(v + 0.5))


@dataclass
class RelationMaps:
    maps: np.ndarray        # (K_g, K_a, h, w) float32 in [0, 1]
    raw_counts: np.ndarray  # (K_g, K_a, h, w) int64
    r: int
    skipped_points: int = 0

    @property
    def shape(self):
        return self.maps.shape

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(self.maps, d / "maps.vkt")
        write_tensor(self.raw_counts.astype(np.float32), d / "raw_counts.vkt")
        K_g, K_a, h, w = self.maps.shape
        meta = {"K_g": K_g, "K_a": K_a, "h": h, "w": w, "r": self.r,
                "skipped_points": self.skipped_points}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"bad relation-map sidecar: {exc}", path=d / "meta.json") from exc
        maps = read_tensor(d / "maps.vkt")
        raw = read_tensor(d / "raw_counts.vkt")
        expect = (meta["K_g"], meta["K_a"], meta["h"], meta["w"])
        if maps.shape != expect or raw.shape != expect:
            raise ShapeError(f"relation-map files {maps.shape} disagree with sidecar {expect}", path=d)
        return cls(maps, raw.astype(np.int64), int(meta["r"]), int(meta.get("skipped_points", 0)))


def normalize_counts(raw):
    raw = np.asarray(raw)
    peak = raw.max(axis=(-2, -1), keepdims=True).astype(np.float64)
    out = np.divide(raw, peak, out=np.zeros(raw.shape), where=peak > 0)
    return out.astype(np.float32)


def stamp_relation_maps(annotated, n_groups, n_actions, h, w, r):
    """Build :class:`RelationMaps`.

    ``annotated`` yields ``(group_label, affine, boxes)`` triples.  A point
    whose whole ``r x r`` block falls outside the grid is dropped and counted
    in ``skipped_points``.
    """
    if r < 1 or r % 2 == 0:
        raise ValueError(f"marked-region side r must be a positive odd integer, got {r}")
    half = r // 2
    raw = np.zeros((n_groups, n_actions, h, w), dtype=np.int64)
    skipped = 0
    for g, affine, boxes in annotated:
        if not 0 <= g < n_groups:
            raise ValueError(f"group label {g} outside [0, {n_groups})")
        for box in boxes:
            if not 0 <= box.action_id < n_actions:
                raise ValueError(f"action_id {box.action_id} outside [0, {n_actions})")
            x, y = apply_affine(affine, bottom_center(box))
            u, v = round_half_up(y), round_half_up(x)
            i0, i1 = max(u - half, 0), min(u + half + 1, h)
            j0, j1 = max(v - half, 0), min(v + half + 1, w)
            if i0 >= i1 or j0 >= j1:
                skipped += 1
                continue
            raw[g, box.action_id, i0:i1, j0:j1] += 1
    return RelationMaps(normalize_counts(raw), raw, r, skipped)
