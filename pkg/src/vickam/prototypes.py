"""ROI bilinear pooling and class-averaged action prototypes.

Coordinates are continuous grid indices: the centre of cell ``(i, j)`` sits
at ``(x=j, y=i)``.  A box ``(x0, y0, x1, y1)`` is split into ``p x p`` equal
bins and each bin takes the bilinear sample at its centre (sampling
ratio 1), clamped to the border cells.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .tensors import read_tensor, write_tensor


@dataclass(frozen=True)
class BoxAnnotation:
    x0: float
    y0: float
    x1: float
    y1: float
    action_id: int

    def validate(self, h, w, n_actions=None):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self}")
        if self.x0 < 0 or self.y0 < 0 or self.x1 > w or self.y1 > h:
            raise ValueError(f"box {self} outside {h}x{w} grid")
        if n_actions is not None and not 0 <= self.action_id < n_actions:
            raise ValueError(f"action_id {self.action_id} outside [0, {n_actions})")

    def to_json(self):
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "action": self.action_id}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["x0"]), float(d["y0"]), float(d["x1"]), float(d["y1"]), int(d["action"]))


def bilinear(x, cy, cx):
    """Sample (h,w,C) ``x`` at continuous index ``(cy, cx)`` with border clamping."""
    h, w = x.shape[:2]
    cy = min(max(cy, 0.0), h - 1.0)
    cx = min(max(cx, 0.0), w - 1.0)
    i0, j0 = int(math.floor(cy)), int(math.floor(cx))
    i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
    ly, lx = cy - i0, cx - j0
    # lerp form: exact on constant regions
    top = x[i0, j0] + lx * (x[i0, j1] - x[i0, j0])
    bot = x[i1, j0] + lx * (x[i1, j1] - x[i1, j0])
    return top + ly * (bot - top)


def roi_pool(x, box, p):
    """Pool ``box`` of feature map ``x`` (h,w,C) into a (p,p,C) float64 patch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"feature map must be (h,w,C), got {x.shape}")
    if p < 1:
        raise ValueError("p must be >= 1")
    box.validate(*x.shape[:2])
    bh = (box.y1 - box.y0) / p
    bw = (box.x1 - box.x0) / p
    out = np.empty((p, p, x.shape[2]))
    for i in range(p):
        cy = box.y0 + (i + 0.5) * bh
        for j in range(p):
            out[i, j] = bilinear(x, cy, box.x0 + (j + 0.5) * bw)
    return out


@dataclass
class PrototypeBank:
    prototypes: np.ndarray          # (K_a, p, p, C) float32
    counts: np.ndarray              # (K_a,) int64
    action_names: list = field(default_factory=list)

    @property
    def n_actions(self):
        return self.prototypes.shape[0]

    @property
    def p(self):
        return self.prototypes.shape[1]

    @property
    def n_channels(self):
        return self.prototypes.shape[3]

    def __len__(self):
        return self.n_actions

    def __getitem__(self, k):
        return self.prototypes[k]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(self.prototypes, d / "prototypes.vkt")
        write_tensor(self.counts.astype(np.float32), d / "counts.vkt")
        meta = {"K_a": self.n_actions, "p": self.p, "C": self.n_channels,
                "action_names": list(self.action_names)}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"bad prototype sidecar: {exc}", path=d / "meta.json") from exc
        protos = read_tensor(d / "prototypes.vkt")
        counts = read_tensor(d / "counts.vkt")
        expect = (meta["K_a"], meta["p"], meta["p"], meta["C"])
        if protos.shape != expect or counts.shape != (meta["K_a"],):
            raise ShapeError(f"prototype files {protos.shape}/{counts.shape} disagree with sidecar {expect}",
                             path=d)
        return cls(protos, counts.astype(np.int64), list(meta.get("action_names", [])))


def _exact_column_mean(rows):
    # fsum is correctly rounded, so the result does not depend on row order
    rows = np.asarray(rows, dtype=np.float64)
    return np.array([math.fsum(col) for col in rows.T]) / rows.shape[0]


def build_prototypes(samples, p, n_actions, zero_fill=False, action_names=None):
    """Average ROI features per action class.

    ``samples`` is an iterable of ``(feature_map, boxes)`` pairs.  A class
    without any box raises unless ``zero_fill`` is set, in which case its
    prototype is all zeros and a warning is emitted.
    """
    feats = [[] for _ in range(n_actions)]
    n_channels = None
    for grid, boxes in samples:
        grid = np.asarray(grid)
        if n_channels is None:
            n_channels = grid.shape[2]
        elif grid.shape[2] != n_channels:
            raise ShapeError(f"channel count changed: {grid.shape[2]} vs {n_channels}")
        for box in boxes:
            if not 0 <= box.action_id < n_actions:
                raise ValueError(f"action_id {box.action_id} outside [0, {n_actions})")
            feats[box.action_id].append(roi_pool(grid, box, p).ravel())
    if n_channels is None:
        raise ValueError("no samples given")

    protos = np.zeros((n_actions, p, p, n_channels))
    counts = np.zeros(n_actions, dtype=np.int64)
    for k in range(n_actions):
        if not feats[k]:
            if not zero_fill:
                raise ValueError(f"action class {k} has no annotated individuals")
            warnings.warn(f"action class {k} has no samples; using a zero prototype", stacklevel=2)
            continue
        counts[k] = len(feats[k])
        protos[k] = _exact_column_mean(feats[k]).reshape(p, p, n_channels)
    names = list(action_names) if action_names is not None else [f"action_{k}" for k in range(n_actions)]
    return PrototypeBank(protos.astype(np.float32), counts, names)
