"""Deterministic synthetic scenes with known templates, placements and labels.

Every sample starts from Gaussian background noise; each placed individual
adds its action template (plus a little per-instance noise) to a ``p x p``
patch centred on an integer cell.  The annotation box is exactly that patch
in continuous-index coordinates, ``(j-q-0.5, i-q-0.5, j+q+0.5, i+q+0.5)``.

Group-only views (:class:`GroupSample`) carry no boxes or action labels.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import FormatError
from .prototypes import BoxAnnotation
from .relmaps import AffineTransform
from .tensors import derive_seed, read_tensor, seeded_fill, write_tensor

DATASET_FORMAT = "vickam-dataset-1"


@dataclass
class Placement:
    action: int
    mean: tuple          # (x, y) in continuous-index units
    std: float = 1.0
    count: int = 1

    def __post_init__(self):
        self.mean = tuple(float(v) for v in self.mean)


@dataclass
class SynthConfig:
    K_g: int = 4
    K_a: int = 3
    h: int = 24
    w: int = 32
    C: int = 4
    p: int = 5
    noise_sigma: float = 0.1
    instance_noise: float = 0.5   # per-instance sigma as a fraction of noise_sigma
    n_train: int = 200
    n_test: int = 100
    seed: int = 0
    hard_variant: bool = False
    placements: Optional[list] = None   # per activity: list of Placement; None -> default_layout
    action_names: Optional[list] = None
    group_names: Optional[list] = None

    def resolved_placements(self):
        if self.placements is None:
            return default_layout(self.K_g, self.K_a, self.h, self.w, self.p, self.hard_variant)
        return [[p if isinstance(p, Placement) else Placement(**p) for p in acts] for acts in self.placements]

    def names(self):
        actions = self.action_names or [f"action_{k}" for k in range(self.K_a)]
        groups = self.group_names or [f"group_{g}" for g in range(self.K_g)]
        return list(actions), list(groups)

    def validate(self):
        if min(self.K_g, self.K_a, self.h, self.w, self.C, self.p) < 1:
            raise ValueError("all sizes must be >= 1")
        if self.p > min(self.h, self.w):
            raise ValueError(f"p={self.p} exceeds grid {self.h}x{self.w}")
        if self.noise_sigma < 0 or self.instance_noise < 0:
            raise ValueError("noise levels must be non-negative")
        placements = self.resolved_placements()
        if len(placements) != self.K_g:
            raise ValueError(f"need placements for {self.K_g} activities, got {len(placements)}")
        lo, hi_x, hi_y = self.p // 2 + 1, self.w - self.p // 2 - 2, self.h - self.p // 2 - 2
        for g, acts in enumerate(placements):
            for pl in acts:
                if not 0 <= pl.action < self.K_a or pl.count < 0 or pl.std < 0:
                    raise ValueError(f"invalid placement {pl} for activity {g}")
                x, y = pl.mean
                if x - 3 * pl.std < lo or x + 3 * pl.std > hi_x or y - 3 * pl.std < lo or y + 3 * pl.std > hi_y:
                    raise ValueError(f"placement {pl} of activity {g} leaves the grid within 3 sigma")
        if self.hard_variant:
            counts = [sorted(a for pl in acts for a in [pl.action] * pl.count) for acts in placements]
            if any(c != counts[0] for c in counts):
                raise ValueError("hard variant requires the same action multiset for every activity")

    def to_json(self):
        out = asdict(self)
        out["placements"] = [[asdict(p) for p in acts] for acts in self.resolved_placements()]
        for acts in out["placements"]:
            for p in acts:
                p["mean"] = list(p["mean"])
        return out

    @classmethod
    def from_json(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def default_layout(K_g, K_a, h, w, p, hard=False, std=1.0):
    """Built-in placement table.

    Odd activities mirror the preceding even one left/right; activity pairs
    alternate which actions sit high or low.  In the hard variant every
    activity holds exactly one instance of each action; otherwise action
    ``g mod K_a`` appears twice in activity ``g``.  Means are clamped to the
    valid centre range and the spread is shrunk where needed, so every
    placement stays on the grid within 3 sigma.
    """
    lo, hi_x, hi_y = p // 2 + 1, w - p // 2 - 2, h - p // 2 - 2
    layout = []
    for g in range(K_g):
        mirror = g % 2 == 1
        band = (g // 2) % 2
        shift = 0.04 * (g // 4)
        acts = []
        for k in range(K_a):
            xf = 0.2 + shift + 0.3 * (k / max(K_a - 1, 1))
            yf = 0.3 + 0.4 * ((k + band) % 2)
            x = xf * (w - 1)
            if mirror:
                x = (w - 1) - x
            x = min(max(round(x, 4), lo), hi_x)
            y = min(max(round(yf * (h - 1), 4), lo), hi_y)
            s = max(0.0, min(std, (x - lo) / 3, (hi_x - x) / 3, (y - lo) / 3, (hi_y - y) / 3))
            count = 1 if hard or k != g % K_a else 2
            acts.append(Placement(k, (x, y), s, count))
        layout.append(acts)
    return layout


# ------------------------------------------------------------------ samples


@dataclass(frozen=True)
class GroupSample:
    grid: np.ndarray
    group: int


@dataclass(frozen=True)
class AnnotatedSample:
    grid: np.ndarray
    group: int
    boxes: tuple
    affine: AffineTransform = field(default_factory=AffineTransform.identity)

    def group_only(self):
        return GroupSample(self.grid, self.group)


class SynthDataset(NamedTuple):
    train: list          # AnnotatedSample
    train_groups: list   # GroupSample
    test: list           # GroupSample
    truth: dict          # templates, per-sample instances, config


def _cosine(a, b):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def gen_templates(K_a, p, C, seed, max_cos=0.3, max_retries=1000):
    """Seeded uniform templates with pairwise ``|cos| <= max_cos``.

    Template ``k`` is redrawn with sub-seed ``(seed, k, attempt)`` until it
    is compatible with all earlier ones.
    """
    templates = []
    retries = 0
    for k in range(K_a):
        attempt = 0
        while True:
            t = seeded_fill((p, p, C), derive_seed(seed, "template", k, attempt))
            if all(abs(_cosine(t, u)) <= max_cos for u in templates):
                templates.append(t)
                break
            attempt += 1
            retries += 1
            if retries > max_retries:
                raise ValueError(f"could not draw {K_a} templates with |cos| <= {max_cos} "
                                 f"in {max_retries} retries (p={p}, C={C})")
    return templates


def _draw_center(rng, pl, lo, hi_x, hi_y):
    x0, y0 = pl.mean
    dx, dy = rng.standard_normal(2) * pl.std
    dx = float(np.clip(dx, -3 * pl.std, 3 * pl.std))
    dy = float(np.clip(dy, -3 * pl.std, 3 * pl.std))
    j = int(np.clip(np.floor(x0 + dx + 0.5), lo, hi_x))
    i = int(np.clip(np.floor(y0 + dy + 0.5), lo, hi_y))
    return i, j


def make_sample(cfg, templates, placements, group, sub_seed):
    """One grid, its boxes and the stamped instance list ``[(action, i, j)]``."""
    q = cfg.p // 2
    lo, hi_x, hi_y = q + 1, cfg.w - q - 2, cfg.h - q - 2
    rng = np.random.default_rng(sub_seed)
    if cfg.noise_sigma > 0:
        grid = seeded_fill((cfg.h, cfg.w, cfg.C), derive_seed(sub_seed, "bg"), "gaussian",
                           cfg.noise_sigma).astype(np.float64)
    else:
        grid = np.zeros((cfg.h, cfg.w, cfg.C))
    inst_sigma = cfg.noise_sigma * cfg.instance_noise
    boxes, instances = [], []
    for pl in placements[group]:
        for _ in range(pl.count):
            i, j = _draw_center(rng, pl, lo, hi_x, hi_y)
            patch = templates[pl.action].astype(np.float64)
            if inst_sigma > 0:
                patch = patch + seeded_fill(patch.shape, derive_seed(sub_seed, "inst", len(instances)),
                                            "gaussian", inst_sigma)
            grid[i - q:i + q + 1, j - q:j + q + 1] += patch
            boxes.append(BoxAnnotation(j - q - 0.5, i - q - 0.5, j + q + 0.5, i + q + 0.5, pl.action))
            instances.append((pl.action, i, j))
    return grid.astype(np.float32), tuple(boxes), instances


def gen_dataset(cfg):
    """Generate train (annotated + group-only view) and test (group-only) splits."""
    cfg.validate()
    placements = cfg.resolved_placements()
    templates = gen_templates(cfg.K_a, cfg.p, cfg.C, derive_seed(cfg.seed, "templates"))
    truth = {"templates": np.stack(templates), "instances": {"train": [], "test": []},
             "config": cfg.to_json()}
    splits = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        out = []
        for idx in range(n):
            group = idx % cfg.K_g
            grid, boxes, inst = make_sample(cfg, templates, placements, group,
                                            derive_seed(cfg.seed, split, idx))
            out.append(AnnotatedSample(grid, group, boxes))
            truth["instances"][split].append(inst)
        splits[split] = out
    return SynthDataset(
        train=splits["train"],
        train_groups=[s.group_only() for s in splits["train"]],
        test=[s.group_only() for s in splits["test"]],
        truth=truth,
    )


# ---------------------------------------------------------------------- I/O


def save_dataset(ds, directory):
    d = Path(directory)
    (d / "samples").mkdir(parents=True, exist_ok=True)
    (d / "ground_truth").mkdir(exist_ok=True)
    cfg = ds.truth["config"]
    actions, groups = SynthConfig.from_json(cfg).names()
    manifest = {
        "format": DATASET_FORMAT,
        "sizes": {k: cfg[k] for k in ("K_g", "K_a", "h", "w", "C", "p")},
        "action_names": actions,
        "group_names": groups,
        "train": [],
        "test": [],
    }
    for idx, s in enumerate(ds.train):
        name = f"samples/train_{idx:05d}.vkt"
        write_tensor(s.grid, d / name)
        manifest["train"].append({"file": name, "group": s.group,
                                  "boxes": [b.to_json() for b in s.boxes],
                                  "affine": list(s.affine.as_tuple())})
    for idx, s in enumerate(ds.test):
        name = f"samples/test_{idx:05d}.vkt"
        write_tensor(s.grid, d / name)
        manifest["test"].append({"file": name, "group": s.group})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    write_tensor(ds.truth["templates"], d / "ground_truth" / "templates.vkt")
    (d / "ground_truth" / "instances.json").write_text(json.dumps(ds.truth["instances"]) + "\n")
    (d / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read dataset manifest: {exc}", path=path) from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"unknown dataset format {manifest.get('format')!r}", path=path)
    return manifest


def load_annotated(directory):
    """Annotated training split (stage 1 only)."""
    d = Path(directory)
    manifest = read_manifest(d)
    out = []
    for entry in manifest["train"]:
        boxes = tuple(BoxAnnotation.from_json(b) for b in entry["boxes"])
        out.append(AnnotatedSample(read_tensor(d / entry["file"]), int(entry["group"]), boxes,
                                   AffineTransform(*entry.get("affine", AffineTransform().as_tuple()))))
    return out


def load_groups(directory, split="train"):
    """Group-only view of a split; never touches box or action fields."""
    d = Path(directory)
    manifest = read_manifest(d)
    return [GroupSample(read_tensor(d / e["file"]), int(e["group"])) for e in manifest[split]]


def load_truth(directory):
    d = Path(directory) / "ground_truth"
    return {"templates": read_tensor(d / "templates.vkt"),
            "instances": json.loads((d / "instances.json").read_text())}
