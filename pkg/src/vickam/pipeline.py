"""Two-stage training, test-time fusion, evaluation and run directories.

Run directory (stage 2)::

    config.json                  resolved config, version, default provenance
    prototypes/  relmaps/        knowledge used by this run
    checkpoints/epoch_NNN/       one checkpoint per epoch
    metrics.jsonl                one JSON object per epoch
    final_metrics.json

A knowledge directory (stage 1) has the same layout with ``stage1/`` in
place of ``checkpoints/``.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import FormatError, ShapeError
from .estimators import KnowledgeExtractor, VicKAMClassifier
from .fftcorr import gen_action_maps
from .nnhead import (augment, embed_labels, global_classify, integrate_forward, load_checkpoint,
                     save_checkpoint, softmax, softmax_ce)

REFERENCE = "reference"
ARTIFACT = "artifact"


@dataclass
class TrainConfig:
    K_g: Optional[int] = field(default=None, metadata={"src": ARTIFACT})
    K_a: Optional[int] = field(default=None, metadata={"src": ARTIFACT})
    h: Optional[int] = field(default=None, metadata={"src": ARTIFACT})
    w: Optional[int] = field(default=None, metadata={"src": ARTIFACT})
    C: Optional[int] = field(default=None, metadata={"src": ARTIFACT})
    p: Optional[int] = field(default=None, metadata={"src": ARTIFACT})
    d: int = field(default=128, metadata={"src": REFERENCE})
    D: int = field(default=256, metadata={"src": REFERENCE})
    r: int = field(default=19, metadata={"src": REFERENCE})
    lambda_pre: float = field(default=1.0, metadata={"src": REFERENCE})
    lambda_main: float = field(default=3.0, metadata={"src": REFERENCE})
    lr_stage1: float = field(default=5e-4, metadata={"src": REFERENCE})
    lr_stage2: float = field(default=5e-4, metadata={"src": REFERENCE})
    schedule: Optional[dict] = field(default=None, metadata={"src": ARTIFACT})
    epochs_stage1: int = field(default=10, metadata={"src": ARTIFACT})
    epochs_stage2: int = field(default=50, metadata={"src": REFERENCE})
    batch_size: int = field(default=4, metadata={"src": REFERENCE})
    seed: int = field(default=0, metadata={"src": ARTIFACT})
    use_action_maps: bool = field(default=True, metadata={"src": ARTIFACT})
    use_augmentation: bool = field(default=True, metadata={"src": ARTIFACT})
    use_semantics: bool = field(default=True, metadata={"src": ARTIFACT})
    train_semantics: bool = field(default=False, metadata={"src": ARTIFACT})
    zscore_maps: bool = field(default=False, metadata={"src": ARTIFACT})
    zero_fill: bool = field(default=False, metadata={"src": ARTIFACT})
    train_fraction: float = field(default=1.0, metadata={"src": ARTIFACT})

    def validate(self):
        for name in ("K_g", "K_a", "h", "w", "C", "p"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.d, self.D, self.r, self.batch_size) < 1:
            raise ValueError("d, D, r and batch_size must be >= 1")
        if self.r % 2 == 0:
            raise ValueError(f"r must be odd, got {self.r}")
        if self.lambda_pre < 0 or self.lambda_main < 0:
            raise ValueError("loss weights must be non-negative")
        if self.p is not None and self.h is not None and self.w is not None and self.p > min(self.h, self.w):
            raise ValueError(f"p={self.p} exceeds grid {self.h}x{self.w}")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(k for k in d if k not in known and not k.startswith("_"))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def provenance(cls):
        return {f.name: f.metadata.get("src", ARTIFACT) for f in fields(cls)}

    def with_sizes(self, sizes):
        """Fill unset sizes from a dataset and reject conflicting ones."""
        out = TrainConfig(**asdict(self))
        for k in ("K_g", "K_a", "h", "w", "C"):
            if getattr(out, k) is None:
                setattr(out, k, int(sizes[k]))
            elif getattr(out, k) != sizes[k]:
                raise ShapeError(f"config {k}={getattr(out, k)} but data has {sizes[k]}")
        if out.p is None:
            out.p = int(sizes["p"])
        return out.validate()


def echo_config(cfg):
    return {**cfg.to_json(), "_version": __version__, "_defaults_source": TrainConfig.provenance()}


# ------------------------------------------------------------------- losses


def loss_pre(logits_g, g, per_individual_logits, actions, lambda_pre=1.0):
    """Group CE plus ``lambda_pre`` times the summed individual action CE."""
    total, _ = softmax_ce(logits_g, g)
    acts = list(actions)
    if len(acts) != len(per_individual_logits):
        raise ValueError(f"{len(per_individual_logits)} individual logits for {len(acts)} labels")
    for logit, a in zip(per_individual_logits, acts):
        total += lambda_pre * softmax_ce(logit, a)[0]
    return total


def loss_main(logits_gs, logits_go, g, lambda_main=3.0):
    return softmax_ce(logits_gs, g)[0] + lambda_main * softmax_ce(logits_go, g)[0]


# ------------------------------------------------------------------ metrics


@dataclass
class Metrics:
    mca_overall: float
    mca_per_class_mean: float
    confusion: list
    n: int
    loss_curve: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self):
        out = {"mca_overall": self.mca_overall, "mca_per_class_mean": self.mca_per_class_mean,
               "confusion": self.confusion, "n": self.n, "loss_curve": self.loss_curve}
        out.update(self.extra)
        return out


def compute_metrics(y_true, y_pred, n_classes, loss_curve=()):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty set")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    support = conf.sum(axis=1)
    per_class = [conf[k, k] / support[k] for k in range(n_classes) if support[k] > 0]
    return Metrics(float(np.trace(conf) / conf.sum()), float(np.mean(per_class)),
                   conf.tolist(), int(conf.sum()), list(loss_curve))


# --------------------------------------------------------------- prediction


def predict(x, bank, relmaps, params, cfg, semantics=None):
    """Fused class probabilities and argmax label for one feature map.

    ``probs = (softmax(gs) + softmax(go)) / 2``; only ``softmax(gs)`` when the
    action-map path is disabled.  Ties resolve to the lowest index.
    """
    gs = global_classify(x, params)
    probs = softmax(gs)
    if cfg.use_action_maps:
        m = gen_action_maps(x, bank, zscore=cfg.zscore_maps)
        s = getattr(relmaps, "maps", relmaps)
        mhat = augment(m, s, True) if cfg.use_augmentation else augment(m, np.ones_like(s), False)
        if semantics is None:
            semantics = embed_labels(bank.action_names, cfg.d, cfg.seed)
        _, go = integrate_forward(mhat, semantics, params, cfg.use_semantics)
        probs = (probs + softmax(go)) / 2.0
    return probs, int(np.argmax(probs))


def evaluate(samples, clf):
    """Metrics of a fitted :class:`VicKAMClassifier` on group-labelled samples."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty test set")
    X = np.stack([s.grid for s in samples])
    y = np.array([s.group for s in samples])
    return compute_metrics(y, clf.predict(X), clf.dims_.K_g)


# ------------------------------------------------------------------- stages


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sizes_of(samples):
    h, w, C = samples[0].grid.shape
    return h, w, C


def subsample(samples, fraction, n_groups):
    """Leading ``ceil(fraction * n)`` samples, never fewer than ``n_groups``."""
    if fraction >= 1.0:
        return list(samples)
    n = max(n_groups, int(math.ceil(fraction * len(samples))))
    return list(samples[:n])


def stage1_run(train_set, cfg, out_dir=None, action_names=None):
    """Train stage-1 classifiers, then extract the prototype bank and relation maps.

    ``train_set`` must be fully annotated samples.  Returns ``(bank, relmaps,
    weights, metrics)``.
    """
    if not train_set:
        raise ValueError("empty training set")
    for s in train_set:
        if not hasattr(s, "boxes") or not hasattr(s, "affine"):
            raise ValueError("stage 1 requires boxes, action labels and affines on every sample")
    cfg.validate()
    X = np.stack([s.grid for s in train_set])
    y = np.array([s.group for s in train_set])
    ke = KnowledgeExtractor(cfg.K_g, cfg.K_a, p=cfg.p, r=cfg.r, lambda_pre=cfg.lambda_pre,
                            lr=cfg.lr_stage1, epochs=cfg.epochs_stage1, batch_size=cfg.batch_size,
                            seed=cfg.seed, zero_fill=cfg.zero_fill, action_names=action_names,
                            schedule=cfg.schedule)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", echo_config(cfg))
        (out / "metrics.jsonl").write_text("")

    def log_epoch(rec, _):
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    ke.fit(X, y, [s.boxes for s in train_set], [s.affine for s in train_set], on_epoch_end=log_epoch)
    metrics = compute_metrics(y, ke.predict(X), cfg.K_g, [r["loss"] for r in ke.history_])
    metrics.extra["action_acc"] = ke._action_acc(*ke._roi_features(X, [s.boxes for s in train_set], ke.p_))
    metrics.extra["skipped_points"] = ke.relation_maps_.skipped_points
    if out is not None:
        ke.bank_.save(out / "prototypes")
        ke.relation_maps_.save(out / "relmaps")
        save_checkpoint(out / "stage1", ke.params_, cfg.epochs_stage1, cfg.to_json())
        _write_json(out / "final_metrics.json", metrics.to_json())
    return ke.bank_, ke.relation_maps_, ke.params_, metrics


def make_classifier(cfg, bank, relmaps, init_params=None):
    return VicKAMClassifier(
        prototypes=bank, relation_maps=relmaps, action_names=list(bank.action_names) or None,
        n_groups=cfg.K_g, D=cfg.D, d=cfg.d, lambda_main=cfg.lambda_main, lr=cfg.lr_stage2,
        epochs=cfg.epochs_stage2, batch_size=cfg.batch_size, seed=cfg.seed,
        use_action_maps=cfg.use_action_maps, use_augmentation=cfg.use_augmentation,
        use_semantics=cfg.use_semantics, train_semantics=cfg.train_semantics,
        zscore_maps=cfg.zscore_maps, init_params=init_params, schedule=cfg.schedule)


def check_knowledge(cfg, bank, relmaps):
    if bank.n_actions != cfg.K_a or bank.n_channels != cfg.C:
        raise ShapeError(f"prototype bank (K_a={bank.n_actions}, C={bank.n_channels}) does not match "
                         f"config (K_a={cfg.K_a}, C={cfg.C})")
    if bank.p > min(cfg.h, cfg.w):
        raise ShapeError(f"prototype size {bank.p} exceeds grid {cfg.h}x{cfg.w}")
    if tuple(relmaps.maps.shape) != (cfg.K_g, cfg.K_a, cfg.h, cfg.w):
        raise ShapeError(f"relation maps {relmaps.maps.shape} do not match config "
                         f"{(cfg.K_g, cfg.K_a, cfg.h, cfg.w)}")


def stage2_run(train_set, bank, relmaps, cfg, out_dir=None, init_params=None, test_set=None):
    """Main training on group labels only.

    ``train_set`` holds :class:`~vickam.synthgen.GroupSample` (no boxes or
    action labels).  Returns ``(classifier, metrics)``; metrics are on
    ``test_set`` when given, else on the training set.
    """
    if not train_set:
        raise ValueError("empty training set")
    cfg.validate()
    check_knowledge(cfg, bank, relmaps)
    train_set = subsample(train_set, cfg.train_fraction, cfg.K_g)
    X = np.stack([s.grid for s in train_set])
    y = np.array([s.group for s in train_set])
    clf = make_classifier(cfg, bank, relmaps, init_params)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", echo_config(cfg))
        bank.save(out / "prototypes")
        relmaps.save(out / "relmaps")
        (out / "metrics.jsonl").write_text("")

    def on_epoch(rec, model):
        if out is None:
            return
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        save_checkpoint(out / "checkpoints" / f"epoch_{rec['epoch']:03d}", model.params_, model.step_,
                        checkpoint_config(cfg, bank))

    clf.fit(X, y, on_epoch_end=on_epoch)
    if out is not None and cfg.epochs_stage2 == 0:
        save_checkpoint(out / "checkpoints" / "epoch_000", clf.params_, 0,
                        checkpoint_config(cfg, bank))
    curve = [r["loss"] for r in clf.history_]
    train_metrics = compute_metrics(y, clf.predict(X), cfg.K_g, curve)
    if test_set:
        metrics = evaluate(test_set, clf)
        metrics.loss_curve = curve
        metrics.extra = {"split": "test", "train_mca": train_metrics.mca_overall, "n_train": len(y)}
    else:
        metrics = train_metrics
        metrics.extra = {"split": "train", "n_train": len(y)}
    if out is not None:
        _write_json(out / "final_metrics.json", metrics.to_json())
    return clf, metrics


def checkpoint_config(cfg, bank):
    return {**cfg.to_json(), "action_names": list(bank.action_names)}


def latest_checkpoint(path):
    """Resolve a run directory or a ``checkpoints/`` directory to its last epoch."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    ck = path / "checkpoints" if (path / "checkpoints").is_dir() else path
    epochs = sorted(p for p in ck.glob("epoch_*") if (p / "manifest.json").exists())
    if not epochs:
        raise FormatError("no checkpoint found", path=path)
    return epochs[-1]


def load_classifier(checkpoint_dir, bank, relmaps):
    """Rebuild a fitted :class:`VicKAMClassifier` from a checkpoint and knowledge."""
    params, manifest = load_checkpoint(checkpoint_dir)
    ccfg = dict(manifest["config"])
    ccfg.pop("action_names", None)
    cfg = TrainConfig.from_json(ccfg)
    check_knowledge(cfg, bank, relmaps)
    clf = make_classifier(cfg, bank, relmaps)
    clf.restore(params, (cfg.h, cfg.w, cfg.C), step=manifest.get("step", 0))
    return clf, cfg
