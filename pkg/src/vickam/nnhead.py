"""Trainable head: global classifier, action-map integration, CE loss, Adam.

Parameters live in a flat ``dict`` of float64 arrays keyed by block name.
Linear blocks are stored ``(out, in)``; biases are separate entries.

    W_gs, b_gs     global classifier over mean-pooled X          (K_g, C)
    E1, b1         flattened sub-map encoder                     (D, h*w)
    E2, b2         [action feature, label embedding] encoder     (D, D+d)
    W_int, b_int   interaction over stacked action features      (D, K_a*D)
    W_go, b_go     group classifier over flattened O             (K_g, K_g*D)
    W_act, b_act   stage-1 individual action classifier          (K_a, p*p*C)
    Y              label embeddings, only when trained           (K_a, d)

ReLU follows E1 and E2; W_int and both classifiers are affine.  W_int and
the encoders are shared across activities, so O[g] depends on g only
through the augmented maps of activity g.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .tensors import derive_seed, read_tensor, seeded_fill, write_tensor

GLOBAL_BLOCKS = ("W_gs", "b_gs")
INTEGRATION_BLOCKS = ("E1", "b1", "E2", "b2", "W_int", "b_int", "W_go", "b_go")
ACTION_BLOCKS = ("W_act", "b_act")


@dataclass(frozen=True)
class HeadDims:
    K_g: int
    K_a: int
    h: int
    w: int
    C: int
    D: int = 256
    d: int = 128
    p: int = 7

    def shapes(self):
        D, d = self.D, self.d
        return {
            "W_gs": (self.K_g, self.C), "b_gs": (self.K_g,),
            "E1": (D, self.h * self.w), "b1": (D,),
            "E2": (D, D + d), "b2": (D,),
            "W_int": (D, self.K_a * D), "b_int": (D,),
            "W_go": (self.K_g, self.K_g * D), "b_go": (self.K_g,),
            "W_act": (self.K_a, self.p * self.p * self.C), "b_act": (self.K_a,),
            "Y": (self.K_a, d),
        }


def init_params(dims, seed, blocks=GLOBAL_BLOCKS + INTEGRATION_BLOCKS + ACTION_BLOCKS):
    """Weights uniform in +-1/sqrt(fan_in) from per-block sub-seeds; biases zero.

    Values are float64 arrays holding float32-representable numbers, the
    same precision a checkpoint stores.
    """
    shapes = dims.shapes()
    params = {}
    for name in blocks:
        shape = shapes[name]
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            w = seeded_fill(shape, derive_seed(seed, "param", name)).astype(np.float64)
            params[name] = (w / np.sqrt(shape[1])).astype(np.float32).astype(np.float64)
    return params


# ---------------------------------------------------------------- semantics


@dataclass
class SemanticTable:
    table: np.ndarray  # (K_a, d) float32
    labels: tuple
    seed: int
    trainable: bool = False


def label_key(seed, label):
    h = hashlib.sha256(f"{int(seed)}\x00{label}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def embed_labels(labels, d, seed, trainable=False):
    """One seeded N(0, 1/d) row per label, keyed by the label text."""
    labels = tuple(str(s) for s in labels)
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate action labels in {labels}")
    rows = [seeded_fill((d,), label_key(seed, s), "gaussian", sigma=1.0 / np.sqrt(d)) for s in labels]
    return SemanticTable(np.stack(rows).astype(np.float32), labels, int(seed), trainable)


# ------------------------------------------------------------- augmentation


def augment(m, s, enabled=True):
    """Broadcast action maps over activities and multiply by relation maps.

    ``m`` is ``(K_a, h, w)`` or a batch ``(N, K_a, h, w)``; ``s`` is the
    ``(K_g, K_a, h, w)`` relation maps (or a :class:`RelationMaps`).
    Returns float32 ``(..., K_g, K_a, h, w)``.
    """
    s = np.asarray(getattr(s, "maps", s))
    m = np.asarray(m)
    if s.ndim != 4 or m.ndim not in (3, 4) or m.shape[-3:] != s.shape[1:]:
        raise ShapeError(f"action maps {m.shape} do not match relation maps {s.shape}")
    mb = np.expand_dims(m, axis=-4)
    if not enabled:
        return np.broadcast_to(mb, m.shape[:-3] + s.shape).astype(np.float32)
    return (mb.astype(np.float64) * s.astype(np.float64)).astype(np.float32)


# ------------------------------------------------------------------ forward


def _semantic_rows(y, params, use_semantics=True):
    if "Y" in params:
        rows = params["Y"]
    else:
        rows = np.asarray(getattr(y, "table", y), dtype=np.float64)
    if not use_semantics:
        rows = np.zeros_like(rows)
    return rows


def integrate_forward(mhat, y, params, use_semantics=True, return_cache=False):
    """Group representation ``O`` and group logits from augmented maps.

    Accepts one sample ``(K_g, K_a, h, w)`` or a batch ``(N, K_g, K_a, h, w)``.
    """
    mhat = np.asarray(mhat, dtype=np.float64)
    single = mhat.ndim == 4
    if single:
        mhat = mhat[None]
    if mhat.ndim != 5:
        raise ShapeError(f"augmented maps must be (N,K_g,K_a,h,w), got {mhat.shape}")
    n, G, A, h, w = mhat.shape
    D = params["E1"].shape[0]
    if params["E1"].shape[1] != h * w or params["W_int"].shape[1] != A * D \
            or params["W_go"].shape != (G, G * D):
        raise ShapeError(f"augmented maps {mhat.shape} do not match head parameters")
    rows = _semantic_rows(y, params, use_semantics)
    if rows.shape[0] != A or rows.shape[1] + D != params["E2"].shape[1]:
        raise ShapeError(f"semantic table {rows.shape} does not match head parameters")

    flat_maps = mhat.reshape(n, G, A, h * w)
    z1 = flat_maps @ params["E1"].T + params["b1"]
    f = np.maximum(z1, 0.0)
    cat = np.concatenate([f, np.broadcast_to(rows, (n, G) + rows.shape)], axis=-1)
    z2 = cat @ params["E2"].T + params["b2"]
    a = np.maximum(z2, 0.0)
    stacked = a.reshape(n, G, A * D)
    o = stacked @ params["W_int"].T + params["b_int"]
    logits = o.reshape(n, G * D) @ params["W_go"].T + params["b_go"]
    if single:
        o, logits = o[0], logits[0]
    if not return_cache:
        return o, logits
    cache = {"flat_maps": flat_maps, "z1": z1, "cat": cat, "z2": z2, "stacked": stacked,
             "o": o if not single else o[None], "use_semantics": use_semantics}
    return o, logits, cache


def _outer_sum(dout, inp):
    # sum over all leading axes of dout[..., i] * inp[..., j]
    return dout.reshape(-1, dout.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])


def integrate_backward(dlogits, cache, params):
    """Gradients of the integration blocks (and ``Y`` if trained) given dL/dlogits."""
    dlogits = np.atleast_2d(dlogits)
    o = cache["o"]
    n, G, D = o.shape
    A = cache["z1"].shape[2]
    grads = {"W_go": dlogits.T @ o.reshape(n, G * D), "b_go": dlogits.sum(0)}
    do = (dlogits @ params["W_go"]).reshape(n, G, D)
    grads["W_int"] = _outer_sum(do, cache["stacked"])
    grads["b_int"] = do.sum((0, 1))
    da = (do @ params["W_int"]).reshape(n, G, A, D)
    dz2 = da * (cache["z2"] > 0)
    grads["E2"] = _outer_sum(dz2, cache["cat"])
    grads["b2"] = dz2.sum((0, 1, 2))
    dcat = dz2 @ params["E2"]
    if "Y" in params:
        dy = dcat[..., D:].sum((0, 1))
        grads["Y"] = dy if cache["use_semantics"] else np.zeros_like(dy)
    dz1 = dcat[..., :D] * (cache["z1"] > 0)
    grads["E1"] = _outer_sum(dz1, cache["flat_maps"])
    grads["b1"] = dz1.sum((0, 1, 2))
    return grads


def pooled_features(x):
    """Mean over the spatial axes of (…, h, w, C) feature maps."""
    return np.asarray(x, dtype=np.float64).mean(axis=(-3, -2))


def global_classify(x, params):
    x = np.asarray(x)
    if x.shape[-1] != params["W_gs"].shape[1]:
        raise ShapeError(f"feature map channels {x.shape[-1]} != classifier input {params['W_gs'].shape[1]}")
    return pooled_features(x) @ params["W_gs"].T + params["b_gs"]


def global_backward(dlogits, pooled):
    dlogits = np.atleast_2d(dlogits)
    return {"W_gs": dlogits.T @ np.atleast_2d(pooled), "b_gs": dlogits.sum(0)}


def action_classify(roi_feats, params):
    """Logits for flattened ROI features ``(N, p*p*C)``."""
    return np.asarray(roi_feats, dtype=np.float64) @ params["W_act"].T + params["b_act"]


# --------------------------------------------------------------------- loss


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, label):
    """Cross-entropy of one logit vector against an integer label, and its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} outside [0, {z.shape[-1]})")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    shifted = z - z.max()
    lse = np.log(np.exp(shifted).sum())
    loss = float(lse - shifted[label])
    grad = np.exp(shifted - lse)
    grad[label] -= 1.0
    return loss, grad


def softmax_ce_batch(logits, labels):
    """Per-row losses ``(N,)`` and gradients ``(N, K)``."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[-1]):
        raise ValueError(f"labels outside [0, {z.shape[-1]})")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, labels]
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads, lr=None):
    """One bias-corrected Adam update over the blocks present in ``grads``.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    lr = state.lr if lr is None else lr
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        m_prev = m.get(name, np.zeros_like(g))
        v_prev = v.get(name, np.zeros_like(g))
        m[name] = state.beta1 * m_prev + (1 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1 - state.beta2) * g * g
        m_hat = m[name] / (1 - state.beta1 ** t)
        v_hat = v[name] / (1 - state.beta2 ** t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)


# --------------------------------------------------------------- grad check


def grad_check(fn, params, eps=1e-6, n_coords=64, seed=0, floor=1e-7):
    """Compare analytic gradients with central differences.

    ``fn(params) -> (loss, grads)``.  For every block in ``grads`` up to
    ``n_coords`` coordinates are perturbed (all of them when the block is
    smaller).  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  Returns ``{block: max_rel_err}``
    plus ``"max"`` over all blocks; empty blocks are skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss, grads = fn(params)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss at the base point")
    rng = np.random.default_rng(seed)
    report = {}
    for name in sorted(grads):
        base = np.asarray(params[name], dtype=np.float64)
        if base.size == 0:
            continue
        idx = np.arange(base.size) if base.size <= n_coords else rng.choice(base.size, n_coords, replace=False)
        worst = 0.0
        for i in idx:
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped.flat[i] += sign * eps
                f, _ = fn({**params, name: bumped})
                if not np.isfinite(f):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                vals.append(f)
            num = (vals[0] - vals[1]) / (2 * eps)
            ana = float(np.asarray(grads[name]).flat[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        report[name] = worst
    if report:
        report["max"] = max(report.values())
    return report


# -------------------------------------------------------------- checkpoints


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(directory, params, step, cfg):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name in sorted(params):
        write_tensor(params[name], d / f"{name}.vkt")
        shapes[name] = list(np.shape(params[name]))
    manifest = {"shapes": shapes, "step": int(step), "config_hash": config_hash(cfg), "config": cfg}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Returns ``(params, manifest)``; params are float64 copies of the stored float32."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc}", path=d / "manifest.json") from exc
    params = {}
    for name, shape in manifest["shapes"].items():
        t = read_tensor(d / f"{name}.vkt")
        if list(t.shape) != list(shape):
            raise ShapeError(f"checkpoint block {name} has shape {t.shape}, manifest says {shape}", path=d)
        params[name] = t.astype(np.float64)
    return params, manifest
