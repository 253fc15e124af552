"""scikit-learn style estimators over batches of feature maps ``(N, h, w, C)``.

``ActionMapTransformer``  prototypes -> action maps (transform)
``KnowledgeExtractor``    stage 1: trains the global and action classifiers on
                          fully annotated data, then extracts the prototype
                          bank and the relation maps
``VicKAMClassifier``      stage 2: trains on group labels only and predicts
                          by averaging the two heads' probabilities
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nnhead
from .errors import ShapeError
from .fftcorr import action_maps_batch
from .nnhead import (ACTION_BLOCKS, GLOBAL_BLOCKS, INTEGRATION_BLOCKS, AdamState, HeadDims,
                     adam_step, augment, embed_labels, global_backward,
                     init_params, integrate_backward, integrate_forward, pooled_features,
                     softmax, softmax_ce_batch)
from .prototypes import build_prototypes, roi_pool
from .relmaps import AffineTransform, stamp_relation_maps
from .tensors import derive_seed
from .validation import check_boxes, check_grids, check_group_labels


def lr_at_epoch(base_lr, schedule, epoch):
    """Learning rate for 0-based ``epoch``.

    ``schedule`` is ``None``/``{"kind": "constant"}`` or ``{"kind":
    "warmup_decay", "start_lr", "peak_lr", "warmup_epochs",
    "decay_start_epoch", "decay_rate"}``: linear ramp from ``start_lr`` to
    ``peak_lr`` over ``warmup_epochs``, flat until ``decay_start_epoch``,
    then ``peak_lr * (1 - decay_rate * epochs_since_start)`` floored at 0.
    """
    if not schedule or schedule.get("kind", "constant") == "constant":
        return base_lr
    if schedule["kind"] != "warmup_decay":
        raise ValueError(f"unknown schedule kind {schedule['kind']!r}")
    start, peak = schedule["start_lr"], schedule["peak_lr"]
    warm = schedule["warmup_epochs"]
    if epoch < warm:
        return start + (peak - start) * epoch / warm
    since = epoch - schedule["decay_start_epoch"]
    if since < 0:
        return peak
    return max(0.0, peak * (1.0 - schedule["decay_rate"] * since))


def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _round_storage(params):
    # parameters are stored as float32; keep the in-memory copy identical to a checkpoint
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


class ActionMapTransformer(TransformerMixin, BaseEstimator):
    """Correlate feature maps with a fixed prototype bank."""

    def __init__(self, prototypes=None, zscore=False):
        self.prototypes = prototypes
        self.zscore = zscore

    def fit(self, X, y=None):
        X = check_grids(X)
        protos = np.asarray(getattr(self.prototypes, "prototypes", self.prototypes), dtype=np.float32)
        if protos.ndim != 4 or protos.shape[3] != X.shape[3]:
            raise ShapeError(f"prototypes {protos.shape} incompatible with feature maps {X.shape}")
        self.prototypes_ = protos
        self.grid_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "prototypes_")
        X = check_grids(X)
        if X.shape[1:] != self.grid_shape_:
            raise ShapeError(f"fitted on grids {self.grid_shape_}, got {X.shape[1:]}")
        return action_maps_batch(X, self.prototypes_, zscore=self.zscore)


class KnowledgeExtractor(ClassifierMixin, BaseEstimator):
    """Stage 1 on fully annotated samples.

    ``fit(X, y, boxes, affines=None)`` trains the global classifier and the
    individual action classifier under ``CE(group) + lambda_pre * sum CE(action)``
    and then sets ``bank_`` and ``relation_maps_``.  ``p=None`` pools ROIs at
    the side length of the first box.
    """

    def __init__(self, n_groups, n_actions, p=None, r=19, lambda_pre=1.0, lr=5e-4, epochs=10,
                 batch_size=4, seed=0, zero_fill=False, action_names=None, schedule=None):
        self.n_groups = n_groups
        self.n_actions = n_actions
        self.p = p
        self.r = r
        self.lambda_pre = lambda_pre
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.zero_fill = zero_fill
        self.action_names = action_names
        self.schedule = schedule

    def _roi_features(self, X, boxes, p):
        feats, acts = [], []
        for grid, bxs in zip(X, boxes):
            feats.append(np.stack([roi_pool(grid, b, p).ravel() for b in bxs]) if bxs
                         else np.zeros((0, p * p * X.shape[3])))
            acts.append(np.array([b.action_id for b in bxs], dtype=np.int64))
        return feats, acts

    def _loss_and_grads(self, params, pooled, y, feats, acts):
        n = len(y)
        logits_g = pooled @ params["W_gs"].T + params["b_gs"]
        lg, dg = softmax_ce_batch(logits_g, y)
        grads = global_backward(dg / n, pooled)
        total = lg.sum()
        F = np.concatenate(feats) if feats else np.zeros((0, params["W_act"].shape[1]))
        A = np.concatenate(acts) if acts else np.zeros(0, dtype=np.int64)
        if len(A):
            la, da = softmax_ce_batch(nnhead.action_classify(F, params), A)
            total += self.lambda_pre * la.sum()
            da = da * (self.lambda_pre / n)
            grads["W_act"] = da.T @ F
            grads["b_act"] = da.sum(0)
        else:
            grads["W_act"] = np.zeros_like(params["W_act"])
            grads["b_act"] = np.zeros_like(params["b_act"])
        return total / n, grads

    def fit(self, X, y, boxes, affines=None, on_epoch_end=None):
        X = check_grids(X)
        y = check_group_labels(y, self.n_groups, len(X))
        n, h, w, C = X.shape
        boxes = check_boxes(boxes, n, h, w, self.n_actions)
        if affines is None:
            affines = [AffineTransform.identity()] * n
        elif len(affines) != n:
            raise ValueError(f"{len(affines)} affines for {n} samples")
        p = self.p
        if p is None:
            first = next((b for bxs in boxes for b in bxs), None)
            if first is None:
                raise ValueError("no boxes to infer the prototype resolution from")
            p = int(round(first.x1 - first.x0))
        self.p_ = p

        dims = HeadDims(self.n_groups, self.n_actions, h, w, C, p=p)
        params = init_params(dims, self.seed, GLOBAL_BLOCKS + ACTION_BLOCKS)
        pooled = pooled_features(X)
        feats, acts = self._roi_features(X, boxes, p)
        state = AdamState(lr=self.lr)
        self.history_ = []
        for epoch in range(self.epochs):
            lr = lr_at_epoch(self.lr, self.schedule, epoch)
            losses = []
            for idx in _batches(n, self.batch_size, self.seed, epoch):
                loss, grads = self._loss_and_grads(params, pooled[idx], y[idx],
                                                   [feats[i] for i in idx], [acts[i] for i in idx])
                params, state = adam_step(state, params, grads, lr=lr)
                losses.append(loss)
            params = _round_storage(params)
            self.params_ = params
            rec = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses)),
                   "group_acc": float(np.mean(self._predict_pooled(pooled) == y)),
                   "action_acc": self._action_acc(feats, acts)}
            self.history_.append(rec)
            if on_epoch_end is not None:
                on_epoch_end(rec, self)
        self.params_ = _round_storage(params)
        self.classes_ = np.arange(self.n_groups)

        self.bank_ = build_prototypes(zip(X, boxes), p, self.n_actions, zero_fill=self.zero_fill,
                                      action_names=self.action_names)
        self.relation_maps_ = stamp_relation_maps(zip(y, affines, boxes), self.n_groups,
                                                  self.n_actions, h, w, self.r)
        return self

    def _predict_pooled(self, pooled):
        return np.argmax(pooled @ self.params_["W_gs"].T + self.params_["b_gs"], axis=1)

    def _action_acc(self, feats, acts):
        A = np.concatenate(acts)
        if not len(A):
            return float("nan")
        pred = np.argmax(nnhead.action_classify(np.concatenate(feats), self.params_), axis=1)
        return float(np.mean(pred == A))

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self._predict_pooled(pooled_features(check_grids(X)))

    def predict_actions(self, X, boxes):
        """Action predictions for every box, flattened in sample order."""
        check_is_fitted(self, "params_")
        X = check_grids(X)
        feats, _ = self._roi_features(X, boxes, self.p_)
        F = np.concatenate(feats)
        return np.argmax(nnhead.action_classify(F, self.params_), axis=1)


class VicKAMClassifier(ClassifierMixin, BaseEstimator):
    """Stage 2: action maps, statistic-based augmentation and semantic integration.

    Trained with group labels only.  ``predict_proba`` averages the softmax of
    the global head and of the group-representation head; with
    ``use_action_maps=False`` only the global head exists.
    """

    def __init__(self, prototypes=None, relation_maps=None, action_names=None, n_groups=None,
                 D=256, d=128, lambda_main=3.0, lr=5e-4, epochs=50, batch_size=4, seed=0,
                 use_action_maps=True, use_augmentation=True, use_semantics=True,
                 train_semantics=False, zscore_maps=False, init_params=None, schedule=None):
        self.prototypes = prototypes
        self.relation_maps = relation_maps
        self.action_names = action_names
        self.n_groups = n_groups
        self.D = D
        self.d = d
        self.lambda_main = lambda_main
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.use_action_maps = use_action_maps
        self.use_augmentation = use_augmentation
        self.use_semantics = use_semantics
        self.train_semantics = train_semantics
        self.zscore_maps = zscore_maps
        self.init_params = init_params
        self.schedule = schedule

    # -- setup

    def _protos(self):
        return np.asarray(getattr(self.prototypes, "prototypes", self.prototypes), dtype=np.float32)

    def _smaps(self):
        return np.asarray(getattr(self.relation_maps, "maps", self.relation_maps), dtype=np.float32)

    def _setup(self, shape):
        _, h, w, C = shape
        if self.n_groups is not None:
            K_g = int(self.n_groups)
        elif self.relation_maps is not None:
            K_g = self._smaps().shape[0]
        else:
            raise ValueError("n_groups or relation_maps is required")
        if self.use_action_maps:
            protos = self._protos()
            if protos.ndim != 4 or protos.shape[3] != C or protos.shape[1] > min(h, w):
                raise ShapeError(f"prototype bank {protos.shape} incompatible with feature maps {shape}")
            K_a, p = protos.shape[0], protos.shape[1]
            if self.use_augmentation:
                if self.relation_maps is None:
                    raise ValueError("use_augmentation=True needs relation_maps")
                if self._smaps().shape != (K_g, K_a, h, w):
                    raise ShapeError(f"relation maps {self._smaps().shape} != expected {(K_g, K_a, h, w)}")
        else:
            K_a, p = 1, 1
        self.dims_ = HeadDims(K_g, K_a, h, w, C, self.D, self.d, p)
        self.classes_ = np.arange(K_g)
        names = (self.action_names if self.use_action_maps else None) or [f"action_{k}" for k in range(K_a)]
        if len(names) != K_a:
            raise ShapeError(f"{len(names)} action names for {K_a} prototypes")
        self.semantics_ = embed_labels(names, self.d, self.seed, trainable=self.train_semantics)

    def _init(self):
        blocks = GLOBAL_BLOCKS + (INTEGRATION_BLOCKS if self.use_action_maps else ())
        params = init_params(self.dims_, self.seed, blocks)
        if self.use_action_maps and self.train_semantics:
            params["Y"] = self.semantics_.table.astype(np.float64)
        if self.init_params is not None:
            for name in GLOBAL_BLOCKS:
                v = np.asarray(self.init_params[name], dtype=np.float64)
                if v.shape != params[name].shape:
                    raise ShapeError(f"initial {name} has shape {v.shape}, expected {params[name].shape}")
                params[name] = v.copy()
        return params

    # -- forward/backward

    def _mhat(self, maps):
        if self.use_augmentation:
            return augment(maps, self._smaps(), True)
        return augment(maps, np.ones((self.dims_.K_g,) + maps.shape[1:], dtype=np.float32), False)

    def _logits(self, params, pooled, maps):
        gs = pooled @ params["W_gs"].T + params["b_gs"]
        if not self.use_action_maps:
            return gs, None
        _, go = integrate_forward(self._mhat(maps), self.semantics_, params, self.use_semantics)
        return gs, go

    def _loss_and_grads(self, params, pooled, maps, y):
        n = len(y)
        gs = pooled @ params["W_gs"].T + params["b_gs"]
        ls, dgs = softmax_ce_batch(gs, y)
        grads = global_backward(dgs / n, pooled)
        loss = ls.sum()
        if self.use_action_maps:
            _, go, cache = integrate_forward(self._mhat(maps), self.semantics_, params,
                                             self.use_semantics, return_cache=True)
            lo, dgo = softmax_ce_batch(go, y)
            loss += self.lambda_main * lo.sum()
            grads.update(integrate_backward(dgo * (self.lambda_main / n), cache, params))
        return loss / n, grads

    def action_maps(self, X):
        if not self.use_action_maps:
            return None
        return action_maps_batch(X, self._protos(), zscore=self.zscore_maps)

    # -- sklearn API

    def fit(self, X, y, on_epoch_end=None):
        X = check_grids(X)
        self._setup(X.shape)
        y = check_group_labels(y, self.dims_.K_g, len(X))
        pooled = pooled_features(X)
        maps = self.action_maps(X)
        params = self._init()
        state = AdamState(lr=self.lr)
        self.history_ = []
        for epoch in range(self.epochs):
            lr = lr_at_epoch(self.lr, self.schedule, epoch)
            losses = []
            for idx in _batches(len(X), self.batch_size, self.seed, epoch):
                loss, grads = self._loss_and_grads(params, pooled[idx], None if maps is None else maps[idx],
                                                   y[idx])
                params, state = adam_step(state, params, grads, lr=lr)
                losses.append(loss)
            params = _round_storage(params)
            self.params_ = params
            self.step_ = state.step
            rec = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses)),
                   "train_acc": float(np.mean(self._predict_from(pooled, maps) == y))}
            self.history_.append(rec)
            if on_epoch_end is not None:
                on_epoch_end(rec, self)
        self.params_ = _round_storage(params)
        self.step_ = state.step
        return self

    def _proba_from(self, pooled, maps, chunk=64):
        out = []
        for i in range(0, len(pooled), chunk):
            gs, go = self._logits(self.params_, pooled[i:i + chunk],
                                  None if maps is None else maps[i:i + chunk])
            out.append(softmax(gs) if go is None else (softmax(gs) + softmax(go)) / 2.0)
        return np.concatenate(out) if out else np.zeros((0, self.dims_.K_g))

    def _predict_from(self, pooled, maps):
        return np.argmax(self._proba_from(pooled, maps), axis=1)

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_grids(X)
        if X.shape[1:] != (self.dims_.h, self.dims_.w, self.dims_.C):
            raise ShapeError(f"model expects grids {(self.dims_.h, self.dims_.w, self.dims_.C)}, got {X.shape[1:]}")
        return self._proba_from(pooled_features(X), self.action_maps(X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def decision_heads(self, X):
        """Raw ``(logits_gs, logits_go)``; ``logits_go`` is None without action maps."""
        check_is_fitted(self, "params_")
        X = check_grids(X)
        return self._logits(self.params_, pooled_features(X), self.action_maps(X))

    def restore(self, params, grid_shape, step=0):
        """Install trained parameters (e.g. from a checkpoint) without training."""
        self._setup((0,) + tuple(grid_shape))
        expect = self._init()
        for name, v in expect.items():
            if name not in params or np.shape(params[name]) != v.shape:
                got = None if name not in params else np.shape(params[name])
                raise ShapeError(f"checkpoint block {name}: expected {v.shape}, got {got}")
        self.params_ = {k: np.asarray(params[k], dtype=np.float64) for k in expect}
        self.step_ = step
        self.history_ = []
        return self
