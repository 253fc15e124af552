"""Shared builders for gradient checks and tiny datasets."""

import numpy as np

from vickam.nnhead import (ACTION_BLOCKS, GLOBAL_BLOCKS, INTEGRATION_BLOCKS, HeadDims, action_classify,
                           embed_labels, global_backward, global_classify, init_params,
                           integrate_backward, integrate_forward, pooled_features, softmax_ce_batch)
from vickam.tensors import seeded_fill

TINY = HeadDims(K_g=2, K_a=2, h=4, w=4, C=2, D=3, d=2, p=3)


def tiny_problem(dims=TINY, n=3, seed=0, train_y=False):
    """Seeded params (with non-zero biases), inputs and labels."""
    blocks = GLOBAL_BLOCKS + INTEGRATION_BLOCKS + ACTION_BLOCKS
    params = init_params(dims, seed, blocks)
    for k, name in enumerate(blocks):
        if name.startswith("b"):
            params[name] = 0.1 * seeded_fill(params[name].shape, seed + 100 + k).astype(np.float64)
    table = embed_labels([f"a{k}" for k in range(dims.K_a)], dims.d, seed)
    if train_y:
        params["Y"] = table.table.astype(np.float64)
    x = seeded_fill((n, dims.h, dims.w, dims.C), seed + 1).astype(np.float64)
    shape = (n, dims.K_g, dims.K_a, dims.h, dims.w)
    mhat = seeded_fill((int(np.prod(shape)),), seed + 2).astype(np.float64).reshape(shape)
    roi = seeded_fill((2 * n, dims.p * dims.p * dims.C), seed + 3).astype(np.float64)
    y = np.arange(n) % dims.K_g
    acts = np.arange(2 * n) % dims.K_a
    return params, table, x, mhat, roi, y, acts


def gs_closure(x, y):
    pooled = pooled_features(x)
    n = len(y)

    def fn(params):
        losses, d = softmax_ce_batch(global_classify(x, params), y)
        return float(losses.sum() / n), global_backward(d / n, pooled)
    return fn


def go_closure(mhat, table, y, lam=1.0, use_semantics=True):
    n = len(y)

    def fn(params):
        _, logits, cache = integrate_forward(mhat, table, params, use_semantics, return_cache=True)
        losses, d = softmax_ce_batch(logits, y)
        return float(lam * losses.sum() / n), integrate_backward(d * (lam / n), cache, params)
    return fn


def main_closure(x, mhat, table, y, lam=3.0):
    gs, go = gs_closure(x, y), go_closure(mhat, table, y, lam)

    def fn(params):
        ls, gg = gs(params)
        lo, go_grads = go(params)
        return ls + lo, {**gg, **go_grads}
    return fn


def action_closure(roi, acts):
    n = len(acts)

    def fn(params):
        losses, d = softmax_ce_batch(action_classify(roi, params), acts)
        d = d / n
        return float(losses.sum() / n), {"W_act": d.T @ roi, "b_act": d.sum(0)}
    return fn
