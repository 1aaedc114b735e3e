"""Finite-difference verification of every analytic backward pass.

Each check builds a small scalar-valued graph, computes reverse-mode
gradients, and compares against central differences (the independent
oracle). Used by the `gradcheck` CLI command and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import eeo as eeo_mod
from . import layers as layers_mod
from . import model as model_mod
from . import numerics as nm
from .numerics import Rng, Tensor

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    worst_rel_err: float
    passed: bool


def _check(name, f, params, tol, results, eps=1e-5):
    analytic = nm.grad_of(f, params)
    numeric = nm.finite_difference_grad(f, params, eps=eps)
    err = nm.max_relative_error(analytic, numeric)
    results.append(CheckResult(name=name, worst_rel_err=err, passed=err < tol))


def check_primitives(tol=DEFAULT_TOL, seed=0):
    """One finite-difference check per registered primitive."""
    rng = Rng(seed).split("gradcheck")
    results = []
    a = Tensor(rng.normal((3, 4)))
    b = Tensor(rng.normal((4, 2)))
    c = Tensor(rng.normal((3, 2)))
    _check("matmul", lambda: nm.tsum(nm.mul(nm.matmul(a, b), c.value)), [a, b], tol, results)
    _check("add", lambda: nm.tsum(nm.mul(nm.add(a, a), rng_fixed_weights(a.shape))), [a], tol, results)
    _check("sub", lambda: nm.tsum(nm.mul(nm.sub(a, nm.mul(a, a)), rng_fixed_weights(a.shape))), [a], tol, results)
    _check("mul", lambda: nm.tsum(nm.mul(a, nm.mul(a, a))), [a], tol, results)
    # keep relu inputs away from the kink at 0
    r = Tensor(np.where(np.abs(rng.normal((3, 4))) < 0.1, 0.5, rng.normal((3, 4))))
    _check("relu", lambda: nm.tsum(nm.mul(nm.relu(r), rng_fixed_weights(r.shape))), [r], tol, results)
    _check("sigmoid", lambda: nm.tsum(nm.mul(nm.sigmoid(a), rng_fixed_weights(a.shape))), [a], tol, results)
    _check(
        "softmax_rows",
        lambda: nm.tsum(nm.mul(nm.softmax_rows(a), rng_fixed_weights(a.shape))),
        [a],
        tol,
        results,
    )
    _check(
        "dropout",
        lambda: nm.tsum(nm.dropout(a, 0.4, Rng(7).split("drop"), training=True)),
        [a],
        tol,
        results,
    )
    _check("reshape", lambda: nm.tsum(nm.mul(nm.reshape(a, (2, 6)), np.arange(12.0).reshape(2, 6))), [a], tol, results)
    _check("concat", lambda: nm.tsum(nm.mul(nm.concat([a, nm.mul(a, a)], axis=-1), 0.3)), [a], tol, results)
    _check("tsum", lambda: nm.tsum(nm.mul(nm.tsum(a, axis=0), nm.tsum(a, axis=0))), [a], tol, results)
    _check("tmean", lambda: nm.tmean(nm.mul(a, a)), [a], tol, results)
    pos = Tensor(np.abs(rng.normal((3, 4))) + 0.5)
    _check("log", lambda: nm.tsum(nm.log(pos)), [pos], tol, results)
    _check("clip", lambda: nm.tsum(nm.mul(nm.clip(a, -10.0, 10.0), 0.7)), [a], tol, results)
    table = Tensor(rng.normal((6, 3)))
    idx = np.array([[0, 2], [5, 2]])
    _check("gather", lambda: nm.tsum(nm.mul(nm.gather(table, idx), np.ones((2, 2, 3)) * 0.5)), [table], tol, results)
    _check("transpose_last", lambda: nm.tsum(nm.mul(nm.transpose_last(a), b.value[:, :1] @ np.ones((1, 3)))), [a], tol, results)
    w = Tensor(nm.softmax_rows(Tensor(rng.normal((4, 4)) * 2)).value)
    _check("topk_truncate", lambda: nm.tsum(nm.mul(nm.topk_truncate(w, 2)[0], np.arange(16.0).reshape(4, 4))), [w], tol, results)
    return results


def rng_fixed_weights(shape):
    return (np.arange(int(np.prod(shape))).reshape(shape) + 1.0) / np.prod(shape)


def check_layers(tol=DEFAULT_TOL, seed=1):
    """Finite-difference checks on the composed layers."""
    rng = Rng(seed).split("gradcheck-layers")
    results = []
    n, d = 4, 3
    emb = Tensor(rng.normal((2, n, d)))
    head = layers_mod.CtmHeadParams.init(d, rng.split("head"))
    weights = rng_fixed_weights((2, n * d))

    def ctm_loss():
        out, _ = layers_mod.ctm_forward(emb, head, k=2)
        return nm.tsum(nm.mul(out, weights))

    _check("ctm_forward", ctm_loss, [emb, head.w_q, head.w_k, head.w_v], tol, results)

    e_flat = Tensor(rng.normal((2, n * d)))
    enh = Tensor(rng.normal((2, n * d)))
    gate = Tensor(rng.normal((n * d,)))

    def efg_loss():
        return nm.tsum(nm.mul(layers_mod.efg_fuse(e_flat, enh, gate), weights))

    _check("efg_fuse/gate", efg_loss, [gate, e_flat, enh], tol, results)

    m = 5
    x0 = Tensor(rng.normal((2, m)))
    branch = eeo_mod.EeoBranch.init(m, depth=2, rng=rng.split("eeo"))
    eeo_params = [x0]
    for p in branch.layers:
        eeo_params += [p.weight, p.bias]
    eeo_params += [branch.head_weight, branch.head_bias]
    _check("eeo_forward", lambda: nm.tsum(eeo_mod.eeo_forward(x0, branch)), eeo_params, tol, results)

    emb2 = Tensor(rng.normal((2, 3, 2)))
    fm_bias = Tensor([0.1])
    _check(
        "eeo_fm_forward",
        lambda: nm.tsum(eeo_mod.eeo_fm_forward(emb2, fm_bias)),
        [emb2, fm_bias],
        tol,
        results,
    )
    return results


def check_full_model(tol=DEFAULT_TOL, seed=2, variant="full"):
    """Finite differences on the whole network, per parameter.

    Tiny configuration: n=4 fields, d=3, towers [8]/[8], cross depth 2,
    dropout disabled (its mask is not differentiable state).
    """
    cfg = model_mod.ModelConfig(
        n_fields=4,
        embed_dim=3,
        tower1_layers=[8],
        tower2_layers=[8],
        dropout_rate=0.0,
        cross_depth=2,
        lam=0.5,
        variant=variant,
    )
    params = model_mod.ModelParams.init(cfg, [5, 5, 5, 5], seed=seed)
    # move relu preactivations off the kink so central differences are valid
    for tower in (params.tower1, params.tower2):
        for _, b in tower.layers:
            b.value = b.value + 0.05
    rng = Rng(seed).split("gradcheck-model")
    idx = rng.integers(0, 5, (3, 4))
    labels = np.array([1, 0, 1])
    results = []

    def loss():
        out = model_mod.delta_forward(idx, params, k=2, mode="train", rng=Rng(0))
        l_main = model_mod.bce_loss(out.y_main, labels)
        l_eeo = None if out.y_eeo is None else model_mod.bce_loss(out.y_eeo, labels)
        return model_mod.total_loss(l_main, l_eeo, cfg.lam)

    for name, p in params.named_params():
        if name == "fm_bias" and variant != "eeo_fm":
            continue  # unreachable parameter in this variant
        _check(f"model/{name}", loss, [p], tol, results)
    return results


def run_all(tol=DEFAULT_TOL):
    return check_primitives(tol) + check_layers(tol) + check_full_model(tol)
