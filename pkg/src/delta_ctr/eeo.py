"""Explicit embedding optimization branch: a cross-net over the flattened
original embeddings producing an auxiliary logit. Training-only; the main
branch never consumes its output."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import numerics as nm
from .numerics import DimensionError, Tensor


@dataclass
class CrossLayerParams:
    weight: Tensor  # (m,)
    bias: Tensor  # (m,)


@dataclass
class EeoBranch:
    layers: list[CrossLayerParams]
    head_weight: Tensor  # (m, 1)
    head_bias: Tensor  # (1,)

    @classmethod
    def init(cls, m, depth, rng, name="eeo"):
        if depth < 1:
            raise DimensionError("cross-net depth must be >= 1")
        s = 1.0 / math.sqrt(m)
        layers = [
            CrossLayerParams(
                weight=Tensor(rng.uniform(-s, s, (m,)), name=f"{name}.cross{i}.weight"),
                bias=Tensor(rng.uniform(-s, s, (m,)), name=f"{name}.cross{i}.bias"),
            )
            for i in range(depth)
        ]
        return cls(
            layers=layers,
            head_weight=Tensor(rng.uniform(-s, s, (m, 1)), name=f"{name}.head_weight"),
            head_bias=Tensor([0.0], name=f"{name}.head_bias"),
        )


def cross_layer(x0, x_l, p):
    """DCN-style cross with residual: x0 * <w, x_l> + b + x_l.

    x0, x_l: Tensor (B, m); the inner product is a scalar per row.
    """
    if x0.shape[-1] != x_l.shape[-1] or x0.shape[-1] != p.weight.shape[0]:
        raise DimensionError(
            f"cross_layer: lengths differ {x0.shape} / {x_l.shape} / {p.weight.shape}"
        )
    proj = nm.matmul(x_l, nm.reshape(p.weight, (p.weight.shape[0], 1)))  # (B, 1)
    return nm.add(nm.add(nm.mul(x0, proj), p.bias), x_l)


def eeo_forward(e_flat, branch):
    """Stacked cross layers from x0 = flattened original embeddings, then a
    scalar head. Returns the pre-sigmoid logit, shape (B,)."""
    x = e_flat
    for p in branch.layers:
        x = cross_layer(e_flat, x, p)
    logit = nm.add(nm.matmul(x, branch.head_weight), branch.head_bias)
    return nm.reshape(logit, (e_flat.shape[0],))


def eeo_fm_forward(emb_batch, bias):
    """Factorization-machine ablation of the explicit branch.

    Second-order FM score over the field embeddings (B, n, d):
    0.5 * sum_d [(sum_i e_id)^2 - sum_i e_id^2] + bias, as a logit.
    """
    if emb_batch.shape[1] < 2:
        raise DimensionError("FM needs at least 2 fields")
    summed = nm.tsum(emb_batch, axis=1)  # (B, d)
    sq_of_sum = nm.mul(summed, summed)
    sum_of_sq = nm.tsum(nm.mul(emb_batch, emb_batch), axis=1)
    pair = nm.scale(nm.tsum(nm.sub(sq_of_sum, sum_of_sq), axis=1), 0.5)  # (B,)
    return nm.add(pair, bias)
