"""Full DELTA network assembly: embeddings -> two truncated-attention heads
-> fusion gates -> two MLP towers -> scalar head, plus the auxiliary
explicit-crossing branch and the training losses."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import eeo as eeo_mod
from . import layers as layers_mod
from . import numerics as nm
from .layers import CtmHeadParams, EmbeddingTable
from .numerics import ParameterError, Rng, Tensor

CKPT_MAGIC = b"DLTC"
CKPT_VERSION = 1

VARIANTS = ("full", "ctm_soft", "no_efg", "eeo_concat", "eeo_fm", "mlp_only")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_fields: int
    embed_dim: int
    tower1_layers: list[int] = field(default_factory=lambda: [400, 400, 400])
    tower2_layers: list[int] = field(default_factory=lambda: [800])
    dropout_rate: float = 0.5
    cross_depth: int = 3
    lam: float = 0.5  # weight of the auxiliary loss
    variant: str = "full"
    truncation_scope: str = "row"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must be in [0, 1)")
        if any(s <= 0 for s in self.tower1_layers + self.tower2_layers):
            raise ParameterError("tower layer sizes must be positive")
        if self.cross_depth < 1:
            raise ParameterError("cross_depth must be >= 1")
        return self

    @property
    def flat_dim(self):
        return self.n_fields * self.embed_dim

    @property
    def uses_attention(self):
        return self.variant != "mlp_only"

    @property
    def uses_efg(self):
        return self.variant in ("full", "ctm_soft", "eeo_concat", "eeo_fm")

    @property
    def uses_aux_eeo(self):
        # eeo_concat folds the cross output into the main branch instead;
        # mlp_only is the bare baseline
        return self.variant in ("full", "ctm_soft", "no_efg", "eeo_fm")

    def to_dict(self):
        return {
            "n_fields": self.n_fields,
            "embed_dim": self.embed_dim,
            "tower1_layers": list(self.tower1_layers),
            "tower2_layers": list(self.tower2_layers),
            "dropout_rate": self.dropout_rate,
            "cross_depth": self.cross_depth,
            "lam": self.lam,
            "variant": self.variant,
            "truncation_scope": self.truncation_scope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def _dense_init(fan_in, fan_out, rng, name):
    s = 1.0 / math.sqrt(fan_in)
    w = Tensor(rng.uniform(-s, s, (fan_in, fan_out)), name=f"{name}.w")
    b = Tensor(np.zeros(fan_out), name=f"{name}.b")
    return w, b


@dataclass
class Mlp:
    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, in_dim, sizes, rng, name):
        layers = []
        prev = in_dim
        for i, size in enumerate(sizes):
            layers.append(_dense_init(prev, size, rng.split(i), f"{name}.dense{i}"))
            prev = size
        return cls(layers=layers)

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[1]

    def forward(self, x, dropout_rate, rng, training):
        for i, (w, b) in enumerate(self.layers):
            x = nm.relu(nm.add(nm.matmul(x, w), b))
            if dropout_rate > 0:
                x = nm.dropout(x, dropout_rate, rng.split(("drop", i)), training)
        return x


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: EmbeddingTable
    head1: CtmHeadParams
    head2: CtmHeadParams
    gate1: Tensor
    gate2: Tensor
    tower1: Mlp
    tower2: Mlp
    final_w: Tensor
    final_b: Tensor
    eeo: eeo_mod.EeoBranch
    fm_bias: Tensor

    @classmethod
    def init(cls, config, vocab_sizes, seed):
        """Build all learnable tensors from per-component RNG streams, so the
        draws for any one component do not depend on which others exist."""
        config.validate()
        if len(vocab_sizes) != config.n_fields:
            raise ParameterError(
                f"{len(vocab_sizes)} vocab sizes for {config.n_fields} fields"
            )
        root = Rng(seed).split("params")
        d, m = config.embed_dim, config.flat_dim
        final_in = 0
        t1_in = t2_in = m
        tower1 = Mlp.init(t1_in, config.tower1_layers, root.split("tower1"), "tower1")
        tower2 = Mlp.init(t2_in, config.tower2_layers, root.split("tower2"), "tower2")
        final_in = tower1.out_dim + tower2.out_dim
        if config.variant == "eeo_concat":
            final_in += m
        final_w, final_b = _dense_init(final_in, 1, root.split("final"), "final")
        return cls(
            config=config,
            embedding=EmbeddingTable.init(vocab_sizes, d, root.split("embedding")),
            head1=CtmHeadParams.init(d, root.split("head1"), "head1"),
            head2=CtmHeadParams.init(d, root.split("head2"), "head2"),
            gate1=Tensor(np.zeros(m), name="gate1"),
            gate2=Tensor(np.zeros(m), name="gate2"),
            tower1=tower1,
            tower2=tower2,
            final_w=final_w,
            final_b=final_b,
            eeo=eeo_mod.EeoBranch.init(m, config.cross_depth, root.split("eeo")),
            fm_bias=Tensor([0.0], name="fm_bias"),
        )

    def named_params(self):
        """Deterministic (name, Tensor) ordering over every learnable tensor."""
        out = [("embedding", self.embedding.table)]
        for tag, head in (("head1", self.head1), ("head2", self.head2)):
            out += [(f"{tag}.w_q", head.w_q), (f"{tag}.w_k", head.w_k), (f"{tag}.w_v", head.w_v)]
        out += [("gate1", self.gate1), ("gate2", self.gate2)]
        for tag, tower in (("tower1", self.tower1), ("tower2", self.tower2)):
            for i, (w, b) in enumerate(tower.layers):
                out += [(f"{tag}.dense{i}.w", w), (f"{tag}.dense{i}.b", b)]
        out += [("final.w", self.final_w), ("final.b", self.final_b)]
        for i, p in enumerate(self.eeo.layers):
            out += [(f"eeo.cross{i}.weight", p.weight), (f"eeo.cross{i}.bias", p.bias)]
        out += [
            ("eeo.head_weight", self.eeo.head_weight),
            ("eeo.head_bias", self.eeo.head_bias),
            ("fm_bias", self.fm_bias),
        ]
        return out

    def main_branch_params(self):
        """Everything the inference path can touch (excludes the aux branch)."""
        eeo_names = {n for n, _ in self.named_params() if n.startswith(("eeo.", "fm_bias"))}
        if self.config.variant == "eeo_concat":
            eeo_names -= {n for n, _ in self.named_params() if n.startswith("eeo.cross")}
        return [(n, p) for n, p in self.named_params() if n not in eeo_names]

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def copy_values(self):
        return {n: p.value.copy() for n, p in self.named_params()}

    def load_values(self, values):
        for n, p in self.named_params():
            if p.value.shape != values[n].shape:
                raise CheckpointError(f"shape mismatch for {n}")
            p.value = values[n].copy()


@dataclass
class ForwardOutput:
    y_main: Tensor  # (B,) probabilities
    y_eeo: Tensor | None  # (B,) probabilities, train mode only
    state1: layers_mod.AttentionState | None
    state2: layers_mod.AttentionState | None


def delta_forward(indices, params, k, mode="infer", rng=None):
    """Run the network on a batch of encoded instances.

    indices: (B, n_fields) int array. In train mode dropout is active and
    the auxiliary branch is evaluated (unless lambda is 0, in which case the
    branch is skipped entirely and contributes nothing to the graph). In
    infer mode the auxiliary branch and dropout are never evaluated.
    """
    cfg = params.config
    training = mode == "train"
    if training and rng is None:
        raise ParameterError("train mode requires an rng")
    if rng is None:
        rng = Rng(0)
    b = indices.shape[0]
    emb = layers_mod.embed_lookup(params.embedding, indices)  # (B, n, d)
    e_flat = nm.reshape(emb, (b, cfg.flat_dim))

    state1 = state2 = None
    if cfg.uses_attention:
        if cfg.variant == "ctm_soft":
            enh1, state1 = layers_mod.soft_attention_forward(emb, params.head1)
            enh2, state2 = layers_mod.soft_attention_forward(emb, params.head2)
        else:
            enh1, state1 = layers_mod.ctm_forward(emb, params.head1, k, cfg.truncation_scope)
            enh2, state2 = layers_mod.ctm_forward(emb, params.head2, k, cfg.truncation_scope)
        if cfg.uses_efg:
            x1 = layers_mod.efg_fuse(e_flat, enh1, params.gate1)
            x2 = layers_mod.efg_fuse(e_flat, enh2, params.gate2)
        else:
            x1, x2 = enh1, enh2
    else:
        x1 = x2 = e_flat

    t1 = params.tower1.forward(x1, cfg.dropout_rate, rng.split("tower1"), training)
    t2 = params.tower2.forward(x2, cfg.dropout_rate, rng.split("tower2"), training)
    pieces = [t1, t2]
    if cfg.variant == "eeo_concat":
        x = e_flat
        for p in params.eeo.layers:
            x = eeo_mod.cross_layer(e_flat, x, p)
        pieces.append(x)
    joint = nm.concat(pieces, axis=-1)
    logit = nm.reshape(nm.add(nm.matmul(joint, params.final_w), params.final_b), (b,))
    y_main = nm.sigmoid(logit)

    y_eeo = None
    if training and cfg.uses_aux_eeo and cfg.lam > 0:
        if cfg.variant == "eeo_fm":
            aux_logit = eeo_mod.eeo_fm_forward(emb, params.fm_bias)
        else:
            aux_logit = eeo_mod.eeo_forward(e_flat, params.eeo)
        y_eeo = nm.sigmoid(aux_logit)
    return ForwardOutput(y_main=y_main, y_eeo=y_eeo, state1=state1, state2=state2)


def bce_loss(y_hat, labels):
    """Mean binary cross-entropy with probabilities clipped to
    [1e-7, 1 - 1e-7]."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ParameterError("empty batch")
    p = nm.clip(y_hat, 1e-7, 1.0 - 1e-7)
    pos = nm.mul(labels, nm.log(p))
    neg = nm.mul(1.0 - labels, nm.log(nm.sub(1.0, p)))
    return nm.scale(nm.tmean(nm.add(pos, neg)), -1.0)


def total_loss(l_main, l_eeo, lam):
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    if l_eeo is None or lam == 0:
        return l_main
    return nm.add(l_main, nm.scale(l_eeo, lam))


def backward_and_accumulate(indices, labels, params, k, rng):
    """Train-mode forward + backward; returns (loss value, grads by name).

    The auxiliary branch reaches only the embedding table and its own
    parameters; a NaN gradient aborts with the offending parameter named.
    """
    params.zero_grads()
    out = delta_forward(indices, params, k, mode="train", rng=rng)
    l_main = bce_loss(out.y_main, labels)
    l_eeo = None if out.y_eeo is None else bce_loss(out.y_eeo, labels)
    loss = total_loss(l_main, l_eeo, params.config.lam)
    loss.backward()
    grads = {}
    for name, p in params.named_params():
        g = np.zeros_like(p.value) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"NaN/Inf gradient in parameter {name}")
        grads[name] = g
    return float(loss.value), grads


def save_checkpoint(path, params, extra=None):
    """Versioned binary: magic "DLTC", version u16, JSON header (config +
    extra), then each tensor as (name, shape, row-major float64 payload)."""
    named = params.named_params()
    header = json.dumps(
        {"config": params.config.to_dict(), "extra": extra or {}, "n_tensors": len(named)}
    ).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(header)))
    buf.write(header)
    for name, p in named:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, vocab_sizes):
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        version, hlen = struct.unpack("<HI", f.read(6))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(hlen))
        config = ModelConfig.from_dict(header["config"])
        params = ModelParams.init(config, vocab_sizes, seed=0)
        values = {}
        for _ in range(header["n_tensors"]):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            values[name] = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
        params.load_values(values)
    return params, header["extra"]
