"""DELTA: dynamic embedding learning for CTR prediction with truncated
attention, a curriculum-scheduled bottleneck, gated embedding fusion,
and an auxiliary explicit cross-net loss."""

from . import data, eeo, gradcheck, layers, metrics, model, numerics, trainer

__all__ = ["data", "eeo", "gradcheck", "layers", "metrics", "model", "numerics", "trainer"]
__version__ = "0.1.0"
