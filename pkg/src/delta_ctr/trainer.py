"""Training loop: curriculum-scheduled attention bottleneck, Adam-style
optimizer, best-checkpoint selection, and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .metrics import EvalResult, evaluate_scores
from .numerics import ParameterError, Rng


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurriculumState:
    """State of the bottleneck schedule.

    Flag records whether the bottleneck already shrank at the current
    learning rate; the schedule alternates one bottleneck decrement and one
    learning-rate decay across consecutive bad epochs.
    """

    c: int  # current bottleneck size
    lr: float
    best_loss: float = math.inf
    flag: bool = False
    delta: int = 1  # bottleneck decrement on plateau
    lr_decay: float = 0.1
    c_max: int = 1
    c_min: int = 2
    strict_last_epoch_compare: bool = False  # compare vs last epoch instead of best

    @classmethod
    def initial(cls, c_max, lr, delta=None, lr_decay=0.1, c_min=2, **kw):
        if delta is None:
            delta = max(1, math.ceil(c_max / 8))
        if not 0 < lr_decay < 1:
            raise ParameterError("lr_decay must be in (0,1)")
        if delta < 1:
            raise ParameterError("delta must be >= 1")
        c_min = min(c_min, c_max)
        return cls(c=c_max, lr=lr, delta=delta, lr_decay=lr_decay, c_max=c_max, c_min=c_min, **kw)


def curriculum_step(s, new_val_loss):
    """One epoch-end transition of the bottleneck schedule.

    If validation loss worsened: first bad epoch at this lr shrinks the
    bottleneck (floored at c_min) and raises the flag; a second consecutive
    bad epoch decays the learning rate and clears the flag. If it improved,
    the flag is cleared (a no-op on most paths, harmless) and the reference
    loss updates. The reference is the best loss seen so far, not the last
    epoch's, to avoid double-triggering on oscillation; the last-epoch
    comparison is available behind strict_last_epoch_compare.
    """
    worse = new_val_loss > s.best_loss
    if worse:
        if not s.flag:
            new = replace(s, c=max(s.c_min, s.c - s.delta), flag=True)
        else:
            new = replace(s, lr=s.lr_decay * s.lr, flag=False)
    else:
        new = replace(s, flag=False)
    if s.strict_last_epoch_compare:
        return replace(new, best_loss=new_val_loss)
    return replace(new, best_loss=min(s.best_loss, new_val_loss))


@dataclass
class OptimizerState:
    """Adam moments, one pair per parameter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params):
        return cls(
            m={n: np.zeros_like(p.value) for n, p in params.named_params()},
            v={n: np.zeros_like(p.value) for n, p in params.named_params()},
        )


def optimizer_step(params, grads, state, lr):
    """In-place Adam update with bias correction."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.named_params():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"NaN/Inf gradient in {name}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_logloss: float
    val_auc: float
    c: int
    lr: float
    flag: bool


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def write(self, path):
        with open(path, "w") as f:
            f.write("epoch\ttrain_loss\tval_logloss\tval_auc\tC\tR\tFlag\n")
            for r in self.records:
                f.write(
                    f"{r.epoch}\t{r.train_loss:.6f}\t{r.val_logloss:.6f}\t"
                    f"{r.val_auc:.6f}\t{r.c}\t{r.lr:.8g}\t{int(r.flag)}\n"
                )


@dataclass
class TrainSettings:
    batch_size: int = 4096
    lr: float = 1e-4
    t_max: int = 20
    delta: int | None = None  # default ceil(n_fields / 8)
    lr_decay: float = 0.1
    c_min: int = 2
    lr_floor: float = 1e-6
    fixed_k: int | None = None  # disable the curriculum, train at this k


def predict(params, dataset, k, batch_size=4096):
    """Infer-mode scores over a dataset (pure function of params)."""
    scores = []
    for idx, _ in data_mod.batch_iter(dataset, batch_size, shuffle=False):
        out = model_mod.delta_forward(idx, params, k, mode="infer")
        scores.append(out.y_main.value)
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(params, dataset, k, batch_size=4096):
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    return evaluate_scores(predict(params, dataset, k), dataset.labels)


def fit(config, settings, train_ds, val_ds, seed):
    """Train with the curriculum bottleneck schedule.

    Each epoch trains at the current (bottleneck, lr), evaluates validation
    logloss, and advances the schedule. Returns the parameters of the
    best-validation-logloss epoch together with the history; training stops
    after t_max epochs or when the lr decays below lr_floor.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ParameterError("datasets must be nonempty")
    config.validate()
    params = model_mod.ModelParams.init(config, train_ds.vocab_sizes, seed)
    opt = OptimizerState.init(params)
    n = config.n_fields
    sched = CurriculumState.initial(
        c_max=n,
        lr=settings.lr,
        delta=settings.delta,
        lr_decay=settings.lr_decay,
        c_min=settings.c_min,
    )
    history = TrainHistory()
    root = Rng(seed)
    best = {"loss": math.inf, "values": params.copy_values(), "k": n}
    for epoch in range(settings.t_max):
        k = settings.fixed_k if settings.fixed_k is not None else sched.c
        epoch_rng = root.split(("epoch", epoch))
        losses = []
        batches = data_mod.batch_iter(
            train_ds, settings.batch_size, seed=seed + 7919 * epoch, shuffle=True
        )
        for bi, (idx, labels) in enumerate(batches):
            try:
                loss, grads = model_mod.backward_and_accumulate(
                    idx, labels, params, k, epoch_rng.split(("batch", bi))
                )
            except FloatingPointError as e:
                raise TrainingError(str(e)) from e
            if not math.isfinite(loss):
                raise TrainingError(f"diverged at epoch {epoch}: loss={loss}")
            optimizer_step(params, grads, opt, sched.lr)
            losses.append(loss)
        val = evaluate(params, val_ds, k, settings.batch_size)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_logloss=val.logloss,
                val_auc=val.auc,
                c=k,
                lr=sched.lr,
                flag=sched.flag,
            )
        )
        if val.logloss < best["loss"]:
            best = {"loss": val.logloss, "values": params.copy_values(), "k": k}
        sched = curriculum_step(sched, val.logloss)
        if sched.lr < settings.lr_floor:
            break
    params.load_values(best["values"])
    return params, history, best["k"]
