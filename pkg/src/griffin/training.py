"""Loss, AdamW with decoupled weight decay, one-cycle LR schedule, train loop.

The loop is fully deterministic given (data, configs, seed): shuffling and
dropout draw from counter-keyed RNG streams, and the checkpoint kept at the
end is the one with the highest validation information coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor, backward
from .data import FeaturePanel, WindowBatch, make_windows, windows_for_targets
from .evaluation import DailyPrediction, ic
from .model import GriffinModel, ModelConfig, forward
from .relations import RelationGraph
from .seeding import STREAM_DROPOUT, STREAM_SHUFFLE, rng_stream


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. ``learning_rate`` is the one-cycle peak."""

    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    l2_lambda: float = 1e-4
    epochs: int = 10
    batch_windows: int = 1
    seed: int = 0
    grad_clip_norm: float = 5.0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    window: int = 8
    stride: int = 1
    train_frac: float = 0.7
    val_frac: float = 0.15
    train_start: str = ""
    train_end: str = ""
    val_start: str = ""
    val_end: str = ""

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.l2_lambda < 0 or self.weight_decay < 0:
            raise ValueError("regularization strengths must be non-negative")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_windows < 1 or self.window < 1 or self.stride < 1:
            raise ValueError("batch_windows, window and stride must be >= 1")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError(f"pct_start must be in (0, 1), got {self.pct_start}")


@dataclass
class OptimizerState:
    """First/second-moment accumulators per parameter plus a step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: ParamStore) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.value) for name, t in params.items()},
            v={name: np.zeros_like(t.value) for name, t in params.items()},
        )


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_ic: float
    lr: float


def l2_penalty(params: ParamStore) -> Tensor | None:
    """Sum of squared entries over decay-eligible parameters (weights only;
    biases, norm affines and bias scalars stay unregularized)."""
    total: Tensor | None = None
    for name, tensor in params.items():
        if not params.decays(name):
            continue
        term = ad.sum_all(ad.mul(tensor, tensor))
        total = term if total is None else ad.add(total, term)
    return total


def loss(y: np.ndarray, y_hat: Tensor, params: ParamStore, l2_lambda: float) -> Tensor:
    """Mean squared error plus l2_lambda times the squared-weight penalty."""
    target = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y_hat.shape != target.shape:
        raise ValueError(f"loss: prediction shape {y_hat.shape} != target shape {target.shape}")
    if target.shape[0] < 1:
        raise ValueError("loss: need at least one target")
    diff = ad.sub(y_hat, ad.constant(target))
    mse = ad.mean_all(ad.mul(diff, diff))
    if l2_lambda == 0.0:
        return mse
    penalty = l2_penalty(params)
    if penalty is None:
        return mse
    return ad.add(mse, ad.scale(penalty, l2_lambda))


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine one-cycle rate: warm from peak/div_factor up to the peak over
    pct_start of the run, then anneal to peak/final_div_factor."""
    if not 0 <= step < total_steps:
        raise ValueError(f"onecycle_lr: step {step} out of range [0, {total_steps})")
    peak = cfg.learning_rate
    initial = peak / cfg.div_factor
    final = peak / cfg.final_div_factor
    warm = min(int(round(cfg.pct_start * total_steps)), total_steps - 1)
    if step <= warm:
        if warm == 0:
            return peak
        frac = step / warm
        return initial + (peak - initial) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - warm) / (total_steps - 1 - warm)
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns the
    pre-clip norm."""
    norm = params.grad_global_norm()
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad *= factor
    return norm


def adamw_step(params: ParamStore, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay adaptive step over every parameter.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta),
    with the decay term applied directly to decay-eligible parameters.
    """
    state.step += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps_opt
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.value)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if cfg.weight_decay and params.decays(name):
            update = update + cfg.weight_decay * tensor.value
        tensor.value = tensor.value - lr * update


def resolve_splits(dates: tuple[str, ...], cfg: TrainConfig) -> tuple[list[str], list[str], list[str]]:
    """Partition panel dates into (train, val, test) lists.

    Explicit ISO date ranges win when given; otherwise the panel splits by
    the configured fractions in date order.
    """
    dates = tuple(dates)
    explicit = any([cfg.train_start, cfg.train_end, cfg.val_start, cfg.val_end])
    if explicit:
        for key in ("train_start", "train_end", "val_start", "val_end"):
            if not getattr(cfg, key):
                raise ValueError(f"split range incomplete: missing {key}")
        train = [d for d in dates if cfg.train_start <= d <= cfg.train_end]
        val = [d for d in dates if cfg.val_start <= d <= cfg.val_end]
        used = set(train) | set(val)
        test = [d for d in dates if d > cfg.val_end and d not in used]
        return train, val, test
    n = len(dates)
    n_train = int(round(cfg.train_frac * n))
    n_val = int(round(cfg.val_frac * n))
    n_train = max(min(n_train, n), 0)
    n_val = max(min(n_val, n - n_train), 0)
    return list(dates[:n_train]), list(dates[n_train : n_train + n_val]), list(dates[n_train + n_val :])


def validation_ic(
    panel: FeaturePanel,
    graphs: tuple[RelationGraph, RelationGraph],
    model: GriffinModel,
    val_dates: list[str],
    window: int,
) -> float:
    """Mean daily information coefficient over the validation dates (nan when
    no date yields a defined correlation)."""
    usable = [d for d in val_dates if panel.date_index(d) >= window - 1]
    if not usable:
        return float("nan")
    values = []
    for batch in windows_for_targets(panel, window, usable):
        out = forward(batch, graphs, model, mode="eval")
        idx = panel.date_index(batch.target_date)
        day = DailyPrediction(
            date=batch.target_date,
            tickers=batch.tickers,
            scores=out.predictions,
            returns=panel.raw_returns[idx].copy(),
        )
        try:
            values.append(ic(day))
        except ValueError:
            continue
    return float(np.mean(values)) if values else float("nan")


def train(
    panel: FeaturePanel,
    graphs: tuple[RelationGraph, RelationGraph],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> tuple[GriffinModel, list[TrainLogEntry]]:
    """Train on the panel's train split and return the best-validation model.

    Each step: forward in train mode, MSE + weight penalty, backward,
    global-norm clip, one AdamW update at the scheduled rate. Window order is
    reshuffled per epoch from the seed's shuffle stream. A non-finite loss
    aborts with the failing step index.
    """
    if panel.labels is None:
        raise ValueError("train: preprocess labels before training")
    train_dates, val_dates, _ = resolve_splits(panel.dates, train_cfg)
    if len(train_dates) < train_cfg.window:
        raise ValueError(
            f"train split has {len(train_dates)} dates, fewer than window {train_cfg.window}"
        )
    lo = panel.date_index(train_dates[0])
    hi = panel.date_index(train_dates[-1]) + 1
    windows = make_windows(panel.slice_dates(lo, hi), train_cfg.window, train_cfg.stride)

    model = GriffinModel(model_cfg, seed=train_cfg.seed)
    state = OptimizerState.init(model.params)
    rng_drop = rng_stream(train_cfg.seed, STREAM_DROPOUT)
    rng_shuffle = rng_stream(train_cfg.seed, STREAM_SHUFFLE)

    steps_per_epoch = math.ceil(len(windows) / train_cfg.batch_windows)
    total_steps = train_cfg.epochs * steps_per_epoch
    log: list[TrainLogEntry] = []
    best_ic = -np.inf
    best_values: dict[str, np.ndarray] | None = None
    global_step = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng_shuffle.permutation(len(windows))
        epoch_losses = []
        lr = onecycle_lr(0, total_steps, train_cfg)
        for chunk_start in range(0, len(order), train_cfg.batch_windows):
            chunk = order[chunk_start : chunk_start + train_cfg.batch_windows]
            lr = onecycle_lr(global_step, total_steps, train_cfg)
            model.params.zero_grad()
            with Tape() as tape:
                mse_sum: Tensor | None = None
                for widx in chunk:
                    batch: WindowBatch = windows[widx]
                    out = forward(batch, graphs, model, mode="train", rng=rng_drop)
                    term = loss(batch.targets, out.prediction_tensor, model.params, 0.0)
                    mse_sum = term if mse_sum is None else ad.add(mse_sum, term)
                total = ad.scale(mse_sum, 1.0 / len(chunk))
                if train_cfg.l2_lambda > 0.0:
                    penalty = l2_penalty(model.params)
                    if penalty is not None:
                        total = ad.add(total, ad.scale(penalty, train_cfg.l2_lambda))
            step_loss = total.item()
            if not math.isfinite(step_loss):
                raise RuntimeError(f"non-finite training loss at step {global_step}")
            backward(tape, total)
            clip_gradients(model.params, train_cfg.grad_clip_norm)
            adamw_step(model.params, state, lr, train_cfg)
            epoch_losses.append(step_loss)
            global_step += 1
        val = validation_ic(panel, graphs, model, val_dates, train_cfg.window)
        log.append(TrainLogEntry(epoch=epoch, train_loss=float(np.mean(epoch_losses)), val_ic=val, lr=lr))
        if math.isfinite(val) and val > best_ic:
            best_ic = val
            best_values = model.params.copy_values()

    if best_values is not None:
        model.params.load_values(best_values)
    return model, log


def write_training_log(log: list[TrainLogEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_ic,lr\n")
        for entry in log:
            fh.write(f"{entry.epoch},{entry.train_loss:.17g},{entry.val_ic:.17g},{entry.lr:.17g}\n")
