from dataclasses import dataclass, field
import os
import time

import numpy as np
import pandas as pd

from .errors import ConfigError, TrainingError
from .neuralnet import (
    DROPOUT_OFF, AdamState, DropoutSpec, MlpParams, adam_step, backward, bound_output,
    bound_output_grad, forward, forward_with_cache, init_mlp, load_checkpoint, save_checkpoint,
)
from .numkit import Rng
from .plants import Dataset, DynamicsSample
from .stability import (
    StabilityConfig, StabilityHead, init_stability_head, stable_hypothesis_backward,
    stable_hypothesis_with_cache,
)

# rng stream ids, one per independent random source
STREAM_GHAT_INIT = 11
STREAM_GHAT_SHUFFLE = 12
STREAM_GHAT_DROPOUT = 13
STREAM_HEAD_INIT = 21
STREAM_PI_INIT = 22
STREAM_STAGE2_SHUFFLE = 23
STREAM_STAGE2_DROPOUT = 24

GHAT_FILE = 'ghat.yml'
HEAD_FILE = 'stability_head.yml'
POLICY_FILE = 'policy.yml'


@dataclass
class TrainConfig:
    stability: StabilityConfig
    input_bound: np.ndarray
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.99
    seed: int = 0
    dropout: DropoutSpec = DROPOUT_OFF
    hidden: tuple = (64, 64, 64)
    clip_norm: float = 100.0
    verbose: bool = False

    def __post_init__(self):
        self.input_bound = np.atleast_1d(np.asarray(self.input_bound, dtype=float))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", field="training.epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", field="training.batch_size")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]", field="training.lr")
        if np.any(self.input_bound <= 0):
            raise ConfigError("input bound must be positive", field="plant.input_bound")

    @property
    def train_dropout(self) -> DropoutSpec:
        if self.dropout.p_drop > 0:
            return DropoutSpec(self.dropout.p_drop, 'train')
        return DROPOUT_OFF


@dataclass
class TrainReport:
    """Per-epoch loss curves of each stage (columns: stage, epoch, train_loss, val_loss)."""
    curves: pd.DataFrame
    best_val: dict = field(default_factory=dict)
    initial_val: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    seed: int = 0

    def merge(self, other: "TrainReport") -> "TrainReport":
        return TrainReport(
            curves=pd.concat([self.curves, other.curves], ignore_index=True),
            best_val={**self.best_val, **other.best_val},
            initial_val={**self.initial_val, **other.initial_val},
            wall_clock=self.wall_clock + other.wall_clock,
            seed=self.seed,
        )

    def final_val(self, stage: str) -> float:
        rows = self.curves[self.curves['stage'] == stage]
        return float(rows['val_loss'].iloc[-1])

    def summary(self) -> dict:
        return {
            'seed': int(self.seed),
            'wall_clock_s': round(float(self.wall_clock), 3),
            'best_val': {k: float(v) for k, v in self.best_val.items()},
            'initial_val': {k: float(v) for k, v in self.initial_val.items()},
            'final_val': {s: self.final_val(s) for s in self.curves['stage'].unique()},
        }


@dataclass
class LearnedController:
    ghat: MlpParams
    head: StabilityHead
    pi: MlpParams

    def policy(self, masks=None):
        return policy_fn(self.pi, masks)


def policy_fn(pi: MlpParams, masks=None):
    """Controller callable x -> u applying the policy's stored tanh bound."""
    def control(x):
        y = forward(pi, x, masks=masks)
        if pi.output_bound is None:
            return y
        return bound_output(y, pi.output_bound)
    return control


def save_model(model: LearnedController, directory):
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(model.ghat, os.path.join(directory, GHAT_FILE))
    save_checkpoint(model.head.net, os.path.join(directory, HEAD_FILE))
    save_checkpoint(model.pi, os.path.join(directory, POLICY_FILE))


def load_model(directory) -> LearnedController:
    paths = [os.path.join(directory, f) for f in (GHAT_FILE, HEAD_FILE, POLICY_FILE)]
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"checkpoint not found: {p}")
    ghat, head_net, pi = (load_checkpoint(p) for p in paths)
    return LearnedController(ghat, StabilityHead.from_net(head_net), pi)


# --- losses ---

def loss_ghat(ghat_out, sample: DynamicsSample) -> float:
    """||f(x,u) - f(x,0) - ghat(x,u)||^2 for one sample."""
    r = np.asarray(sample.dxdt_u) - np.asarray(sample.dxdt_0) - np.asarray(ghat_out)
    return float(np.dot(r, r))


def loss_stage2(f0, ghat_at_pi, fs) -> float:
    """||f(x,0) + ghat(x, pi(x)) - f_s(x)||^2 for one sample."""
    e = np.asarray(f0) + np.asarray(ghat_at_pi) - np.asarray(fs)
    return float(np.dot(e, e))


def batch_mean_loss(residuals) -> float:
    residuals = np.atleast_2d(residuals)
    return float(np.mean(np.sum(residuals * residuals, axis=1)))


def _clip(grads, clip_norm, stage, epoch, batch):
    norm = grads.global_norm()
    if clip_norm and norm > clip_norm:
        print(f"[{stage}] gradient norm {norm:.3e} clipped to {clip_norm:g} (epoch {epoch}, batch {batch})")
        return grads.scale(clip_norm / norm)
    return grads


def _batches(n_samples, batch_size, rng):
    order = rng.permutation(n_samples)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def _check_loss(loss, stage, epoch, batch):
    if not np.isfinite(loss):
        raise TrainingError("loss diverged", stage=stage, epoch=epoch, batch=batch)


def _log_epoch(cfg, stage, epoch, train_loss, val_loss):
    if cfg.verbose and (epoch % 10 == 0 or epoch == cfg.epochs - 1):
        print(f"[{stage}] epoch {epoch + 1}/{cfg.epochs} train={train_loss:.4e} val={val_loss:.4e}")


# --- stage 1: control-effect model ---

def ghat_val_loss(ghat: MlpParams, ds: Dataset) -> float:
    out = forward(ghat, np.concatenate([ds.x, ds.u], axis=1))
    return batch_mean_loss(ds.control_effect - out)


def train_ghat(train: Dataset, val: Dataset, cfg: TrainConfig):
    """
    Fit NN_ghat(x, u) to g(x, u) = f(x, u) - f(x, 0). Returns the best-validation
    parameters and the stage report.
    """
    started = time.perf_counter()
    rng = Rng(cfg.seed)
    shuffle_rng = rng.child(STREAM_GHAT_SHUFFLE)
    drop_rng = rng.child(STREAM_GHAT_DROPOUT)
    dropout = cfg.train_dropout

    inputs = np.concatenate([train.x, train.u], axis=1)
    targets = train.control_effect
    ghat = init_mlp([train.n + train.m, *cfg.hidden, train.n], rng.child(STREAM_GHAT_INIT))
    state = AdamState.for_params(ghat, lr=cfg.lr, lr_decay=cfg.lr_decay)

    initial = best_val = ghat_val_loss(ghat, val)
    best = ghat.copy()
    rows = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        total = 0.0
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, shuffle_rng)):
            out, cache = forward_with_cache(ghat, inputs[idx], dropout, drop_rng)
            resid = out - targets[idx]
            loss = batch_mean_loss(resid)
            _check_loss(loss, 'ghat', epoch, b)
            grads, _ = backward(ghat, None, 2.0 * resid / len(idx), cache=cache)
            adam_step(ghat, _clip(grads, cfg.clip_norm, 'ghat', epoch, b), state, batch_index=b)
            total += loss * len(idx)

        val_loss = ghat_val_loss(ghat, val)
        _check_loss(val_loss, 'ghat', epoch, None)
        rows.append({'stage': 'ghat', 'epoch': epoch + 1, 'train_loss': total / len(train), 'val_loss': val_loss})
        _log_epoch(cfg, 'ghat', epoch, total / len(train), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = ghat.copy()

    report = TrainReport(pd.DataFrame(rows), {'ghat': best_val}, {'ghat': initial},
                         time.perf_counter() - started, cfg.seed)
    return best, report


# --- stage 2: stability head and policy ---

def stage2_loss_and_grads(ghat: MlpParams, head: StabilityHead, pi: MlpParams, stability: StabilityConfig,
                          x, f0, dropout: DropoutSpec = DROPOUT_OFF, rng: Rng = None):
    """
    Batch-mean ||f0 + ghat(x, bound(pi(x))) - f_s(x)||^2 and its gradients
    w.r.t. the head and policy parameters. ghat is used but never updated.
    """
    x = np.atleast_2d(x)
    f0 = np.atleast_2d(f0)
    batch, n = x.shape
    y, pi_cache = forward_with_cache(pi, x, dropout, rng)
    u = bound_output(y, pi.output_bound) if pi.output_bound is not None else y
    g_out, g_cache = forward_with_cache(ghat, np.concatenate([x, u], axis=1))
    fs, h_cache = stable_hypothesis_with_cache(stability, head, x)

    err = f0 + g_out - fs
    loss = batch_mean_loss(err)
    d_err = 2.0 * err / batch

    _, d_gin = backward(ghat, None, d_err, cache=g_cache)
    d_u = d_gin[:, n:]
    d_y = d_u * bound_output_grad(y, pi.output_bound) if pi.output_bound is not None else d_u
    pi_grads, _ = backward(pi, None, d_y, cache=pi_cache)
    head_grads = stable_hypothesis_backward(stability, head, h_cache, -d_err)
    return loss, head_grads, pi_grads


def stage2_val_loss(ghat, head, pi, stability, ds: Dataset) -> float:
    loss, _, _ = stage2_loss_and_grads(ghat, head, pi, stability, ds.x, ds.dxdt_0)
    return loss


def train_controller(train: Dataset, val: Dataset, ghat: MlpParams, cfg: TrainConfig):
    """
    Jointly fit NN_P and NN_pi so that f(x,0) + ghat(x, pi(x)) matches the stable
    hypothesis f_s(x). Only the state and f(x, 0) columns are used.
    Returns (head, pi, report) at the best validation loss.
    """
    started = time.perf_counter()
    n = train.n
    if cfg.stability.n != n:
        raise ConfigError(f"Q is {cfg.stability.n}-dimensional but the plant state has {n} dims",
                          field="stability.q_diag")
    rng = Rng(cfg.seed)
    shuffle_rng = rng.child(STREAM_STAGE2_SHUFFLE)
    drop_rng = rng.child(STREAM_STAGE2_DROPOUT)
    dropout = cfg.train_dropout

    head = init_stability_head(n, rng.child(STREAM_HEAD_INIT), cfg.hidden, cfg.stability.rows)
    pi = init_mlp([n, *cfg.hidden, train.m], rng.child(STREAM_PI_INIT), output_bound=cfg.input_bound)
    head_state = AdamState.for_params(head.net, lr=cfg.lr, lr_decay=cfg.lr_decay)
    pi_state = AdamState.for_params(pi, lr=cfg.lr, lr_decay=cfg.lr_decay)

    initial = best_val = stage2_val_loss(ghat, head, pi, cfg.stability, val)
    best = (head.copy(), pi.copy())
    rows = []
    for epoch in range(cfg.epochs):
        head_state.epoch = pi_state.epoch = epoch
        total = 0.0
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, shuffle_rng)):
            loss, head_grads, pi_grads = stage2_loss_and_grads(
                ghat, head, pi, cfg.stability, train.x[idx], train.dxdt_0[idx], dropout, drop_rng)
            _check_loss(loss, 'stage2', epoch, b)
            adam_step(head.net, _clip(head_grads, cfg.clip_norm, 'stage2/P', epoch, b), head_state, batch_index=b)
            adam_step(pi, _clip(pi_grads, cfg.clip_norm, 'stage2/pi', epoch, b), pi_state, batch_index=b)
            total += loss * len(idx)

        val_loss = stage2_val_loss(ghat, head, pi, cfg.stability, val)
        _check_loss(val_loss, 'stage2', epoch, None)
        rows.append({'stage': 'stage2', 'epoch': epoch + 1, 'train_loss': total / len(train), 'val_loss': val_loss})
        _log_epoch(cfg, 'stage2', epoch, total / len(train), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = (head.copy(), pi.copy())

    report = TrainReport(pd.DataFrame(rows), {'stage2': best_val}, {'stage2': initial},
                         time.perf_counter() - started, cfg.seed)
    return best[0], best[1], report


def train_model(train: Dataset, val: Dataset, cfg: TrainConfig):
    """Both stages in sequence. Returns (LearnedController, TrainReport)."""
    ghat, report1 = train_ghat(train, val, cfg)
    head, pi, report2 = train_controller(train, val, ghat, cfg)
    return LearnedController(ghat, head, pi), report1.merge(report2)
