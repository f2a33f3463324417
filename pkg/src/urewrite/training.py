"""Adam, batching and the training loop."""
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .model import encode_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    grad_clip_norm: float = 1.0
    seed: int = 0
    early_stop_patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs must be >= 0 and early_stop_patience >= 1")
        return self


class Adam:
    """Bias-corrected Adam over a ``{name: Tensor}`` map."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {k}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def load_state(self, arrays, step):
        for k in self.params:
            self.m[k] = arrays[f"adam.m/{k}"].astype(np.float64)
            self.v[k] = arrays[f"adam.v/{k}"].astype(np.float64)
        self.step_count = int(step)


def adam_step(params, grads, state, lr):
    """Functional form: apply one Adam update with explicit gradients."""
    for k, g in grads.items():
        params[k].grad = np.asarray(g, dtype=np.float64)
    state.step(lr)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def make_batches(samples, batch_size, rng=None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    return [[samples[i] for i in order[s:s + batch_size]] for s in range(0, len(samples), batch_size)]


def evaluate_loss(model, vocab, samples, batch_size=64):
    """Per-token NLL over a dataset, no dropout."""
    total, count = 0.0, 0
    for batch in make_batches(samples, batch_size):
        s, n = model.token_nll(encode_batch(batch, vocab, model.config))
        total += s
        count += n
    return total / max(count, 1)


@dataclass
class TrainResult:
    rows: List[tuple] = field(default_factory=list)  # (epoch, train_loss, valid_loss, seconds)
    best_epoch: int = -1
    best_valid: float = float("inf")
    steps: int = 0


def train(model, vocab, train_set, valid_set, cfg, out_dir=None, resume=False, progress=None):
    """Train ``model`` in place, keeping the best-validation parameters.

    With ``out_dir``, writes ``train_log.csv``, ``last.npz`` (resumable, with
    optimizer state), ``best.npz`` and a ``best`` marker.  On return the model
    holds the best-validation weights.
    """
    cfg.validate()
    if not train_set:
        raise DataError("empty training split")
    if not valid_set:
        raise DataError("empty validation split")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult()
    start_epoch = 1
    bad_epochs = 0
    best_state = model.state_dict()

    log_path = last_path = best_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        last_path = os.path.join(out_dir, "last.npz")
        best_path = os.path.join(out_dir, "best.npz")
    if resume:
        if last_path is None or not os.path.exists(last_path):
            raise ConfigError("nothing to resume from: no last.npz in the run directory")
        loaded, meta, opt_arrays = load_checkpoint(last_path, vocab=vocab, config=model.config)
        model.load_state_dict(loaded.state_dict())
        opt.load_state(opt_arrays, meta["adam_step"])
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = meta["epoch"] + 1
        result.best_epoch, result.best_valid = meta["best_epoch"], meta["best_valid"]
        bad_epochs = meta["bad_epochs"]
        best_state = load_checkpoint(best_path)[0].state_dict()
    elif log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("epoch,train_loss,valid_loss,seconds\n")

    params = model.parameters()
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        if bad_epochs >= cfg.early_stop_patience:
            break
        t0 = time.perf_counter()
        tot, cnt = 0.0, 0
        for bi, samples in enumerate(make_batches(train_set, cfg.batch_size, rng)):
            batch = encode_batch(samples, vocab, model.config)
            model.zero_grad()
            with nx.Tape() as tape:
                loss = model.nll_loss(batch, rng=rng)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            nx.backward(loss, tape)
            clip_grad_norm(params, cfg.grad_clip_norm)
            opt.step(cfg.learning_rate)
            n = int(batch.tgt_mask.sum())
            tot += loss.item() * n
            cnt += n
        train_loss = tot / cnt
        valid_loss = evaluate_loss(model, vocab, valid_set, cfg.batch_size)
        secs = time.perf_counter() - t0
        result.rows.append((epoch, train_loss, valid_loss, secs))
        result.steps = opt.step_count
        improved = valid_loss < result.best_valid
        if improved:
            result.best_valid, result.best_epoch = valid_loss, epoch
            best_state = model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
        log.info("epoch %d train %.4f valid %.4f (%.1fs)%s", epoch, train_loss, valid_loss, secs,
                 " *" if improved else "")
        if progress is not None:
            progress(epoch, train_loss, valid_loss, secs)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch},{train_loss:.6f},{valid_loss:.6f},{secs:.2f}\n")
            if improved:
                save_checkpoint(best_path, model, vocab, {"epoch": epoch, "valid_loss": valid_loss})
                with open(os.path.join(out_dir, "best"), "w") as fh:
                    fh.write(f"best.npz epoch={epoch} valid_loss={valid_loss:.6f}\n")
            save_checkpoint(last_path, model, vocab, {
                "epoch": epoch, "best_epoch": result.best_epoch, "best_valid": result.best_valid,
                "bad_epochs": bad_epochs, "rng_state": rng.bit_generator.state,
                "train_config": asdict(cfg)}, optimizer=opt)
    model.load_state_dict(best_state)
    return result
