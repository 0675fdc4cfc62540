"""Adam training loop with step-decayed learning rate and checkpointing."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .losses import DEFAULT_PMD_WEIGHT, chamfer, loss_terms
from .net import ConfigError, forward, init_params, save_checkpoint
from .tensor import backward

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "loss", "cd_l1", "cd_l2", "pmd")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.5
    decay_every: int = 20
    batch_size: int = 8
    epochs: int = 30
    pmd_weight: float = DEFAULT_PMD_WEIGHT
    emd_weight: float = 0.0
    clip_norm: float = 0.0  # 0 disables clipping
    seed: int = 0
    checkpoint_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ConfigError(f"invalid training config {self}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay factor must be in (0, 1], got {self.decay}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


def lr_at(epoch, cfg):
    """Step decay: ``lr * decay ** (epoch // decay_every)`` for 0-based ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay ** (epoch // cfg.decay_every)


class AdamState:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0


def adam_step(params, grads, state, lr):
    """One in-place Adam update with bias correction.

    ``grads`` maps parameter names to arrays; a missing entry counts as zero.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    cd_l1: float
    cd_l2: float
    pmd: float

    def row(self):
        return [self.epoch] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


def write_metrics(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in history:
            w.writerow(m.row())


def _clip(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def evaluate(pairs, params, net_cfg, seed=0):
    """Mean final-step CD-L1 / CD-L2 over ``pairs`` with seeded noise."""
    rng = np.random.default_rng(seed)
    params = params.detached()
    l1, l2 = [], []
    for p in pairs:
        out = forward(p.partial, params, net_cfg, rng)[-1].output.data
        l1.append(chamfer(out, p.complete, "l1").item())
        l2.append(chamfer(out, p.complete, "l2").item())
    return {"cd_l1": float(np.mean(l1)), "cd_l2": float(np.mean(l2))}


def train(pairs, net_cfg, cfg, out_dir=None, val_pairs=None, params=None):
    """Train on ``pairs``; returns ``(params, history)``.

    With ``out_dir`` set, writes ``metrics.csv``, periodic
    ``epoch_XXXX.ckpt`` files, ``best.ckpt`` (lowest validation CD-L1, when
    ``val_pairs`` is given) and the final ``model.ckpt``.
    """
    if not pairs:
        raise ValueError("training set is empty")
    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        params = init_params(net_cfg, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    state = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history, best = [], math.inf
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(len(pairs))
        sums = dict(loss=0.0, cd_l1=0.0, cd_l2=0.0, pmd=0.0)
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [pairs[i] for i in order[lo:lo + cfg.batch_size]]
            params.zero_grad()
            batch_loss = None
            for pair in batch:
                traces = forward(pair.partial, params, net_cfg, noise_rng)
                terms = loss_terms(traces, pair.complete, cfg.pmd_weight, cfg.emd_weight)
                final = traces[-1].output.data
                vals = {
                    "loss": terms["loss"].item(),
                    "cd_l1": chamfer(final, pair.complete, "l1").item(),
                    "cd_l2": chamfer(final, pair.complete, "l2").item(),
                    "pmd": terms["pmd"].item(),
                }
                for key, val in vals.items():
                    if not math.isfinite(val):
                        raise TrainingDiverged(f"epoch {epoch + 1} batch {b + 1} ({pair.id}): non-finite {key} = {val}")
                    sums[key] += val
                scaled = terms["loss"] * (1.0 / len(batch))
                batch_loss = scaled if batch_loss is None else batch_loss + scaled
            backward(batch_loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if cfg.clip_norm:
                _clip(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr)
        n = len(pairs)
        m = EpochMetrics(epoch + 1, lr, *(sums[k] / n for k in ("loss", "cd_l1", "cd_l2", "pmd")))
        history.append(m)
        log.info("epoch %d lr %.2e loss %.5f cd_l1 %.5f cd_l2 %.6f pmd %.3f", *(getattr(m, k) for k in METRICS_HEADER))
        if out is not None:
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch + 1:04d}.ckpt", net_cfg, params, {"epoch": epoch + 1})
            if val_pairs:
                val = evaluate(val_pairs, params, net_cfg, cfg.seed)["cd_l1"]
                if val < best:
                    best = val
                    save_checkpoint(out / "best.ckpt", net_cfg, params, {"epoch": epoch + 1, "val_cd_l1": val})
    params.zero_grad()
    if out is not None:
        save_checkpoint(out / "model.ckpt", net_cfg, params, {"epoch": cfg.epochs})
        write_metrics(history, out / "metrics.csv")
    return params, history
