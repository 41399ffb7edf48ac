"""Losses, Adam with decoupled weight decay, and the teacher-forced training loop.

The sequence loss is a convex blend of adjacency reconstruction (binary
cross-entropy averaged over all N * (M+1) channel entries, stop channel
included) and coordinate reconstruction (squared error summed per step and
scaled by 1/(2N)). Early stopping tracks the mean transport distance of
generated graphs on a fixed validation subsample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import GGT, MLP_BASELINE_NODES, MLPBaseline, RNNBaseline
from .ordering import CanonicalSequence
from .streetmover import streetmover_or_proxy


class LengthMismatch(ValueError):
    """Prediction and target sequences differ in length."""


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5
    lam: float = 0.5  # adjacency-vs-coordinate blend
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    patience: int = 10
    val_subsample: int = 64
    eval_every: int = 1  # epochs between generation-based validation passes
    gen_max_steps: int = 16
    sm_points: int = 100
    sm_eps: float = 1e-3
    sm_max_iter: int = 2000  # reduced budget for the per-epoch metric

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sequence_loss(
    pred_adj: ad.Tensor,
    pred_coords: ad.Tensor,
    target: CanonicalSequence,
    lam: float,
) -> tuple[ad.Tensor, float, float]:
    """Blended reconstruction loss; returns (loss, bce part, mse part)."""
    T = len(target)
    width = target.frontier_size + 1
    if pred_adj.data.shape != (T, width) or pred_coords.data.shape != (T, 2):
        raise LengthMismatch(
            f"prediction shapes {pred_adj.data.shape}/{pred_coords.data.shape} "
            f"do not match target length {T} (adjacency width {width})"
        )
    bce_term = ad.scale(ad.bce_sum(pred_adj, target.adjacency_with_stop()), 1.0 / (T * width))
    mse_term = ad.scale(ad.sse_sum(pred_coords, target.coords), 1.0 / (2.0 * T))
    loss = ad.add(ad.scale(bce_term, lam), ad.scale(mse_term, 1.0 - lam))
    return loss, float(bce_term.data), float(mse_term.data)


def mlp_targets(seq: CanonicalSequence) -> tuple[np.ndarray, np.ndarray]:
    """Dense one-shot targets: upper-triangle adjacency and zero-padded coords."""
    n = MLP_BASELINE_NODES
    n_nodes = len(seq) - 1  # final step is the stop token
    if n_nodes > n:
        raise LengthMismatch(f"graph with {n_nodes} nodes exceeds MLP grid {n}")
    A = np.zeros((n, n))
    for t in range(n_nodes):
        for j in np.nonzero(seq.adjacency[t] > 0.5)[0]:
            src = t - 1 - int(j)
            if src >= 0:
                A[src, t] = A[t, src] = 1.0
    X = np.zeros((n, 2))
    X[:n_nodes] = seq.coords[:n_nodes]
    return A[np.triu_indices(n, k=1)], X


def mlp_loss(
    pred_upper: ad.Tensor,
    pred_coords: ad.Tensor,
    seq: CanonicalSequence,
    lam: float,
) -> tuple[ad.Tensor, float, float]:
    upper, X = mlp_targets(seq)
    bce_term = ad.scale(ad.bce_sum(pred_upper, upper), 1.0 / upper.size)
    mse_term = ad.scale(ad.sse_sum(pred_coords, X), 1.0 / (2.0 * MLP_BASELINE_NODES))
    loss = ad.add(ad.scale(bce_term, lam), ad.scale(mse_term, 1.0 - lam))
    return loss, float(bce_term.data), float(mse_term.data)


class Adam:
    """Bias-corrected Adam; decoupled weight decay shrinks values before the update."""

    def __init__(self, params: dict[str, ad.Parameter], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p in self.params.values():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if c.weight_decay:
                p.data *= 1.0 - c.lr * c.weight_decay
            p.adam_m *= c.beta1
            p.adam_m += (1.0 - c.beta1) * g
            p.adam_v *= c.beta2
            p.adam_v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (p.adam_m / bc1) / (np.sqrt(p.adam_v / bc2) + c.eps)


def adam_step(params: dict[str, ad.Parameter], cfg: TrainConfig, t: int) -> None:
    """Single optimizer step at step count t (1-based); grads must be populated."""
    opt = Adam(params, cfg)
    opt.t = t - 1
    opt.step()


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_bce: float
    train_mse: float
    val_loss: float
    val_sm: float
    is_best: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_sm: float = math.inf
    steps: int = 0

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_sm": self.best_val_sm,
            "steps": self.steps,
            "epochs": [e.to_dict() for e in self.epochs],
        }


def sample_loss(model, sample, lam: float, training: bool):
    """Teacher-forced loss of one dataset record under any model kind."""
    if isinstance(model, MLPBaseline):
        upper, coords = model.forward_soft(sample.image, training)
        return mlp_loss(upper, coords, sample.seq, lam)
    assert isinstance(model, (GGT, RNNBaseline))
    adj, coords = model.forward_teacher(sample.image, sample.seq, training)
    return sequence_loss(adj, coords, sample.seq, lam)


def validation_loss(model, samples, lam: float) -> float:
    with ad.no_grad():
        total = 0.0
        for s in samples:
            loss, _, _ = sample_loss(model, s, lam, training=False)
            total += float(loss.data)
    return total / max(1, len(samples))


def validation_streetmover(model, samples, cfg: TrainConfig) -> float:
    total = 0.0
    for s in samples:
        pred = model.generate(s.image, max_steps=cfg.gen_max_steps)
        cost, _ = streetmover_or_proxy(
            pred, s.graph, n=cfg.sm_points, eps=cfg.sm_eps, max_iter=cfg.sm_max_iter
        )
        total += cost
    return total / max(1, len(samples))


def train(
    model,
    train_samples: list,
    val_samples: list,
    cfg: TrainConfig,
    checkpoint_dir=None,
    log=None,
    max_optimizer_steps: int | None = None,
    stop_below_sm: float | None = None,
) -> TrainReport:
    """Teacher-forced epochs with per-epoch validation and transport-metric early stopping.

    The best checkpoint is the one minimizing the validation transport
    distance. max_optimizer_steps / stop_below_sm support bounded overfit
    runs; both default to unbounded.
    """
    from .model import save_model  # local import to keep module load light

    if not train_samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = model.named_params()
    opt = Adam(params, cfg)
    report = TrainReport()

    sub_rng = np.random.default_rng(cfg.seed + 1)
    k = min(cfg.val_subsample, len(val_samples))
    val_subset = [val_samples[i] for i in sorted(sub_rng.choice(len(val_samples), size=k, replace=False))] if k else []

    stale = 0
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        loss_sum = bce_sum_ = mse_sum = 0.0
        n_seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                loss, bce_part, mse_part = sample_loss(
                    model, train_samples[int(idx)], cfg.lam, training=True
                )
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
                loss_sum += float(loss.data)
                bce_sum_ += bce_part
                mse_sum += mse_part
                n_seen += 1
            opt.step()
            report.steps += 1
            if max_optimizer_steps is not None and report.steps >= max_optimizer_steps:
                done = True
                break
        n_seen = max(1, n_seen)
        run_val = bool(val_subset) and (
            done or (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        )
        val_loss = validation_loss(model, val_subset, cfg.lam) if run_val else math.nan
        val_sm = validation_streetmover(model, val_subset, cfg) if run_val else math.nan
        is_best = run_val and val_sm < report.best_val_sm
        if is_best:
            report.best_val_sm = val_sm
            report.best_epoch = epoch
            stale = 0
            if checkpoint_dir is not None:
                save_model(model, f"{checkpoint_dir}/best.ckpt")
        elif run_val:
            stale += 1
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum / n_seen,
            train_bce=bce_sum_ / n_seen,
            train_mse=mse_sum / n_seen,
            val_loss=val_loss,
            val_sm=val_sm,
            is_best=bool(is_best),
        )
        report.epochs.append(stats)
        if log is not None:
            log(stats)
        if checkpoint_dir is not None:
            save_model(model, f"{checkpoint_dir}/last.ckpt")
        if stop_below_sm is not None and run_val and val_sm < stop_below_sm:
            break
        if done or (cfg.patience > 0 and stale > cfg.patience):
            break
    return report
