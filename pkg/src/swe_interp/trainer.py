"""Loss, Adam, learning-rate schedule, training loop and validation statistics."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import STREAM_EVAL, STREAM_INIT, STREAM_SHUFFLE, Dataset, rng_for
from .dynamics import FlowMap, flow_map
from .fe_core import DimensionError, PeriodicMesh
from .neural_net import NeuralInterpolant, build_model

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


# --- loss terms -------------------------------------------------------------
# All loss functions act on (..., N, D) tensors and reduce only the last two axes.

def _p1_form(a, b, h):
    """a^T M1 b along the last axis."""
    return h * (2.0 / 3.0 * (a * b).sum(-1)
                + (a * torch.roll(b, 1, -1)).sum(-1) / 6.0
                + (a * torch.roll(b, -1, -1)).sum(-1) / 6.0)


def level_energy(x, mesh: PeriodicMesh, g: float):
    """Discrete energy of each flat row of ``x`` (torch version of dynamics.flat_energy)."""
    m, h = mesh.num_elements, mesh.element_size
    if x.shape[-1] != 3 * m:
        raise DimensionError(f"rows of length {x.shape[-1]} do not match M={m}")
    u, v, p = x[..., :m], x[..., m:2 * m], x[..., 2 * m:]
    return g * _p1_form(u, u, h) + g * _p1_form(v, v, h) + h * (p * p).sum(-1)


def _as_tensor(x):
    return torch.as_tensor(x, dtype=torch.float64)


def _same_shape(*xs):
    if len({tuple(x.shape) for x in xs}) != 1:
        raise DimensionError(f"shape mismatch: {[tuple(x.shape) for x in xs]}")


def level_l2_sq(e, mesh: PeriodicMesh):
    """||U||^2 + ||V||^2 + ||P||^2 of each flat row of ``e``."""
    return level_energy(e, mesh, 1.0)


def fe_l2_sq_loss(pred, target, mesh: PeriodicMesh):
    """Squared L2 norm of the FE error, summed over time levels and fields."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape(pred, target)
    return level_l2_sq(pred - target, mesh).sum(-1)


def energy_penalty(pred, x_c, mesh: PeriodicMesh, g: float):
    """Time-mean of |E(pred_n) - E(x_c level 0)|."""
    pred, x_c = _as_tensor(pred), _as_tensor(x_c)
    _same_shape(pred, x_c)
    e0 = level_energy(x_c[..., 0, :], mesh, g)
    return (level_energy(pred, mesh, g) - e0.unsqueeze(-1)).abs().mean(-1)


@dataclass
class LossParts:
    total: torch.Tensor
    data: torch.Tensor
    penalty: torch.Tensor


def total_loss(pred, target, x_c, sigma: float, mesh: PeriodicMesh, g: float) -> LossParts:
    """Batch mean of data term + sigma * energy penalty (unbatched input counts as a batch of one)."""
    data = fe_l2_sq_loss(pred, target, mesh)
    pen = energy_penalty(pred, x_c, mesh, g)
    data, pen = data.reshape(-1).mean(), pen.reshape(-1).mean()
    return LossParts(data + sigma * pen, data, pen)


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    first: list
    second: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for p, gr, m, v in zip(params, grads, state.first, state.second):
            if gr is None:
                continue
            if m.shape != p.shape or gr.shape != p.shape:
                raise DimensionError(f"Adam buffer/gradient shape does not match parameter {tuple(p.shape)}")
            m.mul_(state.beta1).add_(gr, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(gr, gr, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# --- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 0.0
    batch_size: int = 16
    epochs: int = 300
    lr: float = 1e-3
    decay_period: int = 30
    decay_factor: float = 10.0
    seed: int = 0
    s1: int | None = None
    s2: int | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        for name in ("batch_size", "epochs", "lr", "decay_period", "decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")

    def widths(self, n_levels: int) -> tuple[int, int]:
        """(s1, s2), defaulting to 8N and 64N."""
        return (self.s1 or 8 * n_levels, self.s2 or 64 * n_levels)

    @classmethod
    def desk_scale(cls, n_levels: int = 10, **overrides) -> "TrainConfig":
        """s1 = 2N, s2 = 8N, 100 epochs; the decay period keeps its default of 30."""
        base = cls(epochs=100, s1=2 * n_levels, s2=8 * n_levels)
        return replace(base, **overrides)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.decay_factor ** (-(epoch // config.decay_period))


# --- training -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    data_term: float
    penalty_term: float


@dataclass
class EvalRecord:
    batch: int
    time_level: int
    l2sq_error: float
    energy_dev_mean: float
    energy_dev_std: float


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1].mean_loss if self.history else math.nan

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "mean_loss", "data_term", "penalty_term"])
        for r in self.history:
            w.writerow([r.epoch, repr(r.lr), repr(r.mean_loss), repr(r.data_term), repr(r.penalty_term)])
        return buf.getvalue()

    def eval_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch", "time_level", "l2sq_error", "energy_dev_mean", "energy_dev_std"])
        for r in self.validation:
            w.writerow([r.batch, r.time_level, repr(r.l2sq_error), repr(r.energy_dev_mean),
                        repr(r.energy_dev_std)])
        return buf.getvalue()


def train(dataset: Dataset, config: TrainConfig, flow: FlowMap | None = None,
          model: NeuralInterpolant | None = None, log_every: int = 1):
    """Mini-batch Adam on the training split; returns (model, TrainReport)."""
    if not dataset.train:
        raise ConfigurationError("dataset has no training samples")
    cfg = dataset.config
    mesh, g = cfg.mesh_pair.fine, cfg.physics.g
    if flow is None:
        flow = flow_map(mesh, cfg.physics)
    if model is None:
        s1, s2 = config.widths(cfg.num_levels)
        model = build_model(cfg.num_levels, s1, s2, flow, rng_for(config.seed, STREAM_INIT))
    xc_np, xf_np = dataset.arrays("train")
    xc, xf = torch.from_numpy(xc_np), torch.from_numpy(xf_np)
    n_train = xc.shape[0]

    params = list(model.parameters())
    adam = AdamState.for_params(params)
    shuffle_rng = rng_for(config.seed, STREAM_SHUFFLE)
    report = TrainReport()
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = shuffle_rng.permutation(n_train)
        sums = np.zeros(3)
        for start in range(0, n_train, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            xb, tb = xc[idx], xf[idx]
            for p in params:
                p.grad = None
            parts = total_loss(model(xb), tb, xb, config.sigma, mesh, g)
            parts.total.backward()
            adam_step(params, [p.grad for p in params], adam, lr)
            sums += len(idx) * np.array([parts.total.item(), parts.data.item(), parts.penalty.item()])
        mean = sums / n_train
        report.history.append(EpochRecord(epoch, lr, *map(float, mean)))
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d lr %.1e loss %.6e (data %.6e, penalty %.6e)", epoch, lr, *mean)
    return model, report


def evaluate(model: NeuralInterpolant, dataset: Dataset, batches: int = 3, batch_size: int = 16,
             seed: int = 0, pairs: list | None = None) -> TrainReport:
    """Per-level squared L2 error and energy deviation on seeded random validation batches.

    Energy deviation of sample b at level n is E(NN(x_c)_n) - E(x_c level 0); its mean and
    (population) standard deviation are taken over the batch.
    """
    pairs = dataset.validation if pairs is None else pairs
    if len(pairs) < batch_size:
        raise ConfigurationError(f"need at least {batch_size} validation samples, have {len(pairs)}")
    cfg = dataset.config
    mesh, g = cfg.mesh_pair.fine, cfg.physics.g
    rng = rng_for(seed, STREAM_EVAL)
    report = TrainReport()
    with torch.no_grad():
        for b in range(batches):
            idx = rng.choice(len(pairs), size=batch_size, replace=False)
            xc = torch.from_numpy(np.stack([pairs[i].x_c.data for i in idx]))
            xf = torch.from_numpy(np.stack([pairs[i].x_f.data for i in idx]))
            pred = model(xc)
            err = level_l2_sq(pred - xf, mesh).numpy()
            dev = (level_energy(pred, mesh, g) - level_energy(xc[:, :1, :], mesh, g)).numpy()
            for n in range(cfg.num_levels):
                report.validation.append(EvalRecord(b, n, float(err[:, n].mean()),
                                                    float(dev[:, n].mean()), float(dev[:, n].std())))
    return report


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
