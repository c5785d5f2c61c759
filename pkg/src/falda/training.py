"""Loss functions, the alternating epoch schedule, and the training loop.

Each epoch is either pure point-model pretraining, denoiser training, or
point-model fine-tuning; the two alternating loss terms are never active
together. Stop-gradient barriers keep the denoiser loss away from the
point models and the fine-tuning loss away from the denoiser, so the Adam
step can always run over the full parameter list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion, spectral
from .errors import ConfigError, DivergenceError
from .gradcore import Adam, Tensor, no_grad


def schedule_flags(epoch, pretrain_epochs, alternate_period):
    """Activity flags (denoiser loss, fine-tune loss) for one epoch.

    Both are 0 while pretraining (epoch < pretrain_epochs); afterwards the
    fine-tune flag is 1 exactly when the epoch index is a multiple of the
    period, and the denoiser flag on every other epoch.
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    if alternate_period < 1:
        raise ConfigError(f"alternation period must be >= 1, got {alternate_period}")
    if epoch < pretrain_epochs:
        return 0, 0
    if epoch % alternate_period == 0:
        return 0, 1
    return 1, 0


def l1_loss(target, prediction):
    return (target - prediction).abs().mean()


def point_losses(y, y_hat, y_non, y_non_hat):
    """Mean absolute error of the non-stationary and overall predictions."""
    return l1_loss(y_non, y_non_hat), l1_loss(y, y_hat)


def alternating_losses(residual, k, k_prime, cond, denoiser, lam, eta_flag,
                       eps, schedule):
    """The denoiser loss and the fine-tune loss, per their activity flags.

    ``residual`` must still carry its gradient path into the point models.
    The same noise draw ``eps`` serves both noisings. The denoiser loss
    sees a stop-gradient copy of the residual (no gradient reaches the
    point models); the fine-tune loss sees a stop-gradient copy of the
    denoiser output (no gradient reaches the denoiser). Inactive terms are
    not computed and come back as None.
    """
    l_diffusion = None
    l_finetune = None
    if lam:
        detached = residual.detach()
        rk = diffusion.q_sample(detached.data, k, eps, schedule)
        prediction = denoiser.forward(Tensor(rk), k, cond)
        l_diffusion = ((detached - prediction) ** 2).mean()
    if eta_flag:
        rkp = diffusion.q_sample(residual.data, k_prime, eps, schedule)
        with no_grad():
            frozen = denoiser.forward(Tensor(rkp), k_prime, cond)
        l_finetune = ((residual - Tensor(frozen.data)) ** 2).mean()
    return l_diffusion, l_finetune


@dataclass
class TrainConfig:
    pretrain_epochs: int = 2
    alternate_period: int = 10
    epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0

    def validate(self):
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.alternate_period < 1:
            raise ConfigError("alternate_period must be >= 1")
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("epochs, patience and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class LossBreakdown:
    epoch: int
    batch: int
    lam: int
    eta: int
    l_non: float
    l_point: float
    l_diffusion: float
    l_finetune: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    lam: int
    eta: int
    l_non: float
    l_point: float
    l_diffusion: float
    l_finetune: float
    val_point: float


@dataclass
class TrainingHistory:
    batches: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_point: float = np.inf
    stopped_epoch: int = -1

    def write(self, path):
        """Delimited per-epoch log: epoch, flags, loss terms, validation."""
        with open(path, "w") as fh:
            fh.write("epoch,lambda,eta,l_non,l_point,l_diffusion,l_finetune,val_l_point\n")
            for r in self.epochs:
                fh.write(f"{r.epoch},{r.lam},{r.eta},{r.l_non:.10g},{r.l_point:.10g},"
                         f"{r.l_diffusion:.10g},{r.l_finetune:.10g},{r.val_point:.10g}\n")


class _DecomposedWindows:
    """Per-window decompositions, computed once and stacked for batching."""

    def __init__(self, window_set, k1, k2):
        xs, ys = [], []
        x_non, x_stat, x_noise, y_non = [], [], [], []
        for i in range(len(window_set)):
            x, y = window_set.window(i)
            dx = spectral.decompose(x, k1, k2)
            dy = spectral.decompose(y, k1, k2)
            xs.append(x)
            ys.append(y)
            x_non.append(dx.non)
            x_stat.append(dx.stat)
            x_noise.append(dx.noise)
            y_non.append(dy.non)
        self.x = np.stack(xs)
        self.y = np.stack(ys)
        self.x_non = np.stack(x_non)
        self.x_stat = np.stack(x_stat)
        self.x_noise = np.stack(x_noise)
        self.y_non = np.stack(y_non)

    def __len__(self):
        return self.x.shape[0]


def _validation_point_loss(model, cache, batch_size):
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(cache), batch_size):
            sl = slice(start, start + batch_size)
            y_hat = model.point_forecast(
                Tensor(cache.x_non[sl]), Tensor(cache.x_stat[sl]), Tensor(cache.x[sl]))
            diff = np.abs(cache.y[sl] - y_hat.data)
            total += diff.sum()
            count += diff.size
    return total / count


def train(dataset, config, model, history_path=None, epoch_callback=None):
    """Fit the model on a standardized train/validation split.

    Per batch: decomposition (cached), point predictions, the residual,
    one uniform step draw and one noise draw shared by both noisings, the
    active loss terms, and one Adam step over all parameters. Per epoch:
    validation point loss, with early stopping on its best value and the
    best parameters restored at the end. Everything random is derived from
    ``config.seed``.
    """
    config.validate()
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise ConfigError(
            f"empty split: {len(dataset.train)} train / {len(dataset.val)} val windows")
    if not 1 <= model.finetune_step <= model.schedule.K:
        raise ConfigError(
            f"finetune step {model.finetune_step} outside [1, {model.schedule.K}]")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    train_cache = _DecomposedWindows(dataset.train, model.k1, model.k2)
    val_cache = _DecomposedWindows(dataset.val, model.k1, model.k2)

    params = model.parameters()
    optimizer = Adam(params, lr=config.learning_rate)
    history = TrainingHistory()
    best_state = None
    since_best = 0

    for epoch in range(config.epochs):
        lam, eta_flag = schedule_flags(epoch, config.pretrain_epochs, config.alternate_period)
        order = rng.permutation(len(train_cache))
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = Tensor(train_cache.x[idx])
            y = Tensor(train_cache.y[idx])
            y_non_hat = model.adapter.forward(Tensor(train_cache.x_non[idx]), x)
            y_stat_hat = model.backbone.forward(Tensor(train_cache.x_stat[idx]))
            y_hat = y_non_hat + y_stat_hat
            l_non, l_point = point_losses(y, y_hat, Tensor(train_cache.y_non[idx]), y_non_hat)
            total = l_non + l_point

            k = int(rng.integers(1, model.schedule.K + 1))
            eps = rng.normal(size=y.data.shape)
            l_diffusion = l_finetune = None
            if lam or eta_flag:
                residual = y - y_hat
                cond = Tensor(train_cache.x_noise[idx])
                l_diffusion, l_finetune = alternating_losses(
                    residual, k, model.finetune_step, cond, model.denoiser,
                    lam, eta_flag, eps, model.schedule)
                if l_diffusion is not None:
                    total = total + l_diffusion
                if l_finetune is not None:
                    total = total + l_finetune

            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            total.backward()
            optimizer.step()
            optimizer.zero_grad()

            breakdown = LossBreakdown(
                epoch=epoch, batch=b, lam=lam, eta=eta_flag,
                l_non=float(l_non.data), l_point=float(l_point.data),
                l_diffusion=float(l_diffusion.data) if l_diffusion is not None else 0.0,
                l_finetune=float(l_finetune.data) if l_finetune is not None else 0.0,
                total=float(total.data))
            history.batches.append(breakdown)
            sums += (breakdown.l_non, breakdown.l_point,
                     breakdown.l_diffusion, breakdown.l_finetune)
            n_batches += 1

        val_point = _validation_point_loss(model, val_cache, config.batch_size)
        means = sums / max(n_batches, 1)
        history.epochs.append(EpochRecord(
            epoch=epoch, lam=lam, eta=eta_flag, l_non=means[0], l_point=means[1],
            l_diffusion=means[2], l_finetune=means[3], val_point=val_point))
        if epoch_callback is not None:
            epoch_callback(epoch, model, history)

        if val_point < history.best_val_point:
            history.best_val_point = val_point
            history.best_epoch = epoch
            best_state = [(n, p.data.copy()) for n, p in model.named_parameters()]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_epoch = epoch
                break

    if best_state is not None:
        named = dict(model.named_parameters())
        for name, values in best_state:
            named[name].data[...] = values
    if history_path is not None:
        history.write(history_path)
    return history
