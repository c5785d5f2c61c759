"""Loss schedule, gradient isolation, and the training loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falda import pipeline
from falda.errors import ConfigError, DivergenceError
from falda.gradcore import Tensor
from falda.nets import FaldaModel
from falda.training import (TrainConfig, alternating_losses, point_losses,
                            schedule_flags, train)


@pytest.fixture
def rng():
    return np.random.default_rng(5150)


def small_model(rng, channels=2, **overrides):
    kwargs = dict(lookback=24, horizon=12, channels=channels, k1=1, k2=1,
                  ns_hidden=8, hidden=16, layers=1, kernel=5,
                  steps=50, finetune_step=5, ddim_steps=5, eta=1.0,
                  rng=rng)
    kwargs.update(overrides)
    return FaldaModel(**kwargs)


def synth_dataset(tmp_path, sigma, length=400, channels=2, seed=0,
                  lookback=24, horizon=12):
    path = tmp_path / "series.csv"
    pipeline.synth("ar1-seasonal", length, channels, sigma, seed, path, period=12)
    spec = pipeline.DatasetSpec(lookback=lookback, horizon=horizon,
                                split_train=0.6, split_val=0.2)
    return pipeline.ingest(path, spec)


# -- schedule -----------------------------------------------------------------

@pytest.mark.parametrize("epoch,pre,period,expected", [
    (1, 2, 10, (0, 0)),   # pretraining region
    (10, 2, 10, (0, 1)),  # fine-tune epoch
    (4, 0, 3, (1, 0)),    # denoiser epoch
])
def test_schedule_flag_cases(epoch, pre, period, expected):
    assert schedule_flags(epoch, pre, period) == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.integers(0, 20), st.integers(1, 30))
def test_schedule_flags_closed_form(epoch, pre, period):
    lam, eta = schedule_flags(epoch, pre, period)
    assert lam * eta == 0
    assert lam == int(epoch >= pre and epoch % period != 0)
    assert eta == int(epoch >= pre and epoch % period == 0)


# -- losses ---------------------------------------------------------------------

def test_point_losses_perfect_and_offset(rng):
    y = Tensor(rng.normal(size=(5, 3)))
    y_non = Tensor(rng.normal(size=(5, 3)))
    l_non, l_point = point_losses(y, Tensor(y.data.copy()), y_non,
                                  Tensor(y_non.data.copy()))
    assert l_non.data == 0.0 and l_point.data == 0.0
    _, l_point = point_losses(y, Tensor(y.data + 1.0), y_non,
                              Tensor(y_non.data.copy()))
    assert np.isclose(l_point.data, 1.0)


def test_point_losses_match_loop_oracle(rng):
    y, y_hat = rng.normal(size=(2, 5, 3))
    total = 0.0
    for i in range(5):
        for j in range(3):
            total += abs(y[i, j] - y_hat[i, j])
    _, l_point = point_losses(Tensor(y), Tensor(y_hat), Tensor(y), Tensor(y))
    assert abs(float(l_point.data) - total / 15) <= 1e-12


def test_alternating_losses_zero_denoiser(rng):
    model = small_model(rng)
    residual = Tensor(rng.normal(size=(4, 12, 2)))
    cond = Tensor(rng.normal(size=(4, 24, 2)))
    eps = rng.normal(size=(4, 12, 2))
    l_diff, l_ft = alternating_losses(residual, 7, model.finetune_step, cond,
                                      model.denoiser, 1, 1, eps, model.schedule)
    # a fresh denoiser is the zero map, so both terms are the residual's mean square
    assert np.isclose(float(l_diff.data), np.mean(residual.data ** 2))
    assert np.isclose(float(l_ft.data), np.mean(residual.data ** 2))
    zero = Tensor(np.zeros((4, 12, 2)))
    l_diff, l_ft = alternating_losses(zero, 7, model.finetune_step, cond,
                                      model.denoiser, 1, 1, eps, model.schedule)
    assert float(l_diff.data) == 0.0 and float(l_ft.data) == 0.0


def test_alternating_losses_inactive_terms_skipped(rng):
    model = small_model(rng)
    residual = Tensor(rng.normal(size=(12, 2)))
    cond = Tensor(rng.normal(size=(24, 2)))
    eps = rng.normal(size=(12, 2))
    l_diff, l_ft = alternating_losses(residual, 3, 5, cond, model.denoiser,
                                      0, 0, eps, model.schedule)
    assert l_diff is None and l_ft is None


def test_gradient_isolation(rng):
    """Tape audit: the denoiser loss never reaches the point models and the
    fine-tune loss never reaches the denoiser."""
    model = small_model(rng)
    x = Tensor(rng.normal(size=(3, 24, 2)))
    y = Tensor(rng.normal(size=(3, 12, 2)))
    cond = Tensor(rng.normal(size=(3, 24, 2)))
    eps = rng.normal(size=(3, 12, 2))
    point_params = ([p for _, p in model.adapter.named_parameters()]
                    + [p for _, p in model.backbone.named_parameters()])
    denoiser_params = [p for _, p in model.denoiser.named_parameters()]

    def residual():
        return y - model.point_forecast(x, x, x)

    l_diff, _ = alternating_losses(residual(), 9, 5, cond, model.denoiser,
                                   1, 0, eps, model.schedule)
    l_diff.backward()
    assert all(p.grad is None for p in point_params)
    assert any(p.grad is not None and np.any(p.grad) for p in denoiser_params)
    for p in denoiser_params:
        p.grad = None

    _, l_ft = alternating_losses(residual(), 9, 5, cond, model.denoiser,
                                 0, 1, eps, model.schedule)
    l_ft.backward()
    assert all(p.grad is None for p in denoiser_params)
    assert any(p.grad is not None and np.any(p.grad) for p in point_params)


# -- training loop -----------------------------------------------------------------

def test_train_noiseless_series_reaches_tight_point_loss(tmp_path, rng):
    # noiseless seasonal series, exactly representable by the linear backbone
    path = tmp_path / "noiseless.csv"
    pipeline.synth("ar1-seasonal", 2000, 2, 0.0, 0, path, period=12, amplitude=1.0)
    spec = pipeline.DatasetSpec(lookback=24, horizon=12, split_train=0.6, split_val=0.2)
    dataset = pipeline.ingest(path, spec)
    model = small_model(np.random.default_rng(0), k1=0, k2=0)
    config = TrainConfig(pretrain_epochs=10_000, alternate_period=10, epochs=50,
                         patience=50, batch_size=8, learning_rate=3e-4, seed=1)
    history = train(dataset, config, model)
    assert history.best_val_point <= 1e-3


def test_train_denoiser_frozen_while_pretraining(tmp_path):
    dataset = synth_dataset(tmp_path, sigma=0.3)
    model = small_model(np.random.default_rng(3))
    before = {n: p.data.copy() for n, p in model.denoiser.named_parameters()}
    seen = {}

    def snapshot(epoch, m, history):
        seen[epoch] = all(np.array_equal(p.data, before[n])
                          for n, p in m.denoiser.named_parameters())

    config = TrainConfig(pretrain_epochs=5, alternate_period=3, epochs=8,
                         patience=50, batch_size=32, learning_rate=1e-3, seed=2)
    train(dataset, config, model, epoch_callback=snapshot)
    assert all(seen[e] for e in range(5))
    assert not seen[7]  # a denoiser epoch has happened by then


def test_train_seeded_determinism(tmp_path):
    dataset = synth_dataset(tmp_path, sigma=0.4)
    config = TrainConfig(pretrain_epochs=1, alternate_period=3, epochs=6,
                         patience=50, batch_size=16, learning_rate=1e-3, seed=9)
    runs = []
    for _ in range(2):
        model = small_model(np.random.default_rng(7))
        history = train(dataset, config, model)
        runs.append((history, {n: p.data.copy() for n, p in model.named_parameters()}))
    h0, params0 = runs[0]
    h1, params1 = runs[1]
    assert [(r.epoch, r.lam, r.eta, r.l_non, r.l_point, r.l_diffusion,
             r.l_finetune, r.val_point) for r in h0.epochs] \
        == [(r.epoch, r.lam, r.eta, r.l_non, r.l_point, r.l_diffusion,
             r.l_finetune, r.val_point) for r in h1.epochs]
    for name in params0:
        assert np.array_equal(params0[name], params1[name])


def test_train_history_flags_and_total_identity(tmp_path):
    dataset = synth_dataset(tmp_path, sigma=0.3)
    model = small_model(np.random.default_rng(4))
    config = TrainConfig(pretrain_epochs=2, alternate_period=3, epochs=7,
                         patience=50, batch_size=32, learning_rate=1e-3, seed=5)
    history = train(dataset, config, model, history_path=tmp_path / "history.csv")
    for record in history.epochs:
        assert (record.lam, record.eta) == schedule_flags(record.epoch, 2, 3)
    for b in history.batches:
        assert b.total == b.l_non + b.l_point + b.lam * b.l_diffusion \
            + b.eta * b.l_finetune
    lines = (tmp_path / "history.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,lambda,eta,l_non,l_point,l_diffusion,l_finetune,val_l_point"
    assert len(lines) == len(history.epochs) + 1


def test_train_early_stopping_stops(tmp_path):
    dataset = synth_dataset(tmp_path, sigma=0.5)
    model = small_model(np.random.default_rng(5))
    config = TrainConfig(pretrain_epochs=10_000, alternate_period=10, epochs=200,
                         patience=2, batch_size=32, learning_rate=30.0, seed=6)
    history = train(dataset, config, model)
    assert history.stopped_epoch >= 0
    assert len(history.epochs) < 200


def test_train_rejects_empty_split(tmp_path):
    dataset = synth_dataset(tmp_path, sigma=0.2)
    empty = pipeline.WindowSet(np.zeros((3, 2)), 24, 12)

    class Stub:
        train = empty
        val = dataset.val

    model = small_model(np.random.default_rng(6))
    with pytest.raises(ConfigError):
        train(Stub(), TrainConfig(), model)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_train_divergence_aborts_with_location(tmp_path):
    dataset = synth_dataset(tmp_path, sigma=0.3)
    model = small_model(np.random.default_rng(8))
    config = TrainConfig(pretrain_epochs=0, alternate_period=3, epochs=5,
                         patience=50, batch_size=32, learning_rate=1e200, seed=3)
    with pytest.raises(DivergenceError) as err:
        train(dataset, config, model)
    assert "epoch" in str(err.value) and "batch" in str(err.value)
