import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import obiformer.train as train_mod
from obiformer.data import make_synthetic_pairs
from obiformer.errors import ConfigurationError, TrainingError
from obiformer.loss import FeatureExtractor, LossWeights
from obiformer.model import ModelConfig, build_model
from obiformer.train import (
    TrainConfig, TrainLog, Trainer, gradient_check, make_optimizer, relative_error, train,
)

PIXEL = LossWeights(100, 0, 1, 0)


@pytest.fixture(scope="module")
def records():
    return make_synthetic_pairs(6, size=16, seed=0)


def tiny():
    return build_model(ModelConfig(encoder_depth=1, base_channels=4), 0)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (2e-4, 0.01, 10, 300)
    assert cfg.loss_weights == LossWeights(100, 100, 1, 1)


@given(lr=st.floats(0, 1), wd=st.floats(0, 1), b=st.integers(1, 64), e=st.integers(1, 500),
       a=st.tuples(*[st.floats(0, 1000)] * 4), seed=st.integers(0, 2 ** 31), steps=st.none() | st.integers(0, 10),
       clip=st.none() | st.floats(0.1, 10), flags=st.tuples(st.booleans(), st.booleans()))
def test_flat_roundtrip(lr, wd, b, e, a, seed, steps, clip, flags):
    cfg = TrainConfig(learning_rate=lr, weight_decay=wd, batch_size=b, epochs=e, loss_weights=LossWeights(*a),
                      seed=seed, max_steps=steps, grad_clip=clip, augment=flags[0], cosine_decay=flags[1])
    assert TrainConfig.from_flat(cfg.to_flat()) == cfg


@pytest.mark.parametrize("bad", [dict(learning_rate=-1), dict(batch_size=0), dict(epochs=0), dict(max_steps=-1),
                                 dict(learning_rate=float("nan"))])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


def test_optimizer_groups():
    model = tiny()
    opt = make_optimizer(model, TrainConfig())
    decay, exempt = opt.param_groups
    assert decay["weight_decay"] == 0.01 and exempt["weight_decay"] == 0.0
    names = {id(p): n for n, p in model.named_parameters()}
    assert all(n.endswith(("temperature", "bias")) or ".norm" in n or ".bn" in n
               for n in (names[id(p)] for p in exempt["params"]))
    assert len(decay["params"]) + len(exempt["params"]) == len(list(model.parameters()))


@given(seed=st.integers(0, 1000), step=st.integers(0, 50))
def test_batches_depend_only_on_seed_and_step(records, seed, step):
    cfg = TrainConfig(batch_size=4, epochs=10, seed=seed, loss_weights=PIXEL)
    a = Trainer(tiny(), records, cfg)
    b = Trainer(tiny(), records, cfg)
    b.step = 17
    assert [r.id for r in a.batch_for(step)] == [r.id for r in b.batch_for(step)]


def test_each_epoch_visits_every_record(records):
    t = Trainer(tiny(), records, TrainConfig(batch_size=4, epochs=3, loss_weights=PIXEL))
    assert t.steps_per_epoch == 2
    for epoch in range(3):
        ids = [r.id for s in range(2 * epoch, 2 * epoch + 2) for r in t.batch_for(s)]
        assert sorted(ids) == sorted(r.id for r in records)


def test_max_steps_and_log(records):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=5, max_steps=4, loss_weights=PIXEL,
                      validation_every=0)
    model, log = train(tiny(), records, cfg)
    assert log.steps == [1, 2, 3, 4] and all(math.isfinite(v) for v in log.losses)
    assert log.lrs == [1e-3] * 4


def test_training_reduces_loss(records):
    cfg = TrainConfig(learning_rate=2e-3, batch_size=6, epochs=30, loss_weights=PIXEL, validation_every=0)
    _, log = train(tiny(), records, cfg)
    assert np.mean(log.losses[-5:]) < np.mean(log.losses[:5])


def test_cosine_schedule(records):
    t = Trainer(tiny(), records, TrainConfig(learning_rate=1e-3, batch_size=3, epochs=2, cosine_decay=True,
                                             loss_weights=PIXEL))
    assert t.lr_at(0) == pytest.approx(1e-3) and t.lr_at(t.total_steps) == pytest.approx(0, abs=1e-12)
    assert t.lr_at(t.total_steps // 2) == pytest.approx(5e-4)


def test_validation_tracks_best(records):
    recs = make_synthetic_pairs(6, size=16, seed=0)
    recs[5].split = "val"
    cfg = TrainConfig(learning_rate=1e-3, batch_size=5, epochs=3, loss_weights=PIXEL)
    trainer = Trainer(tiny(), [r for r in recs if r.split == "train"], cfg, val_records=[recs[5]])
    log = trainer.run()
    assert [v[0] for v in log.validations] == [1, 2, 3]
    assert log.best_psnr == max(v[1] for v in log.validations) and trainer.best_state is not None


def test_non_finite_loss_names_the_step(records, monkeypatch):
    monkeypatch.setattr(train_mod, "total_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    t = Trainer(tiny(), records, TrainConfig(batch_size=2, loss_weights=PIXEL))
    with pytest.raises(TrainingError, match="step 0"):
        t.train_step()


def test_perceptual_weights_need_extractor(records):
    with pytest.raises(ConfigurationError):
        Trainer(tiny(), records, TrainConfig())
    with pytest.raises(ConfigurationError):
        Trainer(tiny(), [], TrainConfig(loss_weights=PIXEL))


def test_identical_seeds_identical_traces(records):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=2, seed=4, loss_weights=PIXEL, augment=True,
                      validation_every=0)
    _, a = train(tiny(), records, cfg)
    _, b = train(tiny(), records, cfg)
    assert a.losses == b.losses


def test_log_csv_roundtrip(tmp_path):
    log = TrainLog()
    for i in range(1, 4):
        log.record(i, 1 / 3 * i, 2e-4, 0.5)
    back = TrainLog.from_csv(log.to_csv(tmp_path / "l.csv"))
    assert back.steps == log.steps and back.losses == log.losses
    with pytest.raises(TrainingError):
        log.record(3, 0.0, 0.0, 0.0)


# -- gradient check --------------------------------------------------------------------

def test_relative_error():
    assert relative_error(1.0, 1.0) == 0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert relative_error(0.0, 0.0) == 0


def test_gradient_check_passes_small_model():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4), 2)
    sample = make_synthetic_pairs(1, size=8, seed=3)[0]
    report = gradient_check(model, sample, None, weights=PIXEL, min_checks=40)
    assert report.passed, report.lines()
    assert report.checked >= 40
    assert set(report.groups) == {n for n, _ in model.named_parameters()}


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 1.5 * g


def test_gradient_check_catches_wrong_backward(monkeypatch):
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4), 2)
    original = type(model.output_proj).forward
    monkeypatch.setattr(type(model.output_proj), "forward",
                        lambda self, x: _WrongGrad.apply(original(self, x)))
    sample = make_synthetic_pairs(1, size=8, seed=3)[0]
    report = gradient_check(model, sample, None, weights=PIXEL, min_checks=20)
    assert not report.passed


def test_gradient_check_with_extractor():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4), 2)
    sample = make_synthetic_pairs(1, size=8, seed=3)[0]
    report = gradient_check(model, sample, FeatureExtractor.untrained(0), weights=LossWeights(1, 1, 1, 1),
                            min_checks=20)
    assert report.passed, report.lines()


def test_unused_parameters_have_zero_gradient():
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4), 2)
    sample = make_synthetic_pairs(1, size=8, seed=3)[0]
    report = gradient_check(model, sample, None, weights=LossWeights(1, 0, 0, 0), min_checks=10)
    assert report.groups["corrector.weight"].passed
