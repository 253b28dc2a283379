import math

import numpy as np
import pytest
import torch

from ultraseg.data import bus_only_corpus, make_bus_split
from ultraseg.errors import ConfigurationError, TrainingDivergedError, ValidationError
from ultraseg.models import Arch, Method, restore_ssl_network, stack_images
from ultraseg.pretrain import (
    PretrainConfig,
    SSLTrainer,
    collapse_metric,
    run_pretraining,
)
from ultraseg.synthetic import make_synthetic_corpus

TINY = dict(
    arch=Arch.UNET, image_size=16, base_width=4, depth=2, embedding_dim=16, corpus_name="tiny"
)


def _tiny_config(method, **overrides):
    params = dict(TINY, method=method, batch_size=4, epochs=2, seed=0)
    params.update(overrides)
    return PretrainConfig(**params)


@pytest.fixture(scope="module")
def tiny_setup():
    samples = make_synthetic_corpus(n=24, size=16, seed=3)
    split = make_bus_split(samples, seed=3, counts=(16, 4, 4), name="tiny")
    corpus = bus_only_corpus(split, image_size=16, name="tiny")
    return corpus, {s.id: s for s in samples}


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "method,size,expected",
    [
        (Method.SIMCLR, 32, 512),
        (Method.MOCO, 32, 256),
        (Method.SIMSIAM, 32, 512),
        (Method.SIMCLR, 50, 256),
        (Method.MOCO, 64, 64),
        (Method.SIMSIAM, 50, 512),
    ],
)
def test_published_batch_defaults(method, size, expected):
    config = PretrainConfig(method=method, image_size=size)
    assert config.resolved_batch_size() == expected


def test_simsiam_batch_cap():
    with pytest.raises(ConfigurationError):
        PretrainConfig(method=Method.SIMSIAM, batch_size=1024).resolved_batch_size()


def test_tau_defaults():
    assert PretrainConfig(method=Method.MOCO).resolved_tau() == pytest.approx(0.07)
    assert PretrainConfig(method=Method.SIMCLR).resolved_tau() == pytest.approx(0.5)
    assert PretrainConfig(method=Method.SIMCLR, tau=0.3).resolved_tau() == pytest.approx(0.3)


def test_queue_auto_sizing():
    # 546-image corpus with the published batch of 256 leaves room for 512 keys
    assert PretrainConfig(method=Method.MOCO, image_size=32).resolved_queue_size(546) == 512
    # the synthetic smoke corpus: 140 train images, batch 64
    assert PretrainConfig(method=Method.MOCO, batch_size=64).resolved_queue_size(140) == 128
    with pytest.raises(ConfigurationError):
        PretrainConfig(method=Method.MOCO, batch_size=64, queue_size=100).resolved_queue_size(140)
    with pytest.raises(ConfigurationError):
        PretrainConfig(method=Method.MOCO, batch_size=64, queue_size=192).resolved_queue_size(140)


# ---------------------------------------------------------------------------
# Collapse metric
# ---------------------------------------------------------------------------

def test_collapse_metric_identical_rows_is_zero():
    rows = torch.ones(6, 8)
    assert collapse_metric(rows) == pytest.approx(0.0, abs=1e-7)


def test_collapse_metric_basis_vectors_closed_form():
    b = 8
    metric = collapse_metric(torch.eye(b))
    expected = math.sqrt((1.0 / b) * (1.0 - 1.0 / b))
    assert metric == pytest.approx(expected, rel=1e-6)


def test_collapse_metric_random_unit_vectors_near_inverse_sqrt_dim():
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(512, 128))
    metric = collapse_metric(torch.from_numpy(rows))
    assert abs(metric - 1.0 / math.sqrt(128)) < 0.2 / math.sqrt(128)


def test_collapse_metric_needs_two_rows():
    with pytest.raises(ValidationError):
        collapse_metric(torch.ones(1, 4))


# ---------------------------------------------------------------------------
# Trainer steps
# ---------------------------------------------------------------------------

def _random_views(batch=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    a = [rng.uniform(size=(size, size, 3)).astype(np.float32) for _ in range(batch)]
    b = [rng.uniform(size=(size, size, 3)).astype(np.float32) for _ in range(batch)]
    return stack_images(a), stack_images(b)


def test_step_deterministic_across_trainers():
    views = _random_views()
    losses = []
    for _ in range(2):
        trainer = SSLTrainer(_tiny_config(Method.SIMCLR))
        losses.append(trainer.step(*views).item())
    assert losses[0] == pytest.approx(losses[1], abs=1e-9)


def test_moco_momentum_one_keeps_key_encoder_fixed():
    trainer = SSLTrainer(_tiny_config(Method.MOCO, momentum=1.0), queue_size=8)
    before = {k: v.clone() for k, v in trainer.key_model.named_parameters()}
    trainer.step(*_random_views())
    after = dict(trainer.key_model.named_parameters())
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_moco_never_backpropagates_into_key_encoder():
    trainer = SSLTrainer(_tiny_config(Method.MOCO), queue_size=8)
    for _ in range(3):
        trainer.step(*_random_views())
    assert all(p.grad is None for p in trainer.key_model.parameters())
    assert trainer.queue.filled == min(3 * 4, 8)


def test_simclr_loss_drops_over_twenty_steps():
    trainer = SSLTrainer(_tiny_config(Method.SIMCLR, lr=1e-3))
    samples = make_synthetic_corpus(n=8, size=16, seed=1)
    from ultraseg.pretrain import _views_batch

    first = None
    last = None
    for step in range(20):
        views = _views_batch(samples, 16, seed=0, epoch=step)
        loss = trainer.step(*views).item()
        first = loss if first is None else first
        last = loss
    assert last < first


def test_nan_loss_aborts_with_snapshot():
    trainer = SSLTrainer(_tiny_config(Method.SIMCLR))
    with torch.no_grad():
        for param in trainer.model.parameters():
            param.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        trainer.step(*_random_views())
    assert "step" in err.value.snapshot


# ---------------------------------------------------------------------------
# run_pretraining
# ---------------------------------------------------------------------------

def test_zero_epochs_yields_random_init_checkpoint(tiny_setup):
    corpus, pool = tiny_setup
    checkpoint, trace = run_pretraining(_tiny_config(Method.SIMCLR, epochs=0), corpus, pool)
    assert trace.records == []
    assert checkpoint.train_meta.epochs == 0
    assert checkpoint.train_meta.final_loss is None
    restored = restore_ssl_network(checkpoint)
    assert restored(torch.randn(2, 3, 16, 16)).shape == (2, 16)


@pytest.mark.parametrize("method", [Method.SIMCLR, Method.MOCO, Method.SIMSIAM])
def test_short_run_produces_trace_and_checkpoint(tiny_setup, tmp_path, method):
    corpus, pool = tiny_setup
    config = _tiny_config(method, epochs=3, momentum=0.9)
    checkpoint, trace = run_pretraining(config, corpus, pool, out_dir=tmp_path / method.value)
    assert len(trace.records) == 3
    for record in trace.records:
        assert np.isfinite([record.train_loss, record.val_loss, record.collapse_metric]).all()
    best_curve = trace.best_val_curve()
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(best_curve, best_curve[1:]))
    assert (tmp_path / method.value / "best.ckpt").is_file()
    assert (tmp_path / method.value / "metrics.tsv").read_text().count("\n") == 3
    assert (tmp_path / method.value / "config.txt").is_file()
    assert checkpoint.method is method


def test_run_deterministic_to_first_step(tiny_setup):
    corpus, pool = tiny_setup
    traces = []
    for _ in range(2):
        _, trace = run_pretraining(_tiny_config(Method.SIMCLR, epochs=1), corpus, pool)
        traces.append(trace)
    assert traces[0].records[0].train_loss == pytest.approx(
        traces[1].records[0].train_loss, abs=1e-6
    )
    assert traces[0].records[0].val_loss == pytest.approx(traces[1].records[0].val_loss, abs=1e-6)


def test_checkpoint_round_trip_forward_identical(tiny_setup):
    corpus, pool = tiny_setup
    checkpoint, _ = run_pretraining(_tiny_config(Method.SIMCLR, epochs=1), corpus, pool)
    net_a = restore_ssl_network(checkpoint)
    net_b = restore_ssl_network(checkpoint)
    net_a.eval()
    net_b.eval()
    x = torch.randn(3, 3, 16, 16)
    assert torch.equal(net_a(x), net_b(x))


def test_collapse_warning_fires(tiny_setup, monkeypatch):
    corpus, pool = tiny_setup
    monkeypatch.setattr("ultraseg.pretrain.collapse_metric", lambda _: 0.0)
    with pytest.warns(RuntimeWarning, match="collapse"):
        run_pretraining(_tiny_config(Method.SIMCLR, epochs=3), corpus, pool)


def test_batch_larger_than_corpus_rejected(tiny_setup):
    corpus, pool = tiny_setup
    with pytest.raises(ConfigurationError):
        run_pretraining(_tiny_config(Method.SIMCLR, batch_size=64), corpus, pool)


def test_corpus_size_mismatch_rejected(tiny_setup):
    corpus, pool = tiny_setup
    config = _tiny_config(Method.SIMCLR, image_size=32, batch_size=4)
    with pytest.raises(ConfigurationError):
        run_pretraining(config, corpus, pool)
