import numpy as np
import pytest

from aprnet.dataset import SynthConfig, synth_dataset
from aprnet.model import ModelConfig, ModelParams, batch_loss_and_grad, checkpoint_bytes, init_params
from aprnet.trainer import TrainConfig, lr_at_epoch, sgd_step, sweep_lambda, train, training_set

TINY = SynthConfig(num_identities=6, num_val_identities=4, num_test_identities=4, num_cameras=2,
                   samples_per_camera=3, dim=6, class_counts=[2, 3], noise=0.3)


def model_for(ds, hidden=(), lam=1.0, dropout=0.0, counts=None):
    counts = ds.schema.class_counts if counts is None else counts
    return ModelConfig(ds.embeddings.dim, len(ds.train_identities()), tuple(counts), hidden, dropout, lam)


def test_default_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, 0) == 0.001
    assert lr_at_epoch(cfg, 49) == 0.001
    assert lr_at_epoch(cfg, 50) == 0.0001
    assert lr_at_epoch(cfg, 54) == 0.0001


def test_schedule_exhaustive():
    cfg = TrainConfig(epochs=17, lr_initial=0.3, lr_final=0.02, lr_switch_epoch=11)
    assert [lr_at_epoch(cfg, e) for e in range(17)] == [0.3] * 11 + [0.02] * 6
    flat = TrainConfig(epochs=5, lr_initial=0.1, lr_final=0.1, lr_switch_epoch=3)
    assert {lr_at_epoch(flat, e) for e in range(5)} == {0.1}


@pytest.mark.parametrize("kw", [dict(lr_final=0.01, lr_initial=0.001), dict(lr_switch_epoch=0),
                                dict(lr_switch_epoch=56), dict(momentum=1.0), dict(batch_size=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def _single(value):
    return ModelParams([], [(np.array([[value]]), np.array([0.0]))])


def test_sgd_plain_step():
    p, g = _single(1.5), _single(0.25)
    new, vel = sgd_step(p, g, lr=0.1, momentum=0.0)
    assert new.heads[0][0][0, 0] == 1.5 - 0.1 * 0.25
    assert p.heads[0][0][0, 0] == 1.5
    same, _ = sgd_step(p, _single(0.0), lr=0.1, momentum=0.0)
    assert same.equal(p)


@pytest.mark.parametrize("momentum", [0.0, 0.5])
def test_sgd_quadratic_converges(momentum):
    # f(w) = 3 (w - 2)^2, minimum at 2
    p = _single(-5.0)
    v = None
    for _ in range(100):
        w = p.heads[0][0][0, 0]
        p, v = sgd_step(p, _single(6 * (w - 2)), lr=0.1, momentum=momentum, velocity=v)
    assert abs(p.heads[0][0][0, 0] - 2.0) < 1e-6


def test_zero_lr_keeps_params():
    ds = synth_dataset(TINY, 0)
    mc = model_for(ds, hidden=(4,), dropout=0.5)
    tc = TrainConfig(epochs=2, batch_size=5, lr_initial=0.0, lr_final=0.0, lr_switch_epoch=1, momentum=0.9)
    params, log = train(mc, tc, ds)
    assert params.equal(init_params(mc, tc.seed))
    assert len(log.rows) == 2


def test_deterministic():
    ds = synth_dataset(TINY, 0)
    mc = model_for(ds, hidden=(5,), dropout=0.5, lam=2.0)
    tc = TrainConfig(epochs=3, batch_size=4, lr_initial=0.05, lr_final=0.01, lr_switch_epoch=2, seed=9)
    a, log_a = train(mc, tc, ds)
    b, log_b = train(mc, tc, ds)
    assert checkpoint_bytes(mc, a) == checkpoint_bytes(mc, b)
    assert log_a.to_csv(include_time=False) == log_b.to_csv(include_time=False)
    c, _ = train(mc, TrainConfig(**{**tc.__dict__, "seed": 10}), ds)
    assert not a.equal(c)


def test_probe_loss_non_increasing_first_epoch():
    ds = synth_dataset(SynthConfig(**{**TINY.__dict__, "noise": 0.0}), 1)
    mc = model_for(ds)
    data = training_set(ds)
    probe = slice(0, 8)
    tc = TrainConfig(epochs=1, batch_size=4, lr_initial=0.01, lr_final=0.01, lr_switch_epoch=1, momentum=0.0)
    losses = []

    def probe_loss(params):
        loss, _ = batch_loss_and_grad(params, data.x[probe], data.identity[probe], data.attributes[probe], mc.lam)
        return loss.total

    losses.append(probe_loss(init_params(mc, tc.seed)))
    train(mc, tc, ds, on_step=lambda e, s, p: losses.append(probe_loss(p)))
    assert len(losses) == 1 + len(data.x) // 4
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_separable_set_trains_below_threshold():
    cfg = SynthConfig(num_identities=5, num_val_identities=0, num_test_identities=0, num_cameras=2,
                      samples_per_camera=4, dim=12, class_counts=[2, 2], noise=0.05, camera_scale=0.1, coupling=3.0)
    ds = synth_dataset(cfg, 2)
    mc = model_for(ds, lam=1.0)
    tc = TrainConfig(epochs=200, batch_size=8, lr_initial=0.5, lr_final=0.5, lr_switch_epoch=200, momentum=0.0)
    _, log = train(mc, tc, ds)
    assert log.rows[-1].loss_total < 0.1


def test_train_errors():
    ds = synth_dataset(TINY, 0)
    with pytest.raises(ValueError):
        train(model_for(ds), TrainConfig(epochs=1, lr_switch_epoch=1, batch_size=10_000), ds)
    rows = dict(ds.annotations.rows)
    rows.pop(ds.train_identities()[0])
    from dataclasses import replace
    from aprnet.dataset import AnnotationTable

    broken = replace(ds, annotations=AnnotationTable(rows))
    with pytest.raises(KeyError):
        train(model_for(ds), TrainConfig(epochs=1, lr_switch_epoch=1, batch_size=4), broken)


def test_head_masking_baseline1():
    ds = synth_dataset(TINY, 0)
    mc = model_for(ds, counts=())
    assert mc.mode == "baseline-1"
    params, log = train(mc, TrainConfig(epochs=2, lr_switch_epoch=1, batch_size=4, lr_initial=0.1), ds)
    assert len(params.heads) == 1
    assert all(r.loss_att_mean == 0.0 for r in log.rows)


def test_log_csv_header():
    ds = synth_dataset(TINY, 0)
    _, log = train(model_for(ds), TrainConfig(epochs=2, lr_switch_epoch=1, batch_size=4), ds)
    text = log.to_csv()
    assert text.splitlines()[0] == "epoch,lr,loss_total,loss_id,loss_att_mean,seconds"
    assert len(text.splitlines()) == 3
    assert log.to_csv(include_time=False).splitlines()[1].endswith(",")


def test_sweep():
    ds = synth_dataset(TINY, 3)
    mc = model_for(ds, hidden=(4,))
    tc = TrainConfig(epochs=2, batch_size=4, lr_initial=0.05, lr_final=0.05, lr_switch_epoch=2, momentum=0.0)
    with pytest.raises(ValueError):
        sweep_lambda(mc, tc, ds, [])
    res = sweep_lambda(mc, tc, ds, [0.0, 1.0, 8.0])
    assert [r.lam for r in res.rows] == [0.0, 1.0, 8.0]
    best = max(r.rank1 for r in res.rows)
    assert res.best_lambda == min(r.lam for r in res.rows if r.rank1 == best)
    assert res.query_ids == [s.sample_id for s in ds.split("vquery")]
    # the lambda = 0 row is plain attribute-only training
    from dataclasses import replace
    from aprnet.evaluation import evaluate_reid

    b2, _ = train(replace(mc, lam=0.0), tc, ds)
    assert res.rows[0].rank1 == evaluate_reid(ds, "vquery", "vgallery", params=b2).rank(1)
