import csv
import json

import numpy as np
import pytest

from pdfd.autodiff import Tape, Tensor
from pdfd.checks import small_joint_setup
from pdfd.errors import ConfigError, TrainingAborted
from pdfd.rng import RandomStreams
from pdfd.trainer import (
    METRIC_COLUMNS,
    PSEUDO_COLUMNS,
    SGD,
    OptimizerState,
    TrainConfig,
    clip_grad_norm,
    cosine_lr,
    joint_loss,
    load_trained,
    sgd_update,
    train,
    weak_augment,
)

SMALL = dict(samples_per_class=40, T=5)


def _joint(cfg_over=None, empty_q=False):
    cfg, bundle, sched, P, b, draws = small_joint_setup(0)
    if cfg_over:
        cfg = cfg.replace(**cfg_over)
    x_q, y_q = (b["x_q"][:0], b["y_q"][:0]) if empty_q else (b["x_q"], b["y_q"])
    with Tape():
        return joint_loss(cfg, bundle, sched, P, b["x_l"], b["y_l"], x_q, y_q, b["x_u"], b["pseudo_u"], draws)


def test_zero_weights_reduce_to_supervised_loss():
    lp = _joint({"gamma_u": 0.0, "gamma_diff": 0.0, "gamma_adv": 0.0})
    assert lp.total.item() == lp.parts["L_ce_l"]


def test_empty_selection_contributes_nothing():
    lp = _joint(empty_q=True)
    assert lp.parts["L_ce_u"] == 0.0


def test_breakdown_recomposes_total():
    lp = _joint()
    assert all(lp.parts[k] != 0.0 for k in lp.parts)
    recomposed = sum(lp.weights[k] * lp.parts[k] for k in lp.parts)
    assert abs(recomposed - lp.total.item()) < 1e-12


def _param(v, name="p", decay=True):
    return Tensor(np.array(v, dtype=float), requires_grad=True, name=name, decay=decay)


def test_sgd_plain_descent():
    p = _param([1.0, -2.0])
    sgd_update([p], {"p": np.array([0.5, 0.5])}, OptimizerState(), 0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [0.95, -2.05])


def test_sgd_buffer_decays_geometrically():
    p = _param([0.0])
    state = OptimizerState()
    sgd_update([p], {"p": np.array([1.0])}, state, 0.0, momentum=0.9, weight_decay=0.0)
    for i in range(1, 5):
        sgd_update([p], {"p": np.array([0.0])}, state, 0.0, momentum=0.9, weight_decay=0.0)
        assert state.buffers["p"][0] == pytest.approx(0.9**i, abs=1e-15)


def test_sgd_two_steps_on_quadratic():
    # f(w) = 0.5 * a * w^2, grad a*w; by hand: buf1 = g0 + wd w0, w1 = w0 - lr buf1, ...
    a, lr, m, wd, w0 = 2.0, 0.1, 0.9, 0.01, 3.0
    buf1 = a * w0 + wd * w0
    w1 = w0 - lr * buf1
    buf2 = m * buf1 + a * w1 + wd * w1
    w2 = w1 - lr * buf2
    p, state = _param([w0]), OptimizerState()
    for _ in range(2):
        sgd_update([p], {"p": a * p.data}, state, lr, momentum=m, weight_decay=wd)
    assert p.data[0] == pytest.approx(w2, abs=1e-15)


def test_weight_decay_skips_batchnorm_terms():
    w, g = _param([1.0], "w"), _param([1.0], "bn.gamma", decay=False)
    sgd_update([w, g], {"w": np.zeros(1), "bn.gamma": np.zeros(1)}, OptimizerState(), 0.1, 0.9, 5e-4)
    assert w.data[0] < 1.0 and g.data[0] == 1.0


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    assert np.sqrt(sum((v**2).sum() for v in clipped.values())) == pytest.approx(1.0)
    same, _ = clip_grad_norm(grads, None)
    np.testing.assert_array_equal(same["a"], [3.0])


def test_sgd_ignores_foreign_gradients():
    p = _param([1.0])
    opt = SGD([p], 0.0, 0.0)
    opt.step({"p": np.array([1.0]), "other": np.array([100.0])}, 0.5)
    assert p.data[0] == 0.5


def test_cosine_lr():
    assert cosine_lr(0, 10, 0.05) == 0.05
    assert cosine_lr(5, 10, 0.05, 0.01) == pytest.approx(0.03, abs=1e-15)
    lrs = [cosine_lr(e, 200, 0.05, 0.001) for e in range(201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_weak_augment(rng):
    x = rng.standard_normal((100, 100))
    np.testing.assert_array_equal(weak_augment(x, 0.0, rng), x)
    noise = weak_augment(x, 0.1, np.random.default_rng(3)) - x
    assert abs(noise.std() - 0.1) < 0.002
    a = weak_augment(x, 0.1, np.random.default_rng(4))
    b = weak_augment(x, 0.1, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_config_rejects_unknown_key_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    for bad in ({"tau": 1.0}, {"T_adv": 99}, {"prompt_mode": "x"}, {"feature_norm": "x"}, {"grad_clip": 0.0}):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)
    (tmp_path / "c.json").write_text("[1]")
    with pytest.raises(ConfigError):
        TrainConfig.from_json(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        TrainConfig().with_ablation("no_everything")


def test_config_roundtrip():
    cfg = TrainConfig(epochs=3, prompt_mode="onehot")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg.replace(T_adv=cfg.t_adv)


def test_zero_epochs():
    res = train(TrainConfig(epochs=0, **SMALL))
    assert res.history == [] and res.pseudo_history == []


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, **SMALL)
    assert train(cfg).history == train(cfg).history


def test_ablation_coherence():
    cfg = TrainConfig(epochs=3, **SMALL)
    skipped = train(cfg.with_ablation("no_diff,no_adv")).history
    weighted = train(cfg.replace(gamma_diff=0.0, gamma_adv=0.0)).history
    keys = ("L_ce_l", "L_ce_u", "N_m", "Q_size", "seen_acc", "unseen_acc", "all_acc")
    assert [[r[k] for k in keys] for r in skipped] == [[r[k] for k in keys] for r in weighted]
    assert all(r["L_diff"] == 0 and r["L_adv_G"] == 0 and r["L_adv_D"] == 0 for r in skipped)


def test_adversarial_term_only_moves_denoiser():
    cfg = TrainConfig(epochs=2, **SMALL)
    a = train(cfg.with_ablation("no_diff,no_adv")).history
    b = train(cfg.with_ablation("no_diff")).history
    assert [r["all_acc"] for r in a] == [r["all_acc"] for r in b]


def test_named_streams_are_independent():
    s1, s2 = RandomStreams(5), RandomStreams(5)
    s1.get("augment").standard_normal(100)
    np.testing.assert_array_equal(s1.get("diffusion.t").random(3), s2.get("diffusion.t").random(3))
    np.testing.assert_array_equal(s1.fresh("augment").random(2), s2.get("augment").random(2))


def test_numerical_abort_names_component():
    cfg = TrainConfig(epochs=2, base_lr=1e6, feature_norm=None, grad_clip=None, **SMALL)
    with pytest.raises(TrainingAborted) as info:
        train(cfg)
    assert info.value.component


def test_outputs_and_periodic_checkpoints(tmp_path):
    cfg = TrainConfig(epochs=2, checkpoint_every=1, **SMALL)
    res = train(cfg, out_dir=tmp_path)
    for name in ("metrics.csv", "pseudo_labels.csv", "checkpoint.bin", "checkpoint_epoch0001.bin", "checkpoint_epoch0002.bin"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 2
    with open(tmp_path / "pseudo_labels.csv") as fh:
        prow = list(csv.DictReader(fh))
    assert tuple(prow[0]) == PSEUDO_COLUMNS and len(prow) == 2 * 6
    model = load_trained(tmp_path / "checkpoint.bin")
    x = res.split.x_test
    np.testing.assert_array_equal(model.bundle.predict_proba(x), res.bundle.predict_proba(x))
    np.testing.assert_array_equal(model.prototypes.columns, res.prototypes.columns)


def test_telemetry_consistency():
    res = train(TrainConfig(epochs=2, **SMALL))
    for r in res.pseudo_history:
        assert r["confident_count"] <= r["predicted_count"]
        assert 0 <= r["pseudo_label_accuracy"] <= 1
    n_u = len(res.split.x_u)
    for e in range(2):
        assert sum(r["predicted_count"] for r in res.pseudo_history if r["epoch"] == e) == n_u


def test_supervised_loss_decreases_on_toy_task(trained_run):
    with open(trained_run / "metrics.csv") as fh:
        loss = np.array([float(r["L_ce_l"]) for r in csv.DictReader(fh)])[:20]
    smooth = np.convolve(loss, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


def test_resolved_config_reproduces(trained_run):
    cfg = TrainConfig.from_json(trained_run / "resolved_config.json")
    assert cfg.to_dict() == json.loads((trained_run / "resolved_config.json").read_text())


def test_supervised_loss_decreases_without_diffusion():
    loss = np.array([r["L_ce_l"] for r in train(TrainConfig(epochs=20).with_ablation("no_diff,no_adv")).history])
    smooth = np.convolve(loss, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) <= 0)
