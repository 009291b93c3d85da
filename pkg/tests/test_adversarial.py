import numpy as np
import pytest

from pdfd.adversarial import AdvBatch, adversarial_value, discriminator_step, generator_step, generator_term
from pdfd.autodiff import Tape, Tensor
from pdfd.data import load_features
from pdfd.diffusion import build_schedule, reverse_generate
from pdfd.errors import UsageError
from pdfd.models import Discriminator, MLPDenoiser
from pdfd.owssl import one_hot
from pdfd.trainer import SGD, TrainConfig


class StubDisc:
    """``sigmoid(z @ w + cond @ v)`` row-wise, no batch coupling."""

    def __init__(self, w, v):
        self.w = Tensor(w, requires_grad=True, name="stub.w")
        self.v = np.asarray(v, dtype=float)

    def __call__(self, z, cond, training=True, unconditional=False):
        return (z @ self.w + Tensor(np.asarray(cond) @ self.v)).sigmoid()

    def parameters(self):
        return [self.w]


class ConstDisc:
    def __init__(self, real, fake):
        self.real, self.fake = real, fake

    def __call__(self, z, cond, training=True, unconditional=False):
        n = z.shape[0] // 2
        return Tensor(np.r_[np.full(n, self.real), np.full(n, self.fake)][:, None]) + z.sum(axis=1, keepdims=True) * 0.0

    def parameters(self):
        return []


def _batch(rng, n=4, d=3, k=2):
    return AdvBatch(rng.standard_normal((n, d)), one_hot(rng.integers(0, k, n), k),
                    Tensor(rng.standard_normal((n, d))), one_hot(rng.integers(0, k, n), k))


def test_uninformed_discriminator_value(rng):
    disc = Discriminator(3, 2, rng=rng)
    disc.l3.weight.assign(np.zeros_like(disc.l3.weight.data))
    assert adversarial_value(disc, _batch(rng)).item() == pytest.approx(-2 * np.log(2), abs=1e-15)


def test_perfect_discriminator_limit(rng):
    v = adversarial_value(ConstDisc(1 - 1e-9, 1e-9), _batch(rng)).item()
    assert -1e-8 < v < 0


def test_clamped_logs_stay_finite(rng):
    v = adversarial_value(ConstDisc(0.0, 1.0), _batch(rng)).item()
    assert np.isfinite(v) and v == pytest.approx(2 * np.log(1e-12))


def test_hand_computed_two_plus_two():
    disc = StubDisc(np.array([[1.0], [-1.0]]), np.array([[0.5], [-0.5]]))
    real, fake = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[2.0, 1.0], [0.0, 0.0]])
    rc, fc = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])
    s = lambda a: 1 / (1 + np.exp(-a))  # noqa: E731
    # real logits 1.5 and -1.5, fake logits 0.5 and 0.5
    expect = 0.5 * (np.log(s(1.5)) + np.log(s(-1.5))) + 0.5 * (np.log(1 - s(0.5)) + np.log(1 - s(0.5)))
    assert adversarial_value(disc, AdvBatch(real, rc, Tensor(fake), fc)).item() == pytest.approx(expect, abs=1e-14)


def test_batch_validation(rng):
    with pytest.raises(UsageError):
        AdvBatch(np.zeros((2, 3)), one_hot([0, 1], 2), Tensor(np.zeros((3, 3))), one_hot([0, 1, 0], 2))
    with pytest.raises(UsageError):
        AdvBatch(np.zeros((0, 3)), np.zeros((0, 2)), Tensor(np.zeros((0, 3))), np.zeros((0, 2)))


def test_discriminator_step_zero_lr(rng):
    disc = Discriminator(3, 2, rng=rng)
    before = [p.data.copy() for p in disc.parameters()]
    discriminator_step(disc, _batch(rng), SGD(disc.parameters(), 0.9, 5e-4), 0.0)
    for a, p in zip(before, disc.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_discriminator_step_ascends(rng):
    disc = Discriminator(3, 2, rng=rng)
    batch = _batch(rng, n=16)
    v0 = adversarial_value(disc, batch).item()
    discriminator_step(disc, batch, SGD(disc.parameters(), 0.0, 0.0), 1e-4)
    assert adversarial_value(disc, batch).item() >= v0


def test_discriminator_step_sends_nothing_upstream(rng):
    from pdfd.models import Encoder

    enc = Encoder(4, 3, (5,), rng=rng)
    disc = Discriminator(3, 2, rng=rng)
    seen = {}

    class Recorder(SGD):
        def step(self, grads, lr):
            seen.update(grads)
            super().step(grads, lr)

    with Tape():
        fake = enc(rng.standard_normal((4, 4)))
    batch = AdvBatch(rng.standard_normal((4, 3)), one_hot([0, 1, 0, 1], 2), fake, one_hot([1, 0, 1, 0], 2))
    discriminator_step(disc, batch, Recorder(disc.parameters()), 1e-3)
    assert seen and all(not name.startswith("encoder") for name in seen)


def _gen_setup(rng, steps=3):
    d, k = 3, 2
    sched = build_schedule(10)
    den = MLPDenoiser(d, 10, rng=rng)
    disc = Discriminator(d, k, rng=rng)
    real, rc = rng.standard_normal((8, d)), one_hot(rng.integers(0, k, 8), k)
    eps, fc = rng.standard_normal((8, d)), one_hot(rng.integers(0, k, 8), k)
    prompts = rng.standard_normal((8, d))

    def batch_fn():
        return AdvBatch(real, rc, reverse_generate(eps, steps, prompts, sched, den), fc)

    return den, disc, batch_fn


def test_generator_step_zero_lr(rng):
    den, disc, batch_fn = _gen_setup(rng)
    before = [p.data.copy() for p in den.parameters() + disc.parameters()]
    generator_step(disc, batch_fn, SGD(den.parameters()), 0.0)
    for a, p in zip(before, den.parameters() + disc.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_generator_step_descends(rng):
    den, disc, batch_fn = _gen_setup(rng)
    v0 = generator_term(disc, batch_fn()).item()
    generator_step(disc, batch_fn, SGD(den.parameters(), 0.0, 0.0), 1e-4)
    assert generator_term(disc, batch_fn()).item() <= v0


def test_single_step_chain_gradient_matches_finite_difference(rng):
    from pdfd.autodiff import grad_check_params

    den, disc, batch_fn = _gen_setup(rng, steps=1)
    err, per = grad_check_params(lambda: generator_term(disc, batch_fn()), den.parameters())
    assert err < 1e-4, per


def test_nonsaturating_form(rng):
    batch = _batch(rng)
    disc = ConstDisc(0.5, 0.25)
    assert generator_term(disc, batch, saturating=False).item() == pytest.approx(-np.log(0.25))
    assert generator_term(disc, batch).item() == pytest.approx(np.log(0.75))


def test_alternation_contract(monkeypatch):
    import pdfd.trainer as tr

    events = []
    orig_disc = tr.discriminator_step
    orig_step = tr.SGD.step

    def disc_step(*a, **kw):
        events.append("D")
        return orig_disc(*a, **kw)

    def step(self, grads, lr):
        if any(p.name.startswith("denoiser") for p in self.params):
            events.append("G")
        return orig_step(self, grads, lr)

    monkeypatch.setattr(tr, "discriminator_step", disc_step)
    monkeypatch.setattr(tr.SGD, "step", step)
    cfg = TrainConfig(epochs=1, samples_per_class=40, T=5, no_diff=True)
    tr.train(cfg)
    assert events and events == ["D", "G"] * (len(events) // 2)


def test_trained_conditioning_effect(trained_run, trained_model):
    m = trained_model
    test = load_features(trained_run / "test.pdfd")
    z = m.bundle.encoder(test.x, training=False).data
    pseudo = m.bundle.predict_proba(test.x).argmax(axis=1)
    k = m.num_classes
    matched = m.bundle.discriminator(z, one_hot(pseudo, k), training=False).data.mean()
    swapped = m.bundle.discriminator(z, one_hot((pseudo + 1) % k, k), training=False).data.mean()
    assert swapped < matched
