"""Class-conditional adversarial alignment of generated and real features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, concat
from .errors import UsageError

LOG_CLAMP = 1e-12


@dataclass
class AdvBatch:
    """Real unlabelled features with their one-hot pseudo-labels, and generated
    features with the one-hot class they were conditioned on.

    ``real`` is always a constant; ``fake`` may be a taped tensor so the
    generator-side term can reach the denoiser.
    """

    real: np.ndarray
    real_cond: np.ndarray
    fake: Tensor
    fake_cond: np.ndarray
    unconditional: bool = False

    def __post_init__(self):
        self.real = np.asarray(self.real.data if isinstance(self.real, Tensor) else self.real, dtype=np.float64)
        if not isinstance(self.fake, Tensor):
            self.fake = Tensor(self.fake)
        if self.real.shape[0] == 0 or self.fake.shape[0] == 0:
            raise UsageError("adversarial batch is empty")
        if self.real.shape[0] != self.fake.shape[0]:
            raise UsageError("real and fake sides must have equal size")

    def __len__(self):
        return self.real.shape[0]


def _probs(disc, batch: AdvBatch, fake: Tensor):
    # real and fake share one batchnorm batch
    n = len(batch)
    z = concat([Tensor._wrap(batch.real.copy()), fake], axis=0)
    cond = np.concatenate([batch.real_cond, batch.fake_cond], axis=0)
    p = disc(z, cond, training=True, unconditional=batch.unconditional)
    return p[:n], p[n:]


def _log(x: Tensor) -> Tensor:
    return x.clamp_min(LOG_CLAMP).log()


def adversarial_value(disc, batch: AdvBatch, fake: Tensor | None = None) -> Tensor:
    """``mean log D(real) + mean log(1 - D(fake))`` with logs clamped at 1e-12."""
    p_real, p_fake = _probs(disc, batch, batch.fake if fake is None else fake)
    return _log(p_real).mean() + _log(1.0 - p_fake).mean()


def generator_term(disc, batch: AdvBatch, saturating=True) -> Tensor:
    """Fake-side objective minimised by the denoiser.

    The saturating form is ``mean log(1 - D(fake))``; the non-saturating
    alternative is ``-mean log D(fake)``.
    """
    _, p_fake = _probs(disc, batch, batch.fake)
    if saturating:
        return _log(1.0 - p_fake).mean()
    return -_log(p_fake).mean()


def discriminator_step(disc, batch: AdvBatch, optimizer, lr: float) -> dict:
    """One ascent step of the adversarial value in the discriminator parameters.

    Generated features are detached, so nothing upstream receives gradient.
    Returns diagnostics (value, real/fake accuracy).
    """
    fake = batch.fake.detach()
    with Tape() as tape:
        p_real, p_fake = _probs(disc, batch, fake)
        value = _log(p_real).mean() + _log(1.0 - p_fake).mean()
        loss = -value
    grads = tape.backward(loss) if loss._tape is tape else {}
    optimizer.step(grads, lr)
    return {
        "value": value.item(),
        "real_acc": float((p_real.data > 0.5).mean()),
        "fake_acc": float((p_fake.data < 0.5).mean()),
    }


def generator_step(disc, batch_fn, optimizer, lr: float, saturating=True) -> float:
    """One descent step of the generator term in the denoiser parameters.

    ``batch_fn()`` must build the :class:`AdvBatch` (running the reverse chain)
    and is called inside the tape so gradients flow through every reverse step.
    Discriminator gradients are discarded.
    """
    psi = {p.name for p in disc.parameters()}
    with Tape() as tape:
        batch = batch_fn()
        term = generator_term(disc, batch, saturating)
    grads = tape.backward(term) if term._tape is tape else {}
    optimizer.step({k: v for k, v in grads.items() if k not in psi}, lr)
    return term.item()
