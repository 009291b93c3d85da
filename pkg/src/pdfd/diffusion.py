"""Feature-level diffusion: variance schedule, forward noising, the
noise-prediction loss and the prompt-guided reverse generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    """Schedule tables indexed by step ``t`` in ``0..T``.

    Index 0 is padding for ``beta``/``alpha``/``sigma`` (``beta[0] = 0``,
    ``alpha[0] = 1``) so that ``alpha_bar[0] = 1`` and every table can be
    addressed with the step number directly.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def sqrt_alpha_bar(self):
        return np.sqrt(self.alpha_bar)

    @property
    def sqrt_one_minus_alpha_bar(self):
        return np.sqrt(1.0 - self.alpha_bar)


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    beta = np.zeros(T + 1)
    if T == 1:
        beta[1] = beta_min
    else:
        t = np.arange(1, T + 1)
        beta[1:] = beta_min + (t - 1) * (beta_max - beta_min) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.flags.writeable = False
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma)


def _check_steps(t, T):
    t = np.asarray(t)
    if (t < 0).any() or (t > T).any():
        raise UsageError(f"diffusion step outside [0, {T}]")
    return t


def forward_diffuse(z0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per row.

    Works on arrays and on tensors (differentiable in ``z0``).
    """
    t = _check_steps(t, sched.T)
    a = sched.sqrt_alpha_bar[t]
    b = sched.sqrt_one_minus_alpha_bar[t]
    if t.ndim == 1:
        a, b = a[:, None], b[:, None]
    if isinstance(z0, Tensor):
        eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
        return z0 * Tensor._wrap(np.broadcast_to(a, z0.shape).copy()) + Tensor._wrap(b * eps_arr)
    return a * np.asarray(z0) + b * np.asarray(eps)


def sample_steps_and_noise(rng_t, rng_eps, n, d, T):
    """Draw ``t ~ Uniform{1..T}`` and ``eps ~ N(0, I)`` for ``n`` instances."""
    return rng_t.integers(1, T + 1, size=n), rng_eps.standard_normal((n, d))


def diffusion_loss(z0: Tensor, prompts, sched: NoiseSchedule, denoiser, t, eps) -> Tensor:
    """Mean over rows of ``||eps - denoiser(z_t, prompt, t)||^2``.

    ``prompts`` are treated as constants: pass arrays (or detached tensors)
    so no gradient reaches whatever produced them.
    """
    if z0.shape[0] == 0:
        raise UsageError("diffusion loss on an empty batch")
    prompts = prompts.data if isinstance(prompts, Tensor) else np.asarray(prompts, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    z_t = forward_diffuse(z0, t, eps, sched)
    pred = denoiser(z_t, Tensor._wrap(prompts.copy()), t)
    return (Tensor._wrap(eps.copy()) - pred).square().sum(axis=1).mean()


def reverse_step(z_t, eps_hat, t: int, sched: NoiseSchedule):
    """One deterministic reverse update ``z_{t-1}`` from ``z_t`` and a noise estimate."""
    coef = (1.0 - sched.alpha[t]) / np.sqrt(1.0 - sched.alpha_bar[t])
    inv = 1.0 / np.sqrt(sched.alpha[t])
    if isinstance(z_t, Tensor) or isinstance(eps_hat, Tensor):
        return (z_t - eps_hat * coef) * inv
    return inv * (np.asarray(z_t) - coef * np.asarray(eps_hat))


def posterior_mean(z0, z_t, t: int, sched: NoiseSchedule):
    """Mean of the forward posterior ``q(z_{t-1} | z_t, z_0)``."""
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    ct = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * np.asarray(z0) + ct * np.asarray(z_t)


def reverse_generate(eps, steps: int, prompts, sched: NoiseSchedule, denoiser, rng=None) -> Tensor:
    """Run the reverse chain from ``z_steps = eps`` down to ``z_0``.

    Deterministic unless ``rng`` is given, in which case ``sigma_t`` noise is
    added after every step except the last.  The result is differentiable in
    the denoiser parameters when recorded on a tape.
    """
    if not (1 <= steps <= sched.T):
        raise UsageError(f"steps must lie in [1, {sched.T}], got {steps}")
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    prompts = prompts.data if isinstance(prompts, Tensor) else np.asarray(prompts, dtype=np.float64)
    n = eps.shape[0]
    p = Tensor._wrap(prompts.copy())
    z = Tensor._wrap(eps.copy())
    for t in range(steps, 0, -1):
        z = reverse_step(z, denoiser(z, p, np.full(n, t)), t, sched)
        if rng is not None and t > 1:
            z = z + Tensor._wrap(sched.sigma[t] * rng.standard_normal(eps.shape))
    return z


def write_generated_csv(path, classes, z0) -> None:
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64)
    classes = np.asarray(classes, dtype=int)
    d = z0.shape[1] if z0.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", *[f"z0_{j}" for j in range(d)]])
        for c, row in zip(classes, z0):
            w.writerow([int(c), *[repr(float(v)) for v in row]])


def read_generated_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    classes = np.array([int(r[0]) for r in body], dtype=int)
    z0 = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), d)
    return classes, z0
