"""Encoder, classifier, prompt-conditioned denoisers and the conditional discriminator."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, apply_primitive, concat, no_tape, recording
from .errors import DimensionError, UsageError


def _param(arr, name, decay=True):
    return Tensor(arr, requires_grad=True, name=name, decay=decay)


class Linear:
    """``y = x @ W + b`` with ``W`` of shape ``(n_in, n_out)``."""

    def __init__(self, n_in, n_out, rng=None, name="linear", init="he", gain=1.0):
        self.n_in, self.n_out = n_in, n_out
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "identity":
            if n_in != n_out:
                raise DimensionError("identity init needs a square layer")
            w = np.eye(n_in)
        else:
            std = gain * math.sqrt(2.0 / n_in) if init == "he" else gain * math.sqrt(1.0 / n_in)
            w = rng.normal(0.0, std, size=(n_in, n_out))
        self.weight = _param(w, f"{name}.weight")
        self.bias = _param(np.zeros(n_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"expected width {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm1d:
    def __init__(self, width, name="bn", momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(width), f"{name}.gamma", decay=False)
        self.beta = _param(np.zeros(width), f"{name}.beta", decay=False)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps
        self.name = name

    def __call__(self, x: Tensor, training=True, track=True) -> Tensor:
        if training:
            out = apply_primitive("batchnorm", [x, self.gamma, self.beta], eps=self.eps)
            if not track:
                return out
            n = x.shape[0]
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=0)
            self.running_var = (1 - m) * self.running_var + m * x.data.var(axis=0) * n / (n - 1)
            return out
        return apply_primitive(
            "batchnorm", [x, self.gamma, self.beta], eps=self.eps, mean=self.running_mean, var=self.running_var
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def load_buffers(self, arrays):
        self.running_mean = np.array(arrays[f"{self.name}.running_mean"])
        self.running_var = np.array(arrays[f"{self.name}.running_var"])


NORM_EPS = 1e-8
NORMALIZE_MODES = (None, "l2", "batch")


class Encoder:
    """MLP feature extractor ``input_dim -> hidden... -> feature_dim``.

    ReLU follows every hidden layer; the output layer is linear.  An empty
    ``hidden`` gives a single linear map.

    ``normalize`` post-processes the output:

    ``None``
        raw linear output.
    ``"l2"``
        each row rescaled to norm ``sqrt(feature_dim)``.
    ``"batch"``
        affine-free standardisation of every feature dimension.  With
        ``training=True`` the statistics of the batch at hand are used and the
        running estimates are updated while a tape records; otherwise the
        running estimates are used.
    """

    def __init__(self, input_dim, feature_dim, hidden=(64, 64), rng=None, init="he", normalize=None):
        if normalize not in NORMALIZE_MODES:
            raise UsageError(f"unknown feature normalisation {normalize!r}")
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.normalize = normalize
        dims = [input_dim, *hidden, feature_dim]
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, name=f"encoder.{i}", init=init) for i in range(len(dims) - 1)
        ]
        self.norm = None
        if normalize == "batch":
            self.norm = BatchNorm1d(feature_dim, name="encoder.norm")
            self.norm.gamma = Tensor(np.ones(feature_dim))
            self.norm.beta = Tensor(np.zeros(feature_dim))

    def __call__(self, x, training=True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"encoder expects (n, {self.input_dim}) input, got {x.shape}")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = h.relu()
        if self.normalize == "l2":
            inv = (((h * h).sum(axis=1, keepdims=True) + NORM_EPS).log() * -0.5).exp()
            h = h * inv * float(np.sqrt(self.feature_dim))
        elif self.normalize == "batch":
            if training and h.shape[0] < 2:
                raise DimensionError("batch feature normalisation needs at least 2 rows")
            h = self.norm(h, training=training, track=recording())
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return self.norm.buffers() if self.norm is not None else {}

    def load_buffers(self, arrays):
        if self.norm is not None:
            self.norm.load_buffers(arrays)


class Classifier:
    """Linear layer followed by a row softmax."""

    def __init__(self, feature_dim, num_classes, rng=None, init="xavier"):
        self.num_classes = num_classes
        self.linear = Linear(feature_dim, num_classes, rng, name="classifier", init=init)

    def logits(self, z: Tensor) -> Tensor:
        return self.linear(z)

    def __call__(self, z: Tensor) -> Tensor:
        return self.logits(z).softmax()

    def parameters(self):
        return self.linear.parameters()


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps; returns ``(len(t), width)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = (width + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.empty((t.size, 2 * half))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb[:, :width]


def _steps(t, n, T):
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(n, int(t))
    if t.shape != (n,):
        raise DimensionError(f"step array shape {t.shape} does not match batch {n}")
    if (t < 0).any() or (t > T).any():
        raise UsageError(f"diffusion step outside [0, {T}]")
    return t


class MLPDenoiser:
    """Noise predictor on ``concat(z_t, prompt, emb(t))`` with one residual block."""

    variant = "mlp"

    def __init__(self, feature_dim, T, hidden=None, rng=None, zero_final=False):
        d = feature_dim
        hidden = hidden or 4 * d
        self.feature_dim, self.T = d, T
        self.inp = Linear(3 * d, hidden, rng, name="denoiser.in")
        self.res = Linear(hidden, hidden, rng, name="denoiser.res")
        self.out = Linear(hidden, d, rng, name="denoiser.out", init="zeros" if zero_final else "xavier")

    def __call__(self, z_t, prompt, t) -> Tensor:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        prompt = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
        n, d = z_t.shape
        if prompt.shape != (n, d):
            raise DimensionError(f"prompt shape {prompt.shape} does not match features {(n, d)}")
        t = _steps(t, n, self.T)
        x = concat([z_t, prompt, Tensor._wrap(time_embedding(t, d))], axis=1)
        h = self.inp(x).relu()
        h = h + self.res(h).relu()
        return self.out(h)

    def parameters(self):
        return self.inp.parameters() + self.res.parameters() + self.out.parameters()


class AttentionDenoiser:
    """Single self-attention block over the three tokens ``[z_t, prompt, emb(t)]``;
    the noise estimate is read from the ``z_t`` token."""

    variant = "attention"

    def __init__(self, feature_dim, T, hidden=None, rng=None, zero_final=False):
        d = feature_dim
        hidden = hidden or 4 * d
        self.feature_dim, self.T = d, T
        self.pos = _param(rng.normal(0.0, 0.1, size=(3, d)), "denoiser.pos")
        self.q = Linear(d, d, rng, name="denoiser.q", init="xavier")
        self.k = Linear(d, d, rng, name="denoiser.k", init="xavier")
        self.v = Linear(d, d, rng, name="denoiser.v", init="xavier")
        self.o = Linear(d, d, rng, name="denoiser.o", init="xavier")
        self.ff1 = Linear(d, hidden, rng, name="denoiser.ff1")
        self.ff2 = Linear(hidden, d, rng, name="denoiser.ff2", init="xavier")
        self.out = Linear(d, d, rng, name="denoiser.out", init="zeros" if zero_final else "xavier")

    def __call__(self, z_t, prompt, t) -> Tensor:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        prompt = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
        n, d = z_t.shape
        if prompt.shape != (n, d):
            raise DimensionError(f"prompt shape {prompt.shape} does not match features {(n, d)}")
        t = _steps(t, n, self.T)
        emb = Tensor._wrap(time_embedding(t, d))
        tokens = concat([z_t.reshape(n, 1, d), prompt.reshape(n, 1, d), emb.reshape(n, 1, d)], axis=1)
        x = tokens + self.pos
        scores = (self.q(x) @ self.k(x).transpose()) * (1.0 / math.sqrt(d))
        x = x + self.o(scores.softmax() @ self.v(x))
        x = x + self.ff2(self.ff1(x).relu())
        return self.out(x[:, 0, :])

    def parameters(self):
        ps = [self.pos]
        for layer in (self.q, self.k, self.v, self.o, self.ff1, self.ff2, self.out):
            ps += layer.parameters()
        return ps


DENOISERS = {"mlp": MLPDenoiser, "attention": AttentionDenoiser}


def check_onehot(cond: np.ndarray, num_classes: int, allow_zero=False) -> None:
    if cond.ndim != 2 or cond.shape[1] != num_classes:
        raise UsageError(f"conditioning must be (n, {num_classes}), got {cond.shape}")
    binary = np.all((cond == 0.0) | (cond == 1.0))
    sums = cond.sum(axis=1)
    ok = binary and np.all((sums == 1.0) | (allow_zero & (sums == 0.0)))
    if not ok:
        raise UsageError("conditioning rows must be one-hot")


class Discriminator:
    """``(d + |Y|) -> h -> h -> 1`` with batchnorm + ReLU after the first two
    layers and a final sigmoid."""

    def __init__(self, feature_dim, num_classes, hidden=None, rng=None):
        hidden = hidden or 2 * feature_dim
        self.feature_dim, self.num_classes = feature_dim, num_classes
        self.l1 = Linear(feature_dim + num_classes, hidden, rng, name="disc.0")
        self.bn1 = BatchNorm1d(hidden, name="disc.bn0")
        self.l2 = Linear(hidden, hidden, rng, name="disc.1")
        self.bn2 = BatchNorm1d(hidden, name="disc.bn1")
        self.l3 = Linear(hidden, 1, rng, name="disc.2", init="xavier")

    def __call__(self, z, cond, training=True, unconditional=False) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=np.float64)
        check_onehot(cond, self.num_classes, allow_zero=unconditional)
        if z.ndim != 2 or z.shape[1] != self.feature_dim:
            raise DimensionError(f"discriminator expects (n, {self.feature_dim}) features, got {z.shape}")
        h = concat([z, Tensor._wrap(cond.copy())], axis=1)
        h = self.bn1(self.l1(h), training).relu()
        h = self.bn2(self.l2(h), training).relu()
        return self.l3(h).sigmoid()

    def parameters(self):
        ps = []
        for part in (self.l1, self.bn1, self.l2, self.bn2, self.l3):
            ps += part.parameters()
        return ps

    def buffers(self):
        return {**self.bn1.buffers(), **self.bn2.buffers()}

    def load_buffers(self, arrays):
        self.bn1.load_buffers(arrays)
        self.bn2.load_buffers(arrays)


class ModelBundle:
    """The four networks trained together: ``theta`` = encoder + classifier,
    ``phi`` = denoiser, ``psi`` = discriminator."""

    def __init__(self, encoder, classifier, denoiser, discriminator):
        self.encoder = encoder
        self.classifier = classifier
        self.denoiser = denoiser
        self.discriminator = discriminator

    @classmethod
    def build(cls, input_dim, num_classes, feature_dim, T, streams, encoder_hidden=(64, 64),
              denoiser_variant="mlp", denoiser_hidden=None, disc_hidden=None, zero_final=True,
              normalize_features=None):
        encoder = Encoder(input_dim, feature_dim, tuple(encoder_hidden), streams.get("init.encoder"),
                          normalize=normalize_features)
        classifier = Classifier(feature_dim, num_classes, streams.get("init.classifier"))
        if denoiser_variant not in DENOISERS:
            raise UsageError(f"unknown denoiser variant {denoiser_variant!r}")
        denoiser = DENOISERS[denoiser_variant](
            feature_dim, T, denoiser_hidden, streams.get("init.denoiser"), zero_final=zero_final
        )
        disc = Discriminator(feature_dim, num_classes, disc_hidden, streams.get("init.discriminator"))
        return cls(encoder, classifier, denoiser, disc)

    def theta(self):
        return self.encoder.parameters() + self.classifier.parameters()

    def phi(self):
        return self.denoiser.parameters()

    def psi(self):
        return self.discriminator.parameters()

    def parameters(self):
        return self.theta() + self.phi() + self.psi()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.parameters()}
        state.update(self.encoder.buffers())
        state.update(self.discriminator.buffers())
        return state

    def load_state_dict(self, state) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise DimensionError(f"checkpoint lacks tensor {p.name}")
            arr = np.asarray(state[p.name])
            if arr.shape != p.shape:
                raise DimensionError(f"{p.name}: expected shape {p.shape}, found {arr.shape}")
            p.assign(arr)
        self.encoder.load_buffers(state)
        self.discriminator.load_buffers(state)

    def predict_proba(self, x, training=False) -> np.ndarray:
        with no_tape():
            return self.classifier(self.encoder(x, training=training)).data
