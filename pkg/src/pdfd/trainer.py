"""Joint training: supervised and pseudo-label cross-entropy, prompt-driven
diffusion loss and the class-conditional adversarial game."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import AdvBatch, discriminator_step, generator_term
from .autodiff import Tape, Tensor, concat, no_tape
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, OwsslSplit, generate_gaussian_mixture, load_features, make_owssl_split, toy_spec
from .diffusion import build_schedule, diffusion_loss, reverse_generate, sample_steps_and_noise
from .errors import ConfigError, DimensionError, FormatError, NumericalError, TrainingAborted
from .evaluation import accuracy_report, align_predictions
from .models import NORMALIZE_MODES, ModelBundle
from .owssl import (
    PrototypeMatrix,
    PseudoLabels,
    cross_entropy,
    kmeans_init,
    one_hot,
    predict_pseudo_labels,
    refresh_prototypes,
    select_confident,
    unlabeled_loss,
)
from .rng import RandomStreams

ABLATIONS = ("no_ce_l", "no_ce_u", "no_diff", "no_adv", "no_class_condition")
PROMPT_MODES = ("prototype", "onehot", "probs")
METRIC_COLUMNS = (
    "epoch", "lr", "L_ce_l", "L_ce_u", "L_diff", "L_adv_G", "L_adv_D", "N_m", "Q_size",
    "disc_real_acc", "disc_fake_acc", "seen_acc", "unseen_acc", "all_acc",
)
PSEUDO_COLUMNS = ("epoch", "class_id", "predicted_count", "confident_count", "mean_confidence",
                  "pseudo_label_accuracy")
# rough ceiling on memory held by one recorded reverse chain
TAPE_BYTES_LIMIT = 2 * 1024**3


@dataclass
class TrainConfig:
    # objective
    gamma_u: float = 0.5
    gamma_diff: float = 1.0
    gamma_adv: float = 1.0
    tau: float = 0.5
    T: int = 50
    T_adv: int | None = None
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # optimisation
    base_lr: float = 0.05
    min_lr: float = 0.0
    disc_lr: float | None = None
    epochs: int = 200
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment_noise_std: float = 0.1
    grad_clip: float | None = 5.0
    feature_norm: str | None = "l2"
    # architecture
    feature_dim: int = 16
    encoder_hidden: list = field(default_factory=lambda: [64, 64])
    denoiser_variant: str = "mlp"
    denoiser_hidden: int | None = None
    disc_hidden: int | None = None
    # ablations and variants
    no_ce_l: bool = False
    no_ce_u: bool = False
    no_diff: bool = False
    no_adv: bool = False
    no_class_condition: bool = False
    prompt_mode: str = "prototype"
    selection: str = "balanced"
    adv_loss: str = "saturating"
    adv_real: str = "all"
    stochastic_sampling: bool = False
    kmeans_warm_start: bool = True
    # data
    data_path: str | None = None
    data_seed: int | None = None
    num_classes: int = 6
    input_dim: int = 16
    samples_per_class: int = 300
    mixture_std: float = 1.0
    mean_radius: float = 3.0
    min_mean_distance: float = 4.0
    seen_fraction: float = 0.5
    labeled_fraction: float = 0.5
    test_fraction: float = 0.2
    # evaluation and output
    eval_protocol: str = "seen-fixed"
    checkpoint_every: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["T_adv"] = self.t_adv
        return d

    def replace(self, **kw) -> "TrainConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    def with_ablation(self, flags) -> "TrainConfig":
        if isinstance(flags, str):
            flags = [f for f in flags.split(",") if f.strip()]
        kw = {}
        for f in flags:
            f = f.strip()
            if f not in ABLATIONS:
                raise ConfigError(f"unknown ablation flag {f!r}; expected a subset of {ABLATIONS}")
            kw[f] = True
        return self.replace(**kw)

    @property
    def t_adv(self) -> int:
        return self.T if self.T_adv is None else self.T_adv

    def validate(self) -> None:
        for g in ("gamma_u", "gamma_diff", "gamma_adv"):
            if getattr(self, g) < 0:
                raise ConfigError(f"{g} must be >= 0")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError("tau must lie in (0, 1)")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be an integer >= 1")
        if not (1 <= self.t_adv <= self.T):
            raise ConfigError(f"T_adv must lie in [1, T={self.T}]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.augment_noise_std < 0:
            raise ConfigError("augment_noise_std must be >= 0")
        if self.base_lr < 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError("need 0 <= min_lr <= base_lr")
        choices = {
            "prompt_mode": PROMPT_MODES,
            "denoiser_variant": ("mlp", "attention"),
            "selection": ("balanced", "threshold"),
            "adv_loss": ("saturating", "nonsaturating"),
            "adv_real": ("all", "selected"),
            "eval_protocol": ("seen-fixed", "all-matched"),
        }
        if self.feature_norm not in NORMALIZE_MODES:
            raise ConfigError(f"feature_norm must be one of {NORMALIZE_MODES}, got {self.feature_norm!r}")
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.prompt_mode != "prototype" and self.num_classes > self.feature_dim:
            raise ConfigError("one-hot/probability prompts need num_classes <= feature_dim")
        tape_bytes = 40 * self.t_adv * self.batch_size * 8 * max(self.feature_dim, 4 * self.feature_dim)
        if not self.no_adv and tape_bytes > TAPE_BYTES_LIMIT:
            raise ConfigError(f"differentiating {self.t_adv} reverse steps needs ~{tape_bytes >> 20} MiB; lower T_adv")


# ---------------------------------------------------------------------------
# optimisation primitives


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)
    lr: float = 0.0


def sgd_update(params, grads, state: OptimizerState, lr, momentum=0.9, weight_decay=5e-4):
    """``buf = m * buf + g + wd * p``; ``p -= lr * buf``.

    Parameters without a gradient are left untouched.  Weight decay is
    skipped for tensors flagged ``decay=False`` (batchnorm affine terms).
    """
    state.lr = lr
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {p.name} has shape {g.shape}, parameter {p.shape}")
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        buf = state.buffers.get(p.name)
        if buf is None:
            buf = np.zeros_like(p.data)
        elif buf.shape != p.shape:
            raise DimensionError(f"momentum buffer for {p.name} does not match parameter shape")
        buf = momentum * buf + g
        state.buffers[p.name] = buf
        p.assign(p.data - lr * buf)


def clip_grad_norm(grads: dict, max_norm) -> tuple[dict, float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    arrays = {k: (g.data if isinstance(g, Tensor) else np.asarray(g)) for k, g in grads.items()}
    norm = math.sqrt(sum(float((a * a).sum()) for a in arrays.values()))
    if max_norm is None or norm <= max_norm:
        return arrays, norm
    scale = max_norm / norm
    return {k: a * scale for k, a in arrays.items()}, norm


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=5e-4, clip_norm=None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = OptimizerState()
        self.last_grad_norm = 0.0

    def step(self, grads, lr):
        names = {p.name for p in self.params}
        grads, self.last_grad_norm = clip_grad_norm({k: g for k, g in grads.items() if k in names}, self.clip_norm)
        sgd_update(self.params, grads, self.state, lr, self.momentum, self.weight_decay)


def cosine_lr(epoch, epochs, base_lr, min_lr=0.0):
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / epochs))


def weak_augment(x, noise_std, rng):
    x = np.asarray(x, dtype=np.float64)
    if noise_std == 0:
        return x.copy()
    return x + noise_std * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------


def load_split(cfg: TrainConfig) -> tuple[Dataset, OwsslSplit]:
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.data_path:
        ds = load_features(cfg.data_path)
    else:
        spec = toy_spec(data_seed, cfg.num_classes, cfg.input_dim, cfg.mixture_std, cfg.samples_per_class,
                        cfg.mean_radius, cfg.min_mean_distance)
        ds = generate_gaussian_mixture(spec)
    split = make_owssl_split(ds, cfg.seen_fraction, cfg.labeled_fraction, cfg.test_fraction, seed=data_seed)
    return ds, split


def pad_prompt(v: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((v.shape[0], d))
    out[:, : v.shape[1]] = v
    return out


@dataclass
class LossParts:
    total: Tensor
    parts: dict  # component name -> float (unweighted)
    weights: dict
    disc: dict = field(default_factory=dict)


def joint_loss(cfg: TrainConfig, bundle: ModelBundle, sched, P: PrototypeMatrix, x_l, y_l, x_q, y_q,
               x_u, pseudo_u, draws: dict, disc_opt=None, disc_lr=0.0, component_hook=None) -> LossParts:
    """Weighted sum ``L_ce^l + g_u L_ce^u + g_diff L_diff + g_adv L_adv_G``.

    Must run inside an active tape.  ``draws`` carries the pre-sampled
    randomness (``t``, ``eps`` for the diffusion term, ``fake_eps`` and
    ``fake_class`` for the generator) and may carry ``real``, the detached
    real-side features; they are computed from ``x_u`` when absent.  If ``disc_opt`` is given the
    discriminator takes its step on the same adversarial batch before the
    generator term is formed.  Disabled terms are skipped entirely.
    """
    enc, cls = bundle.encoder, bundle.classifier
    d = enc.feature_dim
    k = cls.num_classes
    parts = {"L_ce_l": 0.0, "L_ce_u": 0.0, "L_diff": 0.0, "L_adv_G": 0.0}
    weights = {"L_ce_l": 1.0, "L_ce_u": cfg.gamma_u, "L_diff": cfg.gamma_diff, "L_adv_G": cfg.gamma_adv}
    hook = component_hook or (lambda name, fn: fn())
    terms = []
    disc_info = {}

    z_l = logits_l = None
    if not cfg.no_ce_l or not cfg.no_diff:
        z_l = hook("encoder", lambda: enc(x_l))
        logits_l = cls.logits(z_l)
    if not cfg.no_ce_l:
        l = hook("L_ce_l", lambda: cross_entropy(logits_l, y_l))
        terms.append(l)
        parts["L_ce_l"] = l.item()

    if not cfg.no_ce_u and len(y_q):
        l = hook("L_ce_u", lambda: unlabeled_loss(x_q, y_q, enc, cls))
        terms.append(l * cfg.gamma_u)
        parts["L_ce_u"] = l.item()

    if not cfg.no_diff:
        def diff():
            z_u = enc(x_u)
            z = concat([z_l, z_u], axis=0)
            logits = concat([logits_l, cls.logits(z_u)], axis=0)
            prompts = _prompts(cfg, P, logits.data, d)
            return diffusion_loss(z, prompts, sched, bundle.denoiser, draws["t"], draws["eps"])
        l = hook("L_diff", diff)
        terms.append(l * cfg.gamma_diff)
        parts["L_diff"] = l.item()

    if not cfg.no_adv:
        def adv():
            real = draws.get("real")
            if real is None:
                with no_tape():
                    real = enc(x_u).data
            fake_cls = draws["fake_class"]
            if cfg.no_class_condition:
                fake_prompts = np.zeros((len(fake_cls), d))
                real_cond = np.zeros((len(real), k))
                fake_cond = np.zeros((len(fake_cls), k))
            else:
                fake_prompts = _class_prompts(cfg, P, fake_cls, d)
                real_cond = one_hot(pseudo_u, k)
                fake_cond = one_hot(fake_cls, k)
            fake = reverse_generate(draws["fake_eps"], cfg.t_adv, fake_prompts, sched, bundle.denoiser,
                                    rng=draws.get("sampling_rng"))
            batch = AdvBatch(real, real_cond, fake, fake_cond, unconditional=cfg.no_class_condition)
            if disc_opt is not None:
                disc_info.update(discriminator_step(bundle.discriminator, batch, disc_opt, disc_lr))
            return generator_term(bundle.discriminator, batch, saturating=cfg.adv_loss == "saturating")
        l = hook("L_adv", adv)
        terms.append(l * cfg.gamma_adv)
        parts["L_adv_G"] = l.item()

    if not terms:
        total = Tensor(0.0)
    else:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
    return LossParts(total, parts, weights, disc_info)


def _class_prompts(cfg, P, classes, d):
    if cfg.prompt_mode == "prototype":
        return P.lookup(classes)
    return pad_prompt(one_hot(classes, P.num_classes), d)


def _prompts(cfg, P, logits, d):
    if cfg.no_class_condition:
        return np.zeros((logits.shape[0], d))
    classes = logits.argmax(axis=1)
    if cfg.prompt_mode == "prototype":
        return P.lookup(classes)
    if cfg.prompt_mode == "onehot":
        return pad_prompt(one_hot(classes, logits.shape[1]), d)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return pad_prompt(e / e.sum(axis=1, keepdims=True), d)


# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list
    pseudo_history: list
    prototypes: PrototypeMatrix
    pseudo: PseudoLabels | None
    split: OwsslSplit
    config: TrainConfig


def _cycle_batches(n, size, rng):
    """Endless stream of index batches over ``range(n)``, reshuffled each pass."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, size):
            yield perm[i:i + size]


def pseudo_telemetry(epoch, pseudo: PseudoLabels, selection, y_true, seen, novel):
    k = pseudo.probs.shape[1]
    mapping = align_predictions(pseudo.hard, y_true, seen, novel, "seen-fixed")
    rows = []
    conf = pseudo.confidence
    for c in range(k):
        members = pseudo.hard == c
        n = int(members.sum())
        rows.append({
            "epoch": epoch,
            "class_id": c,
            "predicted_count": n,
            "confident_count": len(selection.confident[c]),
            "mean_confidence": float(conf[members].mean()) if n else 0.0,
            "pseudo_label_accuracy": float((y_true[members] == mapping[c]).mean()) if n else 0.0,
        })
    return rows


def build_bundle(cfg: TrainConfig, input_dim, num_classes, streams) -> ModelBundle:
    return ModelBundle.build(
        input_dim, num_classes, cfg.feature_dim, cfg.T, streams,
        encoder_hidden=tuple(cfg.encoder_hidden), denoiser_variant=cfg.denoiser_variant,
        denoiser_hidden=cfg.denoiser_hidden, disc_hidden=cfg.disc_hidden,
        normalize_features=cfg.feature_norm,
    )


def train(cfg: TrainConfig, split: OwsslSplit | None = None, out_dir=None, progress=None) -> TrainResult:
    """Run the full joint optimisation.

    Per epoch: refresh pseudo-labels on weakly augmented unlabelled data (the
    K-means assignment stands in for epoch 0), select the balanced confident
    set, recompute prototypes; then for every iteration take one
    discriminator step followed by one descent step on the joint loss.
    """
    cfg.validate()
    if split is None:
        _, split = load_split(cfg)
    streams = RandomStreams(cfg.seed)
    k = split.num_classes
    seen, novel = list(split.seen), list(split.novel)
    bundle = build_bundle(cfg, split.x_l.shape[1], k, streams)
    sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    d = cfg.feature_dim
    # clipping guards the denoiser and discriminator; the classification path is left unclipped
    theta_opt = SGD(bundle.theta(), cfg.momentum, cfg.weight_decay)
    phi_opt = SGD(bundle.phi(), cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    disc_opt = SGD(bundle.psi(), cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    P = PrototypeMatrix.zeros(d, k)
    history, pseudo_history = [], []
    pseudo = None

    if cfg.epochs == 0:
        result = TrainResult(bundle, history, pseudo_history, P, pseudo, split, cfg)
        if out_dir is not None:
            write_outputs(result, out_dir)
        return result

    if cfg.kmeans_warm_start:
        # clustered in the input feature space: a freshly initialised encoder scrambles the clusters
        init = kmeans_init(split.x_l, split.y_l, split.x_u, seen, novel, streams.get("kmeans"))
        pseudo = PseudoLabels(one_hot(init, k))
    else:
        pseudo = predict_pseudo_labels(split.x_u, bundle.encoder, bundle.classifier)

    shuffle = streams.get("shuffle")
    lab_batches = _cycle_batches(len(split.y_l), cfg.batch_size, shuffle)
    unl_batches = _cycle_batches(len(split.x_u), cfg.batch_size, shuffle)
    n_iter = math.ceil(len(split.x_u) / cfg.batch_size)
    aug_rng = streams.get("augment")
    diff_t, diff_eps = streams.get("diffusion.t"), streams.get("diffusion.eps")
    adv_eps, adv_cls = streams.get("adversarial.eps"), streams.get("adversarial.class")
    sampling = streams.get("adversarial.sampling") if cfg.stochastic_sampling else None
    q_rng = streams.get("selection.batches")

    for epoch in range(cfg.epochs):
        if epoch > 0 or not cfg.kmeans_warm_start:
            pseudo = predict_pseudo_labels(
                split.x_u, bundle.encoder, bundle.classifier,
                augment=lambda x: weak_augment(x, cfg.augment_noise_std, aug_rng),
            )
        selection = select_confident(pseudo.probs, cfg.tau, balanced=cfg.selection == "balanced")
        with no_tape():
            feat_l = bundle.encoder(split.x_l).data
            feat_u = bundle.encoder(split.x_u).data
        P = refresh_prototypes(P, feat_l, split.y_l, feat_u, pseudo, cfg.tau, seen, novel)
        pseudo_history.extend(pseudo_telemetry(epoch, pseudo, selection, split.y_u_true, seen, novel))

        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr)
        disc_lr = lr if cfg.disc_lr is None else cosine_lr(epoch, cfg.epochs, cfg.disc_lr, 0.0)
        q_batches = _cycle_batches(selection.size, cfg.batch_size, q_rng) if selection.size else None
        sums = {key: 0.0 for key in ("L_ce_l", "L_ce_u", "L_diff", "L_adv_G", "L_adv_D", "disc_real_acc", "disc_fake_acc")}

        for it in range(n_iter):
            li = next(lab_batches)
            ui = next(unl_batches)
            if q_batches is not None:
                qi = selection.ids[next(q_batches)]
            else:
                qi = np.zeros(0, dtype=int)
            draws = {}
            if not cfg.no_diff:
                draws["t"], draws["eps"] = sample_steps_and_noise(diff_t, diff_eps, len(li) + len(ui), d, cfg.T)
            if cfg.adv_real == "selected" and len(qi):
                real_idx = qi
            else:
                real_idx = ui
            if not cfg.no_adv:
                n_real = len(real_idx)
                draws["fake_class"] = adv_cls.integers(0, k, size=n_real)
                draws["fake_eps"] = adv_eps.standard_normal((n_real, d))
                draws["sampling_rng"] = sampling

            def hook(name, fn, _epoch=epoch, _it=it):
                try:
                    return fn()
                except NumericalError as exc:
                    raise TrainingAborted(name, _epoch, _it, str(exc)) from exc

            with Tape() as tape:
                lp = joint_loss(cfg, bundle, sched, P, split.x_l[li], split.y_l[li], split.x_u[qi], pseudo.hard[qi],
                                split.x_u[real_idx], pseudo.hard[real_idx], draws, disc_opt, disc_lr, hook)
                if not np.isfinite(lp.total.data).all():
                    raise TrainingAborted("L_tr", epoch, it)
            if lp.total._tape is tape:
                try:
                    grads = tape.backward(lp.total)
                except NumericalError as exc:
                    raise TrainingAborted("backward", epoch, it, str(exc)) from exc
                theta_opt.step(grads, lr)
                phi_opt.step(grads, lr)
            for key in ("L_ce_l", "L_ce_u", "L_diff", "L_adv_G"):
                sums[key] += lp.parts[key]
            if lp.disc:
                sums["L_adv_D"] += -lp.disc["value"]
                sums["disc_real_acc"] += lp.disc["real_acc"]
                sums["disc_fake_acc"] += lp.disc["fake_acc"]

        report = accuracy_report(bundle.predict_proba(split.x_test).argmax(axis=1), split.y_test, seen, novel,
                                 cfg.eval_protocol)
        row = {"epoch": epoch, "lr": lr}
        row.update({key: v / n_iter for key, v in sums.items()})
        row.update({
            "N_m": selection.n_min, "Q_size": selection.size,
            "seen_acc": report.seen_acc, "unseen_acc": report.unseen_acc, "all_acc": report.all_acc,
        })
        history.append({c: row[c] for c in METRIC_COLUMNS})
        if progress is not None:
            progress(history[-1])
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_checkpoint(Path(out_dir) / f"checkpoint_epoch{epoch + 1:04d}.bin", bundle, P, cfg, split)

    result = TrainResult(bundle, history, pseudo_history, P, pseudo, split, cfg)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# outputs


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in columns) + "\n")


def write_checkpoint(path, bundle: ModelBundle, P: PrototypeMatrix, cfg: TrainConfig, split: OwsslSplit) -> None:
    arrays = dict(bundle.state_dict())
    arrays["prototypes.columns"] = P.columns
    arrays["prototypes.valid"] = P.valid.astype(np.float64)
    meta = {
        "config": cfg.to_dict(),
        "input_dim": int(split.x_l.shape[1]),
        "num_classes": int(split.num_classes),
        "seen": [int(s) for s in split.seen],
        "novel": [int(n) for n in split.novel],
    }
    save_checkpoint(path, arrays, meta)


def write_outputs(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, result.history)
    write_csv(out / "pseudo_labels.csv", PSEUDO_COLUMNS, result.pseudo_history)
    write_checkpoint(out / "checkpoint.bin", result.bundle, result.prototypes, result.config, result.split)


@dataclass
class TrainedModel:
    bundle: ModelBundle
    prototypes: PrototypeMatrix
    config: TrainConfig
    input_dim: int
    num_classes: int
    seen: list
    novel: list


def load_trained(path) -> TrainedModel:
    """Rebuild the networks and prototypes stored by :func:`write_checkpoint`."""
    arrays, meta = load_checkpoint(path)
    try:
        cfg_dict = dict(meta["config"])
        input_dim, k = int(meta["input_dim"]), int(meta["num_classes"])
        seen, novel = [int(s) for s in meta["seen"]], [int(n) for n in meta["novel"]]
    except (KeyError, TypeError, ValueError):
        raise FormatError("checkpoint metadata lacks the training description") from None
    cfg = TrainConfig.from_dict(cfg_dict)
    bundle = build_bundle(cfg, input_dim, k, RandomStreams(cfg.seed))
    try:
        bundle.load_state_dict(arrays)
        P = PrototypeMatrix(arrays["prototypes.columns"], arrays["prototypes.valid"] > 0.5)
    except (DimensionError, KeyError) as exc:
        raise FormatError(f"checkpoint tensors do not match the stored config: {exc}") from None
    return TrainedModel(bundle, P, cfg, input_dim, k, seen, novel)
