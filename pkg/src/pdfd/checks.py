"""Self-contained invariant checks behind ``pdfd gradcheck`` and ``pdfd selftest``.

Each check returns a :class:`CheckResult`.  The brute-force oracles here are
written independently of the code they verify.
"""

from __future__ import annotations

import itertools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import PRIMITIVES, Tensor, apply_primitive, grad_check, grad_check_params

PRIMITIVE_TOL = 1e-5
JOINT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}" + (f"  ({self.detail})" if self.detail else "")


def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# primitives


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.2, 0.2 * np.sign(x) + 0.2 * (x == 0), x)


def primitive_cases(rng):
    """``name -> (input arrays, attrs)``; one representative case per primitive."""
    bn_mean = rng.standard_normal(3)
    bn_var = _pos(rng, 3)
    return {
        "matmul": ([rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 2))], {}),
        "add": ([rng.standard_normal((3, 4)), rng.standard_normal((1, 4))], {}),
        "sub": ([rng.standard_normal((3, 4)), rng.standard_normal((3, 1))], {}),
        "mul": ([rng.standard_normal((3, 4)), rng.standard_normal(4)], {}),
        "scale": ([rng.standard_normal((3, 4))], {"c": -1.7}),
        "relu": ([_away_from_zero(rng, (3, 4))], {}),
        "exp": ([rng.standard_normal((3, 4))], {}),
        "log": ([_pos(rng, (3, 4))], {}),
        "sqrt": ([_pos(rng, (3, 4))], {}),
        "square": ([rng.standard_normal((3, 4))], {}),
        "sigmoid": ([rng.standard_normal((3, 4))], {}),
        "clamp_min": ([_away_from_zero(rng, (3, 4))], {"lo": 0.0}),
        "sum": ([rng.standard_normal((3, 4))], {"axis": 1, "keepdims": True}),
        "mean": ([rng.standard_normal((3, 4))], {"axis": 0, "keepdims": False}),
        "softmax": ([rng.standard_normal((3, 4))], {}),
        "log_softmax": ([rng.standard_normal((3, 4))], {}),
        "concat": ([rng.standard_normal((3, 2)), rng.standard_normal((3, 4))], {"axis": 1}),
        "slice": ([rng.standard_normal((5, 4))], {"index": (np.array([0, 2, 2, 4]), slice(1, 3))}),
        "broadcast": ([rng.standard_normal((1, 4))], {"shape": (3, 4)}),
        "reshape": ([rng.standard_normal((3, 4))], {"shape": (2, 6)}),
        "transpose": ([rng.standard_normal((2, 3, 4))], {}),
        "batchnorm": ([rng.standard_normal((5, 3)), _pos(rng, 3), rng.standard_normal(3)], {}),
        "batchnorm_eval": (
            [rng.standard_normal((5, 3)), _pos(rng, 3), rng.standard_normal(3)],
            {"mean": bn_mean, "var": bn_var},
        ),
    }


def check_primitive(name, inputs, attrs, rng, eps=1e-5):
    """Max gradcheck error of one primitive over every input slot.

    The scalar probe is ``sum(w * prim(...))`` with a fixed random ``w`` so
    every output coordinate contributes.
    """
    prim_name = "batchnorm" if name == "batchnorm_eval" else name
    out_shape = PRIMITIVES[prim_name].forward(*inputs, **attrs).shape
    w = Tensor(rng.standard_normal(out_shape))
    worst = 0.0
    for slot in range(len(inputs)):
        def f(x, slot=slot):
            args = [Tensor(a) for a in inputs]
            args[slot] = x
            return (apply_primitive(prim_name, args, **attrs) * w).sum()

        worst = max(worst, grad_check(f, inputs[slot], eps))
    return worst


def primitive_checks(seed=0, points=10, tol=PRIMITIVE_TOL, names=None):
    """One result per registered primitive: gradcheck at ``points`` seeded draws."""
    results = []
    registered = sorted(PRIMITIVES)
    for name in names or registered:
        def run(name=name):
            worst = 0.0
            for k in range(points):
                rng = np.random.default_rng([seed, k])
                cases = primitive_cases(rng)
                if name not in cases:
                    return False, "no test case registered"
                keys = [name] + (["batchnorm_eval"] if name == "batchnorm" else [])
                for key in keys:
                    inputs, attrs = cases[key]
                    worst = max(worst, check_primitive(key, inputs, attrs, rng))
            return worst < tol, f"max rel err {worst:.2e}"

        results.append(_timed(f"gradcheck:{name}", run))
    return results


# ---------------------------------------------------------------------------
# joint objective


def small_joint_setup(seed=0, n=4):
    """A tiny randomly initialised model and batch for checking the full objective."""
    from .diffusion import build_schedule
    from .models import ModelBundle
    from .owssl import PrototypeMatrix
    from .rng import RandomStreams
    from .trainer import TrainConfig

    k, input_dim, d, T = 4, 5, 4, 4
    cfg = TrainConfig(
        T=T, feature_dim=d, encoder_hidden=[6], denoiser_hidden=8, disc_hidden=6, num_classes=k,
        input_dim=input_dim, batch_size=n, seed=seed,
    )
    streams = RandomStreams(seed)
    bundle = ModelBundle.build(
        input_dim, k, d, T, streams, encoder_hidden=(6,), denoiser_hidden=8, disc_hidden=6,
        normalize_features=cfg.feature_norm,
    )
    rng = streams.get("gradcheck.params")
    for p in bundle.parameters():
        # perturb every tensor so zero-initialised layers carry signal too
        p.assign(p.data + 0.3 * rng.standard_normal(p.shape))
    data = streams.get("gradcheck.data")
    P = PrototypeMatrix(data.standard_normal((d, k)), np.ones(k, dtype=bool))
    batch = {
        "x_l": data.standard_normal((n, input_dim)),
        "y_l": np.array([0, 1, 0, 1])[:n],
        "x_q": data.standard_normal((n, input_dim)),
        "y_q": np.array([2, 3, 3, 2])[:n],
        "x_u": data.standard_normal((n, input_dim)),
        "pseudo_u": np.array([1, 3, 0, 2])[:n],
    }
    draws = {
        "t": data.integers(1, T + 1, size=2 * n),
        "eps": data.standard_normal((2 * n, d)),
        "fake_eps": data.standard_normal((n, d)),
        "fake_class": data.integers(0, k, size=n),
    }
    # the real side is a constant of the objective, so it is frozen for the probes
    draws["real"] = bundle.encoder(batch["x_u"]).data
    return cfg, bundle, build_schedule(T, cfg.beta_min, cfg.beta_max), P, batch, draws


def joint_loss_error(seed=0, eps=1e-5):
    """Max relative gradcheck error of ``L_tr`` over the encoder, classifier
    and denoiser parameters."""
    from .trainer import joint_loss

    cfg, bundle, sched, P, b, draws = small_joint_setup(seed)

    def loss():
        return joint_loss(cfg, bundle, sched, P, b["x_l"], b["y_l"], b["x_q"], b["y_q"],
                          b["x_u"], b["pseudo_u"], draws).total

    err, per = grad_check_params(loss, bundle.theta() + bundle.phi(), eps)
    return err, per


def joint_check(seed=0, tol=JOINT_TOL):
    def run():
        err, _ = joint_loss_error(seed)
        return err < tol, f"max rel err {err:.2e}"

    return _timed("gradcheck:joint_loss", run)


# ---------------------------------------------------------------------------
# brute-force oracles


def brute_force_selection(probs, tau):
    """Per-class confident sets, ``N_m`` and ``Q`` by direct enumeration."""
    probs = np.asarray(probs)
    n, k = probs.shape
    sets = []
    for c in range(k):
        members = []
        for i in range(n):
            row = probs[i]
            top = max(range(k), key=lambda j: (row[j], -j))
            if row[top] > tau and top == c:
                members.append(i)
        members.sort(key=lambda i: (-probs[i].max(), i))
        sets.append(members)
    n_min = min(len(s) for s in sets)
    q = [i for s in sets for i in s[:n_min]]
    return sets, n_min, q


def brute_force_assignment(cost):
    """Lexicographically smallest minimum-cost permutation by enumeration."""
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    best, best_perm = None, None
    scale = max(1.0, float(np.abs(c).max())) if c.size else 1.0
    for perm in itertools.permutations(range(n)):
        total = float(sum(c[i, perm[i]] for i in range(n)))
        if best is None or total < best - 1e-9 * scale:
            best, best_perm = total, perm
    return np.array(best_perm if best_perm is not None else (), dtype=int), (best or 0.0)


# ---------------------------------------------------------------------------
# invariant suite


def _schedule():
    from .diffusion import build_schedule

    s = build_schedule(50, 1e-4, 0.02)
    ratio = s.alpha_bar[1:] / s.alpha_bar[:-1]
    err = float(np.abs(ratio - s.alpha[1:]).max())
    prod = 1.0
    for t in range(1, 51):
        prod *= 1.0 - s.beta[t]
    return err < 1e-15 and abs(prod - s.alpha_bar[50]) < 1e-12, f"ratio err {err:.1e}"


def _reverse_algebra():
    from .diffusion import build_schedule, forward_diffuse, posterior_mean, reverse_step

    s = build_schedule(50, 1e-4, 0.02)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        z0, eps = rng.standard_normal(8), rng.standard_normal(8)
        t = int(rng.integers(1, 51))
        zt = forward_diffuse(z0, t, eps, s)
        worst = max(worst, float(np.abs(reverse_step(zt, eps, t, s) - posterior_mean(z0, zt, t, s)).max()))
    return worst < 1e-10, f"max abs err {worst:.1e}"


def _selection():
    from .owssl import select_confident

    rng = np.random.default_rng(4)
    for tau in (0.3, 0.5, 0.7, 0.95):
        for _ in range(5):
            probs = rng.dirichlet(np.full(5, 0.5), size=60)
            sel = select_confident(probs, tau)
            sets, n_min, q = brute_force_selection(probs, tau)
            if [list(c) for c in sel.confident] != sets or sel.n_min != n_min or list(sel.ids) != q:
                return False, f"mismatch at tau={tau}"
    return True, ""


def _hungarian():
    from .evaluation import hungarian_match

    rng = np.random.default_rng(5)
    for _ in range(60):
        n = int(rng.integers(2, 7))
        cost = rng.integers(0, 4, size=(n, n)).astype(float)
        got = hungarian_match(cost).perm
        want, _ = brute_force_assignment(cost)
        if not np.array_equal(got, want):
            return False, f"mismatch on {n}x{n}"
    return True, ""


def _serialization():
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import Dataset, load_features, save_features

    rng = np.random.default_rng(6)
    ds = Dataset(rng.standard_normal((7, 3)), rng.integers(0, 4, size=7), 4)
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("a.csv", "a.pdfd"):
            save_features(ds, Path(tmp) / name)
            back = load_features(Path(tmp) / name)
            if not (np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y) and back.num_classes == 4):
                return False, f"{name} round trip differs"
        arrays = {"w": rng.standard_normal((2, 3)), "b": rng.standard_normal(3)}
        save_checkpoint(Path(tmp) / "c.bin", arrays, {"k": 1})
        got, meta = load_checkpoint(Path(tmp) / "c.bin")
        if meta != {"k": 1} or any(not np.array_equal(got[k], v) for k, v in arrays.items()):
            return False, "checkpoint round trip differs"
    return True, ""


def invariant_checks():
    return [
        _timed("schedule:exactness", _schedule),
        _timed("diffusion:reverse_step_posterior_mean", _reverse_algebra),
        _timed("selection:brute_force_oracle", _selection),
        _timed("hungarian:exhaustive_oracle", _hungarian),
        _timed("serialization:round_trip", _serialization),
    ]


def gradcheck_suite(seed=0, points=10):
    return primitive_checks(seed, points) + [joint_check(seed)]


def selftest_suite(seed=0):
    return gradcheck_suite(seed, points=3) + invariant_checks()
