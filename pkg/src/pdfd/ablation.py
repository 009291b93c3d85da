"""Multi-seed comparison of training variants (ablation tables)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .trainer import TrainConfig, train

# one row per term of the joint objective, plus the conditioning ablation
ABLATION_VARIANTS = {
    "full": {},
    "no_ce_l": {"no_ce_l": True},
    "no_ce_u": {"no_ce_u": True},
    "no_diff": {"no_diff": True},
    "no_adv": {"no_adv": True},
    "no_diff+no_adv": {"no_diff": True, "no_adv": True},
    "no_class_condition": {"no_class_condition": True},
}
PROMPT_VARIANTS = {
    "prototype": {"prompt_mode": "prototype"},
    "onehot": {"prompt_mode": "onehot"},
    "probs": {"prompt_mode": "probs"},
}
SELECTION_VARIANTS = {
    "balanced": {"selection": "balanced"},
    "threshold": {"selection": "threshold"},
}
METRICS = ("seen_acc", "unseen_acc", "all_acc")


@dataclass
class VariantRuns:
    name: str
    overrides: dict
    finals: list = field(default_factory=list)  # final metrics row per seed
    pseudo: list = field(default_factory=list)  # pseudo-label telemetry per seed
    histories: list = field(default_factory=list)

    def mean(self, metric) -> float:
        return float(np.mean([r[metric] for r in self.finals]))

    def std(self, metric) -> float:
        return float(np.std([r[metric] for r in self.finals]))

    def summary(self) -> dict:
        row = {"variant": self.name, "seeds": len(self.finals)}
        for m in METRICS:
            row[f"{m}_mean"] = self.mean(m)
            row[f"{m}_std"] = self.std(m)
        return row


def parse_variant(spec: str) -> dict:
    """``"no_diff+no_adv"`` or ``"prompt_mode=onehot"`` style names to overrides.

    Values after ``=`` are read as JSON when possible (numbers, booleans, null)."""
    if spec in ABLATION_VARIANTS:
        return dict(ABLATION_VARIANTS[spec])
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    out = {}
    for part in spec.split("+"):
        key, sep, value = part.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"variant {spec!r}: unknown config key {key!r}")
        if not sep:
            out[key] = True
            continue
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def run_variants(base: TrainConfig, variants: dict, seeds, progress=None, cache=None) -> dict[str, VariantRuns]:
    """Train every ``(variant, seed)`` pair; ``cache`` maps resolved configs to
    results so shared runs (e.g. the full model) are trained once."""
    cache = {} if cache is None else cache
    out = {}
    for name, overrides in variants.items():
        runs = VariantRuns(name, dict(overrides))
        for seed in seeds:
            cfg = base.replace(**overrides, seed=int(seed))
            key = repr(sorted(cfg.to_dict().items()))
            if key not in cache:
                res = train(cfg)
                cache[key] = (res.history, res.pseudo_history)
                if progress:
                    progress(name, seed, res.history[-1] if res.history else {})
            hist, pseudo = cache[key]
            runs.histories.append(hist)
            runs.finals.append(hist[-1] if hist else {m: 0.0 for m in METRICS})
            runs.pseudo.append(pseudo)
        out[name] = runs
    return out


def pseudo_group_means(pseudo_rows, seen, key, epochs=None) -> tuple[float, float]:
    """Mean of ``key`` over the seen and over the novel class rows, optionally
    restricted to ``epochs``.  A class nothing is assigned to counts as 0."""
    seen = {int(s) for s in seen}
    groups = {True: [], False: []}
    for r in pseudo_rows:
        if epochs is not None and int(r["epoch"]) not in epochs:
            continue
        groups[int(r["class_id"]) in seen].append(float(r[key]))
    mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
    return mean(groups[True]), mean(groups[False])
