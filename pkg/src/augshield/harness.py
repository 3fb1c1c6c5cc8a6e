"""Seeded attack/defense trials, aggregation and report files.

Each trial draws every random number from streams keyed by
``(master_seed, trial_index, stream)``, so results do not depend on how
trials are scheduled across worker processes.
"""

import csv
import functools
import io
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attack as atk
from . import datagen
from .model import accuracy, mlp, predict, small_convnet
from .trainer import train

STREAMS = {"pick": 0, "attack": 1, "surrogate": 2, "victim": 3}

CSV_COLUMNS = (
    "defense",
    "attack",
    "trials",
    "mean_poison_success",
    "mean_clean_val_acc",
    "failed_trials",
    "master_seed",
    "config_fingerprint",
)


def trial_rng(master_seed, trial, stream):
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(trial, STREAMS[stream]))
    return np.random.default_rng(ss)


@dataclass
class TrialResult:
    trial: int
    poison_success: float
    clean_val_acc: float
    defense: str
    attack: str
    details: dict = field(default_factory=dict)
    error: str = ""

    @property
    def ok(self):
        return not self.error


@dataclass
class ExperimentReport:
    results: list
    defense: str
    attack: str
    master_seed: int
    fingerprint: str
    config: dict = field(default_factory=dict)

    @property
    def n_trials(self):
        return len(self.results)

    @property
    def partial(self):
        return any(not r.ok for r in self.results)

    def _mean(self, attr):
        vals = [getattr(r, attr) for r in self.results if r.ok]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    @property
    def mean_poison_success(self):
        return self._mean("poison_success")

    @property
    def mean_clean_val_acc(self):
        return self._mean("clean_val_acc")

    def row(self):
        return {
            "defense": self.defense,
            "attack": self.attack,
            "trials": self.n_trials,
            "mean_poison_success": repr(self.mean_poison_success),
            "mean_clean_val_acc": repr(self.mean_clean_val_acc),
            "failed_trials": sum(not r.ok for r in self.results),
            "master_seed": self.master_seed,
            "config_fingerprint": self.fingerprint,
        }

    def to_dict(self):
        return {
            "defense": self.defense,
            "attack": self.attack,
            "master_seed": self.master_seed,
            "config_fingerprint": self.fingerprint,
            "n_trials": self.n_trials,
            "partial": self.partial,
            "mean_poison_success": self.mean_poison_success,
            "mean_clean_val_acc": self.mean_clean_val_acc,
            "trials": [asdict(r) for r in self.results],
            "config": self.config,
        }


# ----------------------------------------------------------------- metrics


def eval_backdoor(model, patched, target_class):
    """Fraction of patched base-class images predicted as ``target_class``."""
    preds = predict(model, patched.images)
    return float(np.mean(preds == target_class))


def eval_targeted(model, target_image, adversarial_label):
    """1 if the target is classified with the adversarial label, else 0."""
    return int(predict(model, np.asarray(target_image)[None])[0] == adversarial_label)


# -------------------------------------------------------------------- data


@functools.lru_cache(maxsize=4)
def load_data(data_config):
    """``(train, val)`` for a :class:`DataConfig`; cached per process."""
    dc = data_config
    if dc.source == "shapeset":
        ds = datagen.gen_shapeset(dc.seed, dc.per_class, tuple(dc.geometry))
    else:
        train_all, _ = datagen.load_cifar10(dc.path)
        ds = train_all
    if dc.classes:
        ds = ds.relabel({int(c): i for i, c in enumerate(dc.classes)}, len(dc.classes))
    return datagen.split(ds, dc.val_fraction, dc.split_seed)


def model_factory(config, n_classes, geometry):
    mc = config.model
    if mc.arch == "smallconvnet":
        return functools.partial(small_convnet, tuple(geometry), n_classes, tuple(mc.widths))
    return functools.partial(mlp, tuple(geometry), n_classes, tuple(mc.widths))


# ------------------------------------------------------------------ trials


def _pick_classes(ac, n_classes, rng):
    target = ac.target_class if ac.target_class >= 0 else int(rng.integers(n_classes))
    if ac.base_class >= 0:
        base = ac.base_class
    else:
        others = [k for k in range(n_classes) if k != target]
        base = int(others[rng.integers(len(others))])
    return target, base


def _pick_target(val, rng):
    i = int(rng.integers(len(val)))
    true = int(val.labels[i])
    others = [k for k in range(val.n_classes) if k != true]
    adv = int(others[rng.integers(len(others))])
    return i, true, adv


@dataclass
class PoisonPlan:
    """Everything a trial needs after the attack stage."""

    poisoned: object
    delta: object
    details: dict
    target_image: object = None
    adversarial_label: int = -1
    trigger: object = None
    target_class: int = -1
    base_class: int = -1
    surrogate: object = None


def poison_trial(config, trial, train_set=None):
    """Attack stage of one trial: pick target/classes, then trigger or craft."""
    ac = config.attack
    seed = config.schedule.master_seed
    if train_set is None:
        train_set, val = load_data(config.dataset)
    else:
        val = load_data(config.dataset)[1]
    n_classes = train_set.n_classes
    r_pick = trial_rng(seed, trial, "pick")
    r_attack = trial_rng(seed, trial, "attack")
    seeds = {name: [seed, trial, k] for name, k in STREAMS.items()}

    if ac.kind == "backdoor":
        target, base = _pick_classes(ac, n_classes, r_pick)
        threat = atk.ThreatModel(
            norm="patch_l0",
            poison_fraction_within_class=ac.fraction,
            target_class=target,
            base_class=base,
            patch_side=ac.patch_side,
        )
        trigger = atk.make_trigger(ac.patch_side, train_set.geometry[2], r_attack, ac.placement)
        poisoned, delta = atk.apply_trigger(train_set, trigger, threat, r_attack)
        details = dict(target_class=target, base_class=base, poisons=len(delta), seeds=seeds)
        return PoisonPlan(poisoned, delta, details, trigger=trigger, target_class=target, base_class=base)

    ti, true, adv = _pick_target(val, r_pick)
    target_image = val.images[ti]
    details = dict(
        target_index=int(val.source_indices[ti]), true_label=true, adversarial_label=adv, seeds=seeds
    )
    threat = atk.ThreatModel(norm="linf", epsilon=ac.epsilon, budget=ac.budget, adversarial_label=adv)
    if ac.kind == "none":
        return PoisonPlan(train_set, atk.PoisonDelta.empty(threat, train_set.geometry), details, target_image, adv)

    spec = atk.TargetSpec(target_image[None], [true], [adv])
    make_model = model_factory(config, n_classes, train_set.geometry)
    surrogate, _ = atk.make_adaptive_surrogate(
        make_model,
        train_set,
        config.defense if ac.adaptive else None,
        config.surrogate_config(),
        trial_rng(seed, trial, "surrogate"),
    )
    dp = config.defense if (ac.adaptive and config.defense.kind == "dpsgd") else None
    craft = atk.CraftConfig(ac.steps, ac.step_size or None, ac.restarts)
    delta = atk.craft_targeted(surrogate, train_set, spec, threat, r_attack, craft, dp)
    audit = delta.validate(train_set)
    details.update(
        poisons=len(delta),
        linf_max=audit["linf_max"],
        initial_alignment=delta.meta["initial_alignment"],
        final_alignment=delta.meta["final_alignment"],
        surrogate=delta.meta["surrogate"],
        bundle=delta.fingerprint(),
    )
    return PoisonPlan(delta.apply(train_set), delta, details, target_image, adv, surrogate=surrogate)


def run_trial(config, trial):
    """One seeded trial: poison (or not), train a victim from scratch, score it."""
    train_set, val = load_data(config.dataset)
    plan = poison_trial(config, trial, train_set)
    r_victim = trial_rng(config.schedule.master_seed, trial, "victim")
    victim = model_factory(config, train_set.n_classes, train_set.geometry)().init_params(r_victim)
    train(victim, plan.poisoned, config.train_config(), r_victim)
    acc = accuracy(victim, val.images, val.labels)
    if config.attack.kind == "backdoor":
        patched = atk.patch_test_images(val, plan.trigger, plan.base_class)
        success = eval_backdoor(victim, patched, plan.target_class)
    else:
        success = float(eval_targeted(victim, plan.target_image, plan.adversarial_label))
    return TrialResult(trial, success, acc, config.defense.label(), config.attack.label(), plan.details)


def _safe_trial(config, trial):
    try:
        return run_trial(config, trial)
    except Exception as exc:  # surfaced in the report, never swallowed
        return TrialResult(
            trial,
            float("nan"),
            float("nan"),
            config.defense.label(),
            config.attack.label(),
            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}",
        )


def run_experiment(config, n_trials=None, parallelism=None):
    """Run ``n_trials`` seeded trials of one (defense, attack) cell."""
    n = config.schedule.trials if n_trials is None else n_trials
    if n < 1:
        raise ValueError("n_trials must be >= 1")
    workers = config.schedule.parallelism if parallelism is None else parallelism
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_trial, [config] * n, range(n)))
    else:
        results = [_safe_trial(config, t) for t in range(n)]
    results.sort(key=lambda r: r.trial)
    return ExperimentReport(
        results,
        config.defense.label(),
        config.attack.label(),
        config.schedule.master_seed,
        config.fingerprint(),
        config.to_dict(),
    )


def run_grid(config, n_trials=None, parallelism=None):
    return [run_experiment(cell, n_trials, parallelism) for cell in config.cells()]


# ------------------------------------------------------------------ output

SVG_BOX = {"left": 70.0, "right": 470.0, "top": 30.0, "bottom": 330.0}


def svg_coords(acc, success):
    """Linear axis mapping: accuracy [0, 1] -> x, poison success [0, 1] -> y (up)."""
    b = SVG_BOX
    x = b["left"] + acc * (b["right"] - b["left"])
    y = b["bottom"] - success * (b["bottom"] - b["top"])
    return x, y


def csv_text(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def svg_text(reports, fingerprint=""):
    b = SVG_BOX
    out = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="520" height="380" viewBox="0 0 520 380">',
        f"<!-- config_fingerprint: {fingerprint} -->",
        "<!-- axes: x = left + acc*(right-left), y = bottom - success*(bottom-top); "
        + ", ".join(f"{k}={v:g}" for k, v in b.items())
        + " -->",
        f'<rect x="{b["left"]:g}" y="{b["top"]:g}" width="{b["right"] - b["left"]:g}" '
        f'height="{b["bottom"] - b["top"]:g}" fill="none" stroke="black"/>',
        f'<text x="{(b["left"] + b["right"]) / 2:g}" y="365" text-anchor="middle" '
        'font-size="12">clean validation accuracy</text>',
        f'<text x="18" y="{(b["top"] + b["bottom"]) / 2:g}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 18 {(b["top"] + b["bottom"]) / 2:g})">poison success</text>',
    ]
    for t in (0.0, 0.5, 1.0):
        x, _ = svg_coords(t, 0.0)
        _, y = svg_coords(0.0, t)
        out.append(f'<text x="{x:g}" y="{b["bottom"] + 15:g}" font-size="10" text-anchor="middle">{t:g}</text>')
        out.append(f'<text x="{b["left"] - 5:g}" y="{y + 3:g}" font-size="10" text-anchor="end">{t:g}</text>')
    for r in reports:
        acc, succ = r.mean_clean_val_acc, r.mean_poison_success
        if not (np.isfinite(acc) and np.isfinite(succ)):
            continue
        x, y = svg_coords(acc, succ)
        color = "tab:red" if r.defense.startswith("dpsgd") else "tab:blue"
        fill = {"tab:red": "#d62728", "tab:blue": "#1f77b4"}[color]
        out.append(
            f'<circle cx="{x!r}" cy="{y!r}" r="4" fill="{fill}" '
            f'data-defense="{r.defense}" data-attack="{r.attack}" '
            f'data-acc="{acc!r}" data-success="{succ!r}"/>'
        )
        out.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-size="9">{r.defense}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports, out_dir, formats=("csv", "json", "svg"), stem="report"):
    """Write ``stem.csv`` / ``stem.json`` / ``stem.svg`` under ``out_dir``; returns paths."""
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = ",".join(sorted({r.fingerprint for r in reports}))
    paths = {}
    if "csv" in formats:
        paths["csv"] = out_dir / f"{stem}.csv"
        paths["csv"].write_text(csv_text(reports))
    if "json" in formats:
        paths["json"] = out_dir / f"{stem}.json"
        paths["json"].write_text(
            json.dumps({"reports": [r.to_dict() for r in reports]}, indent=1, sort_keys=True, default=_jd)
        )
    if "svg" in formats:
        paths["svg"] = out_dir / f"{stem}.svg"
        paths["svg"].write_text(svg_text(reports, fingerprint))
    return paths


def _jd(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def report_from_dict(d):
    fields_ = ("trial", "poison_success", "clean_val_acc", "defense", "attack", "details", "error")
    results = [TrialResult(**{k: t[k] for k in fields_}) for t in d["trials"]]
    return ExperimentReport(
        results, d["defense"], d["attack"], d["master_seed"], d["config_fingerprint"], d.get("config", {})
    )


def load_report_json(path):
    with open(path) as fh:
        return [report_from_dict(d) for d in json.load(fh)["reports"]]


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
