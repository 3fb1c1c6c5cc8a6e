"""Poison crafting: patch backdoors and gradient-alignment targeted poisons."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import (
    alignment_value_and_grad,
    cross_entropy,
    forward,
    grad_params,
    param_grad_tensors,
)
from .trainer import fused_clipped_mean, train
from .autodiff import SecondOrderUnsupported, Tensor


class ThreatModelError(ValueError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    norm: str = "linf"
    epsilon: float = 16 / 255
    budget: float = 0.01
    poison_fraction_within_class: float = 1.0
    target_class: int = None
    base_class: int = None
    adversarial_label: int = None
    patch_side: int = 4

    def __post_init__(self):
        if self.norm not in ("linf", "patch_l0"):
            raise ThreatModelError(f"unknown norm {self.norm!r}")
        if not 0 < self.budget <= 1:
            raise ThreatModelError("budget must lie in (0, 1]")
        if self.norm == "linf" and self.epsilon < 0:
            raise ThreatModelError("epsilon must be nonnegative")
        if not 0 <= self.poison_fraction_within_class <= 1:
            raise ThreatModelError("poison fraction within class must lie in [0, 1]")
        if self.patch_side < 0:
            raise ThreatModelError("patch side must be nonnegative")
        if self.target_class is not None and self.target_class == self.base_class:
            raise ThreatModelError("target and base class must differ")

    def max_poisons(self, n):
        return int(np.floor(self.budget * n + 1e-9))

    def to_dict(self):
        return asdict(self)


@dataclass
class PoisonDelta:
    """Perturbations keyed by training-set row; ``deltas[i]`` belongs to ``indices[i]``."""

    indices: np.ndarray
    deltas: np.ndarray
    threat: ThreatModel
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if len(self.indices) != len(self.deltas):
            raise ValueError("indices and deltas differ in length")

    def __len__(self):
        return len(self.indices)

    @classmethod
    def empty(cls, threat, geometry):
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0,) + tuple(geometry)), threat)

    def apply(self, dataset):
        images = np.array(dataset.images)
        if len(self):
            images[self.indices] = np.clip(images[self.indices] + self.deltas, 0.0, 1.0)
        return dataset.with_images(images, dataset.provenance + ":poisoned")

    def audit(self, dataset):
        """Constraint scan against the clean ``dataset``."""
        n = len(dataset)
        out = {
            "count": len(self),
            "max_count": self.threat.max_poisons(n),
            "linf_max": float(np.abs(self.deltas).max()) if len(self) else 0.0,
            "l0_max": int((np.abs(self.deltas).max(axis=-1) > 0).sum(axis=(1, 2)).max() * dataset.geometry[2])
            if len(self)
            else 0,
        }
        if len(self):
            poisoned = dataset.images[self.indices] + self.deltas
            out["pixel_min"] = float(poisoned.min())
            out["pixel_max"] = float(poisoned.max())
        else:
            out["pixel_min"], out["pixel_max"] = 0.0, 1.0
        return out

    def validate(self, dataset, tol=1e-12):
        a = self.audit(dataset)
        problems = []
        if self.threat.norm == "linf":
            if a["count"] > a["max_count"]:
                problems.append(f"{a['count']} poisons exceed budget {a['max_count']}")
            if a["linf_max"] > self.threat.epsilon + tol:
                problems.append(f"linf {a['linf_max']:.6g} exceeds epsilon {self.threat.epsilon:.6g}")
        else:
            side = self.threat.patch_side
            if a["l0_max"] > side * side * dataset.geometry[2]:
                problems.append(f"l0 {a['l0_max']} exceeds patch area")
        if a["pixel_min"] < -tol or a["pixel_max"] > 1 + tol:
            problems.append("poisoned pixels leave [0, 1]")
        if problems:
            raise ThreatModelError("; ".join(problems))
        return a

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.indices.tobytes())
        h.update(np.ascontiguousarray(self.deltas).tobytes())
        h.update(json.dumps(self.threat.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


def save_bundle(path, delta, extra=None):
    """Write a poison bundle: arrays plus a JSON header with threat, seeds, provenance."""
    header = {
        "format": "augshield-poison-bundle/1",
        "threat": delta.threat.to_dict(),
        "meta": delta.meta,
        "extra": extra or {},
        "fingerprint": delta.fingerprint(),
    }
    np.savez(
        path,
        indices=delta.indices,
        deltas=delta.deltas,
        header=np.str_(json.dumps(header, sort_keys=True, default=_json_default)),
    )
    return header


def load_bundle(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        delta = PoisonDelta(z["indices"], z["deltas"], ThreatModel(**header["threat"]), header["meta"])
    if delta.fingerprint() != header["fingerprint"]:
        raise ThreatModelError("bundle fingerprint mismatch; file altered or corrupt")
    return delta, header


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def model_fingerprint(model):
    h = hashlib.sha256(json.dumps(model.describe(), sort_keys=True).encode())
    h.update(model.params.tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------- backdoor


@dataclass(frozen=True)
class BackdoorTrigger:
    patch: np.ndarray
    placement: str = "corner"

    def __post_init__(self):
        p = np.asarray(self.patch, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[1]:
            raise ValueError("patch must be [side, side, c]")
        if p.min() < 0 or p.max() > 1:
            raise ValueError("patch values must lie in [0, 1]")
        if self.placement not in ("corner", "random"):
            raise ValueError("placement must be 'corner' or 'random'")
        object.__setattr__(self, "patch", p)

    @property
    def side(self):
        return self.patch.shape[0]

    def location(self, geometry, rng=None):
        w, h = geometry[:2]
        s = self.side
        if self.placement == "corner":
            return w - s, h - s
        return int(rng.integers(0, w - s + 1)), int(rng.integers(0, h - s + 1))

    def stamp(self, image, loc):
        out = np.array(image)
        x, y = loc
        s = self.side
        out[x : x + s, y : y + s] = self.patch
        return out


def make_trigger(patch_side, channels, rng, placement="corner"):
    """Seeded binary RGB pattern: every value is 0 or 1."""
    patch = rng.integers(0, 2, size=(patch_side, patch_side, channels)).astype(np.float64)
    return BackdoorTrigger(patch, placement)


def apply_trigger(train_set, trigger, threat, rng):
    """Stamp the trigger on the configured fraction of target-class training images.

    Labels are untouched. Returns ``(poisoned Dataset, PoisonDelta)``.
    """
    if threat.target_class is None:
        raise ThreatModelError("backdoor needs a target class")
    members = np.flatnonzero(train_set.labels == threat.target_class)
    if len(members) == 0:
        raise ThreatModelError(f"target class {threat.target_class} has no training images")
    n_sel = int(round(threat.poison_fraction_within_class * len(members)))
    if n_sel > len(members):
        raise ThreatModelError("poison fraction exceeds the class size")
    chosen = np.sort(rng.choice(members, size=n_sel, replace=False)) if n_sel else members[:0]
    images = np.array(train_set.images)
    deltas = np.empty((n_sel,) + train_set.geometry)
    for j, i in enumerate(chosen):
        stamped = trigger.stamp(images[i], trigger.location(train_set.geometry, rng))
        deltas[j] = stamped - images[i]
        images[i] = stamped
    threat = replace(threat, norm="patch_l0", patch_side=trigger.side)
    delta = PoisonDelta(chosen, deltas, threat, {"kind": "backdoor"})
    return train_set.with_images(images, train_set.provenance + ":backdoor"), delta


def patch_test_images(val, trigger, base_class, rng=None):
    """Every base-class validation image with the trigger stamped on; labels kept."""
    members = np.flatnonzero(val.labels == base_class)
    if len(members) == 0:
        raise ThreatModelError(f"base class {base_class} has no validation images")
    sub = val.subset(members)
    images = np.stack([trigger.stamp(img, trigger.location(val.geometry, rng)) for img in sub.images])
    return sub.with_images(images, val.provenance + ":patched")


# ------------------------------------------------------------------- targeted


@dataclass(frozen=True)
class TargetSpec:
    images: np.ndarray
    true_labels: np.ndarray
    adversarial_labels: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        true = np.asarray(self.true_labels, dtype=np.int64)
        adv = np.asarray(self.adversarial_labels, dtype=np.int64)
        if not (len(images) == len(true) == len(adv)) or len(images) == 0:
            raise ValueError("target images and labels must be nonempty and aligned")
        if np.any(true == adv):
            raise ValueError("adversarial label must differ from the true label")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "true_labels", true)
        object.__setattr__(self, "adversarial_labels", adv)


def target_gradient(model, spec):
    """Gradient over parameters of the summed adversarial loss on the targets."""
    loss = cross_entropy(forward(model, spec.images), spec.adversarial_labels)
    return grad_params(loss, model) * len(spec.images)


def alignment_loss(model, images, labels, target_grad):
    """``1 - cos(grad_theta L_train(images), target_grad)``, a value in [0, 2]."""
    target_grad = np.asarray(target_grad, dtype=np.float64)
    if not np.any(target_grad):
        raise ValueError("target gradient is zero")
    loss = cross_entropy(forward(model, images), labels)
    g = grad_params(loss, model)
    gn = np.linalg.norm(g)
    if gn == 0.0:
        raise ValueError("training gradient is zero; cosine undefined")
    cos = float(g @ target_grad) / (gn * np.linalg.norm(target_grad))
    return float(np.clip(1.0 - cos, 0.0, 2.0))


def straight_through_alignment(model, images, labels, target_grad, clip, sigma, rng):
    """Alignment value of the clipped-and-noised poison gradient; the input
    gradient treats clipping and noise as the identity.
    """
    target_grad = np.asarray(target_grad, dtype=np.float64)
    tnorm = np.linalg.norm(target_grad)
    with ad.Tape():
        dp_grad, _ = fused_clipped_mean(model, images, labels, clip)
    if sigma > 0:
        dp_grad = dp_grad + rng.normal(0.0, sigma * clip / len(images), size=dp_grad.shape)
    x = Tensor(np.asarray(images, dtype=np.float64), requires_grad=True)
    with ad.Tape():
        grads = param_grad_tensors(model, x, labels)
        dot, sq = None, None
        for g, sl in zip(grads, model._slices):
            offset = Tensor(dp_grad[sl].reshape(g.shape) - g.data)
            st = ad.add(g, offset)
            t = Tensor(target_grad[sl].reshape(g.shape))
            d = ad.sum_(ad.mul(st, t))
            s = ad.sum_(ad.mul(st, st))
            dot = d if dot is None else ad.add(dot, d)
            sq = s if sq is None else ad.add(sq, s)
        value = ad.sub(1.0, ad.div(dot, ad.mul(ad.sqrt(sq), tnorm)))
    (gx,) = ad.grad(value, [x])
    return float(value.data), gx.data


def project_linf(delta, base, epsilon):
    """Nearest point of ``{|d|_inf <= eps} & {base + d in [0, 1]}`` (coordinatewise)."""
    d = np.clip(delta, -epsilon, epsilon)
    return np.clip(base + d, 0.0, 1.0) - base


def select_poison_candidates(train_set, threat, adversarial_label, rng):
    n_p = threat.max_poisons(len(train_set))
    members = np.flatnonzero(train_set.labels == adversarial_label)
    n_p = min(n_p, len(members))
    return np.sort(rng.choice(members, size=n_p, replace=False))


@dataclass(frozen=True)
class CraftConfig:
    steps: int = 250
    step_size: float = None  # defaults to epsilon / 10
    restarts: int = 1
    decay: bool = True

    def step_at(self, step, t):
        """Step size at iteration ``t``: x0.1 after 3/8, 5/8 and 7/8 of the steps."""
        if not self.decay:
            return step
        frac = t / max(self.steps, 1)
        return step * 0.1 ** sum(frac >= f for f in (3 / 8, 5 / 8, 7 / 8))


def craft_targeted(surrogate, train_set, spec, threat, rng, config=CraftConfig(), dp_policy=None):
    """Gradient-alignment poisons under an l-inf ball.

    Signed-gradient descent on the alignment loss with projection after each
    step; restart 0 starts from zero, later restarts from uniform noise in the
    ball. The restart with the lowest final alignment loss wins.

    ``dp_policy`` (a DP-SGD :class:`DefensePolicy`) switches on the
    straight-through adaptation against a DP-SGD victim.
    """
    if threat.norm != "linf":
        raise ThreatModelError("targeted crafting needs the linf threat model")
    if not surrogate.second_order:
        bad = [str(layer) for layer in surrogate.layers if not layer.second_order]
        raise SecondOrderUnsupported(f"surrogate layers lack second-order support: {', '.join(bad)}")
    if dp_policy is not None and dp_policy.kind != "dpsgd":
        raise ValueError("straight-through adaptation only applies to a DP-SGD victim")
    if threat.max_poisons(len(train_set)) < 1:
        raise ThreatModelError("budget admits no poisons")
    adv = int(spec.adversarial_labels[0])
    idx = select_poison_candidates(train_set, threat, adv, rng)
    base = train_set.images[idx]
    labels = train_set.labels[idx]
    eps = threat.epsilon
    tgrad = target_gradient(surrogate, spec)
    step = eps / 10 if config.step_size is None else config.step_size

    def objective(d):
        if dp_policy is not None:
            return straight_through_alignment(
                surrogate, base + d, labels, tgrad, dp_policy.clip, dp_policy.sigma, rng
            )
        return alignment_value_and_grad(surrogate, base + d, labels, tgrad)

    initial = alignment_loss(surrogate, base, labels, tgrad)
    best_delta, best_loss, finals = np.zeros_like(base), initial, []
    if config.steps > 0 and eps > 0:
        best_loss = np.inf
        for r in range(max(1, config.restarts)):
            if r == 0:
                d = np.zeros_like(base)
            else:
                d = project_linf(rng.uniform(-eps, eps, size=base.shape), base, eps)
            for t in range(config.steps):
                _, g = objective(d)
                d = project_linf(d - config.step_at(step, t) * np.sign(g), base, eps)
            final = alignment_loss(surrogate, base + d, labels, tgrad)
            finals.append(final)
            if final < best_loss:
                best_loss, best_delta = final, d
    meta = {
        "kind": "targeted",
        "adversarial_label": adv,
        "initial_alignment": initial,
        "final_alignment": best_loss,
        "restart_losses": finals,
        "surrogate": model_fingerprint(surrogate),
        "straight_through_dp": dp_policy is not None,
    }
    return PoisonDelta(idx, best_delta, replace(threat, adversarial_label=adv), meta)


def make_surrogate(model_fn, train_set, train_config, rng):
    """Fresh model from ``model_fn()`` trained on clean data."""
    model = model_fn().init_params(rng)
    history = train(model, train_set, train_config, rng)
    return model, history


def make_adaptive_surrogate(model_fn, train_set, policy, train_config, rng):
    """Surrogate trained with the victim's defense active.

    ``policy=None`` or a policy of kind ``none`` gives the non-adaptive
    surrogate. DP-SGD is not trained into the surrogate; it is handled at
    crafting time (straight-through).
    """
    if policy is not None and policy.kind not in ("none", "dpsgd"):
        train_config = replace(train_config, defense=policy)
    return make_surrogate(model_fn, train_set, train_config, rng)
