"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-8 train many victims and take most of an hour on one core. They
are marked ``slow``; deselect them with ``-m "not slow"``.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import fd_grad, rel_err

from augshield import attack as atk
from augshield import augment as aug
from augshield import autodiff as ad
from augshield import config as C
from augshield import datagen
from augshield import harness as H
from augshield.autodiff import Tape, Tensor
from augshield.model import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool2,
    Model,
    ReLU,
    alignment_value_and_grad,
    cross_entropy,
    forward,
    grad_params,
    mlp,
)
from augshield.trainer import DefensePolicy, TrainConfig, dp_sgd_step, per_example_grads, train

CONFIGS = Path(__file__).parent.parent / "configs"
LINES = []  # collected by conftest's terminal summary


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


# ----------------------------------------------------------------- 1: grads


def _layer_instance(kind, rng):
    if kind == "dense":
        return Model([Flatten(), Dense(12, 5)], (2, 2, 3))
    if kind == "relu":
        return Model([Flatten(), Dense(12, 6), ReLU(), Dense(6, 3)], (2, 2, 3))
    if kind == "conv":
        return Model([Conv2d(2, 3, 3)], (5, 5, 2))
    if kind == "pool":
        return Model([Conv2d(2, 2, 3), MaxPool2()], (6, 6, 2))
    raise ValueError(kind)


def _check_layer(kind, seed):
    rng = np.random.default_rng(seed)
    m = _layer_instance(kind, rng).init_params(rng)
    m.params += rng.normal(scale=0.2, size=m.n_params)
    x = rng.random((2,) + m.input_shape)
    probe = rng.normal(size=(2,) + m.output_shape)

    def value(xx, theta):
        saved = m.params.copy()
        m.set_params(theta)
        with ad.no_grad():
            v = float(np.sum(forward(m, xx).data * probe))
        m.set_params(saved)
        return v

    xt = Tensor(x, requires_grad=True)
    with Tape():
        out = ad.sum_(ad.mul(forward(m, xt), Tensor(probe)))
        gx, *gp = ad.grad(out, [xt] + m.param_tensors)
    gtheta = m.flatten_grads(gp)
    fx = fd_grad(lambda xx: value(xx, m.params), x, h=1e-5)
    ft = fd_grad(lambda th: value(x, th), m.params.copy(), h=1e-5)
    return max(
        rel_err(gx.data.reshape(-1), [fx[i] for i in range(x.size)]),
        rel_err(gtheta, [ft[i] for i in range(m.n_params)]),
    )


def _check_xent(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3.0, size=(4, 5))
    y = aug.sample_dirichlet(5, 1.0, rng, size=4)
    zt = Tensor(z, requires_grad=True)
    with Tape():
        (g,) = ad.grad(cross_entropy(zt, y), [zt])

    def f(zz):
        with ad.no_grad():
            return cross_entropy(zz, y).item()

    fd = fd_grad(f, z, h=1e-5)
    return rel_err(g.data.reshape(-1), [fd[i] for i in range(z.size)])


def _check_alignment(seed):
    rng = np.random.default_rng(seed)
    m = mlp((2, 2, 3), 3, (5,)).init_params(rng)
    x, y = rng.random((3, 2, 2, 3)), rng.integers(3, size=3)
    target = rng.normal(size=m.n_params)
    _, g = alignment_value_and_grad(m, x, y, target)

    def f(xx):
        with Tape():
            gp = grad_params(cross_entropy(forward(m, xx), y), m)
        return 1 - gp @ target / (np.linalg.norm(gp) * np.linalg.norm(target))

    coords = rng.choice(x.size, size=6, replace=False)
    fd = fd_grad(f, x, coords, h=1e-5)
    return rel_err([g.reshape(-1)[i] for i in coords], [fd[i] for i in coords])


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}
    for kind in ("dense", "relu", "conv", "pool"):
        worst[kind] = max(_check_layer(kind, s) for s in range(20))
    worst["xent"] = max(_check_xent(s) for s in range(20))
    worst["alignment"] = max(_check_alignment(s) for s in range(20))
    dt = time.perf_counter() - t0
    first = all(v < 1e-4 for k, v in worst.items() if k != "alignment")
    ok = first and worst["alignment"] < 1e-3 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"20 instances each; worst rel err {detail}; {dt:.1f}s")


# ---------------------------------------------------------- 2: augmentation


def test_criterion_2_augmentation():
    from scipy import stats

    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    problems = []
    x, y = rng.random((8, 32, 32, 3)), rng.integers(10, size=8)
    for policy in (
        aug.AugmentationPolicy("mixup", k=2),
        aug.AugmentationPolicy("mixup", k=4),
        aug.AugmentationPolicy("cutmix"),
        aug.AugmentationPolicy("cutout"),
        aug.AugmentationPolicy("standard"),
    ):
        for _ in range(50):
            out, soft = aug.apply_policy(policy, x, y, rng, 10)
            if out.min() < 0 or out.max() > 1:
                problems.append(f"{policy.kind} pixel range")
            if (soft < 0).any() or np.abs(soft.sum(axis=1) - 1).max() > 1e-9:
                problems.append(f"{policy.kind} simplex")
    yi, yj = np.eye(10)[0], np.eye(10)[1]
    for _ in range(500):
        img, lab, box = aug.cutmix_pair(x[0], yi, x[1], yj, rng)
        zeros = int((box.mask == 0).sum())
        if lab[0] != 1 - zeros / (32 * 32):
            problems.append("cutmix lambda_eff")
    lam = aug.sample_dirichlet(2, 1.0, rng, size=10_000)[:, 0]
    ks = stats.kstest(lam, "uniform")
    if ks.pvalue < 0.01:
        problems.append(f"mixup uniformity p={ks.pvalue:.3g}")
    clean = rng.random((32, 32, 3)) * 0.9 + 0.05
    for _ in range(200):
        img, _, box = aug.cutout(clean, 0, 8, rng)
        x0, x1, y0, y1 = box.bounds
        if (img == 0).sum() != (x1 - x0) * (y1 - y0) * 3:
            problems.append("cutout zero count")
    dt = time.perf_counter() - t0
    ok = not problems and dt < 60
    verdict(2, ok, f"KS p={ks.pvalue:.3f}; {len(set(problems))} problem kinds {sorted(set(problems))}; {dt:.1f}s")


# ------------------------------------------------------------- 3: audit


def test_criterion_3_constraint_audit():
    t0 = time.perf_counter()
    ds = datagen.gen_shapeset(7, 30, (16, 16, 3))
    tr, va = datagen.split(ds, 0.2, 7)
    make = lambda: mlp((16, 16, 3), 10, (8,))  # noqa: E731
    cfg = TrainConfig(epochs=3, batch_size=32, lr=0.05, defense=DefensePolicy("none"))
    sur, _ = atk.make_surrogate(make, tr, cfg, np.random.default_rng(0))
    eps = 16 / 255
    threat = atk.ThreatModel(epsilon=eps, budget=0.01)
    spec = atk.TargetSpec(va.images[3:4], [va.labels[3]], [(int(va.labels[3]) + 1) % 10])
    delta = atk.craft_targeted(sur, tr, spec, threat, np.random.default_rng(1), atk.CraftConfig())
    linf = max(float(np.abs(d).max()) for d in delta.deltas)
    poisoned = tr.images[delta.indices] + delta.deltas
    in_box = poisoned.min() >= 0 and poisoned.max() <= 1
    count_ok = len(delta) <= math.floor(0.01 * len(tr))

    clip = 1.0
    m = make().init_params(np.random.default_rng(2))
    hist = train(m, tr, TrainConfig(epochs=2, batch_size=32, defense=DefensePolicy("dpsgd", clip=clip, sigma=1.0)), np.random.default_rng(3))
    worst_post = hist.max_clipped_norm
    r = np.random.default_rng(4)
    for _ in range(10):
        idx = r.choice(len(tr), size=16, replace=False)
        per = per_example_grads(m, tr.images[idx], tr.labels[idx])
        post = dp_sgd_step(m.copy(), per, clip, 1.0, 0.05, r)
        scaled = per * np.minimum(1.0, clip / np.linalg.norm(per, axis=1))[:, None]
        worst_post = max(worst_post, float(post.max()), float(np.linalg.norm(scaled, axis=1).max()))
    dt = time.perf_counter() - t0
    ok = linf <= eps + 1e-12 and in_box and count_ok and worst_post <= clip + 1e-12 and dt < 120
    verdict(
        3,
        ok,
        f"linf {linf:.6f} <= {eps + 1e-12:.6f}; poisons {len(delta)} <= {math.floor(0.01 * len(tr))}; "
        f"max post-clip norm {worst_post:.6f} <= {clip}; {dt:.1f}s",
    )


# ------------------------------------------------------- 4-7: experiments

RUNS = {}


def _run(name):
    """Run a shipped config once per session; returns (reports, csv, seconds)."""
    if name not in RUNS:
        conf = C.load(CONFIGS / f"{name}.toml")
        t0 = time.perf_counter()
        reports = H.run_grid(conf, parallelism=1)
        RUNS[name] = (reports, H.csv_text(reports), time.perf_counter() - t0)
    return RUNS[name]


def _cell(reports, defense, attack):
    (r,) = [r for r in reports if r.defense == defense and r.attack == attack]
    return r


@pytest.mark.slow
def test_criterion_4_backdoor():
    reports, _, dt = _run("backdoor")
    base = _cell(reports, "none", "backdoor")
    cm = _cell(reports, "cutmix", "backdoor")
    b, c = base.mean_poison_success, cm.mean_poison_success
    ba, ca = base.mean_clean_val_acc, cm.mean_clean_val_acc
    ok = (
        not base.partial
        and not cm.partial
        and base.n_trials == 4
        and b >= 0.70
        and c <= b - 0.25
        and ca >= ba - 0.03
        and dt < 15 * 60
    )
    verdict(
        4,
        ok,
        f"baseline success {b:.3f} (>= 0.70), cutmix {c:.3f} (<= {b - 0.25:.3f}); "
        f"val acc baseline {ba:.4f}, cutmix {ca:.4f} (>= {ba - 0.03:.4f}); {dt:.0f}s",
    )


@pytest.mark.slow
def test_criterion_5_targeted():
    reports, _, dt = _run("targeted")
    ctrl = _cell(reports, "none", "none")
    base = _cell(reports, "none", "targeted")
    mix = _cell(reports, "mixup", "targeted")
    s, c, m = base.mean_poison_success, ctrl.mean_poison_success, mix.mean_poison_success
    ok = (
        not any(r.partial for r in reports)
        and base.n_trials >= 10
        and s >= 0.5
        and c <= 0.10
        and m <= s - 0.15
        and dt < 20 * 60
    )
    verdict(
        5,
        ok,
        f"flip rate {s:.2f} (>= 0.50), clean control {c:.2f} (<= 0.10), "
        f"mixup {m:.2f} (<= {s - 0.15:.2f}); {base.n_trials} trials; {dt:.0f}s",
    )


@pytest.mark.slow
def test_criterion_6_dpsgd():
    reports, _, dt = _run("dp")
    conf = C.load(CONFIGS / "dp.toml")
    sigmas = sorted(d.sigma for d, _ in conf.grid)
    lo = _cell(reports, f"dpsgd(sigma={sigmas[0]:g})", "targeted")
    hi = _cell(reports, f"dpsgd(sigma={sigmas[-1]:g})", "targeted")
    ds = lo.mean_poison_success - hi.mean_poison_success
    da = lo.mean_clean_val_acc - hi.mean_clean_val_acc
    ok = sigmas[0] == 0 and not lo.partial and not hi.partial and ds >= 0.20 and da >= 0.02 and dt < 20 * 60
    verdict(
        6,
        ok,
        f"sigma {sigmas[0]:g} -> {sigmas[-1]:g}: flip rate {lo.mean_poison_success:.2f} -> "
        f"{hi.mean_poison_success:.2f} (drop {ds:.2f} >= 0.20), val acc {lo.mean_clean_val_acc:.4f} -> "
        f"{hi.mean_clean_val_acc:.4f} (drop {da:.4f} >= 0.02); {dt:.0f}s",
    )


@pytest.mark.slow
def test_criterion_7_determinism():
    same = {}
    for name in ("backdoor", "targeted", "dp"):
        reports, text, _ = _run(name)
        conf = C.load(CONFIGS / f"{name}.toml")
        (seed,) = {int(row["master_seed"]) for row in _rows(text)}
        conf = dataclasses.replace(conf, schedule=dataclasses.replace(conf.schedule, master_seed=seed))
        for workers in (1, 4):
            replay = H.csv_text(H.run_grid(conf, parallelism=workers))
            same[(name, workers)] = replay.encode() == text.encode()
    ok = all(same.values())
    verdict(7, ok, "byte-identical CSV replays: " + ", ".join(f"{n}@{w}={v}" for (n, w), v in same.items()))


def _rows(text):
    import csv
    import io

    return list(csv.DictReader(io.StringIO(text)))


# ----------------------------------------------------------- 8: adaptive


def test_criterion_8_adaptive_plumbing():
    t0 = time.perf_counter()
    conf = C.load(CONFIGS / "adaptive.toml")
    assert conf.defense.kind == "mixup" and conf.attack.adaptive
    plain_conf = dataclasses.replace(conf, attack=dataclasses.replace(conf.attack, adaptive=False))
    train_set, _ = H.load_data(conf.dataset)
    adaptive = H.poison_trial(conf, 0)
    plain = H.poison_trial(plain_conf, 0)
    dist = float(np.linalg.norm(adaptive.surrogate.params - plain.surrogate.params))
    fa, fp = adaptive.delta.fingerprint(), plain.delta.fingerprint()
    audits = []
    for plan in (adaptive, plain):
        try:
            plan.delta.validate(train_set)
            audits.append(True)
        except atk.ThreatModelError:
            audits.append(False)
    dt = time.perf_counter() - t0
    ok = dist > 0 and fa != fp and all(audits) and dt < 600
    verdict(8, ok, f"surrogate distance {dist:.4f} > 0; bundles {fa[:12]} != {fp[:12]}; audits {audits}; {dt:.1f}s")
