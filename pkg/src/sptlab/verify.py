"""Invariant checks run by ``sptlab verify``.

Each check returns a ``CheckResult``; none of them needs the datasets, so
the suite can run on a fresh install. When real test images are supplied
the structure and containment checks use them instead of synthetic ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import spt
from .attacks import PerturbationConfig, fgsm, pgd
from .data import one_hot
from .evaluation import check_structure_preserved
from .gradcheck import numerical_gradient, relative_error
from .models import build, checkpoint_bytes


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _op_error(fn: Callable, inputs: list[np.ndarray], tol: float) -> tuple[bool, float]:
    """Largest relative error over all inputs of a scalar-valued ``fn``."""
    tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    with ad.Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [ad.Tensor(v if j == i else inputs[j]) for j in range(len(inputs))]
            return fn(*args).item()
        num = numerical_gradient(f, x)
        worst = max(worst, relative_error(tensors[i].grad, num))
    return worst < tol, worst


def check_gradients(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    u = lambda *s: rng.uniform(0.05, 0.95, s)  # noqa: E731
    proj = r((2, 3, 4, 4))
    onehot = one_hot(np.array([1, 3]), 5)
    elementwise = 1e-6
    network = 1e-4
    cases = [
        ("add", lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))), [r((3, 4)), r((4,))], elementwise),
        ("mul", lambda a, b: ad.sum_(ad.mul(a, b)), [r((3, 4)), r((3, 1))], elementwise),
        ("relu", lambda a: ad.sum_(ad.mul(ad.relu(a), a)), [r((20,)) + 0.5], elementwise),
        ("sigmoid", lambda a: ad.sum_(ad.sigmoid(a)), [r((20,)) * 3], elementwise),
        ("power", lambda a: ad.sum_(ad.add(ad.power(a, 0.4), ad.power(a, 2.5))), [u(20)], elementwise),
        ("mean", lambda a: ad.mean(ad.mul(a, a)), [r((4, 5))], elementwise),
        ("affine", lambda x, w, b: ad.sum_(ad.sigmoid(ad.affine(x, w, b))),
         [r((3, 6)), r((6, 4)), r((4,))], network),
        ("conv2d", lambda x, k, b: ad.sum_(ad.mul(ad.conv2d(x, k, b), ad.Tensor(proj))),
         [r((2, 2, 4, 4)), r((3, 2, 3, 3)), r((3,))], network),
        ("maxpool2d", lambda x: ad.sum_(ad.mul(ad.maxpool2d(x, 2), ad.maxpool2d(x, 2))),
         [r((1, 2, 5, 5))], network),
        ("softmax_cross_entropy", lambda z: ad.softmax_cross_entropy(z, onehot), [r((2, 5))], network),
    ]
    results = []
    for name, fn, inputs, tol in cases:
        ok, err = _op_error(fn, inputs, tol)
        results.append(CheckResult(f"gradient {name}", ok, f"relative error {err:.2e} (< {tol:g})"))

    target = build("C_p", seed=seed)
    images = u(4, 1, 28, 28)
    labels = one_hot(np.arange(4))
    for alpha, mode in ((0.0, "untargeted"), (0.6, "untargeted"), (0.6, "targeted")):
        params = spt.init_params(seed, alpha=alpha)
        cfg = spt.SptTrainConfig(mode=mode, target_label=7 if mode == "targeted" else None)
        _, grad = spt.objective_and_grad(target, images, labels, params, cfg)
        num = numerical_gradient(
            lambda w: spt.objective_value(target, images, labels, replace(params, weights=w), cfg),
            params.weights)
        err = relative_error(grad, num)
        results.append(CheckResult(f"gradient spt objective ({mode}, alpha={alpha})",
                                   err < network, f"relative error {err:.2e} over 11 weights"))
    return results


def check_structure(images: np.ndarray, seed: int = 0) -> list[CheckResult]:
    target = build("C_p", seed=seed)
    params = spt.init_params(seed)
    out = spt.transform(params, images)
    check = check_structure_preserved(images, out)
    batch = images[:64]
    adv = fgsm(target, batch, one_hot(np.zeros(len(batch), dtype=int)), PerturbationConfig(0.1, 0.1, 1, False))
    neg = check_structure_preserved(batch, adv)
    return [
        CheckResult("structure preserved by spt", check.passed and check.violations == 0,
                    f"{check.violations} violations over {len(images)} images"),
        CheckResult("structure broken by fgsm (negative control)", neg.violations > 0,
                    f"{neg.violations} violations over {len(batch)} images"),
    ]


def check_containment(images: np.ndarray, seed: int = 0) -> list[CheckResult]:
    target = build("C_p", seed=seed)
    batch = images[:32]
    onehot = one_hot(np.arange(len(batch)) % 10)
    results = []
    for name, fn, cfg in (("fgsm", fgsm, PerturbationConfig(0.3, 0.3, 1, False)),
                          ("pgd", pgd, PerturbationConfig(0.3, 0.05, 5, True, seed))):
        adv = fn(target, batch, onehot, cfg)
        dist = float(np.abs(adv - batch).max())
        ok = dist <= cfg.epsilon + 1e-12 and adv.min() >= 0 and adv.max() <= 1
        results.append(CheckResult(f"{name} stays in the eps-ball and [0, 1]", bool(ok),
                                   f"max |delta| = {dist:.6f}, range [{adv.min():.3f}, {adv.max():.3f}]"))
    return results


def check_frozen_target(images: np.ndarray, labels, seed: int = 0) -> list[CheckResult]:
    from .data import Dataset

    target = build("C_p", seed=seed)
    before = checkpoint_bytes(target)
    ds = Dataset("synthetic", "train", images[:128], np.asarray(labels)[:128])
    params0 = spt.init_params(seed)
    trained, trace = spt.train_spt(target, ds, params0, spt.SptTrainConfig(learning_rate=1e-2))
    frozen = checkpoint_bytes(target) == before
    changed = int(np.sum(trained.weights != params0.weights))
    return [
        CheckResult("target frozen during spt training", frozen, "checkpoint bytes unchanged" if frozen
                    else "target parameters changed"),
        CheckResult("spt updates exactly 11 scalars", trace.updated_scalars == 11 and changed == 11,
                    f"gradient size {trace.updated_scalars}, {changed} weights moved"),
    ]


def check_determinism(images: np.ndarray, labels, seed: int = 0) -> list[CheckResult]:
    from .data import Dataset
    from .models import train_classifier

    ds = Dataset("synthetic", "train", images[:64], np.asarray(labels)[:64])
    a = checkpoint_bytes(train_classifier(build("C_a3", seed), ds, epochs=1, seed=seed))
    b = checkpoint_bytes(train_classifier(build("C_a3", seed), ds, epochs=1, seed=seed))
    target = build("C_p", seed=seed)
    p1, _ = spt.train_spt(target, ds, spt.init_params(seed))
    p2, _ = spt.train_spt(target, ds, spt.init_params(seed))
    return [
        CheckResult("classifier training deterministic", a == b, "checkpoint bytes equal" if a == b
                    else "checkpoint bytes differ"),
        CheckResult("spt training deterministic", spt.params_to_text(p1) == spt.params_to_text(p2),
                    "parameter files equal"),
    ]


def run_all(images: np.ndarray | None = None, labels=None, seed: int = 0) -> list[CheckResult]:
    if images is None:
        rng = np.random.default_rng(seed)
        # coarse gray levels so several pixels share each level
        images = np.round(rng.uniform(0, 1, (256, 1, 28, 28)) * 16) / 16
        labels = rng.integers(0, 10, len(images))
    results = check_gradients(seed)
    results += check_structure(images, seed)
    results += check_containment(images, seed)
    results += check_frozen_target(images, labels, seed)
    results += check_determinism(images, labels, seed)
    return results
