"""Seeded finite-difference sweep over every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conditioners as cond
from .classifier import PromptLearner
from .conditioners import AlignmentParams, MetaNet, Parameters, PromptSet
from .encoders import FrozenEncoders
from .numerics import GradCheckReport, Rng, grad_check, mix_seed, sample_gaussian

TOLERANCE = 1e-5
STEP = 1e-5


@dataclass
class SuiteResult:
    reports: list[tuple[str, GradCheckReport]]

    def worst_by_group(self) -> dict[str, tuple[float, str]]:
        worst: dict[str, tuple[float, str]] = {}
        for label, rep in self.reports:
            for name, err in zip(rep.names, rep.errors):
                if err >= worst.get(name, (-1.0, ""))[0]:
                    worst[name] = (err, label)
        return worst

    @property
    def passed(self) -> bool:
        return all(rep.passed for _, rep in self.reports)

    @property
    def worst(self) -> tuple[str, float]:
        label, name, err = max(((lab, *rep.worst) for lab, rep in self.reports),
                               key=lambda t: t[2])
        return f"{label}/{name}", err


def random_learner(seed: int, method: str = "copl", max_k: int = 3, max_m: int = 4,
                   max_p: int = 6, max_d: int = 8, gamma: float = 0.5):
    """A small random instance with non-degenerate attention."""
    rng = Rng(mix_seed(seed, 0x6C))
    K = 2 + int(rng.integers(max_k - 1, 1)[0])
    M = 1 + int(rng.integers(max_m, 1)[0])
    P = 1 + int(rng.integers(max_p, 1)[0])
    d, d_img, d_joint = (2 + int(x) for x in rng.integers(max_d - 1, 3))
    protos = sample_gaussian(rng, (K, d_img))
    enc = FrozenEncoders.build(seed, protos, M, d, d_img, d_joint, hidden=4 * d_joint)
    params = Parameters.init(rng, M, d, d_img, hidden=4, prompt_std=0.5)
    params.align.W_a[:] = sample_gaussian(rng, 2 * d, 0.0, 1.0)
    params.net.c1[:] = sample_gaussian(rng, params.net.hidden, 0.0, 0.5)
    params.net.c2[:] = sample_gaussian(rng, d, 0.0, 0.5)
    patches = sample_gaussian(rng, (P, d_img))
    label = int(rng.integers(K, 1)[0])
    return PromptLearner(method, params, enc, gamma), patches, label, list(range(K))


def check_learner(learner: PromptLearner, patches, label, class_ids, h=STEP, tol=TOLERANCE):
    learner.forward(patches, class_ids)
    grads = learner.backward(label)
    names = list(learner.trainable())
    groups = learner.params.groups()
    return grad_check(lambda: learner.loss(patches, label, class_ids),
                      [groups[n] for n in names], [grads[n] for n in names], h, tol, names)


def check_text_encoder(seed: int, h=STEP, tol=TOLERANCE) -> GradCheckReport:
    rng = Rng(mix_seed(seed, 0x7E))
    enc = FrozenEncoders.build(seed, sample_gaussian(rng, (2, 5)), 3, 5, 5, 6)
    t = sample_gaussian(rng, (4, 5))
    u = sample_gaussian(rng, 6)
    out, hid = enc.text.encode(t)
    grad = enc.text.backward(hid, u)
    return grad_check(lambda: float(u @ enc.text(t)), [t], [grad], h, tol, ["tokens"])


def check_meta_transform(seed: int, h=STEP, tol=TOLERANCE) -> GradCheckReport:
    rng = Rng(mix_seed(seed, 0x3E))
    net = MetaNet(sample_gaussian(rng, (4, 5)), sample_gaussian(rng, 4, 0.0, 0.5),
                  sample_gaussian(rng, (3, 4)), sample_gaussian(rng, 3))
    x = sample_gaussian(rng, (6, 5))
    u = sample_gaussian(rng, (6, 3))
    _, cache = cond.meta_transform(net, x)
    g = cond.meta_backward(net, cache, u)
    f = lambda: float((u * cond.meta_transform(net, x)[0]).sum())  # noqa: E731
    names = ["U1", "c1", "U2", "c2", "inputs"]
    params = [net.U1, net.c1, net.U2, net.c2, x]
    return grad_check(f, params, [g[n] for n in names], h, tol, names)


def check_copl_conditioner(seed: int, aggregation="sum", h=STEP, tol=TOLERANCE) -> GradCheckReport:
    rng = Rng(mix_seed(seed, 0xC0))
    M, d, d_img, P = 3, 4, 5, 5
    V = PromptSet(sample_gaussian(rng, (M, d)))
    net = MetaNet(sample_gaussian(rng, (4, d_img)), sample_gaussian(rng, 4, 0.0, 0.5),
                  sample_gaussian(rng, (d, 4)), sample_gaussian(rng, d))
    al = AlignmentParams(sample_gaussian(rng, 2 * d))
    patches = sample_gaussian(rng, (P, d_img))
    u = sample_gaussian(rng, (M, d))
    out = cond.condition_copl(patches, V, net, al, aggregation)
    g = cond.copl_backward(out, V, net, al, u)

    def f():
        return float((u * cond.condition_copl(patches, V, net, al, aggregation).conditioned).sum())
    names = ["V", "W_a", "U1", "c1", "U2", "c2", "patches"]
    params = [V.V, al.W_a, net.U1, net.c1, net.U2, net.c2, patches]
    return grad_check(f, params, [g[n] for n in names], h, tol, names)


def run_suite(n_instances: int = 20, tol: float = TOLERANCE, h: float = STEP) -> SuiteResult:
    reports = []
    for seed in range(n_instances):
        learner, patches, label, ids = random_learner(seed)
        reports.append((f"copl[{seed}]", check_learner(learner, patches, label, ids, h, tol)))
    for method in ("coop", "cocoop", "copl_global"):
        for seed in range(3):
            learner, patches, label, ids = random_learner(seed, method)
            reports.append((f"{method}[{seed}]", check_learner(learner, patches, label, ids, h, tol)))
    for seed in range(3):
        reports.append((f"encode_text[{seed}]", check_text_encoder(seed, h, tol)))
        reports.append((f"meta_transform[{seed}]", check_meta_transform(seed, h, tol)))
        reports.append((f"condition_copl_mean[{seed}]",
                        check_copl_conditioner(seed, "mean", h, tol)))
    return SuiteResult(reports)
