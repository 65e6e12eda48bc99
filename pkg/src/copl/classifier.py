"""Prompt assembly, the temperature-scaled cosine posterior and the
end-to-end learner that chains every backward pass."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import conditioners as cond
from .conditioners import Parameters
from .encoders import FrozenEncoders, encode_image_global
from .numerics import NumericsError, softmax

METHODS = ("coop", "cocoop", "copl", "copl_global")
LOG_FLOOR = 1e-300


class LossFloorWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    gamma: float = 0.01
    class_ids: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        ids = tuple(int(c) for c in self.class_ids)
        if not ids or len(set(ids)) != len(ids):
            raise ValueError("class_ids must be non-empty and distinct")
        object.__setattr__(self, "class_ids", ids)


@dataclass
class Posterior:
    probs: np.ndarray
    logits: np.ndarray

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.logits))  # first maximum wins


def assemble_prompt(conditioned, cl_i) -> np.ndarray:
    conditioned = np.asarray(conditioned, dtype=np.float64)
    cl_i = np.asarray(cl_i, dtype=np.float64)
    if conditioned.ndim != 2 or cl_i.shape != (conditioned.shape[1],):
        raise NumericsError("class token width must match prompt width")
    return np.vstack([conditioned, cl_i[None, :]])


def _cosines(x: np.ndarray, text: np.ndarray):
    nx = np.linalg.norm(x)
    nt = np.linalg.norm(text, axis=1)
    if nx == 0 or np.any(nt == 0):
        raise NumericsError("degenerate feature")
    return np.clip(text @ x / (nt * nx), -1.0, 1.0), nx, nt


def predict(x, per_class_text, cfg: ClassifierConfig) -> Posterior:
    x = np.asarray(x, dtype=np.float64)
    text = np.atleast_2d(np.asarray(per_class_text, dtype=np.float64))
    cos, _, _ = _cosines(x, text)
    logits = cos / cfg.gamma
    return Posterior(softmax(logits), logits)


def cross_entropy(post: Posterior, y: int) -> float:
    if not 0 <= y < post.probs.shape[0]:
        raise IndexError(f"label {y} out of range")
    p = post.probs[y]
    if p < LOG_FLOOR:
        warnings.warn("probability of the true class underflowed; loss clamped", LossFloorWarning)
        p = LOG_FLOOR
    return float(-np.log(p))


def cross_entropy_backward(post: Posterior, y: int) -> np.ndarray:
    g = post.probs.copy()
    g[y] -= 1.0
    return g


@dataclass
class ForwardPass:
    posterior: Posterior
    conditioner: cond.ConditionerOutput
    tokens: np.ndarray  # (K, M+1, d)
    text: np.ndarray  # (K, d_joint)
    hidden: np.ndarray
    image: np.ndarray  # (d_joint,)
    cfg: ClassifierConfig


class PromptLearner:
    """A conditioner method bound to frozen encoders and learnable parameters."""

    def __init__(self, method: str, params: Parameters, encoders: FrozenEncoders,
                 gamma: float = 0.01, aggregation: str = "sum"):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        self.method = method
        self.params = params
        self.encoders = encoders
        self.gamma = gamma
        self.aggregation = aggregation
        self._last: ForwardPass | None = None

    def trainable(self) -> tuple[str, ...]:
        if self.method == "coop":
            return ("V",)
        if self.method == "cocoop":
            return ("V", "U1", "c1", "U2", "c2")
        return cond.PARAM_GROUPS

    def condition(self, patches) -> cond.ConditionerOutput:
        p = self.params
        patches = np.asarray(patches, dtype=np.float64)
        if self.method == "coop":
            return cond.condition_coop(p.prompts)
        if self.method == "cocoop":
            return cond.condition_cocoop(patches.mean(axis=0), p.prompts, p.net)
        if self.method == "copl_global":
            patches = np.broadcast_to(patches.mean(axis=0), patches.shape)
        return cond.condition_copl(patches, p.prompts, p.net, p.align, self.aggregation)

    def forward(self, patches, class_ids) -> ForwardPass:
        cfg = ClassifierConfig(self.gamma, tuple(class_ids))
        out = self.condition(patches)
        emb = self.encoders.classes.embeddings[list(cfg.class_ids)]
        K, (M, d) = len(cfg.class_ids), out.conditioned.shape
        tokens = np.empty((K, M + 1, d))
        tokens[:, :M] = out.conditioned
        tokens[:, M] = emb
        text, hidden = self.encoders.text.encode(tokens)
        image = encode_image_global(patches, self.encoders.image)
        fp = ForwardPass(predict(image, text, cfg), out, tokens, text, hidden, image, cfg)
        self._last = fp
        return fp

    def predict_label(self, patches, class_ids) -> int:
        fp = self.forward(patches, class_ids)
        return fp.cfg.class_ids[fp.posterior.argmax]

    def loss(self, patches, label: int, class_ids) -> float:
        fp = self.forward(patches, class_ids)
        return cross_entropy(fp.posterior, fp.cfg.class_ids.index(label))

    def backward(self, label: int, fp: ForwardPass | None = None) -> dict[str, np.ndarray]:
        """Gradients of the cross-entropy loss for every learnable group.

        Groups the method does not use come back as zeros.
        """
        fp = fp if fp is not None else self._last
        if fp is None:
            raise RuntimeError("forward not run")
        y = fp.cfg.class_ids.index(label)
        dlogits = cross_entropy_backward(fp.posterior, y)
        cos, nx, nt = _cosines(fp.image, fp.text)
        dcos = dlogits / self.gamma
        dtext = dcos[:, None] * (fp.image[None, :] / (nx * nt[:, None])
                                 - cos[:, None] * fp.text / (nt * nt)[:, None])
        dtokens = self.encoders.text.backward(fp.hidden, dtext)
        dcond = dtokens[:, :-1].sum(axis=0)
        return self._conditioner_backward(fp.conditioner, dcond)

    def _conditioner_backward(self, out: cond.ConditionerOutput, dcond: np.ndarray):
        p = self.params
        grads = p.zeros_like()
        if self.method == "coop":
            g = cond.coop_backward(dcond)
        elif self.method == "cocoop":
            g = cond.cocoop_backward(out, p.prompts, p.net, dcond)
        else:
            g = cond.copl_backward(out, p.prompts, p.net, p.align, dcond)
        for k in grads:
            if k in g:
                grads[k] = g[k]
        return grads


def full_backward(learner: PromptLearner, label: int) -> dict[str, np.ndarray]:
    return learner.backward(label)
