"""Prompt conditioners: static (CoOp), global meta-net (CoCoOp) and
patch-attention (CoPL), each with a hand-derived backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericsError, Rng, as_tensor, relu, sample_gaussian, softmax

PARAM_GROUPS = ("V", "W_a", "U1", "c1", "U2", "c2")


@dataclass
class PromptSet:
    V: np.ndarray  # (M, d)

    def __post_init__(self):
        self.V = as_tensor(self.V)
        if self.V.ndim != 2 or self.V.shape[0] < 1:
            raise NumericsError("PromptSet needs at least one token")

    @property
    def M(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]


@dataclass
class MetaNet:
    U1: np.ndarray  # (h_m, d_in)
    c1: np.ndarray
    U2: np.ndarray  # (d, h_m)
    c2: np.ndarray

    @classmethod
    def zeros(cls, d_in: int, d: int, hidden: int, c2=None):
        c2 = np.zeros(d) if c2 is None else as_tensor(c2, (d,)).copy()
        return cls(np.zeros((hidden, d_in)), np.zeros(hidden), np.zeros((d, hidden)), c2)

    @property
    def d_in(self) -> int:
        return self.U1.shape[1]

    @property
    def hidden(self) -> int:
        return self.U1.shape[0]

    @property
    def d_out(self) -> int:
        return self.U2.shape[0]


@dataclass
class AlignmentParams:
    W_a: np.ndarray  # (2d,) acting on [s_p; v_i]


def default_meta_hidden(d: int) -> int:
    return max(d // 16, 4)


@dataclass
class Parameters:
    """The learnable state: prompts, meta-net and alignment vector."""

    prompts: PromptSet
    net: MetaNet
    align: AlignmentParams

    @classmethod
    def init(cls, rng: Rng, M: int = 4, d: int = 16, d_img: int = 16, hidden: int | None = None,
             prompt_std: float = 0.02):
        hidden = default_meta_hidden(d) if hidden is None else hidden
        V = sample_gaussian(rng, (M, d), 0.0, prompt_std)
        U1 = sample_gaussian(rng, (hidden, d_img), 0.0, 1.0 / np.sqrt(d_img))
        U2 = sample_gaussian(rng, (d, hidden), 0.0, 1.0 / np.sqrt(hidden))
        W_a = sample_gaussian(rng, 2 * d, 0.0, 1.0 / np.sqrt(2 * d))
        net = MetaNet(U1, np.zeros(hidden), U2, np.zeros(d))
        return cls(PromptSet(V), net, AlignmentParams(W_a))

    def groups(self) -> dict[str, np.ndarray]:
        n = self.net
        return {"V": self.prompts.V, "W_a": self.align.W_a,
                "U1": n.U1, "c1": n.c1, "U2": n.U2, "c2": n.c2}

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.groups().items()}

    def copy(self) -> "Parameters":
        g = {k: v.copy() for k, v in self.groups().items()}
        return Parameters(PromptSet(g["V"]), MetaNet(g["U1"], g["c1"], g["U2"], g["c2"]),
                          AlignmentParams(g["W_a"]))

    def dims(self) -> tuple[int, int, int, int]:
        return self.prompts.M, self.prompts.d, self.net.d_in, self.net.hidden


# meta-net

def meta_transform(net: MetaNet, inputs) -> tuple[np.ndarray, dict]:
    """Row-wise ``U2 relu(U1 x + c1) + c2``; accepts (P, d_in) or (d_in,)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != net.d_in:
        raise NumericsError(f"meta-net expects width {net.d_in}, got {x.shape[-1]}")
    pre = x @ net.U1.T + net.c1
    hid = relu(pre)
    return hid @ net.U2.T + net.c2, {"x": x, "pre": pre, "hid": hid}


def meta_backward(net: MetaNet, cache: dict, upstream: np.ndarray) -> dict[str, np.ndarray]:
    x, pre, hid = cache["x"], cache["pre"], cache["hid"]
    g = np.atleast_2d(upstream)
    h2, x2, pre2 = np.atleast_2d(hid), np.atleast_2d(x), np.atleast_2d(pre)
    dhid = g @ net.U2
    dpre = dhid * (pre2 > 0)
    return {
        "U2": g.T @ h2,
        "c2": g.sum(axis=0),
        "U1": dpre.T @ x2,
        "c1": dpre.sum(axis=0),
        "inputs": (dpre @ net.U1).reshape(x.shape),
    }


# attention pieces

def _split_wa(params: AlignmentParams, d: int) -> tuple[np.ndarray, np.ndarray]:
    W_a = np.asarray(params.W_a, dtype=np.float64)
    if W_a.shape != (2 * d,):
        raise NumericsError(f"W_a must have length {2 * d}")
    return W_a[:d], W_a[d:]


def score(s_p, v_i, params: AlignmentParams) -> float:
    s_p = np.asarray(s_p, dtype=np.float64)
    v_i = np.asarray(v_i, dtype=np.float64)
    if s_p.shape != v_i.shape:
        raise NumericsError("length mismatch")
    w_s, w_v = _split_wa(params, s_p.shape[0])
    return float(np.tanh(w_s @ s_p + w_v @ v_i))


def align(s_p, prompts: PromptSet, params: AlignmentParams) -> np.ndarray:
    scores = [score(s_p, v, params) for v in prompts.V]
    return softmax(np.array(scores))


def context(a_p, prompts: PromptSet) -> np.ndarray:
    a_p = np.asarray(a_p, dtype=np.float64)
    if a_p.shape != (prompts.M,):
        raise NumericsError("length mismatch")
    return a_p @ prompts.V


@dataclass
class ConditionerOutput:
    conditioned: np.ndarray  # (M, d)
    attention: np.ndarray | None = None  # (P, M)
    context: np.ndarray | None = None  # (P, d)
    cache: dict = field(default_factory=dict)


def condition_copl(patches, prompts: PromptSet, net: MetaNet, params: AlignmentParams,
                   aggregation: str = "sum") -> ConditionerOutput:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] < 1:
        raise NumericsError("no patches")
    if aggregation not in ("sum", "mean"):
        raise NumericsError(f"unknown patch aggregation {aggregation!r}")
    V = prompts.V
    if net.d_out != prompts.d:
        raise NumericsError("meta-net output width must equal token width")
    tokens, meta_cache = meta_transform(net, patches)  # conditional tokens, (P, d)
    w_s, w_v = _split_wa(params, prompts.d)
    E = np.tanh((tokens @ w_s)[:, None] + (V @ w_v)[None, :])  # (P, M)
    A = softmax(E)
    C = A @ V
    scale = 1.0 if aggregation == "sum" else 1.0 / patches.shape[0]
    offset = scale * C.sum(axis=0)
    cache = {"method": "copl", "meta": meta_cache, "tokens": tokens, "E": E, "A": A,
             "scale": scale}
    return ConditionerOutput(V + offset, A, C, cache)


def copl_backward(out: ConditionerOutput, prompts: PromptSet, net: MetaNet,
                  params: AlignmentParams, upstream: np.ndarray) -> dict[str, np.ndarray]:
    c = out.cache
    V, A, E, tokens = prompts.V, c["A"], c["E"], c["tokens"]
    w_s, w_v = _split_wa(params, prompts.d)
    G = np.asarray(upstream, dtype=np.float64)
    g_off = c["scale"] * G.sum(axis=0)  # every c_p receives this
    dV = G.copy()
    dV += A.sum(axis=0)[:, None] * g_off[None, :]  # through C = A V
    dA = np.broadcast_to(V @ g_off, A.shape)
    dE = A * (dA - (A * dA).sum(axis=1, keepdims=True))
    dz = dE * (1.0 - E * E)
    d_alpha = dz.sum(axis=1)  # (P,)
    d_beta = dz.sum(axis=0)  # (M,)
    dV += d_beta[:, None] * w_v[None, :]
    dW_a = np.concatenate([d_alpha @ tokens, d_beta @ V])
    dtokens = d_alpha[:, None] * w_s[None, :]
    grads = meta_backward(net, c["meta"], dtokens)
    return {"V": dV, "W_a": dW_a, "U1": grads["U1"], "c1": grads["c1"],
            "U2": grads["U2"], "c2": grads["c2"], "patches": grads["inputs"]}


def condition_cocoop(x, prompts: PromptSet, net: MetaNet) -> ConditionerOutput:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise NumericsError("global feature must be a vector")
    if net.d_out != prompts.d:
        raise NumericsError("meta-net output width must equal token width")
    offset, meta_cache = meta_transform(net, x)
    return ConditionerOutput(prompts.V + offset, cache={"method": "cocoop", "meta": meta_cache})


def cocoop_backward(out: ConditionerOutput, prompts: PromptSet, net: MetaNet,
                    upstream: np.ndarray) -> dict[str, np.ndarray]:
    G = np.asarray(upstream, dtype=np.float64)
    grads = meta_backward(net, out.cache["meta"], G.sum(axis=0))
    return {"V": G.copy(), "U1": grads["U1"], "c1": grads["c1"], "U2": grads["U2"],
            "c2": grads["c2"], "inputs": grads["inputs"]}


def condition_coop(prompts: PromptSet) -> ConditionerOutput:
    return ConditionerOutput(prompts.V.copy(), cache={"method": "coop"})


def coop_backward(upstream: np.ndarray) -> dict[str, np.ndarray]:
    return {"V": np.array(upstream, dtype=np.float64)}
