"""Frozen stand-ins for the text encoder, class-name embeddings and the
global image feature.

None of these objects is ever updated. Gradients pass through
``TextEncoderStub.backward`` to its input tokens only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, Rng, as_tensor, mix_seed, sample_gaussian

_TEXT_STREAM = 0x7E47
_GLOBAL_STREAM = 0x610B
_CLASS_STREAM = 0xC1A5


def _frozen(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


def _fan_in_init(rng: Rng, rows: int, cols: int) -> np.ndarray:
    return sample_gaussian(rng, (rows, cols), 0.0, 1.0 / np.sqrt(cols))


@dataclass(frozen=True, eq=False)
class TextEncoderStub:
    """g(t) = W2 tanh(W1 flatten(t) + b1) + b2 over an (M+1) x d token matrix."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    n_prompts: int
    d: int
    seed: int = 0

    def __post_init__(self):
        _frozen(self.W1, self.b1, self.W2, self.b2)

    @classmethod
    def create(cls, seed: int, n_prompts: int, d: int, d_joint: int, hidden: int | None = None):
        hidden = 4 * d_joint if hidden is None else hidden
        rng = Rng(mix_seed(seed, _TEXT_STREAM, n_prompts, d, hidden, d_joint))
        fan = (n_prompts + 1) * d
        W1 = _fan_in_init(rng, hidden, fan)
        b1 = np.zeros(hidden)
        W2 = _fan_in_init(rng, d_joint, hidden)
        b2 = np.zeros(d_joint)
        return cls(W1, b1, W2, b2, n_prompts, d, seed)

    @classmethod
    def zeros(cls, n_prompts: int, d: int, d_joint: int, hidden: int, b2=None):
        b2 = np.zeros(d_joint) if b2 is None else as_tensor(b2, (d_joint,)).copy()
        return cls(
            np.zeros((hidden, (n_prompts + 1) * d)), np.zeros(hidden),
            np.zeros((d_joint, hidden)), b2, n_prompts, d,
        )

    @property
    def d_joint(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def _flatten(self, tokens) -> np.ndarray:
        t = np.asarray(tokens, dtype=np.float64)
        if t.shape[-2] != self.n_prompts + 1:
            raise NumericsError("prompt length mismatch")
        if t.shape[-1] != self.d:
            raise NumericsError("token width mismatch")
        return t.reshape(*t.shape[:-2], -1)

    def encode(self, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Encode one prompt (M+1, d) or a stack (K, M+1, d).

        Returns the joint-space features and the hidden activations needed by
        ``backward``.
        """
        flat = self._flatten(tokens)
        hid = np.tanh(flat @ self.W1.T + self.b1)
        return hid @ self.W2.T + self.b2, hid

    def __call__(self, tokens) -> np.ndarray:
        return self.encode(tokens)[0]

    def backward(self, hid: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient of ``upstream . g(t)`` w.r.t. the token matrix (or stack)."""
        dpre = (upstream @ self.W2) * (1.0 - hid * hid)
        dflat = dpre @ self.W1
        return dflat.reshape(*dflat.shape[:-1], self.n_prompts + 1, self.d)


@dataclass(frozen=True, eq=False)
class GlobalProjector:
    Wg: np.ndarray

    def __post_init__(self):
        _frozen(self.Wg)

    @classmethod
    def create(cls, seed: int, d_img: int, d_joint: int):
        rng = Rng(mix_seed(seed, _GLOBAL_STREAM, d_img, d_joint))
        return cls(_fan_in_init(rng, d_joint, d_img))


def encode_image_global(patches, proj: GlobalProjector) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise NumericsError("no patches")
    return proj.Wg @ patches.mean(axis=0)


def alignment_projection(text: TextEncoderStub, proj: GlobalProjector, ridge: float = 10.0) -> np.ndarray:
    """Frozen (d x d_img) map taking an image prototype to a class token.

    Chosen so that the linearised text path ``W2 W1_cls`` carries the token
    back near ``Wg mu``, which gives the stubs a usable zero-shot alignment
    the way a pretrained model would. Ridge-regularised so ill-conditioned
    directions do not saturate the tanh layer; the default leaves zero-shot
    accuracy well short of the ceiling so that prompt tuning has work to do.
    """
    A = text.W2 @ text.W1[:, -text.d:]  # (d_joint, d)
    lhs = A.T @ A + ridge * np.eye(text.d)
    return np.linalg.solve(lhs, A.T @ proj.Wg)


def class_token(prototype, projection: np.ndarray, noise_seed: int, sigma: float = 0.1) -> np.ndarray:
    rng = Rng(mix_seed(noise_seed, _CLASS_STREAM))
    mu = np.asarray(prototype, dtype=np.float64)
    return projection @ mu + sample_gaussian(rng, projection.shape[0], 0.0, sigma)


@dataclass(frozen=True, eq=False)
class ClassEmbeddingTable:
    embeddings: np.ndarray  # (K, d)

    def __post_init__(self):
        _frozen(self.embeddings)

    @classmethod
    def from_prototypes(cls, prototypes, projection: np.ndarray, seed: int, sigma: float = 0.1,
                        class_ids=None):
        prototypes = np.asarray(prototypes, dtype=np.float64)
        ids = range(len(prototypes)) if class_ids is None else class_ids
        rows = [class_token(mu, projection, mix_seed(seed, cid), sigma)
                for mu, cid in zip(prototypes, ids)]
        return cls(np.array(rows).reshape(len(prototypes), projection.shape[0]))

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def __getitem__(self, class_id: int) -> np.ndarray:
        return class_embedding(self, class_id)


def class_embedding(table: ClassEmbeddingTable, class_id: int) -> np.ndarray:
    if not 0 <= class_id < len(table):
        raise IndexError(f"class id {class_id} out of range for {len(table)} classes")
    return table.embeddings[class_id]


@dataclass(frozen=True, eq=False)
class FrozenEncoders:
    """Everything the learner may read but never write."""

    text: TextEncoderStub
    image: GlobalProjector
    projection: np.ndarray
    classes: ClassEmbeddingTable
    seed: int = 0
    class_sigma: float = 0.1

    def __post_init__(self):
        _frozen(self.projection)

    @classmethod
    def build(cls, seed: int, prototypes, n_prompts: int, d: int, d_img: int, d_joint: int,
              hidden: int | None = None, class_sigma: float = 0.1, table_seed: int = 0):
        text = TextEncoderStub.create(seed, n_prompts, d, d_joint, hidden)
        image = GlobalProjector.create(seed, d_img, d_joint)
        projection = alignment_projection(text, image)
        table = ClassEmbeddingTable.from_prototypes(
            prototypes, projection, mix_seed(seed, table_seed), class_sigma)
        return cls(text, image, projection, table, seed, class_sigma)

    def with_classes(self, prototypes, table_seed: int) -> "FrozenEncoders":
        """Same frozen encoders, class tokens for a different label set."""
        table = ClassEmbeddingTable.from_prototypes(
            prototypes, self.projection, mix_seed(self.seed, table_seed), self.class_sigma)
        return FrozenEncoders(self.text, self.image, self.projection, table, self.seed,
                              self.class_sigma)

    def fingerprint(self) -> bytes:
        arrays = (self.text.W1, self.text.b1, self.text.W2, self.text.b2,
                  self.image.Wg, self.projection, self.classes.embeddings)
        return b"".join(a.tobytes() for a in arrays)
