"""Frozen random-feature embedding and the cosine alignment score ``A``.

``embed(x) = normalize(W2 tanh(W1 (g * x) + b1))`` with a fixed per-coordinate
input gain ``g``. Weights never change after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import world


def default_input_gain(map_gain: float = 2.0, box_gain: float = 1.0, app_gain: float = 0.5) -> np.ndarray:
    """Per-block input weights: semantics count more than appearance."""
    g = np.ones(world.D_LATENT)
    g[world.MAP_SLICE] = map_gain
    g[world.BOX_SLICE] = box_gain
    g[world.APP_SLICE] = app_gain
    return g


@dataclass(frozen=True)
class FrozenEmbedding:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    gain: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        for w in (self.W1, self.b1, self.W2, self.gain):
            w.setflags(write=False)
        if np.linalg.matrix_rank(self.W2) < self.W2.shape[0]:
            raise ValueError("output projection must have full row rank")
        if np.linalg.matrix_rank(self.W1) < min(self.W1.shape):
            raise ValueError("input projection must have full rank")

    @classmethod
    def from_seed(cls, seed: int = 0, d: int = world.D_LATENT, hidden: int = 96, d_feat: int = 64,
                  gain: np.ndarray | None = None) -> "FrozenEmbedding":
        rng = np.random.default_rng(seed)
        W1 = rng.standard_normal((hidden, d)) / np.sqrt(d)
        b1 = 0.5 * rng.standard_normal(hidden)
        W2 = rng.standard_normal((d_feat, hidden)) / np.sqrt(hidden)
        if gain is None:
            gain = default_input_gain() if d == world.D_LATENT else np.ones(d)
        return cls(W1, b1, W2, np.asarray(gain, dtype=np.float64), seed)

    @property
    def d_feat(self) -> int:
        return self.W2.shape[0]

    def _forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.W1.shape[1]:
            raise ValueError(f"embedding expects dim {self.W1.shape[1]}, got {x.shape[-1]}")
        h = np.tanh((x * self.gain) @ self.W1.T + self.b1)
        f = h @ self.W2.T
        return h, f, np.linalg.norm(f, axis=-1, keepdims=True)

    def embed(self, x) -> np.ndarray:
        _, f, n = self._forward(x)
        return f / n

    def vjp(self, x, u) -> np.ndarray:
        """``u^T d embed / d x``."""
        h, f, n = self._forward(x)
        e = f / n
        gf = (u - np.sum(u * e, axis=-1, keepdims=True) * e) / n
        gh = (gf @ self.W2) * (1 - h ** 2)
        return (gh @ self.W1) * self.gain

    def jvp(self, x, v) -> np.ndarray:
        h, f, n = self._forward(x)
        e = f / n
        df = (((v * self.gain) @ self.W1.T) * (1 - h ** 2)) @ self.W2.T
        return (df - np.sum(df * e, axis=-1, keepdims=True) * e) / n

    def save(self, path) -> None:
        np.savez(path, W1=self.W1, b1=self.b1, W2=self.W2, gain=self.gain,
                 seed=np.array(-1 if self.seed is None else self.seed))

    @classmethod
    def load(cls, path) -> "FrozenEmbedding":
        z = np.load(path)
        seed = int(z["seed"])
        return cls(z["W1"], z["b1"], z["W2"], z["gain"], None if seed < 0 else seed)


def min_pairwise_distance(emb: FrozenEmbedding, latents) -> float:
    """Smallest embedding distance between distinct inputs; zero means a collision."""
    z = np.unique(np.asarray(latents, dtype=np.float64), axis=0)
    if len(z) < 2:
        return np.inf
    e = emb.embed(z)
    g = e @ e.T
    d2 = np.clip(2.0 - 2.0 * g, 0.0, None)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def similarity(emb: FrozenEmbedding, x, target) -> np.ndarray | float:
    """Cosine similarity of the two embeddings, in ``[-1, 1]``."""
    s = np.sum(emb.embed(x) * emb.embed(target), axis=-1)
    s = np.clip(s, -1.0, 1.0)
    return float(s) if s.ndim == 0 else s


def grad_similarity(emb: FrozenEmbedding, x, target) -> np.ndarray:
    g = emb.vjp(x, emb.embed(target))
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite alignment gradient")
    return g


class Alignment:
    """``A(x, C*)`` packaged as a scalar objective for the denoiser gradients."""

    def __init__(self, emb: FrozenEmbedding, target):
        self.emb = emb
        self.target = np.asarray(target, dtype=np.float64)

    def value_and_grads(self, handle, x, t):
        v = similarity(self.emb, x, self.target)
        return v, grad_similarity(self.emb, x, self.target), np.zeros_like(np.asarray(x, dtype=np.float64))
