"""Noise predictors ``eps(x_t, t, R, C)`` and their gradients.

Two variants share one handle interface:

* ``ConditionalMixture`` -- the ground-truth data law, an isotropic Gaussian
  mixture whose component means shift linearly with the conditions. Its
  noise prediction is exact and so are its vector-Jacobian products.
* ``MLPDenoiser`` -- a two-hidden-layer tanh perceptron trained on samples of
  that law with hand-written backprop.

Everything broadcasts over leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json
import logging

import numpy as np
from scipy.special import logsumexp, softmax

from . import world
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

PARAMS_VERSION = 1


@dataclass(frozen=True)
class ConditionalMixture:
    """``x0 | R, C ~ sum_k w_k N(base_k + mean_map @ [R; C], s2 I)``."""

    weights: np.ndarray
    base_means: np.ndarray
    mean_map: np.ndarray
    s2: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture weights must lie on the simplex")
        if self.s2 <= 0:
            raise ValueError("component variance must be positive")
        if self.base_means.shape[0] != w.shape[0]:
            raise ValueError("one base mean per component")
        if self.mean_map.shape[0] != self.base_means.shape[1]:
            raise ValueError("mean_map rows must match latent dim")

    @property
    def dim(self) -> int:
        return self.base_means.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.mean_map.shape[1]

    def shift(self, R, C) -> np.ndarray:
        rc = np.concatenate([np.asarray(R, dtype=np.float64), np.asarray(C, dtype=np.float64)], axis=-1)
        if rc.shape[-1] != self.cond_dim:
            raise ValueError(f"conditions have dim {rc.shape[-1]}, mean_map expects {self.cond_dim}")
        return rc @ self.mean_map.T

    def to_dict(self) -> dict:
        return {"version": PARAMS_VERSION, "kind": "mixture", "weights": self.weights.tolist(),
                "base_means": self.base_means.tolist(), "mean_map": self.mean_map.tolist(), "s2": self.s2}

    @classmethod
    def from_dict(cls, rec: dict) -> "ConditionalMixture":
        if rec.get("version") != PARAMS_VERSION or rec.get("kind") != "mixture":
            raise ValueError("not a version-1 mixture record")
        return cls(np.asarray(rec["weights"], dtype=np.float64), np.asarray(rec["base_means"], dtype=np.float64),
                   np.asarray(rec["mean_map"], dtype=np.float64), float(rec["s2"]))

    def sample(self, R, C, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shift = self.shift(R, C)
        shape = shift.shape if n is None else (n,) + shift.shape
        k = rng.choice(len(self.weights), size=shape[:-1], p=self.weights)
        return shift + self.base_means[k] + np.sqrt(self.s2) * rng.standard_normal(shape)


def world_mixture(seed: int = 0, s2: float = 1e-4, n_modes: int = 4, spread: float = 1.5) -> ConditionalMixture:
    """Default law for the driving world.

    The scene block copies the physical condition; the appearance block holds
    ``n_modes`` weather-like modes that no condition controls.
    """
    rng = np.random.default_rng(seed)
    base = np.zeros((n_modes, world.D_LATENT))
    dirs = rng.standard_normal((n_modes, world.D_APP))
    base[:, world.APP_SLICE] = spread * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    weights = np.arange(n_modes, 0, -1, dtype=np.float64)
    weights /= weights.sum()
    mean_map = np.zeros((world.D_LATENT, world.D_COND + world.D_LATENT))
    mean_map[:world.D_COND, :world.D_COND] = np.eye(world.D_COND)
    return ConditionalMixture(weights, base, mean_map, s2)


def _responsibilities(mix: ConditionalMixture, y, ab: float):
    v = ab * mix.s2 + (1.0 - ab)
    diffs = y[..., None, :] - np.sqrt(ab) * mix.base_means
    logits = np.log(np.maximum(mix.weights, 1e-300)) - 0.5 * np.sum(diffs ** 2, axis=-1) / v
    if not np.all(np.isfinite(logits).any(axis=-1)):
        raise FloatingPointError("degenerate responsibilities")
    return softmax(logits, axis=-1), diffs, v, logits


def analytic_eps(x_t, t: int, R, C, mixture: ConditionalMixture, schedule: NoiseSchedule) -> np.ndarray:
    """Exact ``eps* = (x_t - sqrt(ab) E[x0|x_t]) / sqrt(1 - ab)``."""
    schedule.check_t(t)
    ab = schedule.alpha_bar(t)
    y = np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * mixture.shift(R, C)
    r, diffs, v, _ = _responsibilities(mixture, y, ab)
    return np.sqrt(1.0 - ab) / v * np.einsum("...k,...kd->...d", r, diffs)


def log_density(x_t, t: int, R, C, mixture: ConditionalMixture, schedule: NoiseSchedule):
    """``log p_t(x_t | R, C)`` of the noised mixture."""
    ab = schedule.alpha_bar(t)
    y = np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * mixture.shift(R, C)
    _, _, v, logits = _responsibilities(mixture, y, ab)
    return logsumexp(logits, axis=-1) - 0.5 * mixture.dim * np.log(2 * np.pi * v)


def analytic_vjp_x(x_t, t: int, R, C, mixture: ConditionalMixture, schedule: NoiseSchedule, u) -> np.ndarray:
    """``u^T d eps*/d x_t``; the Jacobian is symmetric."""
    ab = schedule.alpha_bar(t)
    y = np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * mixture.shift(R, C)
    r, _, v, _ = _responsibilities(mixture, y, ab)
    c = np.sqrt(1.0 - ab) / v
    bbar = r @ mixture.base_means
    cen = mixture.base_means - bbar[..., None, :]
    proj = np.einsum("...kd,...d->...k", cen, u)
    return c * (u - ab / v * np.einsum("...k,...kd->...d", r * proj, cen))


def analytic_vjp_cond(x_t, t: int, R, C, mixture: ConditionalMixture, schedule: NoiseSchedule, u) -> np.ndarray:
    """``u^T d eps*/d [R; C]``: conditions enter only through the mean shift."""
    g = analytic_vjp_x(x_t, t, R, C, mixture, schedule, u)
    return -np.sqrt(schedule.alpha_bar(t)) * (g @ mixture.mean_map)


# --- trainable perceptron -------------------------------------------------

def time_embedding(t, T: int, dim: int = 16) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    freqs = np.exp(-np.log(1000.0) * np.arange(dim // 2) / (dim // 2))
    ang = (t / T)[..., None] * 1000.0 * freqs / 10.0
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class DenoiserParams:
    """Weights of ``eps = W3 tanh(W2 tanh(W1 z + b1) + b2) + b3``, ``z = [x_t, temb(t), R, C]``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    d: int
    d_cond: int
    T: int
    temb_dim: int = 16
    final_loss: float | None = None
    history: list = field(default_factory=list)

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in ("W1", "b1", "W2", "b2", "W3", "b3")}

    def copy(self) -> "DenoiserParams":
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()}, history=list(self.history))

    def to_dict(self) -> dict:
        return {"version": PARAMS_VERSION, "kind": "mlp", "d": self.d, "d_cond": self.d_cond, "T": self.T,
                "temb_dim": self.temb_dim, "final_loss": self.final_loss, "history": self.history,
                "arrays": {k: v.tolist() for k, v in self.arrays().items()}}

    @classmethod
    def from_dict(cls, rec: dict) -> "DenoiserParams":
        if rec.get("version") != PARAMS_VERSION or rec.get("kind") != "mlp":
            raise ValueError("not a version-1 perceptron record")
        arr = {k: np.asarray(v, dtype=np.float64) for k, v in rec["arrays"].items()}
        return cls(**arr, d=int(rec["d"]), d_cond=int(rec["d_cond"]), T=int(rec["T"]),
                   temb_dim=int(rec["temb_dim"]), final_loss=rec["final_loss"], history=list(rec["history"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "DenoiserParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_params(d: int, d_cond: int, T: int, hidden: int = 128, seed: int = 0, temb_dim: int = 16) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    d_in = d + temb_dim + d_cond
    return DenoiserParams(
        W1=rng.standard_normal((hidden, d_in)) / np.sqrt(d_in), b1=np.zeros(hidden),
        W2=rng.standard_normal((hidden, hidden)) / np.sqrt(hidden), b2=np.zeros(hidden),
        W3=rng.standard_normal((d, hidden)) * 0.01 / np.sqrt(hidden), b3=np.zeros(d),
        d=d, d_cond=d_cond, T=T, temb_dim=temb_dim)


def _mlp_inputs(p: DenoiserParams, x, t, R, C):
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[:-1]
    temb = np.broadcast_to(time_embedding(t, p.T, p.temb_dim), batch + (p.temb_dim,))
    rc = np.concatenate([np.asarray(R, dtype=np.float64), np.asarray(C, dtype=np.float64)], axis=-1)
    rc = np.broadcast_to(rc, batch + rc.shape[-1:])
    if rc.shape[-1] != p.d_cond:
        raise ValueError("condition dim mismatch for trained denoiser")
    return np.concatenate([x, temb, rc], axis=-1)


def mlp_forward(p: DenoiserParams, x, t, R, C, keep: bool = False):
    z = _mlp_inputs(p, x, t, R, C)
    h1 = np.tanh(z @ p.W1.T + p.b1)
    h2 = np.tanh(h1 @ p.W2.T + p.b2)
    out = h2 @ p.W3.T + p.b3
    return (out, (z, h1, h2)) if keep else out


def mlp_vjp_inputs(p: DenoiserParams, x, t, R, C, u) -> np.ndarray:
    """Gradient of ``u . eps`` with respect to the full input vector ``z``."""
    _, (z, h1, h2) = mlp_forward(p, x, t, R, C, keep=True)
    g2 = (u @ p.W3) * (1 - h2 ** 2)
    g1 = (g2 @ p.W2) * (1 - h1 ** 2)
    return g1 @ p.W1


def _mlp_param_grads(p: DenoiserParams, z, h1, h2, gout):
    n = z.shape[0]
    g2 = (gout @ p.W3) * (1 - h2 ** 2)
    g1 = (g2 @ p.W2) * (1 - h1 ** 2)
    return {"W3": gout.T @ h2 / n, "b3": gout.mean(0), "W2": g2.T @ h1 / n, "b2": g2.mean(0),
            "W1": g1.T @ z / n, "b1": g1.mean(0)}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 256
    lr: float = 2e-3
    hidden: int = 128
    seed: int = 0
    checkpoint_every: int = 250


def _training_pool(dataset, mixture: ConditionalMixture):
    Rs, Cs = [], []
    for v in dataset:
        for m in range(v.num_frames):
            Rs.append(v.conditions[m])
            Cs.append(v.latents[m - 1] if m > 0 else v.context)
    return np.asarray(Rs), np.asarray(Cs)


def train_denoiser(dataset, schedule: NoiseSchedule, hyper: TrainConfig, mixture: ConditionalMixture,
                   init: DenoiserParams | None = None, eval_fn=None) -> DenoiserParams:
    """Fit the perceptron to the diffusion loss with Adam.

    Clean latents are drawn from ``mixture`` under each frame's conditions.
    ``eval_fn(params) -> float`` is recorded at every checkpoint.
    """
    if not dataset:
        raise ValueError("empty training set")
    Rs, Cs = _training_pool(dataset, mixture)
    rng = np.random.default_rng(hyper.seed)
    p = (init.copy() if init is not None else
         init_params(mixture.dim, Rs.shape[1] + Cs.shape[1], schedule.num_steps, hyper.hidden, hyper.seed))
    if hyper.steps == 0:
        return p
    m = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    s = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    b1, b2 = 0.9, 0.999
    loss = np.nan
    for step in range(1, hyper.steps + 1):
        idx = rng.integers(len(Rs), size=hyper.batch)
        R, C = Rs[idx], Cs[idx]
        x0 = mixture.sample(R, C, rng)
        t = rng.integers(1, schedule.num_steps + 1, size=hyper.batch)
        eps = rng.standard_normal(x0.shape)
        ab = schedule.alpha_bars[t - 1][:, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        out, (z, h1, h2) = mlp_forward(p, xt, t, R, C, keep=True)
        loss = float(np.mean((out - eps) ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step}")
        grads = _mlp_param_grads(p, z, h1, h2, 2 * (out - eps) / out.shape[1])
        for k, g in grads.items():
            m[k] = b1 * m[k] + (1 - b1) * g
            s[k] = b2 * s[k] + (1 - b2) * g * g
            mh = m[k] / (1 - b1 ** step)
            sh = s[k] / (1 - b2 ** step)
            getattr(p, k)[...] -= hyper.lr * mh / (np.sqrt(sh) + 1e-8)
        if step % hyper.checkpoint_every == 0 or step == hyper.steps:
            rec = {"step": step, "loss": loss}
            if eval_fn is not None:
                rec["eval"] = float(eval_fn(p))
            p.history.append(rec)
            log.debug("train step %d loss %.4f", step, loss)
    p.final_loss = loss
    return p


# --- handles --------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserHandle:
    """A noise predictor bound to one set of conditions ``(R, C)``."""

    schedule: NoiseSchedule
    R: np.ndarray
    C: np.ndarray
    mixture: ConditionalMixture | None = None
    params: DenoiserParams | None = None

    def __post_init__(self):
        if (self.mixture is None) == (self.params is None):
            raise ValueError("exactly one of mixture / params must be set")

    @property
    def variant(self) -> str:
        return "analytic" if self.mixture is not None else "trained"

    def with_conditions(self, R=None, C=None) -> "DenoiserHandle":
        return replace(self, R=self.R if R is None else R, C=self.C if C is None else C)

    def predict(self, x_t, t: int) -> np.ndarray:
        if self.mixture is not None:
            return analytic_eps(x_t, t, self.R, self.C, self.mixture, self.schedule)
        self.schedule.check_t(t)
        return mlp_forward(self.params, x_t, t, self.R, self.C)

    def vjp_x(self, x_t, t: int, u) -> np.ndarray:
        if self.mixture is not None:
            return analytic_vjp_x(x_t, t, self.R, self.C, self.mixture, self.schedule, u)
        return mlp_vjp_inputs(self.params, x_t, t, self.R, self.C, u)[..., :self.params.d]

    def vjp_R(self, x_t, t: int, u) -> np.ndarray:
        d_R = np.shape(self.R)[-1]
        if self.mixture is not None:
            return analytic_vjp_cond(x_t, t, self.R, self.C, self.mixture, self.schedule, u)[..., :d_R]
        p = self.params
        start = p.d + p.temb_dim
        return mlp_vjp_inputs(p, x_t, t, self.R, self.C, u)[..., start:start + d_R]


def predict_noise(handle: DenoiserHandle, x_t, t: int) -> np.ndarray:
    return handle.predict(x_t, t)


# --- scalar objectives and their gradients --------------------------------

class ScalarFn:
    """A scalar of the latent and of the handle's noise prediction.

    ``value_and_grads(handle, x, t)`` returns ``(value, d/dx direct, d/d eps)``.
    """

    def value_and_grads(self, handle: DenoiserHandle, x, t: int):
        raise NotImplementedError


class Constant(ScalarFn):
    def __init__(self, c: float = 0.0):
        self.c = c

    def value_and_grads(self, handle, x, t):
        z = np.zeros_like(np.asarray(x, dtype=np.float64))
        return np.full(z.shape[:-1], self.c), z, z


class Quadratic(ScalarFn):
    """``||x - a||^2 / d``."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)

    def value_and_grads(self, handle, x, t):
        r = np.asarray(x) - self.a
        d = r.shape[-1]
        return np.sum(r ** 2, axis=-1) / d, 2 * r / d, np.zeros_like(r)


class NoiseDiscrepancy(ScalarFn):
    """MSE between a fixed reference prediction and this handle's prediction."""

    def __init__(self, eps_ref):
        self.eps_ref = np.asarray(eps_ref, dtype=np.float64)

    def value_and_grads(self, handle, x, t):
        eps = handle.predict(x, t)
        r = eps - self.eps_ref
        d = r.shape[-1]
        return np.sum(r ** 2, axis=-1) / d, np.zeros_like(r), 2 * r / d


class LatentDiscrepancy(Quadratic):
    pass


def grad_latent(handle: DenoiserHandle, scalar_fn: ScalarFn, x_t, t: int) -> np.ndarray:
    _, gx, geps = scalar_fn.value_and_grads(handle, x_t, t)
    out = gx + (handle.vjp_x(x_t, t, geps) if np.any(geps) else 0.0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite latent gradient")
    return out


CHANNELS = ("map", "box", "both")


def channel_mask(channel: str, d_R: int = world.D_COND) -> np.ndarray:
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    mask = np.zeros(d_R)
    if channel in ("map", "both"):
        mask[world.MAP_SLICE] = 1.0
    if channel in ("box", "both"):
        mask[world.BOX_SLICE] = 1.0
    return mask


def grad_condition(handle: DenoiserHandle, scalar_fn: ScalarFn, x_t, t: int, channel: str = "both") -> np.ndarray:
    """Gradient with respect to the handle's ``R``, zeroed off ``channel``."""
    _, _, geps = scalar_fn.value_and_grads(handle, x_t, t)
    g = handle.vjp_R(x_t, t, geps) * channel_mask(channel, np.shape(handle.R)[-1])
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite condition gradient")
    return g
