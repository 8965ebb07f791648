"""Noise schedules, forward noising and the ancestral reverse step.

Timesteps are 1-based: ``alpha_bar(t)`` for ``t`` in ``1..T`` and
``alpha_bar(0) == 1`` so that ``x_0`` is noiseless. Arrays may carry any
number of leading batch dimensions; the latent axis is always last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule with reverse variance ``sigma_t^2 = beta_t``."""

    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t - 1])

    def check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.num_steps):
            raise ValueError(f"timestep {t} outside [{lo}, {self.num_steps}]")

    def to_dict(self) -> dict:
        return {"T": self.num_steps, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "kind": "linear"}

    @classmethod
    def from_dict(cls, record: dict) -> "NoiseSchedule":
        if record.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {record['kind']!r}")
        return make_schedule(int(record["T"]), float(record["beta_start"]),
                             float(record["beta_end"]))


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    sigmas = np.sqrt(betas)
    for arr in (betas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alpha_bars, sigmas)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"{what}: dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")


def forward_sample(x0, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t ~ q(x_t | x_0)`` using the supplied standard-normal ``noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape(x0, noise, "forward_sample")
    schedule.check_t(t)
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predicted_x0(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Tweedie-style clean estimate implied by a noise prediction."""
    ab = schedule.alpha_bar(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def posterior_mean(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    schedule.check_t(t)
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    return (np.asarray(x_t) - beta / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(1.0 - beta)


def step_gain(t: int, schedule: NoiseSchedule) -> float:
    """How far ``x_{t-1}`` moves per unit change of the noise prediction."""
    beta = schedule.beta(t)
    return beta / (np.sqrt(1.0 - schedule.alpha_bar(t)) * np.sqrt(1.0 - beta))


def reverse_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, noise) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; no stochastic term at ``t == 1``."""
    if t == 0:
        raise ValueError("cannot denoise from t=0")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape(x_t, eps_hat, "reverse_step")
    mean = posterior_mean(x_t, eps_hat, t, schedule)
    if t == 1:
        return mean
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape(x_t, noise, "reverse_step")
    return mean + schedule.sigma(t) * noise


def diffusion_loss(eps_true, eps_pred) -> float | np.ndarray:
    """Mean squared error over the latent axis (per batch element if batched)."""
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {eps_true.shape} vs {eps_pred.shape}")
    out = np.mean((eps_true - eps_pred) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


LDIFF_MODES = ("noise", "latent")


def branch_discrepancy(x_t, x_t_att, denoiser_clean, denoiser_att, t: int,
                       t_att: int | None = None, mode: str = "noise"):
    """Discrepancy between the clean and attacked branches at step ``t``.

    ``mode="noise"`` compares the two branches' noise predictions (each under
    its own conditions); ``mode="latent"`` compares the latents directly.
    Denoisers are handles exposing ``predict(x_t, t)``.
    """
    if t_att is not None and t_att != t:
        raise ValueError(f"branch timestep mismatch: {t} vs {t_att}")
    if mode == "latent":
        return diffusion_loss(x_t, x_t_att)
    if mode != "noise":
        raise ValueError(f"unknown discrepancy mode {mode!r}")
    return diffusion_loss(denoiser_clean.predict(x_t, t), denoiser_att.predict(x_t_att, t))
