"""Two-stage guided attack on the conditional diffusion world model.

Each frame is generated twice in lockstep from the same noise draws: a clean
branch under ``(R, C)`` and an attacked branch under ``(R + delta, C_att)``.

Stage 1 (quality-preserving) adds ``alpha_A * grad L_diff`` to the attacked
noise prediction, which moves the latent down the discrepancy, while the
condition perturbation ``delta`` climbs it. Stage 1 ends after the first step
whose discrepancy falls below ``tau``. Stage 2 blends the prediction with a
target gradient: ``lambda * eps + (1 - lambda) * GUIDE_SIGN * g``.

Sign convention: a reverse step moves the latent by ``-step_gain * eps``, so
an injected ``GUIDE_SIGN * grad J`` with ``GUIDE_SIGN = -1`` ascends ``J``.
Stage 2 therefore raises the alignment (targeted) or the discrepancy
(untargeted); the stage-1 term keeps the literal ``+`` and descends.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import math

import numpy as np

from . import world
from .alignment import FrozenEmbedding, grad_similarity, similarity
from .denoiser import ConditionalMixture, DenoiserHandle, DenoiserParams, channel_mask
from .schedule import NoiseSchedule, diffusion_loss, forward_sample, reverse_step

GUIDE_SIGN = -1.0
STAGE_MODES = ("both", "stage1", "stage2")


@dataclass(frozen=True)
class AttackConfig:
    alpha_A: float = 0.1
    lambda_momentum: float = 0.9
    beta_fidelity: float = 0.6
    tau: float = 0.15
    mode: str = "targeted"
    channel: str = "both"
    delta_step: float = 0.01
    delta_budget: float = 1.5
    delta_init: float = 1.0
    objective_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ldiff_mode: str = "noise"
    stages: str = "both"
    delta_fidelity: bool = False

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.channel not in ("map", "box", "both"):
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.stages not in STAGE_MODES:
            raise ValueError(f"unknown stage selection {self.stages!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.delta_budget < 0 or self.delta_step < 0:
            raise ValueError("delta step and budget must be non-negative")
        if not 0.0 < self.lambda_momentum <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        if self.beta_fidelity < 0:
            raise ValueError("beta must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.alpha_A == 0 and self.lambda_momentum == 1 and self.delta_budget == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective_weights"] = list(self.objective_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "objective_weights" in d:
            d["objective_weights"] = tuple(d["objective_weights"])
        return cls(**d)


IDENTITY = AttackConfig(alpha_A=0.0, lambda_momentum=1.0, delta_budget=0.0)


def check_stage1_termination(l_diff: float, config: AttackConfig) -> bool:
    return l_diff < config.tau


# --- single-step building blocks ------------------------------------------

def ldiff_grads(h_clean: DenoiserHandle, h_att: DenoiserHandle, x, x_att, t: int, mode: str = "noise"):
    """Discrepancy value and its gradients w.r.t. the attacked latent and ``R + delta``."""
    if mode == "latent":
        val = diffusion_loss(x, x_att)
        d = np.shape(x_att)[-1]
        return val, 2 * (np.asarray(x_att) - x) / d, np.zeros(np.shape(h_att.R))
    eps_c = h_clean.predict(x, t)
    eps_a = h_att.predict(x_att, t)
    d = eps_a.shape[-1]
    u = 2 * (eps_a - eps_c) / d
    return diffusion_loss(eps_c, eps_a), h_att.vjp_x(x_att, t, u), h_att.vjp_R(x_att, t, u)


def stage1_eps(eps_att, grad_ldiff, config: AttackConfig):
    return eps_att + config.alpha_A * grad_ldiff


def stage2_targeted_eps(eps_att, grad_align, grad_ldiff, config: AttackConfig):
    lam = config.lambda_momentum
    g = grad_align - config.beta_fidelity * grad_ldiff
    return lam * eps_att + (1 - lam) * GUIDE_SIGN * g


def stage2_untargeted_eps(eps_att, grad_ldiff, config: AttackConfig):
    lam = config.lambda_momentum
    return lam * eps_att + (1 - lam) * GUIDE_SIGN * grad_ldiff


def stage1_step(x_att, x_clean, h_clean, h_att, config: AttackConfig, schedule: NoiseSchedule, t: int, noise):
    """One quality-preserving step; returns ``(x_{t-1}^att, L_diff before the step)``."""
    l, gx, _ = ldiff_grads(h_clean, h_att, x_clean, x_att, t, config.ldiff_mode)
    eps = stage1_eps(h_att.predict(x_att, t), gx, config)
    if not np.all(np.isfinite(eps)):
        raise FloatingPointError(f"non-finite guided prediction at t={t}")
    return reverse_step(x_att, eps, t, schedule, noise), l


def stage2_step_targeted(x_att, x_clean, target, h_clean, h_att, emb: FrozenEmbedding, config: AttackConfig,
                         schedule: NoiseSchedule, t: int, noise):
    _, gx, _ = ldiff_grads(h_clean, h_att, x_clean, x_att, t, config.ldiff_mode)
    eps = stage2_targeted_eps(h_att.predict(x_att, t), grad_similarity(emb, x_att, target), gx, config)
    if not np.all(np.isfinite(eps)):
        raise FloatingPointError(f"non-finite guided prediction at t={t}")
    return reverse_step(x_att, eps, t, schedule, noise)


def stage2_step_untargeted(x_att, x_clean, h_clean, h_att, config: AttackConfig, schedule: NoiseSchedule,
                           t: int, noise):
    _, gx, _ = ldiff_grads(h_clean, h_att, x_clean, x_att, t, config.ldiff_mode)
    eps = stage2_untargeted_eps(h_att.predict(x_att, t), gx, config)
    if not np.all(np.isfinite(eps)):
        raise FloatingPointError(f"non-finite guided prediction at t={t}")
    return reverse_step(x_att, eps, t, schedule, noise)


def project_l2(v: np.ndarray, radius: float) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if radius == 0:
        return np.zeros_like(v)
    return v * np.minimum(1.0, radius / np.maximum(n, 1e-300))


def update_delta(delta: dict, grad_R: np.ndarray, config: AttackConfig) -> dict:
    """Signed ascent on the selected channel(s), then per-channel L2 projection."""
    out = {}
    for name, sl in (("map", world.MAP_SLICE), ("box", world.BOX_SLICE)):
        d = delta[name]
        if config.channel in (name, "both"):
            d = d + config.delta_step * np.sign(grad_R[..., sl])
            d = project_l2(d, config.delta_budget)
        out[name] = d
    return out


def delta_vector(delta: dict) -> np.ndarray:
    return np.concatenate([delta["map"], delta["box"]], axis=-1)


def init_delta(config: AttackConfig, rng: np.random.Generator) -> dict:
    """Random sign pattern scaled to radius ``delta_init * budget`` per selected channel."""
    out = {}
    for name, dim in (("map", world.D_MAP), ("box", world.D_BOX)):
        if config.channel in (name, "both") and config.delta_budget > 0 and config.delta_init > 0:
            z = rng.choice((-1.0, 1.0), size=dim)
            out[name] = config.delta_init * config.delta_budget * z / np.sqrt(dim)
        else:
            out[name] = np.zeros(dim)
    return out


# --- full pipeline ----------------------------------------------------------

@dataclass
class AttackResult:
    clean_video: world.Video
    attacked_video: world.Video
    delta: dict
    telemetry: list[dict]
    stage_switch_step: list[int | None]
    target_edit: world.SceneEdit | None = None
    seed: int = 0

    def telemetry_rows(self) -> list[dict]:
        return self.telemetry


@dataclass
class _Model:
    model: ConditionalMixture | DenoiserParams
    schedule: NoiseSchedule

    def handle(self, R, C) -> DenoiserHandle:
        if isinstance(self.model, ConditionalMixture):
            return DenoiserHandle(self.schedule, R, C, mixture=self.model)
        return DenoiserHandle(self.schedule, R, C, params=self.model)


def _frame_targets(video: world.Video, edit: world.SceneEdit) -> np.ndarray:
    return np.stack([world.context_embed(s) for s in world.target_scenes(video.scenes, edit)])


def run_attack_batch(videos: list[world.Video], edits: list[world.SceneEdit | None], model, config: AttackConfig,
                     schedule: NoiseSchedule, emb: FrozenEmbedding, seeds: list[int]) -> list[AttackResult]:
    """Attack a batch of ground-truth videos; run ``b`` depends only on ``seeds[b]``.

    The ground-truth video supplies the per-frame physical conditions and the
    first frame; targets are the edit applied to each frame's condition scene.
    Both output videos carry the nominal conditions; the perturbation lives in
    ``AttackResult.delta``.
    """
    B = len(videos)
    if not (B == len(edits) == len(seeds)) or B == 0:
        raise ValueError("videos, edits and seeds must be non-empty and aligned")
    M = videos[0].num_frames
    if any(v.num_frames != M for v in videos):
        raise ValueError("all videos in a batch need the same frame count")
    if config.mode == "targeted" and any(e is None for e in edits):
        raise ValueError("targeted attack needs a target edit per video")
    T = schedule.num_steps
    d = world.D_LATENT
    net = _Model(model, schedule)
    noise_rngs = [np.random.default_rng(np.random.SeedSequence([s, 0])) for s in seeds]
    delta_rngs = [np.random.default_rng(np.random.SeedSequence([s, 1])) for s in seeds]
    lam_R, lam_L, lam_tar = config.objective_weights
    mask = channel_mask(config.channel)

    conds = np.stack([v.conditions for v in videos])          # (B, M, dR)
    has_target = all(e is not None for e in edits)
    targets = np.stack([_frame_targets(v, e) for v, e in zip(videos, edits)]) if has_target else None
    deltas = [init_delta(config, r) for r in delta_rngs]
    delta = {k: np.stack([dl[k] for dl in deltas]) for k in ("map", "box")}

    prev_c = np.stack([v.context for v in videos])
    clean_lat = np.zeros((B, M, d))
    att_lat = np.zeros((B, M, d))
    tel = {k: np.full((B, M, T), np.nan) for k in ("l_diff", "alignment", "eps_delta_norm", "delta_norm", "objective")}
    tel["stage"] = np.zeros((B, M, T), dtype=int)
    switch = np.full((B, M), -1, dtype=int)

    def draw():
        return np.stack([r.standard_normal(d) for r in noise_rngs])

    for m in range(M):
        R = conds[:, m]
        tgt = targets[:, m] if has_target else None
        # both chains start from the clean history: the attack acts only
        # through delta and the injected guidance
        x_c = forward_sample(prev_c, T, draw(), schedule)
        x_a = x_c.copy()
        h_c = net.handle(R, prev_c)
        in_stage1 = np.full(B, config.stages != "stage2")
        for t in range(T, 0, -1):
            R_att = R + delta_vector(delta)
            h_a = net.handle(R_att, prev_c)
            eps_a = h_a.predict(x_a, t)
            l, gx_l, gR_l = ldiff_grads(h_c, h_a, x_c, x_a, t, config.ldiff_mode)
            if tgt is not None:
                align = similarity(emb, x_a, tgt)
                gx_A = grad_similarity(emb, x_a, tgt)
            else:
                align = np.full(B, np.nan)
                gx_A = np.zeros_like(x_a)

            eps1 = stage1_eps(eps_a, gx_l, config)
            if config.stages == "stage1":
                eps2 = eps_a
            elif config.mode == "targeted":
                eps2 = stage2_targeted_eps(eps_a, gx_A, gx_l, config)
            else:
                eps2 = stage2_untargeted_eps(eps_a, gx_l, config)
            s1 = in_stage1[:, None]
            eps_t = np.where(s1, eps1, eps2)
            if not np.all(np.isfinite(eps_t)):
                raise FloatingPointError(f"non-finite guided prediction at frame {m}, t={t}")

            # condition perturbation: climb the stage objective
            if config.mode == "targeted" and tgt is not None:
                ab = schedule.alpha_bar(t)
                x0_hat = (x_a - np.sqrt(1 - ab) * eps_a) / np.sqrt(ab)
                gA0 = grad_similarity(emb, x0_hat, tgt)
                gR_A = h_a.vjp_R(x_a, t, -np.sqrt(1 - ab) / np.sqrt(ab) * gA0)
                gR2 = gR_A - config.beta_fidelity * gR_l if config.delta_fidelity else gR_A
            else:
                gR2 = gR_l
            gR = np.where(s1, gR_l, gR2) * mask
            if config.stages == "stage1":
                gR = np.where(s1, gR, 0.0)
            new_delta = update_delta(delta, gR, config)

            z = draw() if t > 1 else np.zeros((B, d))
            x_c = reverse_step(x_c, eps_c := h_c.predict(x_c, t), t, schedule, z)
            x_a = reverse_step(x_a, eps_t, t, schedule, z)

            k = T - t
            tel["stage"][:, m, k] = np.where(in_stage1, 1, 2)
            tel["l_diff"][:, m, k] = l
            tel["alignment"][:, m, k] = align
            tel["eps_delta_norm"][:, m, k] = np.linalg.norm(eps_t - eps_a, axis=-1)
            dn = np.linalg.norm(delta_vector(delta), axis=-1)
            tel["delta_norm"][:, m, k] = dn
            tel["objective"][:, m, k] = lam_R * dn ** 2 + lam_L * l - lam_tar * np.nan_to_num(align)

            ended = in_stage1 & (l < config.tau)
            switch[ended & (switch[:, m] < 0), m] = t
            in_stage1 = in_stage1 & ~ended
            delta = new_delta
        clean_lat[:, m] = x_c
        att_lat[:, m] = x_a
        prev_c = x_c

    results = []
    for b in range(B):
        clean = world.Video(clean_lat[b], [world.decode_frame(z) for z in clean_lat[b]], conds[b],
                            videos[b].context, videos[b].video_id)
        att = world.Video(att_lat[b], [world.decode_frame(z) for z in att_lat[b]], conds[b],
                          videos[b].context, videos[b].video_id)
        rows = []
        for m in range(M):
            for k in range(T):
                rows.append({"frame": m, "step": T - k, "stage": int(tel["stage"][b, m, k]),
                             **{key: float(tel[key][b, m, k]) for key in
                                ("l_diff", "alignment", "eps_delta_norm", "delta_norm", "objective")}})
        results.append(AttackResult(clean, att, {k: delta[k][b].copy() for k in delta}, rows,
                                    [None if s < 0 else int(s) for s in switch[b]], edits[b], seeds[b]))
    return results


def run_attack(video: world.Video, target_edit: world.SceneEdit | None, model, config: AttackConfig,
               schedule: NoiseSchedule, emb: FrozenEmbedding, seed: int) -> AttackResult:
    return run_attack_batch([video], [target_edit], model, config, schedule, emb, [seed])[0]
