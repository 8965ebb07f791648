"""Fréchet quality analogs, the rule-based three-level judge and downstream probes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import world
from .alignment import FrozenEmbedding

PSD_TOL = 1e-10


# --- Fréchet distances ----------------------------------------------------

@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match the mean")
        if np.max(np.abs(cov - cov.T), initial=0.0) > PSD_TOL * max(1.0, np.abs(cov).max(initial=0.0)):
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if mean.size and np.linalg.eigvalsh(cov).min() < -PSD_TOL * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def fit(cls, features) -> "GaussianMoments":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError("need at least two feature rows")
        return cls(f.mean(axis=0), np.cov(f, rowvar=False))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``tr((Sa Sb)^1/2)`` is taken from the symmetric matrix ``Sa^1/2 Sb Sa^1/2``,
    which has the same eigenvalues.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch {a.dim} vs {b.dim}")
    ra = _psd_sqrt(a.cov)
    w = np.linalg.eigvalsh(0.5 * ((m := ra @ b.cov @ ra) + m.T))
    cross = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    d = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2 * cross)
    return max(d, 0.0)


def fid_analog(frames_real, frames_gen, emb: FrozenEmbedding) -> float:
    fr = np.asarray(frames_real, dtype=np.float64)
    fg = np.asarray(frames_gen, dtype=np.float64)
    need = emb.d_feat + 1
    if len(fr) < need or len(fg) < need:
        raise ValueError(f"need at least {need} frames per side, got {len(fr)} and {len(fg)}")
    return frechet_distance(GaussianMoments.fit(emb.embed(fr)), GaussianMoments.fit(emb.embed(fg)))


def video_features(videos: Sequence[world.Video], emb: FrozenEmbedding) -> np.ndarray:
    """Mean frame embedding next to the mean absolute frame-to-frame change."""
    out = []
    for v in videos:
        e = emb.embed(v.latents)
        diff = np.abs(np.diff(e, axis=0)).mean(axis=0) if len(e) > 1 else np.zeros(e.shape[1])
        out.append(np.concatenate([e.mean(axis=0), diff]))
    return np.asarray(out)


def fvd_analog(videos_real: Sequence[world.Video], videos_gen: Sequence[world.Video], emb: FrozenEmbedding) -> float:
    if len(videos_real) < 2 or len(videos_gen) < 2:
        raise ValueError("need at least two videos per side")
    lengths = {v.num_frames for v in list(videos_real) + list(videos_gen)}
    if len(lengths) != 1:
        raise ValueError(f"videos must share one frame count, got {sorted(lengths)}")
    return frechet_distance(GaussianMoments.fit(video_features(videos_real, emb)),
                            GaussianMoments.fit(video_features(videos_gen, emb)))


# --- judge ---------------------------------------------------------------

SCORE_SET = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
LEGAL_LIGHT_STEPS = {("green", "yellow"), ("yellow", "red"), ("red", "green")}


@dataclass(frozen=True)
class JudgeRules:
    bins: tuple[float, ...] = (0.05, 0.15, 0.3, 0.5, 0.75)
    rho_risk: float = 10.0
    brake_distance: float = 4.0
    lane_half_width: float = 0.5
    v_max: float = world.V_CAP
    teleport_margin: float = 0.3
    ego_tol: float = 0.3
    shape_tol: float = 0.3
    brake_step: float = 0.25
    diag_margin: float = 0.3
    bound_tol: float = 0.5
    no_risk_score: float = 0.2
    success_threshold: float = 0.5

    def __post_init__(self):
        if len(self.bins) != len(SCORE_SET) - 1 or list(self.bins) != sorted(self.bins):
            raise ValueError("bins must be five increasing thresholds")

    @property
    def risk(self) -> world.RiskRules:
        return world.RiskRules(self.rho_risk, self.brake_distance, self.lane_half_width, self.brake_step)

    def to_json(self) -> str:
        d = asdict(self)
        d["bins"] = list(self.bins)
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "JudgeRules":
        d = json.loads(text)
        d["bins"] = tuple(d["bins"])
        return cls(**d)


def quantize(fraction: float, bins: Sequence[float]) -> float:
    """Map a violation fraction onto the six-point score set."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    return SCORE_SET[int(np.searchsorted(np.asarray(bins), fraction, side="right"))]


@dataclass(frozen=True)
class LevelScores:
    sem: float
    log: float
    dec: float

    def __post_init__(self):
        for v in (self.sem, self.log, self.dec):
            if v not in SCORE_SET:
                raise ValueError(f"score {v} not in {SCORE_SET}")

    @property
    def overall(self) -> float:
        # exact on the 0.2 grid: work in integer fifths
        return round(self.sem * 5 + self.log * 5 + self.dec * 5) / 15

    def success(self, threshold: float = 0.5) -> bool:
        return round(self.sem * 5 + self.log * 5 + self.dec * 5) > threshold * 15


def _placement_ok(scene: world.Scene, obj: world.SceneObject) -> bool:
    cell = world.cell_type(scene.layout, *obj.position)
    if obj.cls in world.VEHICLES:
        return cell != world.OFF_ROAD
    if obj.cls == "pedestrian":
        return cell != world.LANE
    return cell == world.OFF_ROAD


def _same_shape(a: world.SceneObject, b: world.SceneObject, tol: float) -> bool:
    return (np.max(np.abs(np.subtract(a.size, b.size))) <= tol
            and np.max(np.abs(np.subtract(a.velocity, b.velocity))) <= tol)


def _near_edge(p, reach: float) -> bool:
    x, y = p
    return x <= reach or x >= world.GRID_W - reach or y <= reach or y >= world.GRID_H - reach


def transition_violations(prev: world.Scene, cur: world.Scene, rules: JudgeRules = JudgeRules()) -> list[str]:
    """Logical-level defects between two consecutive decoded frames."""
    out = []
    if prev.layout != cur.layout:
        out.append("layout_change")
    if prev.light != cur.light and (prev.light, cur.light) not in LEGAL_LIGHT_STEPS:
        out.append("light_jump")
    (px, py), (cx, cy) = prev.ego.position, cur.ego.position
    v = cur.ego.speed
    if (abs(cx - px) > rules.ego_tol or abs(cy - py - v) > rules.ego_tol
            or abs(v - prev.ego.speed) > rules.brake_step + rules.ego_tol):
        out.append("ego_jump")
    unmatched = list(cur.objects)
    for obj in prev.objects:
        pred = np.add(obj.position, obj.velocity)
        best, best_key = None, None
        for cand in unmatched:
            d = float(np.hypot(*(np.asarray(cand.position) - pred)))
            if cand.cls != obj.cls or d > rules.teleport_margin:
                continue
            # co-located twins: prefer the one whose shape and motion agree
            key = (not _same_shape(cand, obj, rules.shape_tol), d)
            if best_key is None or key < best_key:
                best, best_key = cand, key
        if best is None:
            exited = not world.in_bounds(*pred) or _near_edge(pred, rules.v_max)
            if not exited:
                out.append("vanish" if len(cur.objects) < len(prev.objects) else "teleport")
            continue
        unmatched.remove(best)
        if not _same_shape(best, obj, rules.shape_tol):
            out.append("shape_change")
    for obj in unmatched:
        if not _near_edge(obj.position, rules.v_max):
            out.append("pop_in")
    for obj in cur.objects:
        if not _placement_ok(cur, obj):
            out.append("placement")
            break
    return out


def frame_semantic_invalid(latent: np.ndarray, rules: JudgeRules = JudgeRules()) -> bool:
    return world.frame_diagnostics(latent, rules.diag_margin, rules.bound_tol).invalid


def decision_violations(scenes: Sequence[world.Scene], rules: JudgeRules = JudgeRules()) -> tuple[int, int]:
    """``(frames with risk ahead, of which the ego did not slow down)``."""
    risky = failed = 0
    for a, b in zip(scenes[:-1], scenes[1:]):
        if not world.risk_ahead(a, rules.risk):
            continue
        risky += 1
        if a.ego.speed > 0 and b.ego.speed >= a.ego.speed:
            failed += 1
    return risky, failed


def judge_video(video: world.Video, clean_reference: world.Video | None = None,
                rules: JudgeRules = JudgeRules()) -> LevelScores:
    """Score a decoded video on the semantic, logical and decision levels.

    ``clean_reference`` is accepted for interface symmetry; every rule here
    reads the judged video alone so that clean data is judged by the same
    standard as attacked data.
    """
    scenes = video.scenes
    sem_frac = float(np.mean([frame_semantic_invalid(z, rules) for z in video.latents]))
    if len(scenes) > 1:
        log_frac = float(np.mean([bool(transition_violations(a, b, rules)) for a, b in zip(scenes[:-1], scenes[1:])]))
    else:
        log_frac = 0.0
    risky, failed = decision_violations(scenes, rules)
    dec = rules.no_risk_score if risky == 0 else quantize(failed / risky, rules.bins)
    return LevelScores(quantize(sem_frac, rules.bins), quantize(log_frac, rules.bins), dec)


def asr(videos: Sequence[world.Video], references: Sequence[world.Video | None] | None = None,
        rules: JudgeRules = JudgeRules()) -> float:
    if not videos:
        raise ValueError("ASR of an empty batch")
    refs = references if references is not None else [None] * len(videos)
    return float(np.mean([judge_video(v, r, rules).success(rules.success_threshold) for v, r in zip(videos, refs)]))


# --- downstream probes ----------------------------------------------------

SLOT_CLASS = slice(1, 1 + len(world.CLASSES))
SLOT_POS = slice(1 + len(world.CLASSES), 3 + len(world.CLASSES))


@dataclass
class DetectorReport:
    f1_per_class: dict
    map_analog: float
    loc_error: float
    nds_analog: float


def _frames_and_labels(videos: Sequence[world.Video]):
    x = np.concatenate([v.latents for v in videos]) if videos else np.zeros((0, world.D_LATENT))
    y = np.concatenate([v.conditions[:, world.SLOTS_SLICE] for v in videos]) if videos else np.zeros((0, 0))
    return x, y


def _detect(pred_slots: np.ndarray):
    out = []
    for i in range(world.N_SLOTS):
        s = pred_slots[i * world.SLOT_WIDTH:(i + 1) * world.SLOT_WIDTH]
        if s[0] >= world.THETA_SLOT:
            out.append((int(np.argmax(s[SLOT_CLASS])), s[SLOT_POS]))
    return out


def _score_detections(pred, truth, match_dist: float = 1.0):
    """Greedy same-class matching; returns per-class (tp, fp, fn) and matched errors."""
    n = len(world.CLASSES)
    tp, fp, fn = np.zeros(n), np.zeros(n), np.zeros(n)
    errs = []
    for frame_pred, frame_true in zip(pred, truth):
        left = list(frame_true)
        for c, p in frame_pred:
            cands = [(float(np.linalg.norm(p - q)), j) for j, (cq, q) in enumerate(left) if cq == c]
            if cands and min(cands)[0] <= match_dist:
                d, j = min(cands)
                tp[c] += 1
                errs.append(d)
                left.pop(j)
            else:
                fp[c] += 1
        for c, _ in left:
            fn[c] += 1
    return tp, fp, fn, errs


def downstream_detector_eval(train_clean: Sequence[world.Video], augment: Sequence[world.Video] | None,
                             test: Sequence[world.Video], seed: int = 0, obs_noise: float = 0.3,
                             ridge: float = 1e-2) -> DetectorReport:
    """Fit a linear slot detector on noisy frame observations and test on clean frames.

    Labels are always the frame's own physical condition, so augmenting with
    frames that disagree with their conditions corrupts the supervision.
    """
    xs, ys = _frames_and_labels(train_clean)
    if augment:
        xa, ya = _frames_and_labels(augment)
        xs, ys = np.concatenate([xs, xa]), np.concatenate([ys, ya])
    if len(xs) < 2:
        raise ValueError("degenerate training set")
    rng = np.random.default_rng(seed)
    obs = xs + obs_noise * rng.standard_normal(xs.shape)
    feats = np.hstack([obs, np.ones((len(obs), 1))])
    W = np.linalg.solve(feats.T @ feats + ridge * len(feats) * np.eye(feats.shape[1]), feats.T @ ys)
    xt, yt = _frames_and_labels(test)
    if len(xt) == 0:
        raise ValueError("empty test set")
    test_rng = np.random.default_rng([seed, 1])
    pt = np.hstack([xt + obs_noise * test_rng.standard_normal(xt.shape), np.ones((len(xt), 1))]) @ W
    tp, fp, fn, errs = _score_detections([_detect(p) for p in pt], [_detect(y) for y in yt])
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), np.nan)
    present = ~np.isnan(f1)
    m = float(np.mean(f1[present])) if present.any() else 0.0
    loc = float(np.mean(errs)) if errs else 1.0
    return DetectorReport({c: float(f) for c, f in zip(world.CLASSES, f1)}, m, loc, 0.5 * m + 0.5 * (1 - min(loc, 1.0)))


@dataclass
class PlannerParams:
    weights: np.ndarray
    horizon: int
    history: list = field(default_factory=list)


def _stop_gap(scene: world.Scene) -> float:
    sl = world.stop_line(scene.layout)
    if sl is None or scene.light == "green":
        return 0.0
    gap = sl - scene.ego.position[1]
    return float(np.clip(1.0 - gap / 8.0, 0.0, 1.0)) if gap > 0 else 0.0


def _lead_gap(scene: world.Scene) -> float:
    ex, ey = scene.ego.position
    gaps = [o.position[1] - ey for o in scene.objects
            if o.cls != "sign" and abs(o.position[0] - ex) < 0.5 and o.position[1] > ey]
    return float(np.clip(1.0 - min(gaps) / 8.0, 0.0, 1.0)) if gaps else 0.0


def planner_features(scene: world.Scene) -> np.ndarray:
    light = np.zeros(len(world.LIGHTS))
    light[world.LIGHTS.index(scene.light)] = 1.0
    return np.concatenate([[1.0, scene.ego.speed, _stop_gap(scene), _lead_gap(scene)], light])


def _plan_targets(scenes, m, horizon):
    y0 = scenes[m].ego.position[1]
    return np.array([scenes[m + k].ego.position[1] - y0 for k in range(1, horizon + 1)])


def fit_planner(videos: Sequence[world.Video], horizon: int, ridge: float = 1e-3) -> PlannerParams:
    """Least-squares map from scene features to future ego displacements."""
    if not videos or horizon < 1 or horizon > videos[0].num_frames - 1:
        raise ValueError("need videos and 1 <= horizon <= M - 1")
    X, Y = [], []
    for v in videos:
        for m in range(v.num_frames - horizon):
            X.append(planner_features(v.scenes[m]))
            Y.append(_plan_targets(v.scenes, m, horizon))
    X, Y = np.asarray(X), np.asarray(Y)
    W = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
    return PlannerParams(W, horizon)


def _collides(p, scene: world.Scene) -> bool:
    for o in scene.objects:
        if o.cls == "sign":
            continue
        if abs(p[0] - o.position[0]) < 0.5 * (o.size[0] + 1.0) and abs(p[1] - o.position[1]) < 0.5 * (o.size[1] + 2.0):
            return True
    return False


def open_loop_plan_eval(videos: Sequence[world.Video], planner: PlannerParams, horizon: int) -> tuple[float, float]:
    """Mean L2 to each video's own ego track and fraction of planned points inside objects."""
    if horizon == 0:
        return 0.0, 0.0
    if horizon > planner.horizon or any(horizon > v.num_frames - 1 for v in videos):
        raise ValueError("horizon too long")
    l2, hits, n = [], 0, 0
    for v in videos:
        for m in range(v.num_frames - horizon):
            s = v.scenes[m]
            pred = (planner_features(s) @ planner.weights)[:horizon]
            true = _plan_targets(v.scenes, m, horizon)
            l2.append(np.mean(np.abs(pred - true)))
            ex, ey = s.ego.position
            for k in range(horizon):
                n += 1
                hits += _collides((ex, ey + pred[k]), v.scenes[m + k + 1])
    return float(np.mean(l2)) if l2 else 0.0, hits / n if n else 0.0
