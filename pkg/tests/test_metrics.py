import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import inv, sqrtm

from wmattack import world
from wmattack.metrics import (SCORE_SET, GaussianMoments, JudgeRules, LevelScores, asr, decision_violations,
                              downstream_detector_eval, fid_analog, fit_planner, frechet_distance, fvd_analog,
                              judge_video, open_loop_plan_eval, quantize, transition_violations)
from wmattack.world import Ego, Scene, SceneObject


def random_moments(rng, d):
    a = rng.standard_normal((d, d))
    return GaussianMoments(rng.standard_normal(d), a @ a.T / d + 0.2 * np.eye(d))


def test_frechet_matches_transport_cost(rng):
    # Monte Carlo cost of the optimal linear transport map, built independently with sqrtm
    for _ in range(10):
        a, b = random_moments(rng, 3), random_moments(rng, 3)
        ra = np.real(sqrtm(a.cov))
        ria = inv(ra)
        A = ria @ np.real(sqrtm(ra @ b.cov @ ra)) @ ria
        x = rng.multivariate_normal(a.mean, a.cov, 200_000)
        tx = b.mean + (x - a.mean) @ A.T
        mc = np.mean(np.sum((x - tx) ** 2, axis=1))
        assert mc == pytest.approx(frechet_distance(a, b), rel=0.02)


def test_frechet_one_dimensional_sorted_coupling(rng):
    a = GaussianMoments(np.array([0.3]), np.array([[2.0]]))
    b = GaussianMoments(np.array([-1.0]), np.array([[0.5]]))
    x = np.sort(rng.normal(0.3, np.sqrt(2.0), 200_000))
    y = np.sort(rng.normal(-1.0, np.sqrt(0.5), 200_000))
    assert np.mean((x - y) ** 2) == pytest.approx(frechet_distance(a, b), rel=0.02)
    assert frechet_distance(a, b) == pytest.approx(1.3 ** 2 + (np.sqrt(2.0) - np.sqrt(0.5)) ** 2)


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_frechet_properties(seed, d):
    rng = np.random.default_rng(seed)
    a, b = random_moments(rng, d), random_moments(rng, d)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-8, abs=1e-10)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)


def test_moments_validation():
    with pytest.raises(ValueError):
        GaussianMoments(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianMoments(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        frechet_distance(GaussianMoments(np.zeros(1), np.eye(1)), GaussianMoments(np.zeros(2), np.eye(2)))


def test_fid_and_fvd_analogs(emb, rng):
    vids = world.rollout_dataset(20, 4, 9)
    frames = np.concatenate([v.latents for v in vids])
    assert fid_analog(frames, frames, emb) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        fid_analog(frames[:10], frames[:10], emb)
    assert fvd_analog(vids, vids, emb) == pytest.approx(0.0, abs=1e-8)
    shuffled = [world.Video(v.latents[rng.permutation(4)], v.scenes, v.conditions, v.context) for v in vids]
    assert fvd_analog(vids, shuffled, emb) > 0
    with pytest.raises(ValueError):
        fvd_analog(vids[:1], vids[:1], emb)


def test_quantize_and_scores():
    bins = JudgeRules().bins
    assert [quantize(f, bins) for f in (0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 1.0)] == [0.0, 0.2, 0.2, 0.4, 0.6, 0.8, 1.0]
    with pytest.raises(ValueError):
        quantize(1.5, bins)
    assert LevelScores(0.6, 0.6, 0.4).success()
    assert not LevelScores(0.6, 0.4, 0.4).success()
    assert not LevelScores(1.0, 0.4, 0.0).success()
    assert LevelScores(1.0, 0.6, 0.0).overall == pytest.approx(1.6 / 3)
    with pytest.raises(ValueError):
        LevelScores(0.3, 0.0, 0.0)


@given(st.sampled_from(SCORE_SET), st.sampled_from(SCORE_SET), st.sampled_from(SCORE_SET))
def test_success_is_exact_threshold(a, b, c):
    s = LevelScores(a, b, c)
    assert s.success() == (round(5 * (a + b + c)) > 7.5)
    assert s.overall in {k / 15 for k in range(16)}


def test_rules_round_trip():
    r = JudgeRules(rho_risk=7.0)
    assert JudgeRules.from_json(r.to_json()) == r
    with pytest.raises(ValueError):
        JudgeRules(bins=(0.1, 0.05, 0.2, 0.3, 0.4))


def violator(video_id=0):
    """Every frame ambiguous, every step a layout jump, red light never braked for."""
    scenes = []
    for m in range(6):
        layout = (1, 3)[m % 2]
        scenes.append(Scene(layout, "red", Ego((world.ego_lane_x(layout), 4.0 + m), (0.0, 1.0))))
    lat = np.stack([world.encode_frame(s) for s in scenes])
    lat[:, world.SLOTS_SLICE.start] = world.THETA_SLOT - 0.1
    assert [world.decode_frame(z) for z in lat] == scenes
    return world.Video(lat, scenes, np.stack([world.encode_condition(s) for s in scenes]),
                       world.context_embed(scenes[0]), video_id)


def test_judge_calibration():
    clean = world.rollout_dataset(200, 8, 4)
    assert asr(clean) == 0.0
    assert all(judge_video(v).sem == judge_video(v).log == 0.0 for v in clean)
    bad = [violator(i) for i in range(5)]
    assert [judge_video(v) for v in bad] == [LevelScores(1.0, 1.0, 1.0)] * 5
    assert asr(bad) == 1.0
    clean6 = world.rollout_dataset(7, 6, 4)
    assert asr(bad[:3] + clean6) == 3 / 10


def test_transition_rules():
    x = world.ego_lane_x(1)
    ego = Ego((x, 2.0), (0.0, 1.0))
    nxt = Ego((x, 3.0), (0.0, 1.0))
    car = SceneObject("car", (x, 10.0), None, (0.0, 1.0))
    a = Scene(1, "green", ego, (car,))
    assert transition_violations(a, Scene(1, "yellow", nxt, (SceneObject("car", (x, 11.0), None, (0.0, 1.0)),))) == []
    assert "light_jump" in transition_violations(a, Scene(1, "red", nxt, (SceneObject("car", (x, 11.0), None, (0.0, 1.0)),)))
    assert "teleport" in transition_violations(a, Scene(1, "green", nxt, (SceneObject("car", (x, 15.0), None, (0.0, 1.0)),)))
    assert "ego_jump" in transition_violations(a, Scene(1, "green", Ego((x, 6.0), (0.0, 1.0)), ()))


def test_decision_rule():
    v = violator()
    assert decision_violations(v.scenes) == (5, 5)
    assert judge_video(world.rollout_dataset(1, 1, 0)[0]).dec == JudgeRules().no_risk_score


def test_detector_deterministic_and_empty_augmentation(mixture):
    from wmattack.experiments import with_sampled_latents
    train = with_sampled_latents(world.rollout_dataset(30, 4, 1), mixture, 0)
    test = with_sampled_latents(world.rollout_dataset(10, 4, 2), mixture, 1)
    a = downstream_detector_eval(train, None, test, 3)
    b = downstream_detector_eval(train, [], test, 3)
    c = downstream_detector_eval(train, None, test, 3)
    assert a == b == c
    assert 0.0 <= a.map_analog <= 1.0 and 0.0 <= a.nds_analog <= 1.0
    assert a.map_analog > 0.3


def test_planner():
    vids = world.rollout_dataset(40, 6, 5)
    p = fit_planner(vids, 3)
    l2, col = open_loop_plan_eval(vids, p, 3)
    assert 0 <= l2 < 1.0 and 0 <= col <= 1
    empty = [world.video_from_scenes([Scene(0, "none", Ego((world.ego_lane_x(0), 2.0 + m), (0.0, 1.0)))
                                      for m in range(6)])]
    assert open_loop_plan_eval(empty, p, 3)[1] == 0.0
    assert open_loop_plan_eval(vids, p, 0) == (0.0, 0.0)
    with pytest.raises(ValueError):
        open_loop_plan_eval(vids, p, 6)
