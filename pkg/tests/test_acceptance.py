"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line; the lines are printed
in the pytest terminal summary and when this file is run as a script.
Criteria 7 to 11 run the default experiment configuration over 100 seeded runs.
"""

from __future__ import annotations

import sys

import numpy as np
import pytest

from wmattack import config as cfgmod
from wmattack import experiments as ex
from wmattack import world
from wmattack.alignment import FrozenEmbedding, grad_similarity, similarity
from wmattack.attack import IDENTITY, AttackConfig, run_attack_batch
from wmattack.denoiser import DenoiserHandle, NoiseDiscrepancy, analytic_eps, grad_condition, grad_latent, log_density
from wmattack.metrics import GaussianMoments, LevelScores, asr, fid_analog, frechet_distance, judge_video
from wmattack.schedule import forward_sample, reverse_step

LINES: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, LINES[n]


@pytest.fixture(scope="module")
def cfg():
    return cfgmod.resolve()


@pytest.fixture(scope="module")
def lab(cfg):
    return ex.build_lab(cfg)


@pytest.fixture(scope="module")
def runs(cfg, lab):
    n = cfg["experiment"]["n_runs"]
    return ex.dataset(cfg, n), ex.run_seeds(cfg, n)


@pytest.fixture(scope="module")
def planner(cfg):
    return ex.planner_for(cfg)


_cells: dict[tuple, tuple] = {}


def cell(lab, runs, planner, label, **change):
    key = tuple(sorted(change.items()))
    if key not in _cells:
        acfg = AttackConfig.from_dict({**cfgmod.attack_of(lab.cfg).to_dict(), **change})
        results = ex.attack_many(lab, acfg, *runs)
        _cells[key] = (ex.metric_row(lab, results, label, planner), results)
    return _cells[key]


def _fd(f, x, h):
    return np.array([(f(x + e) - f(x - e)) / (2 * h) for e in h * np.eye(x.size)])


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# --- exact oracles ----------------------------------------------------------

def test_c01_identity_closure(lab):
    vids = ex.dataset(lab.cfg, 20)
    seeds = list(range(1000, 1020))
    res = run_attack_batch(vids, ex.edits_for(lab.cfg, vids), lab.model, IDENTITY, lab.schedule, lab.embedding, seeds)
    same = sum(np.array_equal(r.clean_video.latents, r.attacked_video.latents) for r in res)
    verdict(1, same == 20, f"{same}/20 seeds bit-identical under alpha=0, lambda=1, rho=0")


def test_c02_gradients(lab):
    rng = np.random.default_rng(2)
    worst = {"grad_latent": 0.0, "grad_condition": 0.0, "grad_similarity": 0.0}
    vids = ex.dataset(lab.cfg, 20)
    for i in range(20):
        v = vids[i]
        t = (1, 13, 25)[i % 3]
        x = forward_sample(v.latents[0], t, rng.standard_normal(world.D_LATENT), lab.schedule)
        h = DenoiserHandle(lab.schedule, v.conditions[0] + 0.2 * rng.standard_normal(world.D_COND), v.context, lab.mixture)
        fn = NoiseDiscrepancy(h.predict(x + 0.1 * rng.standard_normal(world.D_LATENT), t))
        worst["grad_latent"] = max(worst["grad_latent"], _rel(
            grad_latent(h, fn, x, t), _fd(lambda z: fn.value_and_grads(h, z, t)[0], x, 1e-5)))
        worst["grad_condition"] = max(worst["grad_condition"], _rel(
            grad_condition(h, fn, x, t), _fd(lambda r: fn.value_and_grads(h.with_conditions(R=r), x, t)[0], h.R, 1e-5)))
        tgt = world.encode_frame(world.apply_edit(v.scenes[0], world.default_edit(v.scenes[0])))
        worst["grad_similarity"] = max(worst["grad_similarity"], _rel(
            grad_similarity(lab.embedding, x, tgt), _fd(lambda z: similarity(lab.embedding, z, tgt), x, 1e-6)))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, max(worst.values()) < 1e-4, f"max relative error over 20 probes: {detail}")


def test_c03_analytic_score(lab):
    rng = np.random.default_rng(3)
    mix, sch = lab.mixture, lab.schedule
    worst = 0.0
    for i in range(20):
        t = (1, 13, 25)[i % 3]
        R = 0.5 * rng.standard_normal(world.D_COND)
        C = np.zeros(world.D_LATENT)
        ab = sch.alpha_bar(t)
        x = np.sqrt(ab) * mix.sample(R, C, rng) + np.sqrt(1 - ab) * rng.standard_normal(world.D_LATENT)
        h = 1e-3 * np.sqrt(ab * mix.s2 + 1 - ab)
        score = _fd(lambda z: log_density(z, t, R, C, mix, sch), x, h)
        worst = max(worst, _rel(analytic_eps(x, t, R, C, mix, sch), -np.sqrt(1 - ab) * score))
    verdict(3, worst < 1e-5, f"eps* vs -sqrt(1-ab) grad log p: max relative error {worst:.1e} (t in 1, 13, 25)")


def test_c04_sampler_fidelity(lab):
    rng = np.random.default_rng(4)
    mix, sch, n = lab.mixture, lab.schedule, 2000
    R = np.concatenate([v.conditions for v in ex.dataset(lab.cfg, 250)])[:n]
    C = np.zeros((n, world.D_LATENT))
    direct_a, direct_b = mix.sample(R, C, rng), mix.sample(R, C, rng)
    x = forward_sample(mix.sample(R, C, rng), sch.num_steps, rng.standard_normal((n, world.D_LATENT)), sch)
    for t in range(sch.num_steps, 0, -1):
        x = reverse_step(x, analytic_eps(x, t, R, C, mix, sch), t, sch, rng.standard_normal(x.shape))
    floor = fid_analog(direct_a, direct_b, lab.embedding)
    gen = fid_analog(x, direct_a, lab.embedding)
    verdict(4, gen <= 2 * floor, f"fid(sampled, direct) {gen:.3e} vs noise floor {floor:.3e} (ratio {gen / floor:.2f})")


def test_c05_frechet_closed_form():
    from scipy.linalg import inv, sqrtm
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        mats = [rng.standard_normal((3, 3)) for _ in range(2)]
        a, b = (GaussianMoments(rng.standard_normal(3), m @ m.T / 3 + 0.2 * np.eye(3)) for m in mats)
        ra = np.real(sqrtm(a.cov))
        A = inv(ra) @ np.real(sqrtm(ra @ b.cov @ ra)) @ inv(ra)
        x = rng.multivariate_normal(a.mean, a.cov, 200_000)
        mc = np.mean(np.sum((x - (b.mean + (x - a.mean) @ A.T)) ** 2, axis=1))
        worst = max(worst, abs(mc / frechet_distance(a, b) - 1))
    verdict(5, worst < 0.02, f"closed form vs Monte Carlo transport cost: worst relative gap {worst:.4f} over 10 pairs")


def test_c06_stage_switch(lab, runs, planner):
    _, results = cell(lab, runs, planner, "targeted")
    bad = 0
    switched = []
    tau = cfgmod.attack_of(lab.cfg).tau
    for r in results:
        for m, sw in enumerate(r.stage_switch_step):
            rows = [x for x in r.telemetry if x["frame"] == m]
            stages = [x["stage"] for x in rows]
            k = stages.count(1)
            first = next((x["step"] for x in rows if x["l_diff"] < tau), None)
            ok = stages == [1] * k + [2] * (len(rows) - k) and sw == first
            ok &= first is None or rows[k - 1]["step"] == first
            bad += not ok
            switched.append(sw if sw is not None else 0)
    verdict(6, bad == 0, f"{len(switched) - bad}/{len(switched)} frames switch at the first step with L_diff < {tau} "
                         f"(mean switch step {np.mean(switched):.1f})")


# --- directional trends -----------------------------------------------------

@pytest.mark.slow
def test_c07_targeted_beats_untargeted(lab, runs, planner):
    tg, _ = cell(lab, runs, planner, "targeted")
    un, _ = cell(lab, runs, planner, "untargeted", mode="untargeted")
    ok = tg["asr"] > un["asr"] and tg["asr"] >= 1.1 * un["asr"]
    verdict(7, ok, f"ASR targeted {tg['asr']:.2f} vs untargeted {un['asr']:.2f} over {tg['n']} paired seeds "
                   f"(needs >= 10% relative)")


@pytest.mark.slow
def test_c08_stage_ablation(lab, runs, planner):
    both, _ = cell(lab, runs, planner, "both")
    s1, _ = cell(lab, runs, planner, "stage1", stages="stage1")
    s2, _ = cell(lab, runs, planner, "stage2", stages="stage2")
    ok = both["asr"] > max(s1["asr"], s2["asr"]) and s2["fvd"] > s1["fvd"]
    verdict(8, ok, f"ASR both {both['asr']:.2f}, stage1 {s1['asr']:.2f}, stage2 {s2['asr']:.2f}; "
                   f"FVD stage2 {s2['fvd']:.4f} vs stage1 {s1['fvd']:.4f}")


@pytest.mark.slow
def test_c09_tau_sweep(lab, runs, planner):
    rows = [cell(lab, runs, planner, f"tau={t}", tau=t)[0] for t in ex.TAU_GRID]
    fvd = [r["fvd"] for r in rows]
    a = [r["asr"] for r in rows]
    floor = _fvd_floor(lab)
    inversions = sum(y < x - floor for x, y in zip(fvd, fvd[1:]))
    strict = sum(y < x for x, y in zip(fvd, fvd[1:]))
    fvd_ok = inversions == 0 and strict <= 1
    best = int(np.argmax(a[1:-1])) + 1
    asr_ok = a[best] > a[0] and a[best] > a[-1]
    verdict(9, fvd_ok and asr_ok, f"tau {list(ex.TAU_GRID)}: ASR {[round(x, 2) for x in a]}, "
                                  f"FVD {[round(x, 4) for x in fvd]} (floor {floor:.4f})")


def _fvd_floor(lab):
    # two independent clean generations of the same videos
    vids = ex.dataset(lab.cfg, 100)
    edits = ex.edits_for(lab.cfg, vids)
    a = run_attack_batch(vids, edits, lab.model, IDENTITY, lab.schedule, lab.embedding, list(range(100)))
    b = run_attack_batch(vids, edits, lab.model, IDENTITY, lab.schedule, lab.embedding, list(range(100, 200)))
    from wmattack.metrics import fvd_analog
    return fvd_analog([r.clean_video for r in a], [r.clean_video for r in b], lab.embedding)


@pytest.mark.slow
def test_c10_channel_ablation(lab, runs, planner):
    both, _ = cell(lab, runs, planner, "both")
    mp, _ = cell(lab, runs, planner, "map", channel="map")
    bx, _ = cell(lab, runs, planner, "box", channel="box")
    verdict(10, both["asr"] >= max(mp["asr"], bx["asr"]),
            f"ASR both {both['asr']:.2f}, map {mp['asr']:.2f}, box {bx['asr']:.2f}")


@pytest.mark.slow
def test_c11_downstream(lab, runs, planner):
    _, results = cell(lab, runs, planner, "targeted")
    rows = ex.downstream(lab.cfg, results)
    det = {(r["arm"], r["seed"]): r for r in rows if r["probe"] == "detector"}
    seeds = lab.cfg["downstream"]["seeds"]
    worse = sum(det["attacked", s]["nds_analog"] <= det["clean", s]["nds_analog"] for s in seeds)
    plan = {r["arm"]: r for r in rows if r["probe"] == "planner"}
    plan_ok = (plan["attacked"]["l2_avg"] >= plan["clean"]["l2_avg"]
               and plan["attacked"]["col_rate"] >= plan["clean"]["col_rate"])
    nds = {arm: np.mean([det[arm, s]["nds_analog"] for s in seeds]) for arm in ("none", "clean", "attacked")}
    verdict(11, worse > len(seeds) / 2 and plan_ok,
            f"detector NDS-analog attacked <= clean on {worse}/{len(seeds)} seeds "
            f"(mean none {nds['none']:.3f}, clean {nds['clean']:.3f}, attacked {nds['attacked']:.3f}); "
            f"planner L2 {plan['clean']['l2_avg']:.3f} -> {plan['attacked']['l2_avg']:.3f}, "
            f"collision {plan['clean']['col_rate']:.3f} -> {plan['attacked']['col_rate']:.3f}")


def test_c12_judge_calibration(lab):
    from test_metrics import violator
    clean = ex.dataset(lab.cfg, 200)
    bad = [violator(i) for i in range(10)]
    mixed = asr(bad[:3] + clean[:7])
    ok = asr(clean) == 0.0 and asr(bad) == 1.0 and mixed == 0.3
    ok &= all(judge_video(v) == LevelScores(1.0, 1.0, 1.0) for v in bad)
    verdict(12, ok, f"clean ASR {asr(clean)}, maximal violators ASR {asr(bad)}, 3-of-10 mix ASR {mixed}")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
