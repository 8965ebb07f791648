"""Experiment runners behind the command line: data, training, attacks, ablations, downstream."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import world
from .alignment import FrozenEmbedding, default_input_gain
from .attack import AttackConfig, AttackResult, run_attack_batch
from .denoiser import ConditionalMixture, DenoiserParams, TrainConfig, train_denoiser, world_mixture
from .metrics import (asr, fid_analog, fit_planner, fvd_analog, judge_video, open_loop_plan_eval,
                      downstream_detector_eval)

log = logging.getLogger(__name__)

TAU_GRID = (0.10, 0.125, 0.15, 0.175, 0.20)
STAGE_GRID = ("stage1", "stage2", "both")
CHANNEL_GRID = ("map", "box", "both")
METRIC_FIELDS = ("config_hash", "label", "n", "fid", "fvd", "asr", "sem_mean", "log_mean", "dec_mean",
                 "l2_avg", "col_rate")
TELEMETRY_FIELDS = ("run", "frame", "step", "stage", "l_diff", "alignment", "eps_delta_norm", "delta_norm",
                    "objective")
BATCH = 50


@dataclass
class Lab:
    """Everything an experiment needs, built once from a resolved config."""

    cfg: dict
    schedule: object
    model: ConditionalMixture | DenoiserParams
    mixture: ConditionalMixture
    embedding: FrozenEmbedding

    @property
    def hash(self) -> str:
        return cfgmod.config_hash(self.cfg)


def build_lab(cfg: dict) -> Lab:
    d = cfg["denoiser"]
    mixture = world_mixture(d["mixture_seed"], d["s2"], d["n_modes"], d["spread"])
    if d["variant"] == "trained":
        if not d["checkpoint"]:
            raise FileNotFoundError("denoiser.variant=trained needs denoiser.checkpoint (run `train` first)")
        model = DenoiserParams.load(d["checkpoint"])
    else:
        model = mixture
    a = cfg["alignment"]
    emb = FrozenEmbedding.from_seed(a["embedding_seed"], world.D_LATENT, a["hidden"], a["d_feat"],
                                    default_input_gain(a["map_gain"], a["box_gain"], a["app_gain"]))
    return Lab(cfg, cfgmod.schedule_of(cfg), model, mixture, emb)


def run_dir(cfg: dict, command: str) -> Path:
    return Path(cfg["experiment"]["out_dir"]) / cfgmod.config_hash(cfg)[:12] / command


def manifest(cfg: dict, seeds: Sequence[int], outputs: Sequence[str]) -> dict:
    return {"config_hash": cfgmod.config_hash(cfg), "config": cfg, "seeds": list(map(int, seeds)),
            "embedding_seed": cfg["alignment"]["embedding_seed"], "schedule": cfg["schedule"],
            "denoiser": {"variant": cfg["denoiser"]["variant"], "checkpoint": cfg["denoiser"]["checkpoint"]},
            "outputs": sorted(outputs)}


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def csv_text(fields: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --- data -----------------------------------------------------------------

def dataset(cfg: dict, n: int | None = None, seed_offset: int = 0) -> list[world.Video]:
    w = cfg["world"]
    return world.rollout_dataset(w["n_videos"] if n is None else n, w["frames"], w["data_seed"] + seed_offset)


def dataset_jsonl(cfg: dict, videos: Sequence[world.Video]) -> str:
    header = json.dumps({"manifest": cfgmod.config_hash(cfg), "kind": "rollouts", "n_videos": len(videos),
                         "frames": cfg["world"]["frames"]}, sort_keys=True, separators=(",", ":"))
    return header + "\n" + world.dumps_jsonl(videos)


def with_sampled_latents(videos: Sequence[world.Video], mixture: ConditionalMixture, seed: int) -> list[world.Video]:
    """Replace canonical latents by draws from the data law under each frame's conditions."""
    rng = np.random.default_rng(seed)
    out = []
    for v in videos:
        ctx = np.vstack([v.context[None], v.latents[:-1]])
        lat = mixture.sample(v.conditions, ctx, rng)
        out.append(world.Video(lat, list(v.scenes), v.conditions, v.context, v.video_id))
    return out


def train(cfg: dict) -> DenoiserParams:
    lab = build_lab({**cfg, "denoiser": {**cfg["denoiser"], "variant": "analytic"}})
    hyper = TrainConfig(**cfg["denoiser"]["train"])
    data = dataset(cfg)
    probe = with_sampled_latents(dataset(cfg, 8, 500), lab.mixture, 0)
    return train_denoiser(data, lab.schedule, hyper, lab.mixture, eval_fn=lambda p: eps_gap(p, lab, probe))


def eps_gap(params: DenoiserParams, lab: Lab, videos: Sequence[world.Video], seed: int = 0) -> float:
    """Mean squared gap between trained and analytic noise predictions on noised data."""
    from .denoiser import analytic_eps, mlp_forward
    rng = np.random.default_rng(seed)
    gaps = []
    for v in videos:
        ctx = np.vstack([v.context[None], v.latents[:-1]])
        for t in (1, lab.schedule.num_steps // 2, lab.schedule.num_steps):
            ab = lab.schedule.alpha_bar(t)
            xt = np.sqrt(ab) * v.latents + np.sqrt(1 - ab) * rng.standard_normal(v.latents.shape)
            ref = analytic_eps(xt, t, v.conditions, ctx, lab.mixture, lab.schedule)
            gaps.append(np.mean((mlp_forward(params, xt, t, v.conditions, ctx) - ref) ** 2))
    return float(np.mean(gaps))


# --- attacks --------------------------------------------------------------

def run_seeds(cfg: dict, n: int) -> list[int]:
    base = int(cfg["experiment"]["seed"])
    return [base * 1_000_003 + i for i in range(n)]


def edits_for(cfg: dict, videos: Sequence[world.Video]) -> list[world.SceneEdit]:
    kind = cfg["experiment"]["edit"]
    out = []
    for v in videos:
        e = world.default_edit(v.scenes[0])
        if kind != "default" and kind != e.kind:
            raise cfgmod.ConfigError(f"edit {kind!r} is not available; use 'default'")
        out.append(e)
    return out


def attack_many(lab: Lab, acfg: AttackConfig, videos: Sequence[world.Video], seeds: Sequence[int]) -> list[AttackResult]:
    edits = edits_for(lab.cfg, videos)
    out: list[AttackResult] = []
    for i in range(0, len(videos), BATCH):
        out += run_attack_batch(list(videos[i:i + BATCH]), edits[i:i + BATCH], lab.model, acfg, lab.schedule,
                                lab.embedding, list(seeds[i:i + BATCH]))
    return out


def metric_row(lab: Lab, results: Sequence[AttackResult], label: str, planner=None) -> dict:
    rules = cfgmod.judge_of(lab.cfg)
    clean = [r.clean_video for r in results]
    att = [r.attacked_video for r in results]
    row = {"config_hash": lab.hash, "label": label, "n": len(results)}
    if not results:
        return row
    scores = [judge_video(a, c, rules) for a, c in zip(att, clean)]
    row["asr"] = asr(att, clean, rules)
    for k in ("sem", "log", "dec"):
        row[f"{k}_mean"] = float(np.mean([getattr(s, k) for s in scores]))
    fc = np.concatenate([v.latents for v in clean])
    fa = np.concatenate([v.latents for v in att])
    row["fid"] = fid_analog(fc, fa, lab.embedding) if len(fc) > lab.embedding.d_feat else float("nan")
    row["fvd"] = fvd_analog(clean, att, lab.embedding) if len(results) >= 2 else float("nan")
    horizon = lab.cfg["downstream"]["horizon"]
    if planner is not None and lab.cfg["world"]["frames"] > horizon:
        row["l2_avg"], row["col_rate"] = open_loop_plan_eval(att, planner, horizon)
    return row


def planner_for(cfg: dict):
    horizon = cfg["downstream"]["horizon"]
    if cfg["world"]["frames"] <= horizon:
        return None
    return fit_planner(dataset(cfg, cfg["downstream"]["train_videos"], 1000), horizon)


def frames_jsonl(lab: Lab, results: Sequence[AttackResult]) -> str:
    lines = [json.dumps({"manifest": lab.hash, "kind": "attack_frames"}, sort_keys=True, separators=(",", ":"))]
    for run, r in enumerate(results):
        for branch, video in (("clean", r.clean_video), ("attacked", r.attacked_video)):
            for m, s in enumerate(video.scenes):
                rec = {"run": run, "seed": r.seed, "branch": branch, "video_id": video.video_id,
                       "frame_idx": m, **s.to_dict()}
                lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def telemetry_csv(lab: Lab, results: Sequence[AttackResult]) -> str:
    rows = [{"run": i, **row} for i, r in enumerate(results) for row in r.telemetry]
    return f"# manifest {lab.hash}\n" + csv_text(TELEMETRY_FIELDS, rows)


def metrics_csv(rows: Sequence[dict]) -> str:
    return csv_text(METRIC_FIELDS, rows)


def attack(cfg: dict, out: Path | None = None) -> tuple[dict, list[AttackResult]]:
    lab = build_lab(cfg)
    n = cfg["experiment"]["n_runs"]
    videos = dataset(cfg, n)
    seeds = run_seeds(cfg, n)
    results = attack_many(lab, cfgmod.attack_of(cfg), videos, seeds)
    row = metric_row(lab, results, cfg["attack"]["mode"], planner_for(cfg))
    if out is not None:
        files = {"frames.jsonl": frames_jsonl(lab, results), "telemetry.csv": telemetry_csv(lab, results),
                 "config.json": json.dumps({"config_hash": lab.hash, "config": cfg}, sort_keys=True, indent=2) + "\n",
                 "metrics.csv": metrics_csv([row])}
        for name, text in files.items():
            write_text(out / name, text)
        write_text(out / "manifest.json", json.dumps(manifest(cfg, seeds, list(files)), sort_keys=True, indent=2) + "\n")
    return row, results


def ablation_cells(kind: str) -> list[tuple[str, dict]]:
    if kind == "tau":
        return [(f"tau={t}", {"tau": t}) for t in TAU_GRID]
    if kind == "stage":
        return [(f"stages={s}", {"stages": s}) for s in STAGE_GRID]
    if kind == "channel":
        return [(f"channel={c}", {"channel": c}) for c in CHANNEL_GRID]
    raise cfgmod.ConfigError(f"unknown ablation {kind!r}; choose tau, stage or channel")


def ablate(cfg: dict, kind: str, out: Path | None = None) -> list[dict]:
    cells = ablation_cells(kind)
    lab = build_lab(cfg)
    n = cfg["experiment"]["n_runs"]
    videos = dataset(cfg, n)
    seeds = run_seeds(cfg, n)
    planner = planner_for(cfg)
    base = cfgmod.attack_of(cfg)
    rows = []
    for label, change in cells:
        acfg = AttackConfig.from_dict({**base.to_dict(), **change})
        rows.append(metric_row(lab, attack_many(lab, acfg, videos, seeds), label, planner))
        log.info("ablation %s: %s", label, rows[-1])
    if out is not None:
        write_text(out / f"ablate_{kind}.csv", metrics_csv(rows))
        write_text(out / "manifest.json",
                   json.dumps(manifest(cfg, seeds, [f"ablate_{kind}.csv"]), sort_keys=True, indent=2) + "\n")
    return rows


# --- downstream -----------------------------------------------------------

DOWNSTREAM_FIELDS = ("config_hash", "probe", "arm", "seed", "map_analog", "nds_analog", "loc_error",
                     "l2_avg", "col_rate")


def downstream(cfg: dict, results: Sequence[AttackResult] | None = None, out: Path | None = None) -> list[dict]:
    lab = build_lab(cfg)
    ds = cfg["downstream"]
    if results is None:
        _, results = attack(cfg)
    if not results:
        raise ValueError("downstream evaluation needs attack results")
    k = ds["frames_per_video"]
    clean_aug = [_first_frames(r.clean_video, k) for r in results]
    att_aug = [_first_frames(r.attacked_video, k) for r in results]
    train = with_sampled_latents(dataset(cfg, ds["train_videos"], 2000), lab.mixture, 1)
    test = with_sampled_latents(dataset(cfg, ds["test_videos"], 3000), lab.mixture, 2)
    rows = []
    for seed in ds["seeds"]:
        for arm, aug in (("none", None), ("clean", clean_aug), ("attacked", att_aug)):
            rep = downstream_detector_eval(train, aug, test, seed, ds["obs_noise"])
            rows.append({"config_hash": lab.hash, "probe": "detector", "arm": arm, "seed": seed,
                         "map_analog": rep.map_analog, "nds_analog": rep.nds_analog, "loc_error": rep.loc_error})
    planner = planner_for(cfg)
    if planner is not None:
        for arm, vids in (("clean", [r.clean_video for r in results]), ("attacked", [r.attacked_video for r in results])):
            l2, col = open_loop_plan_eval(vids, planner, ds["horizon"])
            rows.append({"config_hash": lab.hash, "probe": "planner", "arm": arm, "seed": "", "l2_avg": l2,
                         "col_rate": col})
    if out is not None:
        write_text(out / "downstream.csv", csv_text(DOWNSTREAM_FIELDS, rows))
        write_text(out / "manifest.json",
                   json.dumps(manifest(cfg, ds["seeds"], ["downstream.csv"]), sort_keys=True, indent=2) + "\n")
    return rows


def _first_frames(v: world.Video, k: int) -> world.Video:
    k = min(k, v.num_frames)
    return world.Video(v.latents[:k], list(v.scenes[:k]), v.conditions[:k], v.context, v.video_id)


# --- report ---------------------------------------------------------------

def report(paths: Sequence[str | Path]) -> str:
    """Markdown table of metric rows, averaged per (config_hash, label)."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for p in paths:
        text = Path(p).read_text()
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        if reader.fieldnames is None:
            continue
        missing = {"config_hash", "label"} - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{p}: not a metrics CSV (missing {sorted(missing)})")
        for r in reader:
            groups.setdefault((r["config_hash"], r["label"]), []).append(r)
    cols = [f for f in METRIC_FIELDS if f not in ("config_hash", "label", "n")]
    out = ["| config | label | rows | " + " | ".join(cols) + " |",
           "|" + "---|" * (3 + len(cols))]
    for (h, label), rows in sorted(groups.items()):
        cells = []
        for c in cols:
            vals = [float(r[c]) for r in rows if r.get(c) not in (None, "")]
            cells.append(f"{np.mean(vals):.4f}" if vals else "")
        out.append(f"| {h[:12]} | {label} | {len(rows)} | " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"
