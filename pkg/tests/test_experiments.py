import csv
import io
import json

import numpy as np
import pytest

from wmattack import cli
from wmattack import config as cfgmod
from wmattack import experiments as ex


@pytest.fixture(scope="module")
def small_cfg():
    return cfgmod.resolve(overrides=["experiment.n_runs=6", "world.frames=3"])


def test_hash_ignores_key_order(tmp_path):
    a, b = tmp_path / "a.yaml", tmp_path / "b.yaml"
    a.write_text("attack:\n  tau: 0.1\n  delta_step: 0.02\nworld:\n  frames: 4\n")
    b.write_text("world:\n  frames: 4\nattack:\n  delta_step: 0.02\n  tau: 0.1\n")
    assert cfgmod.config_hash(cfgmod.resolve(a)) == cfgmod.config_hash(cfgmod.resolve(b))
    assert cfgmod.config_hash(cfgmod.resolve(a)) != cfgmod.config_hash(cfgmod.resolve())


def test_overrides_beat_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("attack:\n  tau: 0.1\n")
    assert cfgmod.resolve(f, ["attack.tau=0.2"])["attack"]["tau"] == 0.2


@pytest.mark.parametrize("bad", ["attack.taux=1", "nosuch=1", "attack=3", "attack.tau"])
def test_bad_overrides(bad):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(overrides=[bad])


def test_invalid_values_are_config_errors():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(overrides=["attack.lambda_momentum=2"])
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(overrides=["denoiser.variant=huge"])


def test_trained_without_checkpoint():
    with pytest.raises(FileNotFoundError):
        ex.build_lab(cfgmod.resolve(overrides=["denoiser.variant=trained"]))


def test_attack_outputs_are_reproducible(small_cfg, tmp_path):
    ex.attack(small_cfg, tmp_path / "a")
    ex.attack(small_cfg, tmp_path / "b")
    for name in ("frames.jsonl", "telemetry.csv", "metrics.csv", "config.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_zero_runs_gives_header_only():
    cfg = cfgmod.resolve(overrides=["experiment.n_runs=0"])
    lab = ex.build_lab(cfg)
    text = ex.telemetry_csv(lab, [])
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert body == [",".join(ex.TELEMETRY_FIELDS)]


def test_single_run_metrics_csv():
    cfg = cfgmod.resolve(overrides=["experiment.n_runs=1", "world.frames=3"])
    row, results = ex.attack(cfg)
    assert len(results) == 1
    rows = list(csv.DictReader(io.StringIO(ex.metrics_csv([row]))))
    assert len(rows) == 1 and rows[0]["n"] == "1"
    assert 0.0 <= float(rows[0]["asr"]) <= 1.0


def test_ablation_grid_sizes():
    assert len(ex.ablation_cells("tau")) == 5
    assert [c[1] for c in ex.ablation_cells("stage")] == [{"stages": s} for s in ("stage1", "stage2", "both")]
    assert len(ex.ablation_cells("channel")) == 3


def test_report_averages(tmp_path):
    p = tmp_path / "m.csv"
    rows = [dict.fromkeys(ex.METRIC_FIELDS, 0.0) | {"config_hash": "h", "label": "x", "n": 10, "asr": a}
            for a in (0.2, 0.4)]
    p.write_text(ex.metrics_csv(rows))
    text = ex.report([p])
    assert "x" in text and "0.3" in text


def test_monotone_pressure():
    # regression property: stage-2 alignment rises from the switch to the last step
    cfg = cfgmod.resolve(overrides=["experiment.n_runs=30"])
    lab = ex.build_lab(cfg)
    results = ex.attack_many(lab, cfgmod.attack_of(cfg), ex.dataset(cfg, 30), ex.run_seeds(cfg, 30))
    up = []
    for r in results:
        for m, sw in enumerate(r.stage_switch_step):
            rows = [x for x in r.telemetry if x["frame"] == m]
            start = next(x["alignment"] for x in rows if x["step"] == (sw if sw is not None else rows[0]["step"]))
            up.append(rows[-1]["alignment"] > start)
    assert np.mean(up) >= 0.8


def test_cli_show_config_and_errors(capsys):
    assert cli.main(["show-config"]) == 0
    assert "tau" in capsys.readouterr().out
    assert cli.main(["attack", "--set", "attack.nope=1"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_gen_data(tmp_path):
    assert cli.main(["gen-data", "--set", "world.n_videos=3", "--set", "world.frames=2", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "rollouts.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 3 * 2  # header, then one line per frame
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config_hash"] == cfgmod.config_hash(
        cfgmod.resolve(overrides=["world.n_videos=3", "world.frames=2"]))
