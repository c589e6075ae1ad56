import csv
import json
from pathlib import Path

import pytest

from diffnav.cli import (
    ExperimentConfig,
    _apply_overrides,
    build_parser,
    build_scene_pool,
    config_hash,
    experiment_from_dict,
    load_experiment,
    main,
    write_unique,
)
from diffnav.errors import ConfigError
from diffnav.policy import load_checkpoint


def tiny_config(tmp_path, **over):
    data = {
        "seed": 5,
        "out_dir": str(tmp_path / "runs"),
        "scenes": {"count": 2, "seed_offset": 300, "width": 40, "height": 40,
                   "obstacle_density": 0.06},
        "policy": {"horizon": 8, "n_rays": 8, "hidden_width": 32, "time_dim": 16},
        "sidp": {"n_candidates": 4, "top_k": 2, "batch_size": 2, "iterations": 4,
                 "curriculum": False, "goal_agnostic_fraction": 0.5,
                 "goal_distance_range": [0.6, 1.4]},
        "bc": {"pairs_per_scene": 6, "max_epochs": 8, "patience": 8,
               "distance_range": [0.6, 1.2]},
        "eval": {"episodes_per_scene": 2, "budget": 30,
                 "distance_range": [0.6, 1.4]},
    }
    data.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


def run(args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def test_config_round_trip_and_hash_stability(tmp_path):
    path = tiny_config(tmp_path)
    cfg = load_experiment(path)
    assert cfg.seed == 5
    assert cfg.scenes.count == 2
    assert config_hash(cfg) == config_hash(load_experiment(path))


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seed": 1, "sidp": {"bogus_knob": 3}}))
    with pytest.raises(ConfigError):
        load_experiment(path)
    path.write_text(json.dumps({"not_a_section": {}}))
    with pytest.raises(ConfigError):
        load_experiment(path)


def test_override_flags_change_effective_config(tmp_path):
    path = tiny_config(tmp_path)
    parser = build_parser()
    args = parser.parse_args([
        "train", "--config", str(path), "--weight-mode", "linear",
        "--tau", "0.5", "--no-goal-agnostic", "--no-curriculum",
        "--sampler", "ddim", "--steps", "5", "--seed", "9",
    ])
    cfg = _apply_overrides(load_experiment(path), args)
    assert cfg.sidp.weight_mode == "linear"
    assert cfg.sidp.tau == 0.5
    assert cfg.sidp.goal_agnostic_fraction == 0.0
    assert cfg.sidp.curriculum is False
    assert cfg.eval.sampler == "ddim" and cfg.eval.steps == 5
    assert cfg.seed == 9
    assert config_hash(cfg) != config_hash(load_experiment(path))


def test_write_unique_never_clobbers(tmp_path):
    p = tmp_path / "file.txt"
    first = write_unique(p, b"alpha")
    same = write_unique(p, b"alpha")
    other = write_unique(p, b"beta")
    assert first == same == p
    assert other != p
    assert p.read_bytes() == b"alpha"
    assert other.read_bytes() == b"beta"


# ---------------------------------------------------------------------------
# gen-scenes
# ---------------------------------------------------------------------------

def test_gen_scenes_idempotent(tmp_path):
    path = tiny_config(tmp_path)
    out = tmp_path / "scenes"
    assert run(["gen-scenes", "--config", path, "--out", out]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 2
    files = {f.name: f.read_bytes() for f in out.iterdir()}
    assert run(["gen-scenes", "--config", path, "--out", out]) == 0
    for f in out.iterdir():
        assert files[f.name] == f.read_bytes()
    assert len(list(out.iterdir())) == len(files)


def test_gen_scenes_zero_count(tmp_path):
    path = tiny_config(tmp_path, scenes={"count": 0})
    out = tmp_path / "scenes"
    assert run(["gen-scenes", "--config", path, "--out", out]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenes"] == []


def test_scene_pool_from_directory_matches_generation(tmp_path):
    path = tiny_config(tmp_path)
    out = tmp_path / "scenes"
    run(["gen-scenes", "--config", path, "--out", out])
    cfg = load_experiment(path)
    from_dir = build_scene_pool(
        experiment_from_dict({**json.loads(Path(path).read_text()),
                              "scenes": {"dir": str(out)}}))
    generated = build_scene_pool(cfg)
    assert [s.id for s in from_dir] == [s.id for s in generated]
    import numpy as np

    for a, b in zip(from_dir, generated):
        np.testing.assert_array_equal(a.grid.cells, b.grid.cells)


# ---------------------------------------------------------------------------
# pretrain / train / eval / bench pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg_path = tiny_config(tmp)
    out = tmp / "runs"
    assert run(["pretrain", "--config", cfg_path, "--out", out]) == 0
    bc_ckpt = next(out.glob("bc-*.ckpt.json"))
    assert run(["train", "--config", cfg_path, "--out", out,
                "--init-checkpoint", bc_ckpt]) == 0
    sidp_ckpt = next(out.glob("sidp-*.ckpt.json"))
    return cfg_path, out, bc_ckpt, sidp_ckpt


def test_pretrain_outputs(pipeline):
    cfg_path, out, bc_ckpt, _ = pipeline
    policy, opt = load_checkpoint(bc_ckpt)
    assert opt is None
    log_file = next(out.glob("bc-*.log.csv"))
    rows = list(csv.DictReader(log_file.read_text().splitlines()))
    assert float(rows[-1]["val_loss"]) < float(rows[0]["val_loss"])


def test_checkpoint_round_trip_via_cli(pipeline, tmp_path):
    _, _, bc_ckpt, _ = pipeline
    from diffnav.policy import save_checkpoint

    policy, _ = load_checkpoint(bc_ckpt)
    copy = tmp_path / "copy.ckpt.json"
    save_checkpoint(copy, policy, meta=json.loads(bc_ckpt.read_text())["meta"])
    assert copy.read_bytes() == bc_ckpt.read_bytes()


def test_train_log_columns(pipeline):
    cfg_path, out, _, _ = pipeline
    log_file = next(out.glob("train-*.log.csv"))
    rows = list(csv.DictReader(log_file.read_text().splitlines()))
    assert len(rows) == 4
    assert list(rows[0].keys()) == ["iteration", "loss", "mean_reward",
                                    "gated_fraction", "weight_entropy", "wall_ms"]


def test_eval_closed_loop_and_one_shot(pipeline, tmp_path):
    cfg_path, out, _, sidp_ckpt = pipeline
    assert run(["eval", "--config", cfg_path, "--out", out,
                "--checkpoint", sidp_ckpt]) == 0
    report = json.loads(next(out.glob("eval-*.json")).read_text())
    for key in ("sr", "spl", "cr", "dtg"):
        assert key in report["metrics"]
    # one-shot mode
    one_shot_cfg = tiny_config(tmp_path, eval={"episodes_per_scene": 2,
                                               "mode": "one_shot",
                                               "distance_range": [0.6, 1.4]})
    out2 = tmp_path / "runs2"
    assert run(["eval", "--config", one_shot_cfg, "--out", out2,
                "--checkpoint", sidp_ckpt]) == 0
    report2 = json.loads(next(out2.glob("eval-*.json")).read_text())
    assert report2["mode"] == "one_shot"
    assert report2["metrics"]["episodes"] == 4


def test_eval_goal_agnostic_emits_cr_and_ea(pipeline, tmp_path):
    cfg_path, _, _, sidp_ckpt = pipeline
    ga_cfg = tiny_config(tmp_path, eval={"episodes_per_scene": 2,
                                         "goal_agnostic": True,
                                         "ga_replans": 10, "ea_samples": 4})
    out = tmp_path / "ga"
    assert run(["eval", "--config", ga_cfg, "--out", out,
                "--checkpoint", sidp_ckpt]) == 0
    report = json.loads(next(out.glob("eval-*.json")).read_text())
    assert set(report["metrics"]) == {"cr", "ea"}
    assert report["metrics"]["ea"] > 0


def test_eval_rerun_identical(pipeline, tmp_path):
    cfg_path, _, _, sidp_ckpt = pipeline
    out = tmp_path / "dup"
    assert run(["eval", "--config", cfg_path, "--out", out,
                "--checkpoint", sidp_ckpt]) == 0
    first = {f.name: f.read_bytes() for f in out.iterdir()}
    assert run(["eval", "--config", cfg_path, "--out", out,
                "--checkpoint", sidp_ckpt]) == 0
    assert {f.name: f.read_bytes() for f in out.iterdir()} == first


def test_eval_trajectory_dump(pipeline, tmp_path):
    cfg_path, _, _, sidp_ckpt = pipeline
    out = tmp_path / "dump"
    assert run(["eval", "--config", cfg_path, "--out", out,
                "--checkpoint", sidp_ckpt, "--dump-trajectories"]) == 0
    traces = json.loads(next(out.glob("eval-*.traj.json")).read_text())
    assert len(traces) == 4
    assert all(len(t) >= 1 and len(t[0]) == 2 for t in traces)


def test_bench_rows(pipeline, tmp_path):
    cfg_path, _, _, sidp_ckpt = pipeline
    out = tmp_path / "bench"
    assert run(["bench", "--config", cfg_path, "--out", out,
                "--checkpoint", sidp_ckpt]) == 0
    rows = list(csv.DictReader(next(out.glob("bench-*.csv")).read_text().splitlines()))
    table = {(r["sampler"], int(r["steps"])): r for r in rows}
    assert set(table) == {("ddpm", 10), ("ddim", 10), ("ddim", 5), ("ddim", 3)}
    assert int(table[("ddpm", 10)]["denoiser_calls"]) == 10
    assert int(table[("ddim", 5)]["denoiser_calls"]) == 5
    assert all("sr" in r for r in rows)


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["gen-scenes", "--config", bad, "--out", tmp_path / "x"]) == 2
    bad2 = tmp_path / "bad2.json"
    bad2.write_text(json.dumps({"sidp": {"top_k": 50}}))
    assert run(["train", "--config", bad2, "--out", tmp_path / "y"]) == 2


def test_exit_code_io_error(tmp_path):
    missing = tmp_path / "nope.json"
    assert run(["gen-scenes", "--config", missing, "--out", tmp_path / "x"]) == 3


def test_env_var_output_root(tmp_path, monkeypatch):
    cfg_path = tiny_config(tmp_path)
    root = tmp_path / "env-root"
    monkeypatch.setenv("DIFFNAV_OUT", str(root))
    assert run(["gen-scenes", "--config", cfg_path]) == 0
    assert (root / "manifest.json").exists()
