"""Command-line harness: scene generation, training, evaluation, benchmarks.

Every command is driven by one JSON config file plus targeted override
flags for the ablation axes.  All randomness flows from the config's seed
through named substreams, so reruns with the same effective config produce
identical outputs (wall-clock columns aside).  Reports are named by a hash
of the effective config; an existing file with different content is never
overwritten silently (a numeric suffix is appended instead).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 contract
violation, 5 other package errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation, DiffnavError
from .eval import (
    compute_metrics,
    exploration_area,
    latency_bench,
    make_planner,
    rollout_closed_loop,
    rollout_exploration,
    rollout_one_shot,
)
from .policy import Observation, PolicyConfig, load_checkpoint, new_policy, save_checkpoint
from .reward import RewardConfig
from .rng import substream
from .scene import (
    Scene,
    SceneConfig,
    generate_scene,
    geodesic_field,
    load_scene,
    sample_start_goal,
    save_scene,
)
from .sidp import (
    BcConfig,
    SidpConfig,
    _safe_free_point,
    bc_pretrain,
    make_observation,
    train,
)

TRAIN_LOG_COLUMNS = ["iteration", "loss", "mean_reward", "gated_fraction",
                     "weight_entropy", "wall_ms"]


@dataclass(frozen=True)
class ScenePoolSpec:
    count: int = 5
    seed_offset: int = 1000
    dir: str | None = None  # load pre-generated scenes instead of generating
    width: int = 64
    height: int = 64
    resolution: float = 0.05
    obstacle_density: float = 0.12
    obstacle_shape_mix: float = 0.5
    robot_radius: float = 0.15
    esdf_max_dist: float = 1.0
    obstacle_gap: float = 0.0

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            width=self.width, height=self.height, resolution=self.resolution,
            obstacle_density=self.obstacle_density,
            obstacle_shape_mix=self.obstacle_shape_mix,
            robot_radius=self.robot_radius, esdf_max_dist=self.esdf_max_dist,
            obstacle_gap=self.obstacle_gap,
        )


@dataclass(frozen=True)
class EvalSpec:
    episodes_per_scene: int = 20
    mode: str = "closed_loop"  # or "one_shot"
    sampler: str = "ddpm"
    steps: int | None = None
    budget: int = 200
    distance_range: tuple = (1.0, 2.2)
    goal_agnostic: bool = False
    ea_samples: int = 16
    ga_replans: int = 30
    seed: int = 7


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    scenes: ScenePoolSpec = field(default_factory=ScenePoolSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    sidp: SidpConfig = field(default_factory=SidpConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def validate(self):
        self.policy.validate()
        self.sidp.validate()
        if self.scenes.dir is None:
            self.scenes.scene_config().validate()
        if self.eval.mode not in ("closed_loop", "one_shot"):
            raise ConfigError(f"unknown eval mode {self.eval.mode!r}")


_SECTIONS = {
    "scenes": ScenePoolSpec,
    "policy": PolicyConfig,
    "reward": RewardConfig,
    "sidp": SidpConfig,
    "bc": BcConfig,
    "eval": EvalSpec,
}


def _dataclass_from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    fixed = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        fixed[key] = value
    try:
        return cls(**fixed)
    except TypeError as err:
        raise ConfigError(f"bad {cls.__name__}: {err}") from err


def experiment_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - ({"seed", "out_dir"} | set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    if "out_dir" in data:
        kwargs["out_dir"] = str(data["out_dir"])
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _dataclass_from_dict(cls, data[name])
    return ExperimentConfig(**kwargs)


def load_experiment(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    return experiment_from_dict(data)


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(experiment_to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get("DIFFNAV_OUT")
    if env:
        return Path(env)
    return Path(cfg.out_dir)


def write_unique(path: Path, data: bytes) -> Path:
    """Write data to path; never silently overwrite different content."""
    path.parent.mkdir(parents=True, exist_ok=True)
    candidate = path
    k = 1
    while candidate.exists():
        if candidate.read_bytes() == data:
            return candidate
        k += 1
        candidate = path.with_name(f"{path.stem}-{k}{path.suffix}")
    candidate.write_bytes(data)
    return candidate


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def _csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue().encode()


# ---------------------------------------------------------------------------
# Scene pools
# ---------------------------------------------------------------------------

def build_scene_pool(cfg: ExperimentConfig) -> list[Scene]:
    spec = cfg.scenes
    if spec.dir is not None:
        manifest_path = Path(spec.dir) / "manifest.json"
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        return [load_scene(Path(spec.dir) / entry["file"], spec.esdf_max_dist)
                for entry in manifest["scenes"]]
    scene_cfg = spec.scene_config()
    return [generate_scene(spec.seed_offset + i, scene_cfg) for i in range(spec.count)]


def cmd_gen_scenes(cfg: ExperimentConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in build_scene_pool(cfg):
        name = f"{scene.id}.json"
        save_scene(scene, out / name)
        entries.append({"id": scene.id, "seed": scene.seed, "file": name})
    manifest = {"scenes": entries, "config": dataclasses.asdict(cfg.scenes)}
    write_unique(out / "manifest.json", _json_bytes(manifest))
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# Training commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> Path:
    tag = config_hash(cfg)
    pool = build_scene_pool(cfg)
    policy = new_policy(cfg.policy, seed=cfg.seed)
    log = bc_pretrain(policy, pool, seed=cfg.seed, cfg=cfg.bc)
    ckpt = out / f"bc-{tag}.ckpt.json"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, policy, meta={"stage": "bc", "config_hash": tag})
    write_unique(out / f"bc-{tag}.log.csv",
                 _csv_bytes(["epoch", "train_loss", "val_loss"], log))
    return ckpt


def cmd_train(cfg: ExperimentConfig, out: Path, init_checkpoint: str | None) -> Path:
    tag = config_hash(cfg)
    pool = build_scene_pool(cfg)
    if init_checkpoint:
        policy, _ = load_checkpoint(init_checkpoint)
        if policy.cfg != cfg.policy:
            raise ConfigError("checkpoint policy config does not match the experiment")
    else:
        policy = new_policy(cfg.policy, seed=cfg.seed)
    rows = train(policy, pool, cfg.sidp, cfg.reward, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"sidp-{tag}.ckpt.json"
    save_checkpoint(ckpt, policy, meta={"stage": "sidp", "config_hash": tag})
    write_unique(out / f"train-{tag}.log.csv", _csv_bytes(TRAIN_LOG_COLUMNS, rows))
    return ckpt


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def run_eval_suite(cfg: ExperimentConfig, policy, pool=None,
                   collect_traces: bool = False):
    """Per-episode results over the configured suite.

    Episode start/goal pairs are drawn from eval.seed substreams, disjoint
    from the training streams, so they are held out by construction.
    """
    spec = cfg.eval
    pool = pool if pool is not None else build_scene_pool(cfg)
    planner = make_planner(policy, spec.sampler, spec.steps)
    rows, traces = [], []
    for si, scene in enumerate(pool):
        for ei in range(spec.episodes_per_scene):
            rng = substream(spec.seed, "episode", si, ei)
            start, goal = sample_start_goal(scene, rng, spec.distance_range)
            geo = geodesic_field(scene.grid, goal)
            trace = [] if collect_traces else None
            if spec.mode == "closed_loop":
                r = rollout_closed_loop(planner, scene, start, goal, geo, rng,
                                        budget=spec.budget, trace=trace)
            elif spec.mode == "one_shot":
                r = rollout_one_shot(planner, scene, start, goal, geo, rng,
                                     trace=trace)
            else:
                raise ConfigError(f"unknown eval mode {spec.mode!r}")
            rows.append({"scene": scene.id, "episode": ei,
                         "success": int(r.success), "collided": int(r.collided),
                         "path_length": r.path_length, "shortest": r.shortest,
                         "final_dist": r.final_dist, "steps_used": r.steps_used})
            if collect_traces:
                traces.append([[float(x), float(y)] for x, y in trace])
    return rows, traces


def run_goal_agnostic_suite(cfg: ExperimentConfig, policy, pool=None):
    """CR over masked wandering episodes plus mean exploration area."""
    spec = cfg.eval
    pool = pool if pool is not None else build_scene_pool(cfg)
    planner = make_planner(policy, spec.sampler, spec.steps)
    collisions = []
    areas = []
    for si, scene in enumerate(pool):
        for ei in range(spec.episodes_per_scene):
            rng = substream(spec.seed, "ga-episode", si, ei)
            start = _safe_free_point(scene, rng)
            collisions.append(rollout_exploration(planner, scene, start, rng,
                                                  replans=spec.ga_replans))
        rng = substream(spec.seed, "ga-area", si)
        start = _safe_free_point(scene, rng)
        areas.append(exploration_area(planner, scene, start, rng,
                                      count=spec.ea_samples))
    cr = 100.0 * sum(collisions) / len(collisions)
    ea = float(np.mean(areas))
    return cr, ea


def cmd_eval(cfg: ExperimentConfig, out: Path, checkpoint: str,
             dump_trajectories: bool = False) -> Path:
    tag = config_hash(cfg)
    policy, _ = load_checkpoint(checkpoint)
    pool = build_scene_pool(cfg)
    report = {"config_hash": tag, "mode": cfg.eval.mode,
              "sampler": cfg.eval.sampler,
              "steps": cfg.eval.steps or policy.sched.T}
    out.mkdir(parents=True, exist_ok=True)
    if cfg.eval.goal_agnostic:
        cr, ea = run_goal_agnostic_suite(cfg, policy, pool)
        report["metrics"] = {"cr": cr, "ea": ea}
        episodes = []
    else:
        episodes, traces = run_eval_suite(cfg, policy, pool,
                                          collect_traces=dump_trajectories)
        from .eval import EpisodeResult

        results = [EpisodeResult(bool(r["success"]), r["path_length"],
                                 r["shortest"], bool(r["collided"]),
                                 r["final_dist"], r["steps_used"])
                   for r in episodes]
        m = compute_metrics(results)
        report["metrics"] = {"sr": m.sr, "spl": m.spl, "cr": m.cr,
                             "dtg": m.dtg, "episodes": m.episodes}
        if dump_trajectories:
            write_unique(out / f"eval-{tag}.traj.json", _json_bytes(traces))
    report["episodes"] = episodes
    path = write_unique(out / f"eval-{tag}.json", _json_bytes(report))
    if episodes:
        write_unique(out / f"eval-{tag}.csv",
                     _csv_bytes(list(episodes[0].keys()), episodes))
    return path


def cmd_bench(cfg: ExperimentConfig, out: Path, checkpoint: str) -> Path:
    tag = config_hash(cfg)
    policy, _ = load_checkpoint(checkpoint)
    pool = build_scene_pool(cfg)
    fixtures = []
    for si, scene in enumerate(pool[:3]):
        rng = substream(cfg.eval.seed, "bench-obs", si)
        start, goal = sample_start_goal(scene, rng, cfg.eval.distance_range)
        fixtures.append(make_observation(scene, start, goal,
                                         n_rays=policy.cfg.n_rays,
                                         max_range=policy.cfg.max_range))
    configs = [("ddpm", None), ("ddim", policy.sched.T), ("ddim", 5), ("ddim", 3)]
    rows = latency_bench(policy, fixtures, configs, trials=100, warmup=10,
                         seed=cfg.eval.seed)
    for row in rows:
        eval_cfg = replace(cfg, eval=replace(cfg.eval, sampler=row["sampler"],
                                             steps=row["steps"]))
        episodes, _ = run_eval_suite(eval_cfg, policy, pool)
        row["sr"] = 100.0 * sum(r["success"] for r in episodes) / len(episodes)
    out.mkdir(parents=True, exist_ok=True)
    path = write_unique(out / f"bench-{tag}.csv",
                        _csv_bytes(["sampler", "steps", "mean_ms",
                                    "denoiser_calls", "sr"], rows))
    return path


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    sidp = cfg.sidp
    if args.weight_mode is not None:
        sidp = replace(sidp, weight_mode=args.weight_mode)
    if args.tau is not None:
        sidp = replace(sidp, tau=args.tau)
    if args.no_goal_agnostic:
        sidp = replace(sidp, goal_agnostic_fraction=0.0)
    if args.no_curriculum:
        sidp = replace(sidp, curriculum=False)
    cfg = replace(cfg, sidp=sidp)
    ev = cfg.eval
    if args.sampler is not None:
        ev = replace(ev, sampler=args.sampler)
    if args.steps is not None:
        ev = replace(ev, steps=args.steps)
    return replace(cfg, eval=ev)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffnav",
        description="Self-imitation training harness for a diffusion trajectory planner.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--weight-mode", choices=["softmax", "linear"],
                       dest="weight_mode", default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--no-goal-agnostic", action="store_true",
                       dest="no_goal_agnostic")
        p.add_argument("--no-curriculum", action="store_true",
                       dest="no_curriculum")
        p.add_argument("--sampler", choices=["ddpm", "ddim"], default=None)
        p.add_argument("--steps", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("gen-scenes", help="write scene files and a manifest"))
    common(sub.add_parser("pretrain", help="behavior-cloning pretraining"))
    p_train = sub.add_parser("train", help="self-imitation training")
    common(p_train)
    p_train.add_argument("--init-checkpoint", default=None)
    p_eval = sub.add_parser("eval", help="run the evaluation suite")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--dump-trajectories", action="store_true")
    common(sub.add_parser("bench", help="sampler latency benchmark"),
           checkpoint=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_experiment(args.config), args)
        cfg.validate()
        out = output_dir(cfg, args.out)
        if args.command == "gen-scenes":
            path = cmd_gen_scenes(cfg, out)
        elif args.command == "pretrain":
            path = cmd_pretrain(cfg, out)
        elif args.command == "train":
            path = cmd_train(cfg, out, args.init_checkpoint)
        elif args.command == "eval":
            path = cmd_eval(cfg, out, args.checkpoint, args.dump_trajectories)
        elif args.command == "bench":
            path = cmd_bench(cfg, out, args.checkpoint)
        else:  # pragma: no cover - argparse enforces choices
            raise ConfigError(f"unknown command {args.command}")
        print(path)
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3
    except ContractViolation as err:
        print(f"contract violation: {err}", file=sys.stderr)
        return 4
    except DiffnavError as err:
        print(f"error: {err}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
