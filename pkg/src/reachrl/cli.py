"""Command-line entry point: train, eval, analyze, export-embedding, oracle-check.

Exit codes: 0 success, 2 invalid input (config, checkpoint, arguments),
3 numerical failure, 4 oracle identity violated.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import plotting
from .autodiff import NumericalError, ShapeError
from .config import ConfigError, RunConfig, load_config
from .envs import discretize, observation_digest
from .oracle import bfs_distance, distance_value_gap, value_iteration_indicator
from .rollout import GraphOraclePolicy, PolicyActor, evaluate, run_episodes
from .train import Trainer, env_config

log = logging.getLogger("reachrl")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_ORACLE = 0, 2, 3, 4
ANALYZE_SCHEMA = "reachrl.analyze/v1"
EMBEDDING_SCHEMA = "reachrl.embedding/v1"
ORACLE_TOL = 1e-9


class UsageError(Exception):
    pass


def git_blob_sha1(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, inputs: list[Path]) -> None:
    """Digest every input and every file in ``out_dir`` (recursively) the way ``git hash-object`` would."""
    def digests(paths):
        return {str(p): git_blob_sha1(p) for p in sorted(paths) if p.is_file()}

    outputs = [p for p in out_dir.rglob("*") if p.name != "manifest.json"]
    manifest = {
        "inputs": digests(inputs),
        "outputs": {str(Path(k).relative_to(out_dir)): v for k, v in digests(outputs).items()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def checkpoint_stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    if not p.with_suffix(".bin").exists():
        raise UsageError(f"checkpoint {p.with_suffix('.bin')} not found")
    return p


def checkpoint_files(stem: Path) -> list[Path]:
    files = [stem.with_suffix(".bin"), stem.with_suffix(".json")]
    replay = stem.with_suffix(".replay")
    if replay.is_dir():
        files += sorted(replay.iterdir())
    return files


def resolve_config(args, checkpoint: Path | None = None, allow_default: bool = False) -> tuple[RunConfig, Path | None]:
    path = args.config
    if path is None and checkpoint is not None and (checkpoint.parent / "config.txt").exists():
        path = checkpoint.parent / "config.txt"
    if path is None and not allow_default:
        raise UsageError("--config is required")
    cfg = load_config(path) if path is not None else RunConfig()
    if getattr(args, "seed", None) is not None and len(args.seed) == 1:
        cfg = cfg.replace(train__seed=args.seed[0])
    return cfg, (Path(path) if path is not None else None)


def load_trainer(cfg: RunConfig, stem: Path) -> Trainer:
    trainer = Trainer(cfg)
    has_meta = stem.with_suffix(".json").exists()
    trainer.load_checkpoint(stem, full=has_meta)
    return trainer


# --- train ----------------------------------------------------------------------


def _train_one(cfg: RunConfig, out_dir: Path, resume: Path | None) -> list[dict]:
    trainer = Trainer(cfg, out_dir)
    if resume is not None:
        trainer.load_checkpoint(resume)
    rows = trainer.run()
    plotting.learning_curves({cfg.agent.arch: rows}, out_dir / "learning_curve.png")
    return rows


def cmd_train(args) -> int:
    cfg, cfg_path = resolve_config(argparse.Namespace(config=args.config, seed=None))
    out = Path(args.out)
    seeds = args.seed or [cfg.train.seed]
    jobs = []
    for seed in seeds:
        run_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        resume = None
        if args.resume:
            resume = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoint"
            resume = checkpoint_stem(resume)
        elif args.checkpoint:
            raise UsageError("--checkpoint with train requires --resume")
        jobs.append((cfg.replace(train__seed=seed), run_dir, resume))
    if len(jobs) == 1:
        runs = {str(seeds[0]): _train_one(*jobs[0])}
    else:
        workers = max(1, min(len(jobs), int(os.environ.get("REACHRL_THREADS", os.cpu_count() or 1))))
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            futures = {seed: pool.submit(_train_one, *job) for seed, job in zip(seeds, jobs)}
            runs = {str(seed): f.result() for seed, f in futures.items()}
        plotting.learning_curves({f"seed {k}": v for k, v in runs.items()}, out / "learning_curve.png")
    inputs = [cfg_path] + [p for _, _, r in jobs if r is not None for p in checkpoint_files(r)]
    write_manifest(out, inputs)
    for seed, rows in runs.items():
        last = rows[-1] if rows else None
        if last:
            print(f"seed {seed}: env_steps={last['env_steps']} median_final_L1={last['median_final_L1']:.3f}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    stem = checkpoint_stem(args.checkpoint)
    cfg, cfg_path = resolve_config(args, stem)
    trainer = load_trainer(cfg, stem)
    rng = np.random.default_rng(cfg.train.seed if not args.seed else args.seed[0])
    if args.oracle_policy:
        if cfg.env.name != "gridworld":
            raise UsageError("--oracle-policy needs the exact gridworld graph")
        actor = GraphOraclePolicy(discretize(trainer.env.config))
    else:
        actor = PolicyActor(trainer.learner.policy)
    report = evaluate(trainer.env, actor, trainer.source, args.episodes, rng, cfg.eval.deterministic,
                      trainer.env_steps, cfg.train.seed)
    out = Path(args.out) if args.out else stem.parent
    out.mkdir(parents=True, exist_ok=True)
    name = "eval_oracle.json" if args.oracle_policy else "eval.json"
    (out / name).write_text(json.dumps(report.as_dict(), indent=1) + "\n")
    if args.out:
        write_manifest(out, [cfg_path, *checkpoint_files(stem)])
    print(f"episodes={len(report.distances)} median_final_L1={report.median:.3f} mean_final_L1={report.mean:.3f}")
    return EXIT_OK


# --- analyze --------------------------------------------------------------------


def analyze_episode(trainer: Trainer, rng, attempts: int = 1, min_approach: int = 3) -> list[dict]:
    """Per-step Q, latent distance and pixel / position distances for one episode.

    With ``attempts > 1`` episodes are re-rolled until one first shows its goal
    after at least ``min_approach`` steps; the last attempt is kept if none does.
    """
    env, learner, cfg = trainer.env, trainer.learner, trainer.cfg
    q, gamma = learner.q, cfg.agent.gamma
    for _ in range(max(1, attempts)):
        goal, goal_pos = trainer.source.sample_goal(rng)
        (ep,) = run_episodes(env, PolicyActor(learner.policy), goal[None], rng, deterministic=cfg.eval.deterministic)
        hits = np.flatnonzero(np.all(ep.observations == goal, axis=(1, 2)))
        if len(hits) and hits[0] >= min_approach:
            break
    horizon = len(ep.actions)
    obs = ep.observations[:horizon]
    goals = np.broadcast_to(goal, obs.shape)
    qv = q.value(obs, ep.actions, goals)
    if q.arch == "structured":
        z = q.embed(obs).value
        zg = q.embed_goal(goal[None]).value
        emb = q.latent_distance(z, ep.actions, np.repeat(zg, horizon, axis=0)).value
    else:
        emb = -np.log(np.clip(qv, 1e-300, None)) / -math.log(gamma)
    rows = []
    for t in range(horizon):
        later = hits[hits >= t]
        rows.append({
            "t": t,
            "q_value": float(qv[t]),
            "embed_distance": float(emb[t]),
            "pixel_l1": float(np.abs(obs[t] - goal).sum()),
            "position_l1": env.position_distance(ep.positions[t], goal_pos),
            "remaining_steps": int(later[0] - t) if len(later) else -1,
        })
    return rows


ANALYZE_COLUMNS = ("t", "q_value", "embed_distance", "pixel_l1", "position_l1", "remaining_steps")


def write_analyze_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {ANALYZE_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(ANALYZE_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], int) else repr(r[c]) for c in ANALYZE_COLUMNS])


def approach_spearman(rows) -> float | None:
    """Spearman rho of Q against -(remaining steps) before the first arrival; None if never reached."""
    arrival = rows[0]["remaining_steps"]  # index of the first observation equal to the goal
    if arrival < 3:
        return None
    approach = [r for r in rows if r["t"] < arrival]
    return float(stats.spearmanr([r["q_value"] for r in approach], [-r["remaining_steps"] for r in approach]).statistic)


def read_analyze_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return [{k: (int(v) if k in ("t", "remaining_steps") else float(v)) for k, v in rec.items()}
            for rec in csv.DictReader(lines)]


def cmd_analyze(args) -> int:
    stem = checkpoint_stem(args.checkpoint)
    cfg, cfg_path = resolve_config(args, stem)
    trainer = load_trainer(cfg, stem)
    rng = np.random.default_rng(cfg.train.seed if not args.seed else args.seed[0])
    rows = analyze_episode(trainer, rng, args.attempts)
    out = Path(args.out) if args.out else stem.parent
    out.mkdir(parents=True, exist_ok=True)
    write_analyze_csv(out / "analyze.csv", rows)
    plotting.trajectory_analysis(rows, out / "analyze.png")
    if args.out:
        write_manifest(out, [cfg_path, *checkpoint_files(stem)])
    rho = approach_spearman(rows)
    if rho is not None:
        print(f"reached goal; spearman(q, -remaining) before arrival={rho:.3f}")
    else:
        print("goal not reached after at least 3 steps in this episode")
    return EXIT_OK


# --- export-embedding -------------------------------------------------------------


def export_embedding(trainer: Trainer, path) -> tuple[np.ndarray, np.ndarray]:
    q = trainer.learner.q
    if q.arch != "structured":
        raise UsageError(f"export-embedding needs a structured checkpoint (got {q.arch!r})")
    graph = discretize(trainer.env.config, trainer.cfg.env.graph_resolution)
    z = q.embed(graph.observations).value
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {EMBEDDING_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["node_id", "obs_digest", *[f"pos_{i}" for i in range(graph.positions.shape[1])],
                    *[f"z_{i}" for i in range(z.shape[1])]])
        for i, (p, o, e) in enumerate(zip(graph.positions, graph.observations, z)):
            w.writerow([i, observation_digest(o), *map(repr, map(float, p)), *map(repr, map(float, e))])
    return graph.positions, z


def cmd_export_embedding(args) -> int:
    stem = checkpoint_stem(args.checkpoint)
    cfg, cfg_path = resolve_config(args, stem)
    trainer = Trainer(cfg)
    trainer.load_checkpoint(stem, full=False)
    out = Path(args.out) if args.out else stem.parent
    out.mkdir(parents=True, exist_ok=True)
    positions, z = export_embedding(trainer, out / "embedding.csv")
    plotting.embedding_map(positions, z, out / "embedding.png")
    if args.out:
        write_manifest(out, [cfg_path, *checkpoint_files(stem)])
    print(f"nodes={len(z)} embed_dim={z.shape[1]}")
    return EXIT_OK


# --- oracle-check -----------------------------------------------------------------


def cmd_oracle_check(args) -> int:
    cfg, cfg_path = resolve_config(args, allow_default=True)
    gamma = args.gamma if args.gamma is not None else cfg.agent.gamma
    if not 0 < gamma < 1:
        raise UsageError("--gamma must lie in (0, 1)")
    graph = discretize(env_config(cfg), cfg.env.graph_resolution)
    dist = bfs_distance(graph)
    table = value_iteration_indicator(graph, gamma)
    gap = distance_value_gap(table, dist)
    report = {"nodes": graph.n_nodes, "actions": graph.n_actions, "gamma": gamma,
              "max_abs_error": gap, "vi_residual": table.residual, "vi_iterations": table.iterations,
              "max_distance": float(dist[np.isfinite(dist)].max()), "ok": bool(gap <= ORACLE_TOL)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        graph.dump(out / "graph.json")
        (out / "oracle_check.json").write_text(json.dumps(report, indent=1) + "\n")
        write_manifest(out, [cfg_path] if cfg_path else [])
    print(f"nodes={graph.n_nodes} gamma={gamma} max|max_a Q* - gamma^(d-1)|={gap:.3e} "
          f"residual={table.residual:.3e} {'OK' if report['ok'] else 'VIOLATION'}")
    return EXIT_OK if report["ok"] else EXIT_ORACLE


# --- entry ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reachrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", type=Path, help="run config (key = value text or JSON)")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--seed", type=int, action="append", help="RNG seed (train: repeat for several runs)")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, help="checkpoint stem or .bin file")

    sp = sub.add_parser("train", help="collect and learn until train.total_env_steps")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from --checkpoint or OUT/checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="final-distance report for a checkpoint")
    common(sp)
    sp.add_argument("--episodes", "-K", type=int, default=10)
    sp.add_argument("--oracle-policy", action="store_true", help="act with the BFS shortest-path policy")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="per-step distances along one episode")
    common(sp)
    sp.add_argument("--attempts", type=int, default=1, help="re-roll up to N episodes until one reaches its goal")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("export-embedding", help="embedding of every graph node (structured critic)")
    common(sp)
    sp.set_defaults(func=cmd_export_embedding)

    sp = sub.add_parser("oracle-check", help="value iteration vs BFS identity on the env graph")
    common(sp, checkpoint=False)
    sp.add_argument("--gamma", type=float, help="discount (default: agent.gamma)")
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "train" and args.out is None:
        print("error: train needs --out", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "eval" and args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    needs_ckpt = args.command in ("eval", "analyze", "export-embedding")
    if needs_ckpt and args.checkpoint is None:
        print(f"error: {args.command} needs --checkpoint", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ShapeError, UsageError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
