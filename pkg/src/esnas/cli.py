"""Command-line entry point.

Subcommands::

    esnas run --config run.json [--seed-override N] [--workers N]
              [--backend {serial,threads,process,tcp}] [--out DIR]
    esnas report-edges --config run.json --genomes genomes.jsonl [--iteration N]
    esnas report-accounting
    esnas enumerate-oracle --state-dim 3 --action-dim 3 --support-size 4
    esnas worker (--stdio | --tcp HOST:PORT)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .controller import make_controller
from .distributed import Role, Worker, make_backend
from .environments import SparseOracleEnv
from .errors import ConfigError, EsnasError
from .es_core import Aggregator
from .experiments import brute_force_optimum, edge_mask, modal_genome
from .policy import materialize, search_space, trainable_size
from .reports import accounting_table, edge_frequency_csv, edge_frequency_report, read_jsonl, seed_summary
from .search_space import canonical_json, serialize

log = logging.getLogger("esnas")

SUMMARY_FIELDS = [
    "environment", "coding", "controller", "iterations", "num_seeds", "seeds", "final_eval_rewards",
    "final_eval_reward_mean", "final_eval_reward_std",
]


def _write_line(fh, obj) -> None:
    fh.write(canonical_json(obj) + "\n")


def run_seed(config: RunConfig, seed: int, out_dir: Path, backend_kind: str, workers: int) -> float | None:
    """One full ES-ENAS run. Returns the last iteration's mean eval reward."""
    env = config.make_env()
    coding = config.coding_obj()
    dims = config.dims(env)
    spec = search_space(coding, dims)
    es = config.es_config()
    controller = make_controller(config.controller["kind"], spec, seed, **config.controller_params())
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "type": "header",
        "version": __version__,
        "seed": seed,
        "space_hash": spec.hash_hex,
        "trainable_size": trainable_size(coding, dims),
        "num_requests": es.num_workers,
        "environment": config.environment,
        "coding": config.coding,
        "controller": config.controller,
        "es": es.to_dict(),
    }
    best: tuple[float, str] | None = None
    final = None
    with make_backend(backend_kind, Worker(env, coding, dims), workers) as backend, \
            open(seed_dir / "log.jsonl", "w", encoding="utf-8") as log_fh, \
            open(seed_dir / "genomes.jsonl", "w", encoding="utf-8") as gen_fh, \
            open(seed_dir / "timing.jsonl", "w", encoding="utf-8") as time_fh:
        agg = Aggregator(controller, coding, dims, backend, es, seed)
        _write_line(log_fh, header)
        for _ in range(es.iterations):
            record = agg.step()
            _write_line(log_fh, record.to_record())
            _write_line(gen_fh, {"iteration": record.iteration, "genomes": [serialize(g) for g in agg.last_proposals]})
            _write_line(time_fh, {"iteration": record.iteration, "wall_ms": record.wall_ms})
            final = record.eval_reward_mean
            for req, genome, res in agg.last_results:
                if req.role is Role.EVAL and res.ok and (best is None or res.eval_objective > best[0]):
                    best = (res.eval_objective, serialize(genome))
            log.info("seed %d iteration %d eval %.4g", seed, record.iteration, final if final is not None else float("nan"))

    (seed_dir / "controller.json").write_text(canonical_json(controller.state_dict()) + "\n", encoding="utf-8")
    modal = modal_genome(controller, agg.last_proposals) if agg.last_proposals else controller.propose(1)[0]
    graph = materialize(modal, agg.state.theta, coding, dims)
    export = {
        "space_hash": spec.hash_hex,
        "modal_genome": serialize(modal),
        "best_eval_genome": None if best is None else {"genome": best[1], "eval_objective": best[0]},
        "theta": agg.state.theta.tolist(),
        "policy": graph.to_dict(),
    }
    (seed_dir / "best_genome.json").write_text(canonical_json(export) + "\n", encoding="utf-8")
    return final


def _run_seed_star(args):
    return run_seed(*args)


def cmd_run(args) -> int:
    config = RunConfig.load(args.config)
    if args.seed_override is not None:
        config.seeds = [args.seed_override]
    if args.out is not None:
        config.output_dir = args.out
    backend_kind = args.backend or config.backend.get("kind", "serial")
    workers = args.workers or int(config.backend.get("workers", 1))
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.canonical() + "\n", encoding="utf-8")
    jobs = [(config, s, out_dir, backend_kind, workers) for s in config.seeds]
    if args.parallel_seeds and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
            finals = list(pool.map(_run_seed_star, jobs))
    else:
        finals = [run_seed(*job) for job in jobs]
    mean, std = seed_summary(finals)
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        writer.writerow([
            config.environment["name"],
            config.coding["kind"],
            config.controller["kind"],
            config.es_config().iterations,
            len(config.seeds),
            ";".join(str(s) for s in config.seeds),
            ";".join("" if f is None else repr(f) for f in finals),
            "" if mean is None else repr(mean),
            "" if std is None else repr(std),
        ])
    print(f"wrote {out_dir}")
    return 0


def cmd_report_edges(args) -> int:
    config = RunConfig.load(args.config)
    env = config.make_env()
    spec = search_space(config.coding_obj(), config.dims(env))
    lines = read_jsonl(args.genomes)
    if not lines:
        raise ConfigError("genome log is empty")
    if args.iteration is None:
        selected = lines[-1:]
    elif args.iteration == "all":
        selected = lines
    else:
        selected = [ln for ln in lines if ln["iteration"] == int(args.iteration)]
        if not selected:
            raise ConfigError(f"iteration {args.iteration} not in genome log")
    genomes = [g for ln in selected for g in ln["genomes"]]
    text = edge_frequency_csv(edge_frequency_report(genomes, spec))
    _emit(text, args.out)
    return 0


def cmd_report_accounting(args) -> int:
    _emit(accounting_table(), args.out)
    return 0


def cmd_enumerate_oracle(args) -> int:
    env = SparseOracleEnv(args.state_dim, args.action_dim, support_size=args.support_size, seed=args.seed,
                          edge_cost=args.edge_cost)
    genome, objective = brute_force_optimum(env, limit=args.limit)
    found = edge_mask(genome, len(env.support_mask()))
    result = {
        "state_dim": args.state_dim,
        "action_dim": args.action_dim,
        "seed": args.seed,
        "true_support": [list(e) for e in env.true_support],
        "best_genome": serialize(genome),
        "best_objective": objective,
        "matches_support": bool(np.array_equal(found, env.support_mask())),
        "num_genomes": 2 ** (args.state_dim * args.action_dim),
    }
    _emit(json.dumps(result, sort_keys=True, indent=2) + "\n", args.out)
    return 0


def cmd_worker(args) -> int:
    from .distributed.worker import main as worker_main

    return worker_main(["--stdio"] if args.stdio else ["--tcp", args.tcp])


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esnas", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run ES-ENAS for every configured seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seed-override", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--backend", choices=["serial", "threads", "process", "tcp"])
    p.add_argument("--out")
    p.add_argument("--parallel-seeds", type=int, default=0, metavar="N", help="run seeds in N processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report-edges", help="edge frequency map from a genome log")
    p.add_argument("--config", required=True)
    p.add_argument("--genomes", required=True)
    p.add_argument("--iteration", help="iteration number or 'all' (default: last)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report_edges)

    p = sub.add_parser("report-accounting", help="parameter / compression / bit table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report_accounting)

    p = sub.add_parser("enumerate-oracle", help="brute-force the best genome of a small oracle env")
    p.add_argument("--state-dim", type=int, default=3)
    p.add_argument("--action-dim", type=int, default=3)
    p.add_argument("--support-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--edge-cost", type=float, default=0.01)
    p.add_argument("--limit", type=int, default=1 << 16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_enumerate_oracle)

    p = sub.add_parser("worker", help="serve evaluation requests")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stdio", action="store_true")
    mode.add_argument("--tcp", metavar="HOST:PORT")
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EsnasError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
