"""Command-line entry point. Every subcommand prints a JSON summary or writes CSV/JSON files.

Failures exit nonzero with ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__

log = logging.getLogger("ilql_wordle")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_manifest(out, payload: dict, trajectories) -> Path:
    """Sidecar ``<stem>.manifest.json`` describing a dataset file."""
    counts: dict[str, int] = {}
    for t in trajectories:
        counts[t.provenance] = counts.get(t.provenance, 0) + 1
    path = Path(out).with_suffix(".manifest.json")
    body = {**payload, "dataset_sha256": _sha256(out), "counts_by_provenance": dict(sorted(counts.items()))}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _floats(text: str) -> list[float]:
    from .decoding import parse_beta

    return [parse_beta(x) for x in text.split(",") if x.strip()]


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_vocab(args) -> None:
    from .datagen import scripted_returns, search_lava_vocab
    from .wordle import sample_vocab, write_vocab

    if args.lava:
        words = search_lava_vocab(args.size, args.seed, iters=args.iters, search_seed=args.search_seed)
    else:
        words = sample_vocab(args.size, args.seed)
    write_vocab(words, args.out)
    upper, adversarial = scripted_returns(words)
    _emit({"out": str(args.out), "size": len(words), "sha256": _sha256(args.out),
           "upper_bound_return": upper, "adversarial_return": adversarial})


def cmd_gen_synthetic(args) -> None:
    from .datagen import MixtureSpec, generate_mixture, write_color_rows
    from .evaluation import build_probes, write_probes
    from .wordle import read_vocab, write_trajectories

    vocab = read_vocab(args.vocab)
    props = [float(p) for p in args.props.split(",")]
    spec = MixtureSpec(vocab, args.total, tuple(props), args.seed)
    data = generate_mixture(spec)
    write_trajectories(data, args.out)
    summary = {"out": str(args.out), "vocab_sha256": _sha256(args.vocab), **spec.to_dict(), "counts": spec.counts(),
               "mean_return": sum(t.total_return for t in data) / len(data)}
    summary["manifest"] = str(_write_manifest(args.out, {"vocab_sha256": summary["vocab_sha256"], "seed": args.seed,
                                                        "spec": spec.to_dict()}, data))
    if args.probes_out:
        probes = build_probes(data, vocab)
        write_probes(probes, args.probes_out)
        summary["probes"] = len(probes)
    if args.grids_out:
        write_color_rows(([fb for _, fb in t.history()] for t in data), args.grids_out)
        summary["grids_out"] = str(args.grids_out)
    _emit(summary)


def cmd_retrofit(args) -> None:
    from .datagen import read_color_rows, retrofit_all
    from .wordle import read_vocab, write_trajectories

    vocab = read_vocab(args.vocab)
    grids = read_color_rows(args.rows)
    stats = retrofit_all(grids, vocab, args.seed)
    write_trajectories(stats.trajectories, args.out)
    manifest = _write_manifest(args.out, {"vocab_sha256": _sha256(args.vocab), "rows_sha256": _sha256(args.rows), "seed": args.seed,
                                          "grids": stats.attempted}, stats.trajectories)
    _emit({"out": str(args.out), "grids": stats.attempted, "retrofitted": stats.feasible,
           "feasible_rate": stats.feasible / max(stats.attempted, 1), "manifest": str(manifest)})


def _train_configs(args):
    from .model import ModelConfig
    from .train import TrainConfig

    model_opts, train_opts = {}, {}
    if args.config:
        d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ValueError(f"config keys must be 'model' and 'train', got {sorted(unknown)}")
        model_opts.update(d.get("model", {}))
        train_opts.update(d.get("train", {}))
    flags = {"tau": args.tau, "alpha": args.alpha, "gamma": args.gamma, "polyak": args.polyak, "lr": args.lr,
             "batch_size": args.batch_size, "max_steps": args.steps, "seed": args.seed, "filter_pct": args.pct}
    train_opts.update({k: v for k, v in flags.items() if v is not None})
    if args.layers is not None:
        model_opts["n_layers"] = args.layers
    return ModelConfig(**model_opts), TrainConfig.from_dict(train_opts)


def cmd_train(args) -> None:
    from .model import load_checkpoint
    from .train import canonical_algo, train
    from .wordle import read_trajectories

    algo = canonical_algo(args.algo)
    model_config, config = _train_configs(args)
    data = read_trajectories(args.data)
    pi_beta = load_checkpoint(args.pi_beta)[0] if args.pi_beta else None
    value = load_checkpoint(args.value)[0] if args.value else None
    result = train(algo, data, config, model_config, out_dir=args.out, pi_beta=pi_beta, value_model=value)
    last = result.log[-1] if result.log else {}
    _emit({"algo": algo, "out": str(args.out), "steps": result.steps, "stopped_early": result.stopped_early,
           "final_loss": last.get("total_loss"), "model": asdict(model_config), "train": asdict(config)})


def _load_models(pi_dir, value_dir):
    from .model import load_checkpoint

    pi = load_checkpoint(pi_dir)[0] if pi_dir else None
    value, manifest = load_checkpoint(value_dir) if value_dir else (None, {})
    return pi, value, manifest


def cmd_eval(args) -> None:
    from .decoding import BEHAVIOR, SWEEP_COLUMNS, ExtractionSpec, TokenPolicy, beta_sweep
    from .evaluation import entropy_estimate, evaluate_policy
    from .wordle import read_vocab

    vocab = read_vocab(args.vocab)
    betas = _floats(args.beta)
    if not betas:
        raise ValueError("--beta needs at least one value")
    pi, value, manifest = _load_models(args.pi_beta, args.value)
    if pi is None and value is None:
        raise ValueError("give --pi-beta, --value or both")
    algo = manifest.get("train_config", {}).get("algo", "bc" if value is None else "")
    tau = manifest.get("train_config", {}).get("tau") if value is not None else None
    temperature = args.temperature if args.sample else 0.0
    if args.sample:
        if value is None:
            raise ValueError("a sampled sweep needs --value")
        rows = beta_sweep(pi, value, vocab, betas, args.games, args.seed, temperature=temperature)
        out = Path(args.out or "sweep.csv")
        with open(out, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow(r.as_row())
        summary = {"out": str(out), "rows": [r.as_row() for r in rows]}
        if not args.no_figure:
            from .plotting import plot_tradeoff

            summary["figure"] = str(plot_tradeoff(rows, out.with_suffix(".png")))
        _emit(summary)
        return
    reports = []
    for beta in betas:
        if value is None:
            spec = ExtractionSpec(mode=BEHAVIOR)
        else:
            spec = ExtractionSpec(beta=beta)
        policy = TokenPolicy(pi, value, spec)
        rep = evaluate_policy(policy, vocab, args.games, args.seed, algo=algo, tau=tau)
        if args.entropy:
            sampled = TokenPolicy(pi, value, ExtractionSpec(beta=beta, mode=spec.mode, temperature=args.temperature))
            rep.entropy_nats = entropy_estimate(sampled, vocab, args.games, args.seed)
        reports.append(rep.to_dict())
        if value is None:
            break
    payload = reports[0] if len(reports) == 1 else reports
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(payload)


def cmd_sweep(args) -> None:
    from .evaluation import GridConfig, best_by_algo, run_suite, write_results
    from .wordle import read_vocab

    cfg = GridConfig.from_file(args.grid)
    if args.out:
        cfg.out = args.out
    cells = run_suite(cfg, read_vocab(cfg.vocab))
    write_results(cells, cfg.out)
    summary = {"out": cfg.out, "cells": len(cells), "evaluated": sum(c.report is not None for c in cells),
               "best": {a: c.as_row() for a, c in best_by_algo(cells).items()}}
    if cfg.figure:
        from .plotting import plot_results

        fig = plot_results(cells, Path(cfg.out).with_suffix(".png"))
        summary["figure"] = str(fig) if fig else None
    _emit(summary)


def cmd_diagnose_q(args) -> None:
    from .evaluation import q_preference, read_probes
    from .model import load_checkpoint

    probes = read_probes(args.probes)
    a = q_preference(load_checkpoint(args.value_a)[0], probes)
    b = q_preference(load_checkpoint(args.value_b)[0], probes)
    _emit({"probes": len(probes), "value_a": str(args.value_a), "value_b": str(args.value_b),
           "rate_a": a, "rate_b": b, "difference": a - b})


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ilql-wordle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=1, help="torch threads (1 keeps runs bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-vocab", help="sample a vocabulary from the built-in word list")
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--lava", action="store_true", help="search for a vocabulary where replaying early guesses is costly")
    s.add_argument("--iters", type=int, default=4000)
    s.add_argument("--search-seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_vocab)

    s = sub.add_parser("gen-synthetic", help="play the scripted mixture and write episodes as JSONL")
    s.add_argument("--vocab", required=True)
    s.add_argument("--total", type=int, required=True)
    s.add_argument("--props", default="0.09,0.455,0.455", help="upper_bound,suboptimal,adversarial shares")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--probes-out", help="also write turn-3 Q-preference probes")
    s.add_argument("--grids-out", help="also write the color grids with the words removed")
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("retrofit", help="rebuild word sequences for color grids")
    s.add_argument("--rows", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrofit)

    s = sub.add_parser("train", help="train one model and write a checkpoint directory")
    s.add_argument("--algo", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help='JSON file {"model": {...}, "train": {...}}; flags override it')
    s.add_argument("--tau", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--polyak", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--pct", type=float, help="filtered-bc: keep the top pct percent of episodes")
    s.add_argument("--layers", type=int)
    s.add_argument("--pi-beta", help="behavior checkpoint (psi)")
    s.add_argument("--value", help="value checkpoint (awr)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="play evaluation games with a trained policy")
    s.add_argument("--pi-beta")
    s.add_argument("--value")
    s.add_argument("--vocab", required=True)
    s.add_argument("--beta", default="8", help="one value or a comma list; 'inf' acts on Q alone")
    s.add_argument("--games", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sample", action="store_true", help="sample instead of greedy; writes the sweep CSV")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--entropy", action="store_true", help="add a sampled entropy estimate to each report")
    s.add_argument("--out")
    s.add_argument("--no-figure", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate the method grid described by a JSON file")
    s.add_argument("--grid", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("diagnose-q", help="compare Q-preference rates of two value checkpoints")
    s.add_argument("--value-a", required=True)
    s.add_argument("--value-b", required=True)
    s.add_argument("--probes", required=True)
    s.set_defaults(func=cmd_diagnose_q)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .compute import set_determinism

    set_determinism(args.threads)
    try:
        args.func(args)
    except FileNotFoundError as exc:
        return _fail("file_not_found", str(exc), 1)
    except (ValueError, RuntimeError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
