"""``vql`` command line: gen, train, build-cache, infer, verify, bench.

Options can also come from one JSON file passed as ``--config``; its keys are
option names (``codebook_size`` or ``codebook-size``). Flags given on the
command line win over the file, and the resolved options are printed to
stderr at startup.

Exit codes: 0 success, 2 usage error, 40 verification failure, otherwise the
``code`` of the :class:`vql.errors.VQLError` subclass that stopped the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .attention import DEFAULT_LAMBDAS
from .bench import (
    BENCH_COLUMNS,
    THROUGHPUT_COLUMNS,
    TOPK_COLUMNS,
    BenchConfig,
    latency_summary,
    make_world,
    run_bench,
    run_throughput,
    run_topk,
    threads_from_env,
    write_csv,
)
from .cache import deserialize_cache, serialize_cache
from .data import SyntheticConfig, generate_synthetic, read_dataset, write_dataset
from .errors import ConfigError, MissingInputError, VQLError
from .serve import TIERS, Scorer
from .trainer import ModelParams, TrainConfig, train
from .verify import FAULTS, run_all

EXIT_VERIFY_FAILED = 40
METRIC_COLUMNS = (
    "epoch", "joint_loss", "rec_loss", "vq_loss", "max_key_err",
    "max_output_gap", "bound", "bound_ok", "auc",
)


def _ints(text: str) -> tuple:
    try:
        vals = tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _names(text: str) -> tuple:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _add_model_dims(p):
    p.add_argument("--d", type=int, default=16, help="key/value width")
    p.add_argument("--codebook-size", type=int, default=100, help="codewords per group (N)")
    p.add_argument("--groups", type=int, default=1, help="GVQ groups (G, must divide d)")
    p.add_argument("--heads", type=int, default=1, help="query heads (H, multiple of G)")
    p.add_argument("--scales", type=int, default=0, help=f"temporal scales M in [0, {len(DEFAULT_LAMBDAS)}]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vql", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vql {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with option values (flags win)")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("gen", "generate a planted-cluster synthetic dataset")
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--users", type=int, default=SyntheticConfig.n_users)
    p.add_argument("--avg-len", type=float, default=SyntheticConfig.avg_len)
    p.add_argument("--clusters", type=int, default=SyntheticConfig.n_clusters)
    p.add_argument("--noise", type=float, default=SyntheticConfig.noise)
    p.add_argument("--d-in", type=int, default=SyntheticConfig.d_in)
    p.add_argument("--items", type=int, default=SyntheticConfig.n_items)
    p.add_argument("--samples-per-user", type=int, default=SyntheticConfig.samples_per_user)
    p.add_argument("--binary", action="store_true", help="write dataset.npz instead of text logs")

    p = command("train", "train the model and write a metrics CSV")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="model.npz", help="model file")
    p.add_argument("--report", default=None, help="metrics CSV (default: <out>.metrics.csv)")
    _add_model_dims(p)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--codebook-lr", type=float, default=None)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--value-bound", type=float, default=4.0)

    p = command("build-cache", "build light/medium/heavy caches for a trained model")
    p.add_argument("--data", default="data")
    p.add_argument("--model", default="model.npz")
    p.add_argument("--tier", default="all", choices=TIERS + ("all",))
    p.add_argument("--out", default="cache", help="cache directory")

    p = command("infer", "score candidates for one user through a cache tier")
    p.add_argument("--data", default="data")
    p.add_argument("--model", default="model.npz")
    p.add_argument("--cache", default="cache", help="directory written by build-cache")
    p.add_argument("--tier", default="heavy", choices=TIERS)
    p.add_argument("--user", type=int, default=0, help="user id")
    p.add_argument("--candidates", type=int, default=100, help="number of candidates B")
    p.add_argument("--reps", type=int, default=5, help="timed repetitions")
    p.add_argument("--out", default=None, help="scores CSV (default: stdout)")

    p = command("verify", "run the randomized property suites")
    p.add_argument("--inject-fault", choices=FAULTS, default=None)
    p.add_argument("--out", default=None, help="report CSV")

    p = command("bench", "latency sweep plus the top-k discarded-mass diagnostic")
    _add_model_dims(p)
    p.set_defaults(d=64)
    p.add_argument("--lengths", type=_ints, default=BenchConfig.lengths)
    p.add_argument("--candidates", type=_ints, default=BenchConfig.candidates)
    p.add_argument("--tier", type=_names, default=("heavy",), help="comma-separated tiers")
    p.add_argument("--strategies", type=_names, default=("oracle", "vql"))
    p.add_argument("--reps", type=int, default=BenchConfig.reps)
    p.add_argument("--topk", type=int, default=BenchConfig.topk)
    p.add_argument("--topk-lengths", type=_ints, default=BenchConfig.topk_lengths)
    p.add_argument("--threads", type=int, default=None, help="throughput mode workers (default: VQL_THREADS or 1)")
    p.add_argument("--out", default="bench", help="output directory")
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv=None) -> argparse.Namespace:
    """Parse, then re-parse with the config file's values installed as defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except FileNotFoundError as exc:
            raise MissingInputError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known - {"config", "command"})
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        for key in ("lengths", "candidates", "topk_lengths", "tier", "strategies"):
            if isinstance(values.get(key), list):
                values[key] = tuple(values[key])
        values.pop("command", None)
        values.pop("config", None)
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _print_config(args) -> None:
    shown = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    print(f"# vql {args.command} " + json.dumps(shown, sort_keys=True), file=sys.stderr)


def _train_config(args, **extra) -> TrainConfig:
    if not 0 <= args.scales <= len(DEFAULT_LAMBDAS):
        raise ConfigError(f"--scales must lie in [0, {len(DEFAULT_LAMBDAS)}]")
    return TrainConfig(
        d=args.d, codebook_size=args.codebook_size, num_groups=args.groups, num_heads=args.heads,
        lambdas=DEFAULT_LAMBDAS[: args.scales] if args.scales else None, seed=args.seed, **extra,
    )


def _load_model(path):
    if not os.path.exists(path):
        raise MissingInputError(f"model file not found: {path}")
    params, cfg = ModelParams.load(path)
    if cfg is None:
        raise ConfigError(f"{path} carries no training config")
    return params, cfg


def _write_rows(rows, columns, path) -> None:
    if path is None:
        w = csv.DictWriter(sys.stdout, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    else:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        write_csv(rows, columns, path)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    ds = generate_synthetic(
        n_users=args.users, avg_len=args.avg_len, n_clusters=args.clusters, noise=args.noise,
        d_in=args.d_in, n_items=args.items, samples_per_user=args.samples_per_user, seed=args.seed,
    )
    paths = write_dataset(ds, args.out, binary=args.binary)
    events = sum(len(u) for u in ds.users)
    print(f"wrote {len(ds.users)} users, {events} events, {ds.num_samples} samples to {args.out}", file=sys.stderr)
    for p in paths:
        print(p)
    return 0


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    cfg = _train_config(
        args, alpha=args.alpha, beta=args.beta, lr=args.lr, codebook_lr=args.codebook_lr,
        epochs=args.epochs, batch_size=args.batch_size, value_norm_bound=args.value_bound,
        dump_dir=os.path.dirname(os.path.abspath(args.out)),
    )

    def log(m):
        print(
            f"epoch {m['epoch']:>3}  joint {m['joint_loss']:.6f}  rec {m['rec_loss']:.6f}  "
            f"max_key_err {m['max_key_err']:.4f}  gap {m['max_output_gap']:.3e} <= {m['bound']:.3e}  auc {m['auc']:.4f}",
            file=sys.stderr,
        )

    params, history = train(ds, cfg, log=log)
    params.save(args.out, cfg)
    rows = [
        {**{k: m[k] for k in METRIC_COLUMNS if k != "vq_loss"}, "vq_loss": float(sum(m["vq_loss"]))}
        for m in history
    ]
    rows = [{k: r[k] for k in METRIC_COLUMNS} for r in rows]
    _write_rows(rows, METRIC_COLUMNS, args.report or f"{args.out}.metrics.csv")
    print(args.out)
    return 0


def _cache_paths(root, tier, uid, g):
    return os.path.join(root, tier, f"u{uid}_g{g}.vqlc")


def cmd_build_cache(args) -> int:
    ds = read_dataset(args.data)
    params, cfg = _load_model(args.model)
    scorer = Scorer(params, cfg)
    tiers = TIERS if args.tier == "all" else (args.tier,)
    manifest = {"tiers": list(tiers), "users": [u.user_id for u in ds.users], "groups": cfg.num_groups,
                "codebook_checksums": [int(c) for c in scorer.checksums]}
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    if "light" in tiers:
        light = scorer.build_light(np.arange(ds.item_keys.shape[0]), ds.item_keys)
        serialize_cache(light, os.path.join(args.out, "light.vqlc"))
    for tier in ("medium", "heavy"):
        if tier not in tiers:
            continue
        os.makedirs(os.path.join(args.out, tier), exist_ok=True)
        for seq in ds.users:
            cscs = scorer.build_medium(seq)
            objs = cscs if tier == "medium" else scorer.bundles_from_csc(cscs, seq)
            for g, obj in enumerate(objs):
                serialize_cache(obj, _cache_paths(args.out, tier, seq.user_id, g), scorer.checksums[g])
    elapsed = time.perf_counter() - t0
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"built {', '.join(tiers)} caches for {len(ds.users)} users in {elapsed:.3f} s", file=sys.stderr)
    return 0


def _load_tier(args, scorer, uid):
    if args.tier == "light":
        path = os.path.join(args.cache, "light.vqlc")
        if not os.path.exists(path):
            raise MissingInputError(f"light cache not found: {path}")
        return deserialize_cache(path, scorer.params.codebooks)
    out = []
    for g in range(scorer.gvq.num_groups):
        path = _cache_paths(args.cache, args.tier, uid, g)
        if not os.path.exists(path):
            raise MissingInputError(f"{args.tier} cache not found: {path}")
        out.append(deserialize_cache(path, [scorer.checksums[g]]))
    return out


def cmd_infer(args) -> int:
    if args.reps < 1:
        raise ConfigError("--reps must be at least 1")
    ds = read_dataset(args.data)
    params, cfg = _load_model(args.model)
    scorer = Scorer(params, cfg)
    uidx = ds.user_index()
    if args.user not in uidx:
        raise MissingInputError(f"user {args.user} not in dataset")
    seq = ds.users[uidx[args.user]]
    cache = _load_tier(args, scorer, args.user)
    rng = np.random.default_rng(args.seed)
    n_items = ds.item_keys.shape[0]
    items = rng.choice(n_items, size=args.candidates, replace=args.candidates > n_items)
    X = ds.item_keys[items]
    t_q = float(seq.timestamps.max()) + 60.0
    try:
        scores = scorer.score(args.tier, cache, seq, X, t_q)
    except KeyError as exc:
        raise MissingInputError(f"light cache lacks an item of user {args.user}: {exc}") from exc
    times = []
    for _ in range(args.reps):
        t0 = time.perf_counter_ns()
        scorer.score(args.tier, cache, seq, X, t_q)
        times.append((time.perf_counter_ns() - t0) / 1e3)
    print(
        f"user {args.user} tier {args.tier} B={args.candidates} L={len(seq)}: "
        f"median {np.median(times):.1f} us over {args.reps} reps",
        file=sys.stderr,
    )
    rows = [{"rank": k, "item_id": int(i), "score": float(s)} for k, (i, s) in enumerate(zip(items, scores))]
    _write_rows(rows, ("rank", "item_id", "score"), args.out)
    return 0


def cmd_verify(args) -> int:
    results = run_all(args.seed, fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<14} cases={r.cases:<5} {r.detail}")
        if not r.passed and r.counterexample is not None:
            print(f"     counterexample: {json.dumps(r.counterexample, sort_keys=True)}")
    if args.out:
        rows = [{"suite": r.name, "passed": r.passed, "cases": r.cases, "detail": r.detail} for r in results]
        _write_rows(rows, ("suite", "passed", "cases", "detail"), args.out)
    return 0 if all(r.passed for r in results) else EXIT_VERIFY_FAILED


def cmd_bench(args) -> int:
    threads = args.threads if args.threads is not None else threads_from_env()
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    bc = BenchConfig(
        lengths=args.lengths, candidates=args.candidates, tiers=args.tier, strategies=args.strategies,
        d=args.d, codebook_size=args.codebook_size, groups=args.groups, heads=args.heads,
        scales=args.scales, reps=args.reps, seed=args.seed, topk=args.topk,
        topk_lengths=args.topk_lengths, threads=threads,
    )
    os.makedirs(args.out, exist_ok=True)
    world = make_world(bc)
    rows = run_bench(bc, world, log=lambda s: print(s, file=sys.stderr))
    write_csv(rows, BENCH_COLUMNS, os.path.join(args.out, "bench.csv"))
    write_csv(run_topk(bc, world), TOPK_COLUMNS, os.path.join(args.out, "topk.csv"))
    if threads > 1:
        write_csv(run_throughput(bc, world), THROUGHPUT_COLUMNS, os.path.join(args.out, "throughput.csv"))
    for tier in bc.tiers:
        summary = latency_summary(rows, tier)
        print(f"{tier}: " + "  ".join(f"{k} {v:.3f}" for k, v in summary.items()), file=sys.stderr)
    print(os.path.join(args.out, "bench.csv"))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "build-cache": cmd_build_cache,
    "infer": cmd_infer,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        _print_config(args)
        return COMMANDS[args.command](args)
    except VQLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return MissingInputError.code


if __name__ == "__main__":
    sys.exit(main())
