"""``gmixer`` command line: prep, train, eval, gradcheck, bench (and synth).

Exit codes: 0 success, 1 property-check failure, 2 input/contract error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_FILES = ("train.jsonl", "val.jsonl", "test.jsonl")
ATOM_SHIFT = 1
THREADS_ENV = "GMIXER_THREADS"

log = logging.getLogger("gmixer")


class UsageError(Exception):
    """Input or contract problem reported with exit code 2."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three fractions, e.g. 0.8,0.1,0.1")
    return tuple(parts)


def _sizes(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


# ---------------------------------------------------------------------------
# prep


def cmd_prep(args) -> int:
    from gmixer.graphs import GraphFormatError, compute_degree_stats, dumps_jsonl, parse_record, split_dataset, vocab_sizes

    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    graphs, problems = [], []
    with open(src, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                g = parse_record(line)
            except GraphFormatError as exc:
                problems.append(f"line {lineno}: {exc.reason}")
                continue
            if not args.min_atoms <= g.num_nodes <= args.max_atoms:
                problems.append(f"line {lineno}: {g.num_nodes} atoms outside [{args.min_atoms}, {args.max_atoms}]")
                continue
            graphs.append(g)
    if problems:
        for msg in problems[:50]:
            print(msg, file=sys.stderr)
        if len(problems) > 50:
            print(f"... and {len(problems) - 50} more", file=sys.stderr)
        raise UsageError(f"{len(problems)} invalid record(s); nothing written")
    if not graphs:
        raise UsageError("empty dataset")
    if args.expect_count is not None and len(graphs) != args.expect_count:
        raise UsageError(f"expected {args.expect_count} molecules, found {len(graphs)}")

    try:
        split = split_dataset(graphs, args.fractions, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    parts = [[g.shift_atoms(ATOM_SHIFT) for g in part] for part in (split.train, split.validation, split.test)]
    try:
        deltas = {mode: compute_degree_stats(parts[0], mode) for mode in ("log_mean", "raw_mean_degree")}
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stats = deltas[args.delta_mode]
    va, vb = vocab_sizes(p for part in parts for p in part)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for name, part in zip(SPLIT_FILES, parts):
        (out / name).write_text(dumps_jsonl(part), encoding="utf-8")
        checksums[name] = _sha256(out / name)
    sizes = [g.num_nodes for g in graphs]
    sidecar = {
        "dataset": src.stem,
        "delta": stats.delta,
        "delta_mode": args.delta_mode,
        "deltas": {m: s.delta for m, s in deltas.items()},
        "max_degree": stats.max_degree,
        "computed_over": stats.computed_over,
        "vocab_atoms": va,
        "vocab_bonds": vb,
        "atom_shift": ATOM_SHIFT,
        "n_max": max(sizes),
        "n_min": min(sizes),
        "count": len(graphs),
        "split_sizes": {name: len(part) for name, part in zip(SPLIT_FILES, parts)},
        "fractions": list(args.fractions),
        "seed": args.seed,
        "checksums": checksums,
    }
    (out / f"{src.stem}.stats.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"prepared {len(graphs)} graphs -> {out} (delta={stats.delta:.6f}, n_max={max(sizes)})")
    return EXIT_OK


def read_sidecar(data_dir: Path) -> dict:
    found = sorted(data_dir.glob("*.stats.json"))
    if not found:
        raise UsageError(f"no stats sidecar (*.stats.json) in {data_dir}; run `gmixer prep` first")
    if len(found) > 1:
        raise UsageError(f"multiple stats sidecars in {data_dir}: {[p.name for p in found]}")
    sidecar = json.loads(found[0].read_text())
    for name, digest in sidecar.get("checksums", {}).items():
        path = data_dir / name
        if not path.is_file() or _sha256(path) != digest:
            raise UsageError(f"stale stats sidecar {found[0].name}: {name} changed since prep; "
                             f"rerun `gmixer prep` to regenerate the splits and statistics")
    return sidecar


# ---------------------------------------------------------------------------
# train / eval


def _config_overrides(args) -> dict:
    from gmixer.training import TrainConfig

    return {k: getattr(args, k) for k in TrainConfig.field_types() if getattr(args, k, None) is not None}


def cmd_train(args) -> int:
    from gmixer.graphs import DatasetSplit, load_jsonl
    from gmixer.training import RunWriter, TrainingDiverged, load_config, train

    data_dir = Path(args.data_dir)
    sidecar = read_sidecar(data_dir)
    try:
        config = load_config(args.config, _config_overrides(args))
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    if sidecar["n_max"] > config.n_max:
        raise UsageError(f"dataset has graphs with {sidecar['n_max']} nodes but n_max={config.n_max}")
    splits = [load_jsonl(data_dir / name) for name in SPLIT_FILES]
    dataset = DatasetSplit(*splits, sidecar["vocab_atoms"], sidecar["vocab_bonds"])
    delta = sidecar["deltas"][config.delta_mode]

    writer = RunWriter(args.run_dir, config)
    try:
        model, history = train(config, dataset, delta, on_epoch=writer)
    except TrainingDiverged as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = writer.finish(model, history, dataset)
    print(json.dumps({k: summary[k] for k in ("best_epoch", "best_val_mae", "best_test_mae", "train_mae")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from gmixer.checkpoint import CheckpointError
    from gmixer.graphs import GraphFormatError, load_jsonl, vocab_sizes
    from gmixer.training import evaluate, model_from_checkpoint

    try:
        model = model_from_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from None
    try:
        graphs = load_jsonl(args.split_file)
    except (GraphFormatError, OSError) as exc:
        raise UsageError(str(exc)) from None
    if not graphs:
        raise UsageError("empty split file")
    va, vb = vocab_sizes(graphs)
    arch = model.arch
    if va > arch.vocab_atoms or vb > arch.vocab_bonds:
        raise UsageError(f"vocab mismatch: data needs atoms={va}, bonds={vb}; "
                         f"checkpoint has atoms={arch.vocab_atoms}, bonds={arch.vocab_bonds}")
    largest = max(g.num_nodes for g in graphs)
    if largest > arch.n_max:
        raise UsageError(f"split has a {largest}-node graph; checkpoint n_max is {arch.n_max}")
    print(f"mae={evaluate(model, graphs, args.batch_size)!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / bench / synth


def cmd_gradcheck(args) -> int:
    import contextlib

    from gmixer.gradcheck import model_gradcheck
    from gmixer.tensor import corrupted_backward

    ctx = corrupted_backward(args.corrupt_backward) if args.corrupt_backward else contextlib.nullcontext()
    with ctx:
        worst = model_gradcheck(seed=args.seed, nodes=args.nodes, graphs=args.graphs, n_max=args.n_max,
                                layers=args.layers, d=args.d, probes=args.probes, h=args.h)
    for group, err in worst.items():
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{group:<24s} {err:.3e} {flag}")
    overall = max(worst.values())
    print(f"max_relative_error={overall:.3e}")
    return EXIT_OK if overall < args.tol else EXIT_CHECK


def cmd_bench(args) -> int:
    from gmixer.bench import run_bench

    try:
        report = run_bench(args.sizes, args.repeats, args.d, args.batch, args.token_hidden, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK if report.separation >= 0.5 else EXIT_CHECK


def cmd_synth(args) -> int:
    from gmixer.graphs import write_jsonl
    from gmixer.synth import generate, summary

    graphs = generate(args.count, args.seed, args.min_atoms, args.max_atoms)
    write_jsonl(args.out, graphs)
    print(json.dumps(summary(graphs)))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from gmixer.training import TrainConfig

    parser = argparse.ArgumentParser(prog="gmixer", description="Graph Mixer Network regression toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="validate, split and index a graph JSONL file")
    p.add_argument("input", help="graph JSONL file")
    p.add_argument("out_dir", help="directory for train/val/test JSONL and the stats sidecar")
    p.add_argument("--fractions", type=_fractions, default=(0.8, 0.1, 0.1),
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-mode", choices=("log_mean", "raw_mean_degree"), default="log_mean")
    p.add_argument("--min-atoms", type=int, default=9, help="reject molecules with fewer atoms (default 9)")
    p.add_argument("--max-atoms", type=int, default=37, help="reject molecules with more atoms (default 37)")
    p.add_argument("--expect-count", type=int, default=None, help="require exactly this many molecules")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a model on a prepared data directory")
    p.add_argument("data_dir")
    p.add_argument("run_dir")
    p.add_argument("--config", help="flat 'key = value' config file; flags below override it")
    for name, typ in TrainConfig.field_types().items():
        default = TrainConfig.__dataclass_fields__[name].default
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None,
                       help=f"(default {default})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MAE of a checkpoint on a split file")
    p.add_argument("checkpoint")
    p.add_argument("split_file")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=5, help="nodes per random graph (default 5)")
    p.add_argument("--graphs", type=int, default=3, help="random graphs in the batch (default 3)")
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt-backward", metavar="OP", default=None,
                   help="test hook: scale the adjoint of primitive OP (e.g. layer_norm)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="token-mixing vs attention forward scaling")
    p.add_argument("--sizes", type=_sizes, default=[64, 128, 256, 512, 1024, 2048])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--token-hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the BenchReport JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate synthetic ZINC-like molecules as graph JSONL")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=12000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-atoms", type=int, default=9)
    p.add_argument("--max-atoms", type=int, default=37)
    p.set_defaults(func=cmd_synth)
    return parser


def _limit_threads(command: str):
    from threadpoolctl import threadpool_limits

    if command == "bench":
        return threadpool_limits(limits=1)
    cap = os.environ.get(THREADS_ENV)
    return threadpool_limits(limits=int(cap)) if cap else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads(args.command)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
