"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, count, bench,
print-config. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure. Every command echoes the seed it ran under.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import PANet, count_breakdown, load_checkpoint, save_checkpoint
from .blocks import BlockParams, block_forward
from .checks import DEFAULT_TOL, SCOPES, run_scope
from .config import RunConfig
from .data import ArrayDataset, SynthConfig, generate, load_dataset, split, write_manifest
from .errors import DataError, NumericError, UsageError
from .recognize import evaluate
from .tensor import Tensor, no_grad
from .train import train


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; route through UsageError for exit 1."""

    def error(self, message):
        raise UsageError(message)


# flags shared by every command that builds a model or a trainer
_CONFIG_FLAG_FIELDS = (
    "img_size", "in_channels", "base_channels", "embed_dim", "expand_ratio",
    "lr0", "weight_decay", "batch_size", "epochs", "lr_min", "margin",
    "p_identities", "k_samples", "seed",
)


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON file overriding defaults")
    p.add_argument("--desk", action="store_true", help="desk-scale preset (short schedule)")
    p.add_argument("--topology", choices=("parallel", "serial"))
    p.add_argument("--pooling", choices=("both", "gap", "gmp"))
    p.add_argument("--depths", help="comma-separated blocks per stage, e.g. 1,1,2,1")
    p.add_argument("--multipliers", dest="channel_multipliers",
                   help="comma-separated per-stage channel multipliers")
    for name in _CONFIG_FLAG_FIELDS:
        flag = "--" + name.replace("_", "-")
        kind = float if isinstance(RunConfig.__dataclass_fields__[name].default, float) else int
        p.add_argument(flag, type=kind, dest=name)


def _resolve(args) -> RunConfig:
    flags = {}
    for name in _CONFIG_FLAG_FIELDS + ("topology", "pooling", "depths", "channel_multipliers"):
        v = getattr(args, name, None)
        if v is not None:
            flags[name] = v
    return RunConfig.resolve(config_file=args.config, desk=args.desk, flags=flags)


def _subset(ds: ArrayDataset, split_name: str) -> ArrayDataset:
    """Rows of one split; an untagged manifest (single split) passes through."""
    mask = np.asarray([r.split == split_name for r in ds.records])
    if not mask.any():
        return ds
    return ArrayDataset(
        images=ds.images[mask],
        labels=ds.labels[mask],
        label_names=ds.label_names,
        records=[r for r, m in zip(ds.records, mask) if m],
    )


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        n_identities=args.ids,
        samples_per_identity=args.samples,
        image_size=args.size,
        seed=args.seed,
    )
    records = generate(cfg, args.out)
    train_recs, test_recs = split(records, ratio=args.train_fraction, seed=args.seed)
    merged = sorted(train_recs + test_recs, key=lambda r: r.path)
    manifest = Path(args.out) / "manifest.jsonl"
    write_manifest(merged, manifest)
    print(f"identities: {cfg.n_identities}  samples/identity: {cfg.samples_per_identity}  "
          f"size: {cfg.image_size}px  seed: {cfg.seed}")
    print(f"split: {len(train_recs)} train / {len(test_recs)} test")
    print(manifest)
    return 0


def cmd_train(args) -> int:
    rc = _resolve(args)
    ds = _subset(load_dataset(args.data, image_size=rc.img_size), "train")
    model = PANet.create(rc.backbone_config(), seed=rc.seed)
    metrics_path = args.metrics or (args.out + ".metrics.csv")
    t0 = time.perf_counter()
    rows = train(model, ds, rc.train_config(), metrics_path=metrics_path)
    wall = time.perf_counter() - t0
    save_checkpoint(model, args.out)
    print(f"seed: {rc.seed}  steps: {len(rows)}  final loss: {rows[-1].loss:.6f}  "
          f"wall: {wall:.1f}s")
    print(f"checkpoint: {args.out}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    ds = _subset(load_dataset(args.data, image_size=model.config.img_size), "test")
    report = evaluate(model, ds, seed=args.seed)
    print(report.to_csv(), end="")
    print(f"probes: {report.n}  correct: {report.tp}  seed: {report.seed}")
    if report.excluded_identities:
        print(f"excluded single-sample identities: {len(report.excluded_identities)}")
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
        print(f"report: {args.report}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"csv: {args.csv}")
    return 0


def cmd_gradcheck(args) -> int:
    worst_exit = 0
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    for scope in scopes:
        rows = run_scope(scope, seed=args.seed, tol=args.tol)
        print(f"[{scope}] seed: {args.seed}  tol: {args.tol:g}")
        for r in rows:
            verdict = "pass" if r.passed(args.tol) else "FAIL"
            print(f"  {verdict}  {r.max_rel_err:11.3e}  {r.name}")
        if not all(r.passed(args.tol) for r in rows):
            worst_exit = 3
    return worst_exit


def cmd_count(args) -> int:
    rc = _resolve(args)
    cfg = rc.backbone_config()
    rows = count_breakdown(cfg)
    widest = max(len(name) for name, _, _ in rows)
    print(f"{'component':<{widest}}  {'params':>12}  {'macs':>14}")
    for name, n_params, n_macs in rows:
        print(f"{name:<{widest}}  {n_params:>12}  {n_macs:>14}")
    total_p = sum(r[1] for r in rows)
    total_m = sum(r[2] for r in rows)
    print(f"{'total':<{widest}}  {total_p:>12}  {total_m:>14}")
    print(f"#P {total_p / 1e6:.2f}M  #M {total_m / 1e9:.2f}G")
    return 0


def _latency_stats(samples_ms: list[float]) -> tuple[float, float, float]:
    arr = np.asarray(samples_ms)
    return float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95))


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError(f"--iters must be at least 1, got {args.iters}")
    rc = _resolve(args)
    cfg = rc.backbone_config()
    model = PANet.create(cfg, seed=rc.seed)
    rng = np.random.default_rng(rc.seed)
    x = rng.standard_normal((1, cfg.in_channels, cfg.img_size, cfg.img_size)).astype(np.float32)
    rows = []

    def timed(name, fn):
        fn()  # warmup
        samples = []
        for _ in range(args.iters):
            t0 = time.perf_counter()
            fn()
            samples.append(1e3 * (time.perf_counter() - t0))
        rows.append((name, *_latency_stats(samples)))

    for i, blocks in enumerate(model.stages):
        side = cfg.stage_sizes[i]
        feat = rng.standard_normal((1, cfg.stage_widths[i], side, side)).astype(np.float32)
        for j, bp in enumerate(blocks):
            ft = Tensor(feat)

            def run_block(bp=bp, ft=ft):
                with no_grad():
                    block_forward(ft, bp)

            timed(f"stages.{i}.blocks.{j}", run_block)

    def run_model():
        with no_grad():
            model.forward(Tensor(x))

    timed("forward", run_model)
    header = "name,mean_ms,p50_ms,p95_ms"
    lines = [header] + [f"{n},{m:.3f},{p50:.3f},{p95:.3f}" for n, m, p50, p95 in rows]
    print("\n".join(lines))
    print(f"iters: {args.iters}  seed: {rc.seed}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"csv: {args.out}")
    return 0


def cmd_print_config(args) -> int:
    print(_resolve(args).to_json())
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="panet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("gen-data", help="write a synthetic identity corpus")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model on a manifest's train split")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--metrics", metavar="CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="gallery/probe accuracy of a checkpoint")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", metavar="JSON")
    p.add_argument("--csv", metavar="CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter and MAC totals")
    _add_config_flags(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", help="forward latency per block and end to end")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out", metavar="CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("print-config", help="echo the merged effective settings")
    _add_config_flags(p)
    p.set_defaults(func=cmd_print_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "cmd", None) is None:
            parser.error("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


def cli_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli_entry()
