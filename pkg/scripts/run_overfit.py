#!/usr/bin/env python3
"""Desk-scale end-to-end run: synthesize a corpus, train, evaluate.

Reproduces the quick-start flow with one command and prints the
per-condition accuracy table at the end. Exit code mirrors the CLI.
"""

import argparse
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from panet.cli import main as cli  # noqa: E402


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ids", type=int, default=8)
    ap.add_argument("--samples", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--topology", choices=("parallel", "serial"), default="parallel")
    ap.add_argument("--pooling", choices=("both", "gap", "gmp"), default="both")
    ap.add_argument("--workdir", help="directory for corpus and artifacts "
                                      "(default: a fresh temp dir)")
    args = ap.parse_args(argv)

    work = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="panet-"))
    manifest = work / "corpus" / "manifest.jsonl"
    ckpt = work / "model.ckpt"

    rc = cli(["gen-data", "--ids", str(args.ids), "--samples", str(args.samples),
              "--seed", str(args.seed), "--out", str(work / "corpus")])
    if rc:
        return rc
    rc = cli(["train", "--data", str(manifest), "--out", str(ckpt), "--desk",
              "--seed", str(args.seed), "--topology", args.topology,
              "--pooling", args.pooling])
    if rc:
        return rc
    return cli(["eval", "--data", str(manifest), "--ckpt", str(ckpt),
                "--seed", str(args.seed),
                "--report", str(work / "report.json")])


if __name__ == "__main__":
    sys.exit(run())
