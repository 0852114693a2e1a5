#!/usr/bin/env python3
"""Run the full pipeline on the bundled synthetic benchmarks and print the
resulting mIoU with and without aggregation filtering.

Usage:
    python3 scripts/run_end_to_end.py [--workdir DIR] [--keep]
"""

import argparse
import csv
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from splatlift.cli import main as cli  # noqa: E402


def run(args):
    code = cli([str(a) for a in args])
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}: {args}")


def miou_from(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[-1][0] == "mIoU"
    return float(rows[-1][1])


def pipeline(spec, work, tag, use_filter):
    fix = work / f"fix_{tag}"
    if not fix.exists():
        run(["synth", "--spec", spec, "--out", fix])
    field = work / tag / "field.flt"
    run(["lift", "--scene", fix / "scene.ply", "--cameras", fix / "cameras.txt",
         "--features", fix / "features", "--lambda", "1.2", "--mode", "rowsum",
         "--matrix", "--out", field])
    if use_filter:
        filtered = work / tag / "filtered"
        run(["cluster-filter", "--field", field, "--scene", fix / "scene.ply",
             "--cameras", fix / "cameras.txt", "--labels", fix / "features",
             "--tau", "0.6", "--relift", "--out", filtered])
        field = filtered / "field.flt"
    seg = work / tag / "seg"
    for query in ("blob_a", "blob_b"):
        run(["segment", "--field", field, "--scene", fix / "scene.ply",
             "--cameras", fix / "cameras.txt",
             "--query", fix / "queries" / f"{query}.flt",
             "--threshold", "auto", "--out", seg])
    out_csv = work / tag / "miou.csv"
    run(["eval", "--pred", seg, "--gt", fix / "gt", "--out", out_csv])
    return miou_from(out_csv)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default=None)
    parser.add_argument("--keep", action="store_true",
                        help="keep intermediate outputs instead of deleting them")
    opts = parser.parse_args()
    work = Path(opts.workdir) if opts.workdir else Path(tempfile.mkdtemp(prefix="splatlift_"))
    work.mkdir(parents=True, exist_ok=True)
    scenes = REPO / "scenes"
    print(f"working directory: {work}")

    clean = pipeline(scenes / "two_blob.ini", work, "clean", use_filter=True)
    print(f"clean benchmark, filtered pipeline: mIoU = {clean:.4f}")

    noisy_raw = pipeline(scenes / "two_blob_noisy.ini", work, "noisy_raw", use_filter=False)
    noisy_filt = pipeline(scenes / "two_blob_noisy.ini", work, "noisy_filt", use_filter=True)
    print(f"noisy benchmark, no filtering:      mIoU = {noisy_raw:.4f}")
    print(f"noisy benchmark, with filtering:    mIoU = {noisy_filt:.4f}")
    print(f"filtering improvement:              {noisy_filt - noisy_raw:+.4f}")

    if not opts.keep and opts.workdir is None:
        shutil.rmtree(work)


if __name__ == "__main__":
    main()
