#!/usr/bin/env python3
"""Fetch the experimental band-gap datasets into data/external/.

The matbench `expt_gap` and `expt_is_metal` tables are shipped inside the
`crabnet` wheel on PyPI. This script downloads that wheel with pip, pulls the
two CSVs out of it and rewrites them into the `composition,target,source`
layout read by `rpt`.

    python3 scripts/fetch_data.py            # writes data/external/*.csv
    python3 scripts/fetch_data.py --sample   # also refreshes data/sample/

Outputs:
    classify_gapped.csv     nonmetals, target 1
    classify_nongapped.csv  metals, target 0
    regress_gapped.csv      materials with an experimental gap > 0 eV
"""

import argparse
import csv
import io
import random
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
WHEEL = "crabnet==2.0.8"
GAP = "crabnet/data/matbench/expt_gap.csv"
METAL = "crabnet/data/matbench/expt_is_metal.csv"


def read_member(zf, name):
    with zf.open(name) as fh:
        return list(csv.DictReader(io.TextIOWrapper(fh, encoding="utf-8")))


def write(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["composition", "target", "source"])
        w.writerows(rows)
    print(f"wrote {len(rows):5d} rows -> {path.relative_to(ROOT)}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sample", action="store_true", help="also rewrite data/sample/")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", WHEEL, "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(Path(tmp).glob("crabnet-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            gap = read_member(zf, GAP)
            metal = read_member(zf, METAL)

    gapped = [(r["formula"], "1", "experimental") for r in metal if r["target"] == "0"]
    metals = [(r["formula"], "0", "experimental") for r in metal if r["target"] == "1"]
    regress = [(r["formula"], r["target"], "experimental") for r in gap if float(r["target"]) > 0]

    out = ROOT / "data" / "external"
    write(out / "classify_gapped.csv", gapped)
    write(out / "classify_nongapped.csv", metals)
    write(out / "regress_gapped.csv", regress)

    if args.sample:
        rng = random.Random(20200520)
        sample = ROOT / "data" / "sample"
        write(sample / "gapped.csv", sorted(rng.sample(regress, 150)))
        write(sample / "nongapped.csv", sorted(rng.sample(metals, 120)))


if __name__ == "__main__":
    main()
