#!/usr/bin/env python3
"""Check that RSR is non-increasing in P for every (K, target_fmr) of an rsr-sweep CSV.

Usage: check_monotone.py rsr.csv
Exits 0 when every series is monotone, 1 otherwise.
"""
import csv
import sys
from collections import defaultdict


def main(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
    series = defaultdict(list)
    for row in rows:
        if row["P"] == "uniform":
            continue
        series[(int(row["K"]), row["target_fmr"])].append((int(row["P"]), float(row["rsr"])))
    bad = 0
    for (k, target), points in sorted(series.items()):
        points.sort()
        for (p0, r0), (p1, r1) in zip(points, points[1:]):
            if r1 > r0:
                print(f"K={k} FMR={target}: RSR rises from {r0} at P={p0} to {r1} at P={p1}")
                bad += 1
    print(f"{len(series)} series checked, {bad} violations")
    return 1 if bad else 0


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    sys.exit(main(sys.argv[1]))
