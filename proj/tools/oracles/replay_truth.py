"""Replays a synthetic dataset's truth.json rule against its interactions.

For every user, starts from the first logged item and applies
next(i) = argmin_{j != i} ||s_j - T s_i||^2 (ties to the smaller id) using only
truth.json. Exits non-zero if any replayed sequence differs from
interactions.tsv; with --write, stores the replayed sequences as replay.json.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def replay(truth, first, length):
    styles = np.array(truth["item_styles"])
    t = np.array(truth["transition_matrix"])
    seq = [first]
    while len(seq) < length:
        i = seq[-1]
        d = ((styles - t @ styles[i - 1]) ** 2).sum(axis=1)
        d[i - 1] = np.inf
        seq.append(int(np.argmin(d)) + 1)
    return seq


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("data_dir")
    ap.add_argument("--write", action="store_true")
    args = ap.parse_args()
    root = Path(args.data_dir)
    truth = json.loads((root / "truth.json").read_text())

    logged = {}
    for line in (root / "interactions.tsv").read_text().splitlines():
        u, i, ts = map(int, line.split("\t"))
        logged.setdefault(u, []).append((ts, i))
    mismatches = 0
    replayed = {}
    for u, rows in sorted(logged.items()):
        seq = [i for _, i in sorted(rows)]
        r = replay(truth, seq[0], len(seq))
        replayed[str(u)] = r
        if r != seq:
            mismatches += 1
            print(f"user {u}: logged {seq} replayed {r}", file=sys.stderr)
    print(f"{len(logged)} users, {mismatches} mismatches")
    if args.write:
        (root / "replay.json").write_text(json.dumps({"sequences": replayed}) + "\n")
    sys.exit(1 if mismatches else 0)


if __name__ == "__main__":
    main()
