"""Brute-force ranking oracle.

For random (scores, target, exclusions) cases, sorts the full candidate list
(score descending, item id ascending) and reads off the target's position.
Scores are drawn from a small grid so ties are frequent. Writes
tests/data/metric_cases.json.
"""

import json
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[2] / "tests/data/metric_cases.json"


def brute_rank(scores, target, excluded):
    cands = [j for j in range(1, len(scores)) if j not in excluded]
    cands.sort(key=lambda j: (-scores[j], j))
    return cands.index(target) + 1


def ndcg(rank, k):
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr(rank, k):
    return 1.0 / rank if rank <= k else 0.0


def main():
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(1000):
        n_items = int(rng.integers(1, 40))
        scores = [0.0] + [float(v) for v in rng.integers(-4, 5, size=n_items) * 0.5]
        target = int(rng.integers(1, n_items + 1))
        others = [j for j in range(1, n_items + 1) if j != target]
        n_ex = int(rng.integers(0, len(others) + 1)) if others else 0
        excluded = sorted(int(j) for j in rng.choice(others, size=n_ex, replace=False)) if n_ex else []
        r = brute_rank(scores, target, set(excluded))
        cases.append({
            "scores": scores,
            "target": target,
            "excluded": excluded,
            "rank": r,
            "ndcg5": ndcg(r, 5),
            "ndcg10": ndcg(r, 10),
            "mrr5": mrr(r, 5),
            "mrr10": mrr(r, 10),
        })
    OUT.write_text(json.dumps({"cases": cases}) + "\n")
    print(f"wrote {len(cases)} cases to {OUT}")


if __name__ == "__main__":
    main()
