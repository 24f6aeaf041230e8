"""Golden fixtures for loading, filtering and the leave-one-out split.

Writes a small interactions file with a hand-chosen timestamp order, the
expected split computed directly from the protocol rules, and hand-packed .frf
feature files (built with struct, not the library writer).
"""

import json
import struct
from pathlib import Path

OUT = Path(__file__).resolve().parents[2] / "tests/data"

# (user, item, timestamp) in file order
ROWS = [
    # user 7: items a..e = 105, 101, 103, 104, 102 by time; file order shuffled
    (7, 104, 400), (7, 105, 100), (7, 102, 500), (7, 101, 200), (7, 103, 300),
    # user 3: 3 interactions, below the floor
    (3, 101, 10), (3, 102, 20), (3, 103, 30),
    # user 12: 6 interactions with a timestamp tie (file order breaks it)
    (12, 110, 50), (12, 101, 10), (12, 109, 40), (12, 108, 40), (12, 102, 20), (12, 105, 30),
]
MIN_INTERACTIONS = 5


def expected_split(rows):
    by_user = {}
    for u, i, t in rows:
        by_user.setdefault(u, []).append((t, len(by_user.get(u, [])), i))
    kept = {u: [i for _, _, i in sorted(h)] for u, h in by_user.items() if len(h) >= MIN_INTERACTIONS}
    items = sorted({i for seq in kept.values() for i in seq})
    index = {raw: k + 1 for k, raw in enumerate(items)}
    users = []
    for u in sorted(kept):
        raw = kept[u]
        users.append({
            "raw_user": u,
            "raw_sequence": raw,
            "sequence": [index[i] for i in raw],
            "train": [index[i] for i in raw[:-2]],
            "valid": {"context": [index[i] for i in raw[:-2]], "target": index[raw[-2]]},
            "test": {"context": [index[i] for i in raw[:-1]], "target": index[raw[-1]]},
        })
    n_inter = sum(len(s) for s in kept.values())
    return {
        "n_users": len(kept),
        "n_items": len(items),
        "n_interactions": n_inter,
        "sparsity": 1.0 - n_inter / (len(kept) * len(items)),
        "item_raw": items,
        "users": users,
    }


def frf(records, dim, magic=b"FRF1"):
    out = bytearray(magic)
    out += struct.pack("<II", len(records), dim)
    for item, vec in records:
        out += struct.pack("<I", item) + struct.pack(f"<{dim}f", *vec)
    return bytes(out)


def main():
    loo = OUT / "loo"
    loo.mkdir(parents=True, exist_ok=True)
    (loo / "interactions.tsv").write_text("".join(f"{u}\t{i}\t{t}\n" for u, i, t in ROWS))
    (loo / "golden.json").write_text(json.dumps(expected_split(ROWS), indent=1) + "\n")
    (OUT / "below_floor.tsv").write_text("".join(f"{u}\t{i}\t{t}\n" for u, i, t in ROWS if u == 3))
    (OUT / "malformed.tsv").write_text("a b\n")

    two = [(3, [0.5, -1.0, 2.0, 0.25]), (9, [1.0, 0.0, -0.5, 3.0])]
    (OUT / "two_items.frf").write_bytes(frf(two, 4))
    (OUT / "bad_magic.frf").write_bytes(frf(two, 4, magic=b"FRX1"))
    (OUT / "version2.frf").write_bytes(frf(two, 4, magic=b"FRF2"))
    (OUT / "truncated.frf").write_bytes(frf(two, 4)[:-3])
    # items 1..6 only; a catalog that mentions item 7 fails coverage
    (OUT / "items_1_to_6.frf").write_bytes(frf([(i, [float(i), -float(i)]) for i in range(1, 7)], 2))
    print("wrote", loo, "and .frf fixtures")


if __name__ == "__main__":
    main()
