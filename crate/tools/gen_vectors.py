#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Independent reference values for the flowpipe test suite.

Everything here is recomputed from first principles with the Python standard
library (hashlib, fractions, itertools) and written to vectors/*.txt. The Rust
tests read those files; they never run this script. Rerun it only when a
definition changes, then review the diff.

    python3 tools/gen_vectors.py [--out vectors]
"""

import argparse
import hashlib
import itertools
import math
import random
from fractions import Fraction
from pathlib import Path


def tagged_hash(tag: bytes, payload: bytes) -> bytes:
    h = hashlib.sha256()
    h.update(len(tag).to_bytes(8, "big"))
    h.update(tag)
    h.update(payload)
    return h.digest()


def derive_seed(tags, randomness: bytes) -> bytes:
    payload = b"".join(len(t).to_bytes(8, "big") + t.encode() for t in tags) + randomness
    return tagged_hash(b"seed", payload)


class Stream:
    def __init__(self, seed: bytes):
        self.seed = seed
        self.counter = 0

    def word(self) -> int:
        d = tagged_hash(b"stream", self.seed + self.counter.to_bytes(8, "big"))
        self.counter += 1
        return int.from_bytes(d[:8], "big")

    def below(self, bound: int) -> int:
        limit = (2**64 // bound) * bound
        while True:
            w = self.word()
            if w < limit:
                return w % bound


def shuffle(seed: bytes, items):
    out = list(items)
    s = Stream(seed)
    for i in range(len(out) - 1, 0, -1):
        j = s.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def threshold_brute(n_s: int) -> int:
    # Largest t such that t + 1 honest shares exist even with t faulty:
    # n_s >= 2t + 1.
    best = 0
    for t in range(n_s):
        if 2 * t + 1 <= n_s:
            best = t
    return best


def hypergeom_brute(n_c: int, byz: int, size: int, num: int, den: int) -> Fraction:
    """Enumerate every cluster of `size` out of `n_c`; the first `byz` are Byzantine."""
    need = -(-size * num // den)
    hits = total = 0
    for combo in itertools.combinations(range(n_c), size):
        total += 1
        hits += sum(1 for x in combo if x < byz) >= need
    return Fraction(hits, total)


def hypergeom_exact(n_c: int, byz: int, size: int, num: int, den: int) -> Fraction:
    need = -(-size * num // den)
    fav = sum(math.comb(byz, x) * math.comb(n_c - byz, size - x) for x in range(need, min(byz, size) + 1))
    return Fraction(fav, math.comb(n_c, size))


def chunk(costs, budget):
    out, start, c = [], 0, 0
    for i, tau in enumerate(costs):
        if i > start and c + tau > budget:
            out.append((start, i, c))
            start, c = i, 0
        c += tau
    out.append((start, len(costs), c))
    return out


def u64(x):
    return x.to_bytes(8, "big")


def state_commitment(epoch, nodes, genesis_total):
    """Canonical protocol-state bytes as laid out in docs/state-format.md.

    nodes: (key, role_code, stake, address); no held stake, challenges or
    DRB group key.
    """
    out = b"".join(u64(x) for x in epoch)
    out += u64(len(nodes))
    for key, role, stake, address in sorted(nodes):
        out += u64(key) + bytes([role]) + u64(stake) + u64(0) + address.to_bytes(4, "big")
        out += b"\x00" + u64(0) + b"\x00"
    out += u64(0) + u64(0) + b"\x00"
    out += u64(genesis_total) + u64(0) * 4
    return tagged_hash(b"protocol-state", out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "vectors"))
    out = Path(ap.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "threshold.txt", "w") as f:
        f.write("# n_s t\n")
        for n in range(1, 101):
            f.write(f"{n} {threshold_brute(n)}\n")

    with open(out / "window.txt", "w") as f:
        f.write("# window reference inclusion accepted\n")
        for h in range(995, 1016):
            f.write(f"10 1000 {h} {int(1000 < h <= 1010)}\n")

    with open(out / "stream.txt", "w") as f:
        f.write("# tags(comma) randomness_hex seed_hex first_four_words\n")
        for tags, r in [(["collector", "cluster"], b"rand"), (["verify"], b"\x00" * 32), (["a", "bc", ""], b"\xff")]:
            seed = derive_seed(tags, r)
            s = Stream(seed)
            words = " ".join(str(s.word()) for _ in range(4))
            f.write(f"{','.join(tags)} {r.hex()} {seed.hex()} {words}\n")

    with open(out / "shuffle.txt", "w") as f:
        f.write("# randomness_hex n permutation_of_0..n  (seed tags: shuffle-test)\n")
        for r, n in [(b"x", 1), (b"x", 2), (b"x", 10), (b"flowpipe", 33), (bytes(range(32)), 100)]:
            p = shuffle(derive_seed(["shuffle-test"], r), range(n))
            f.write(f"{r.hex()} {n} {' '.join(map(str, p))}\n")

    with open(out / "clusters.txt", "w") as f:
        f.write("# keys 1000+7i for i<n, randomness 'rand'; n c then one line per cluster\n")
        for n, c in [(7, 3), (12, 4), (25, 6), (40, 1)]:
            keys = sorted(1000 + 7 * i for i in range(n))
            pi = shuffle(derive_seed(["collector", "cluster"], b"rand"), keys)
            k = n // c
            members = [pi[i * k:(i + 1) * k] for i in range(c)]
            for i, key in enumerate(pi[c * k:]):
                members[i].append(key)
            f.write(f"{n} {c}\n")
            for m in members:
                f.write(" ".join(map(str, m)) + "\n")

    with open(out / "hypergeometric_small.txt", "w") as f:
        f.write("# n_c byz size threshold_num threshold_den probability (by enumeration)\n")
        for n_c in range(1, 13):
            for byz in range(0, n_c + 1, max(1, n_c // 4)):
                for size in range(1, n_c + 1):
                    p = hypergeom_brute(n_c, byz, size, 1, 3)
                    f.write(f"{n_c} {byz} {size} 1 3 {p.numerator}/{p.denominator}\n")

    with open(out / "hypergeometric_large.txt", "w") as f:
        f.write("# n_c byz size probability (exact rational, printed to 17 significant digits)\n")
        for size in range(50, 81):
            p = hypergeom_exact(1040, 346, size, 1, 3)
            f.write(f"1040 346 {size} {float(p):.17e}\n")

    rng = random.Random(20240917)
    with open(out / "chunks.txt", "w") as f:
        f.write("# budget | costs | start:end:consumption ...\n")
        cases = [(100, []), (100, [100]), (100, [101]), (100, [60, 40, 1]), (100, [150, 10, 200])]
        for _ in range(60):
            budget = rng.randint(1, 200)
            costs = [rng.randint(0, 2 * budget) for _ in range(rng.randint(0, 25))]
            cases.append((budget, costs))
        for budget, costs in cases:
            bounds = " ".join(f"{a}:{b}:{c}" for a, b, c in chunk(costs, budget))
            f.write(f"{budget} | {' '.join(map(str, costs))} | {bounds}\n")

    with open(out / "state.txt", "w") as f:
        f.write("# epoch(index,start,length,deadline) | nodes key:role:stake:address | commitment\n")
        cases = [
            ((0, 0, 100, 50), []),
            ((0, 0, 100, 50), [(7, 1, 100, 1), (3, 0, 250, 2)]),
            ((4, 400, 100, 480), [(9, 2, 1000, 0), (1, 3, 5, 9), (5, 1, 1, 3)]),
        ]
        for epoch, nodes in cases:
            total = sum(n[2] for n in nodes)
            ns = " ".join(f"{k}:{r}:{st}:{a}" for k, r, st, a in nodes)
            f.write(f"{','.join(map(str, epoch))} | {ns} | {state_commitment(epoch, nodes, total).hex()}\n")

    print(f"wrote vectors to {out}")


if __name__ == "__main__":
    main()
