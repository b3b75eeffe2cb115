"""Independent reference implementations used by the tests."""
import itertools
import math


def partition_oracle(times, P, caps=None, mems=None):
    """(objective, boundaries) by enumeration, or (inf, None) when nothing fits."""
    L = len(times)
    best = (math.inf, None)
    for cut in itertools.combinations(range(1, L), P - 1):
        edges = [0, *cut, L]
        blocks = [range(edges[i], edges[i + 1]) for i in range(P)]
        if mems is not None and any(sum(mems[j] for j in b) > caps[i] for i, b in enumerate(blocks)):
            continue
        obj = max(sum(times[j] for j in b) for b in blocks)
        if obj < best[0] or (obj == best[0] and list(cut) < best[1]):
            best = (obj, list(cut))
    return best


def min_frequency_oracle(curve, f_lo, f_hi, step, bound):
    """Smallest frequency on the f_lo + k*step grid (plus f_hi) meeting ``bound``, or None."""
    f = f_lo
    while f < f_hi:
        if curve(f) <= bound:
            return f
        f += step
    return f_hi if curve(f_hi) <= bound else None


def ring_recoverable_oracle(n, failed):
    """Enumerate every copy of every partition; recoverable iff each has a live copy."""
    copies = {r: {r} for r in range(n)}
    for holder in range(n):
        if n > 1:
            copies[(holder + 1) % n].add(holder)
    return all(copies[r] - set(failed) for r in range(n))


def byte_owners(layout_ranges, total):
    owner = [None] * total
    for r, ivs in layout_ranges.items():
        for lo, hi in ivs:
            for b in range(lo, hi):
                owner[b] = r
    return owner
