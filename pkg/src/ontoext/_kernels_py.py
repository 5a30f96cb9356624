"""Pure-Python string-distance kernels.

Reference implementation for the compiled ``_ckernels`` module. Both expose
the same three functions and must agree exactly on every input.
"""

from __future__ import annotations


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cost = 0 if ca == cb else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def ratio(a: str, b: str) -> int:
    """Integer similarity in [0, 100] from edit distance over the longer length.

    Rounds half up. Any nonzero distance is capped at 99 so that 100 is
    reserved for identical inputs.
    """
    longest = max(len(a), len(b))
    if longest == 0:
        return 100
    dist = levenshtein(a, b)
    if dist == 0:
        return 100
    score = (200 * (longest - dist) + longest) // (2 * longest)
    return min(score, 99)


def max_ratio(term: str, candidates: list[str], floor: int = 0) -> int:
    """Best :func:`ratio` of ``term`` against ``candidates``.

    Candidates whose length difference alone rules out beating the running
    best are skipped. Returns 0 for an empty candidate list.
    """
    best = 0
    n = len(term)
    for cand in candidates:
        m = len(cand)
        longest = max(n, m)
        if longest == 0:
            return 100
        # |n - m| is a lower bound on the edit distance
        upper = (200 * (longest - abs(n - m)) + longest) // (2 * longest)
        if upper <= best or upper < floor:
            continue
        score = ratio(term, cand)
        if score > best:
            best = score
            if best == 100:
                break
    return best
