"""Pure-Python sequence kernels.

Reference implementations of the token-sequence loops used by the text
metrics. The compiled module (``_ckern``) implements the same contracts;
all results are integers, so the two backends must agree exactly, not
just within tolerance.
"""

from collections import Counter


def lcs_length(a, b):
    """Length of the longest common subsequence of two int sequences."""
    a = [int(x) for x in a]
    b = [int(x) for x in b]
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = [0] * (m + 1)
    cur = [0] * (m + 1)
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                left = cur[j - 1]
                up = prev[j]
                cur[j] = left if left >= up else up
        prev, cur = cur, prev
    return prev[m]


def clipped_ngram_matches(cand, refs, n):
    """Clipped n-gram matches of a candidate against one or more references.

    Returns ``(matches, total)`` where ``total`` is the number of candidate
    n-grams and ``matches`` is the sum over distinct candidate n-grams of
    ``min(count_in_candidate, max_count_over_references)``.
    """
    if n <= 0:
        raise ValueError("n-gram order must be positive")
    cand = [int(x) for x in cand]
    total = len(cand) - n + 1
    if total <= 0:
        return 0, 0
    cand_counts = Counter(tuple(cand[i:i + n]) for i in range(total))
    best = Counter()
    for ref in refs:
        ref = [int(x) for x in ref]
        span = len(ref) - n + 1
        if span <= 0:
            continue
        for gram, count in Counter(
                tuple(ref[j:j + n]) for j in range(span)).items():
            if count > best[gram]:
                best[gram] = count
    matches = sum(min(c, best[g]) for g, c in cand_counts.items())
    return matches, total


def greedy_align(cand, ref):
    """Greedy exact-token alignment used by the harmonic-mean metric.

    Scans the candidate left to right, matching each token to the earliest
    unmatched identical reference token. Returns ``(matches, chunks)`` where
    a chunk is a maximal run of matches contiguous in both sequences.
    """
    cand = [int(x) for x in cand]
    ref = [int(x) for x in ref]
    taken = [False] * len(ref)
    matches = 0
    chunks = 0
    prev_c = -2
    prev_r = -2
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not taken[j] and rtok == tok:
                taken[j] = True
                matches += 1
                if i != prev_c + 1 or j != prev_r + 1:
                    chunks += 1
                prev_c = i
                prev_r = j
                break
    return matches, chunks
