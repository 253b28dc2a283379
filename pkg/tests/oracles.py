"""Brute-force scalar-loop reference implementations.

Pure Python floats and ``math`` only: explicit loops over batch entries,
hand-rolled log-sum-exp and cosine.  Nothing here touches the package's
tensor code, so these can serve as independent ground truth for it.
"""

import math


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def norm(u):
    return math.sqrt(dot(u, u))


def cosine(u, v):
    return dot(u, v) / (norm(u) * norm(v))


def logsumexp(values):
    peak = max(values)
    return peak + math.log(sum(math.exp(v - peak) for v in values))


def oracle_info_nce(q_rows, k_rows, negative_rows, tau):
    """Mean of -log(exp(q.k+ / tau) / sum over positive and negatives)."""
    total = 0.0
    for q, k in zip(q_rows, k_rows):
        logits = [dot(q, k) / tau] + [dot(q, n) / tau for n in negative_rows]
        total += -(logits[0] - logsumexp(logits))
    return total / len(q_rows)


def oracle_nt_xent(rows, tau):
    """Mean over all 2N anchors of the temperature-scaled cosine cross entropy."""
    size = len(rows)
    half = size // 2
    total = 0.0
    for i in range(size):
        j = i + half if i < half else i - half
        positive = cosine(rows[i], rows[j]) / tau
        denominator = [cosine(rows[i], rows[k]) / tau for k in range(size) if k != i]
        total += -(positive - logsumexp(denominator))
    return total / size


def oracle_neg_cosine(p_rows, z_rows):
    return -sum(cosine(p, z) for p, z in zip(p_rows, z_rows)) / len(p_rows)
