"""Textbook metric formulas in plain Python, independent of the package."""

import math


def pearson(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def average_rank(values):
    """Rank of each value: 1 + (number strictly smaller) + (ties - 1) / 2."""
    out = []
    for v in values:
        smaller = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        out.append(smaller + (equal + 1) / 2)
    return out


def spearman(a, b):
    return pearson(average_rank(a), average_rank(b))


def root_mean_square_error(a, b):
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)) / len(a))
