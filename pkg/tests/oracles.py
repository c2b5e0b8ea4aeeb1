"""Independent loop-based definitions of the multi-label measures."""
from fractions import Fraction


def hamming(Y, P):
    n, c = len(Y), len(Y[0])
    return sum(sum(1 for j in range(c) if Y[i][j] != P[i][j]) for i in range(n)) / (n * c)


def subset01(Y, P):
    return sum(1 for y, p in zip(Y, P) if list(y) != list(p)) / len(Y)


def rank_loss(Y, S):
    total = Fraction(0)
    for y, s in zip(Y, S):
        rel = [j for j in range(len(y)) if y[j]]
        irr = [j for j in range(len(y)) if not y[j]]
        if not rel or not irr:
            continue
        bad = Fraction(0)
        for a in rel:
            for b in irr:
                if s[a] < s[b]:
                    bad += 1
                elif s[a] == s[b]:
                    bad += Fraction(1, 2)
        total += bad / (len(rel) * len(irr))
    return float(total / len(Y))


def order(s):
    """Descending score, lower index first among equals (selection, no sort)."""
    left = list(range(len(s)))
    out = []
    while left:
        best = left[0]
        for j in left[1:]:
            if s[j] > s[best]:
                best = j
        out.append(best)
        left.remove(best)
    return out


def one_error(Y, S):
    return sum(1 for y, s in zip(Y, S) if not y[order(s)[0]]) / len(Y)


def coverage(Y, S):
    total = 0
    for y, s in zip(Y, S):
        o = order(s)
        ranks = [o.index(j) + 1 for j in range(len(y)) if y[j]]
        if ranks:
            total += max(ranks) - 1
    return total / len(Y)
