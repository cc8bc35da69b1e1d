"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's numerical code paths.
"""

from __future__ import annotations

import math

import numpy as np


def agree_bits(ra, rb, missing=-1):
    return [int(x != missing and y != missing and x == y) for x, y in zip(ra, rb)]


def posterior(bits, m, u, lam):
    """FS posterior computed term by term."""
    pm = 1.0
    pu = 1.0
    for b, mk, uk in zip(bits, m, u):
        pm *= mk if b else 1 - mk
        pu *= uk if b else 1 - uk
    num = lam * pm
    den = num + (1 - lam) * pu
    return 0.0 if den == 0 else num / den


def all_pair_scores(a_rows, b_rows, m, u, lam, missing=-1):
    """{(i, j): d} over the full cross product."""
    return {(i, j): posterior(agree_bits(ra, rb, missing), m, u, lam)
            for i, ra in enumerate(a_rows) for j, rb in enumerate(b_rows)}


def pair_loglik(pairs_bits, m, u, lam):
    """Mixture log-likelihood summed pair by pair."""
    total = 0.0
    for bits in pairs_bits:
        pm = math.prod(mk if b else 1 - mk for b, mk in zip(bits, m))
        pu = math.prod(uk if b else 1 - uk for b, uk in zip(bits, u))
        total += math.log(lam * pm + (1 - lam) * pu)
    return total


def em_pairs(pairs_bits, m, u, lam, n_iter):
    """Textbook EM over an explicit list of comparison vectors."""
    m, u = list(m), list(u)
    k = len(m)
    for _ in range(n_iter):
        g = []
        for bits in pairs_bits:
            pm = math.prod(mk if b else 1 - mk for b, mk in zip(bits, m))
            pu = math.prod(uk if b else 1 - uk for b, uk in zip(bits, u))
            g.append(lam * pm / (lam * pm + (1 - lam) * pu))
        sg = sum(g)
        sn = len(g) - sg
        lam = sg / len(g)
        m = [sum(gi * bits[v] for gi, bits in zip(g, pairs_bits)) / sg for v in range(k)]
        u = [sum((1 - gi) * bits[v] for gi, bits in zip(g, pairs_bits)) / sn for v in range(k)]
    return m, u, lam


def greedy_links(entries, xi):
    """Greedy one-to-one matching by repeated scanning for the best remaining candidate."""
    remaining = [e for e in entries if e[2] > xi]
    links = []
    used_i, used_j = set(), set()
    while True:
        best = None
        for e in remaining:
            if e[0] in used_i or e[1] in used_j:
                continue
            if best is None or (-e[2], e[0], e[1]) < (-best[2], best[0], best[1]):
                best = e
        if best is None:
            return links
        links.append(best)
        used_i.add(best[0])
        used_j.add(best[1])


def confusion(links, entity_a, entity_b):
    """tp/fp/fn by enumeration; an entity counts min(copies in A, copies in B) true pairs."""
    tp = sum(1 for i, j in links if entity_a[i] == entity_b[j])
    fp = len(links) - tp
    total = 0
    for e in set(entity_a) & set(entity_b):
        total += min(list(entity_a).count(e), list(entity_b).count(e))
    return tp, fp, total - tp


def grid_mle_2var(counts, coarse=0.05, fine=(0.01, 0.001), window=5):
    """Grid maximisation of the 2-variable mixture likelihood over (m1, m2, u1, u2, lam).

    Exhaustive on a coarse grid, then exhaustive on successively finer grids
    around the incumbent; returns (params, loglik).
    """
    counts = np.asarray(counts, dtype=np.float64)
    bits = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=bool)

    def evaluate(axes):
        best, best_ll = None, -np.inf
        m1, m2, u1, u2 = np.meshgrid(*axes[:4], indexing="ij")
        m1, m2, u1, u2 = (x.ravel() for x in (m1, m2, u1, u2))
        for lam in axes[4]:
            ll = np.zeros(m1.shape)
            for c, (b1, b2) in zip(counts, bits):
                pm = (m1 if b1 else 1 - m1) * (m2 if b2 else 1 - m2)
                pu = (u1 if b1 else 1 - u1) * (u2 if b2 else 1 - u2)
                ll += c * np.log(lam * pm + (1 - lam) * pu)
            k = int(np.argmax(ll))
            if ll[k] > best_ll:
                best_ll = ll[k]
                best = (m1[k], m2[k], u1[k], u2[k], lam)
        return np.array(best), best_ll

    grid = np.round(np.arange(coarse, 1, coarse), 10)
    best, ll = evaluate([grid] * 5)
    for step in fine:
        axes = []
        for c in best:
            ax = np.round(c + step * np.arange(-window, window + 1), 10)
            axes.append(ax[(ax > 0) & (ax < 1)])
        best, ll = evaluate(axes)
    return best, ll
