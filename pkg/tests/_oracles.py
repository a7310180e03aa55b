"""Independent reference implementations used as test oracles.

Written with plain Python loops and the ``math`` module so they share no code
path with the vectorized package implementations.
"""

import math

import numpy as np

from sphereloss.losses import MarginLossSpec

ACOS_EPS = 1e-7


def _acos(c):
    return math.acos(min(max(c, -1.0 + ACOS_EPS), 1.0 - ACOS_EPS))


def ref_target_logit(spec, theta):
    s, m = spec.s, spec.m
    v = spec.variant
    if v == "NSoftmax":
        return s * math.cos(theta)
    if v == "CosFace":
        return s * (math.cos(theta) - m)
    if v == "ArcFace":
        if spec.arcface_clip and theta + m > math.pi:
            return s * (math.cos(theta) - m * math.sin(m))
        return s * math.cos(theta + m)
    if v == "LiArcFace":
        return s * (math.pi - 2.0 * (theta + m)) / math.pi
    if v == "CombinedMargin":
        return s * (math.cos(spec.m1 * theta + spec.m2) - spec.m3)
    raise ValueError(v)


def ref_nontarget_logit(spec, theta):
    if spec.variant == "LiArcFace":
        return spec.s * (math.pi - 2.0 * theta) / math.pi
    return spec.s * math.cos(theta)


def ref_loss(spec, X, W, labels):
    """Mean margin cross-entropy, one sample at a time."""
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    total = 0.0
    col_norms = [math.sqrt(sum(W[k, j] ** 2 for k in range(W.shape[0]))) for j in range(W.shape[1])]
    for i in range(X.shape[0]):
        xn = math.sqrt(sum(v * v for v in X[i]))
        logits = []
        for j in range(W.shape[1]):
            c = sum(X[i, k] * W[k, j] for k in range(X.shape[1])) / (xn * col_norms[j])
            th = _acos(c)
            logits.append(ref_target_logit(spec, th) if j == labels[i] else ref_nontarget_logit(spec, th))
        top = max(logits)
        lse = top + math.log(sum(math.exp(z - top) for z in logits))
        total += lse - logits[labels[i]]
    return total / X.shape[0]


VARIANT_SPECS = {
    "NSoftmax": lambda s, m: MarginLossSpec("NSoftmax", s=s, m=0.0),
    "CosFace": lambda s, m: MarginLossSpec("CosFace", s=s, m=m * 0.7),
    "ArcFace": lambda s, m: MarginLossSpec("ArcFace", s=s, m=m),
    "ArcFaceClip": lambda s, m: MarginLossSpec("ArcFace", s=s, m=m, arcface_clip=True),
    "LiArcFace": lambda s, m: MarginLossSpec("LiArcFace", s=s, m=m),
    "CombinedMargin": lambda s, m: MarginLossSpec("CombinedMargin", s=s, m=0.0, m1=0.9 + 0.2 * m, m2=m * 0.6, m3=m * 0.4),
}


def random_loss_config(rng, kind):
    """Random (spec, X, W, labels) with every cosine inside [-0.999, 0.999]."""
    while True:
        n_samples = int(rng.integers(1, 6))
        d = int(rng.integers(2, 7))
        n_classes = int(rng.integers(2, 6))
        X = rng.normal(size=(n_samples, d)) * rng.uniform(0.5, 3.0)
        W = rng.normal(size=(d, n_classes)) * rng.uniform(0.5, 3.0)
        xn = X / np.linalg.norm(X, axis=1, keepdims=True)
        wn = W / np.linalg.norm(W, axis=0, keepdims=True)
        if np.all(np.abs(xn @ wn) <= 0.999):
            break
    labels = rng.integers(0, n_classes, size=n_samples)
    s = float(rng.uniform(1.0, 64.0))
    m = float(rng.uniform(0.0, 0.5))
    return VARIANT_SPECS[kind](s, m), X, W, labels


# -- verification ------------------------------------------------------------


def brute_best_threshold(scores, labels):
    """Scan every midpoint threshold and the two sentinels; lowest threshold on ties."""
    u = sorted(set(float(s) for s in scores))
    cands = [-math.inf] + [(a + b) / 2.0 for a, b in zip(u, u[1:])] + [math.inf]
    best_t, best_c = None, -1
    for t in cands:
        correct = sum(1 for s, l in zip(scores, labels) if (s >= t) == bool(l))
        if correct > best_c:
            best_t, best_c = t, correct
    return best_t


def brute_tenfold(scores, labels, folds):
    accs = []
    for k in sorted(set(int(f) for f in folds)):
        tr = [(s, l) for s, l, f in zip(scores, labels, folds) if f != k]
        te = [(s, l) for s, l, f in zip(scores, labels, folds) if f == k]
        t = brute_best_threshold([s for s, _ in tr], [l for _, l in tr])
        accs.append(sum(1 for s, l in te if (s >= t) == bool(l)) / len(te))
    return math.fsum(accs) / len(accs)


def brute_tar_at_far(scores, labels, far):
    neg = [s for s, l in zip(scores, labels) if not l]
    pos = [s for s, l in zip(scores, labels) if l]
    for t in sorted(set(float(s) for s in scores)) + [math.inf]:
        if sum(1 for s in neg if s >= t) / len(neg) <= far:
            return sum(1 for s in pos if s >= t) / len(pos) if pos else 0.0
    raise AssertionError("unreachable: +inf always qualifies")


def brute_rank1(probe, probe_labels, entries, entry_labels):
    hits = 0
    for p, pl in zip(probe, probe_labels):
        pn = p / math.sqrt(float(np.dot(p, p)))
        best, best_i = -math.inf, -1
        for i, e in enumerate(entries):
            sim = float(np.dot(pn, e / math.sqrt(float(np.dot(e, e)))))
            if sim > best:
                best, best_i = sim, i
        hits += entry_labels[best_i] == pl
    return hits / len(probe)
