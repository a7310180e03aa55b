"""Verification and identification metrics on cosine-similarity scores.

Conventions: a pair is predicted "same" when ``score >= threshold``.  Fold
thresholds are searched over midpoints of consecutive sorted unique scores
plus ``-inf``/``+inf``; ties in accuracy go to the lowest threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._io import write_csv
from .exceptions import DimensionMismatch, EmptyFold, MissingGalleryIdentity, NoNegatives
from .sphere import normalize


@dataclass
class ScoredPairs:
    scores: np.ndarray
    labels: np.ndarray
    folds: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        self.folds = np.asarray(self.folds, dtype=np.int64)
        if not (self.scores.shape == self.labels.shape == self.folds.shape) or self.scores.ndim != 1:
            raise DimensionMismatch("scores, labels and folds must be equal-length vectors")
        if np.any(~(np.abs(self.scores) <= 1.0)):
            raise ValueError("cosine scores must lie in [-1, 1]")

    @classmethod
    def from_embeddings(cls, embeddings, protocol) -> "ScoredPairs":
        """Cosine similarity for every pair of a :class:`~sphereloss.datagen.PairProtocol`."""
        e = normalize(embeddings)
        scores = np.clip(np.sum(e[protocol.idx_a] * e[protocol.idx_b], axis=1), -1.0, 1.0)
        return cls(scores, protocol.same, protocol.fold)


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def _accuracy_per_threshold(scores, labels, thresholds):
    """Correct-prediction counts for every threshold at once."""
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    # positives accepted: score >= t ; negatives rejected: score < t
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    tn = np.searchsorted(neg, thresholds, side="left")
    return tp + tn


def best_threshold(scores, labels) -> float:
    """Threshold maximizing accuracy on the given pairs (lowest on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    cands = candidate_thresholds(scores)
    correct = _accuracy_per_threshold(scores, labels, cands)
    return float(cands[int(np.argmax(correct))])


def tenfold_verification(pairs: ScoredPairs):
    """Leave-one-fold-out threshold selection; returns ``(accuracy, thresholds)``.

    For fold ``k`` the threshold is fit on all other folds and applied to
    fold ``k``; accuracy is the mean of the per-fold accuracies.
    """
    fold_ids = np.unique(pairs.folds)
    if len(fold_ids) < 2:
        raise EmptyFold("need at least two non-empty folds")
    accs, thresholds = [], []
    for k in fold_ids:
        test = pairs.folds == k
        train = ~test
        t = best_threshold(pairs.scores[train], pairs.labels[train])
        pred = pairs.scores[test] >= t
        accs.append(np.count_nonzero(pred == pairs.labels[test]) / np.count_nonzero(test))
        thresholds.append(t)
    # correctly rounded sum: independent of fold order
    return math.fsum(accs) / len(accs), thresholds


def _far_tar(scores, labels, thresholds):
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    fa = len(neg) - np.searchsorted(neg, thresholds, side="left")
    ta = len(pos) - np.searchsorted(pos, thresholds, side="left")
    tar = ta / len(pos) if len(pos) else np.zeros(len(thresholds))
    return fa / len(neg), tar


def tar_at_far(scores, labels, far: float) -> float:
    """True-accept rate at the smallest threshold whose false-accept rate is <= ``far``.

    Candidate thresholds are the observed scores plus ``+inf``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not 0 < far <= 1:
        raise ValueError("far must lie in (0, 1]")
    if not np.any(~labels):
        raise NoNegatives("TAR@FAR needs at least one negative pair")
    cands = np.concatenate([np.unique(scores), [np.inf]])
    fars, tars = _far_tar(scores, labels, cands)
    ok = np.nonzero(fars <= far)[0]
    return float(tars[ok[0]])


def roc_table(scores, labels):
    """``(threshold, far, tar)`` rows at every unique score plus ``+inf``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not np.any(~labels):
        raise NoNegatives("ROC needs at least one negative pair")
    cands = np.concatenate([np.unique(scores), [np.inf]])
    fars, tars = _far_tar(scores, labels, cands)
    return [(float(t), float(f), float(r)) for t, f, r in zip(cands, fars, tars)]


def write_roc_csv(path, rows, comment: str | None = None):
    return write_csv(path, ["threshold", "far", "tar"], rows, comment=comment)


def rank1_identification(probe, probe_labels, gallery, gallery_labels, distractors=None, distractor_labels=None) -> float:
    """Fraction of probes whose most cosine-similar gallery/distractor entry shares their identity.

    Entries are indexed gallery first, then distractors; on equal similarity
    the lowest index wins.
    """
    probe = normalize(np.atleast_2d(probe))
    gallery = normalize(np.atleast_2d(gallery))
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    missing = set(probe_labels.tolist()) - set(gallery_labels.tolist())
    if missing:
        raise MissingGalleryIdentity(f"probe identities {sorted(missing)[:5]} absent from gallery")
    entries, entry_labels = gallery, gallery_labels
    if distractors is not None and len(distractors):
        distractors = normalize(np.atleast_2d(distractors))
        if distractor_labels is None:
            distractor_labels = np.full(len(distractors), -1)
        distractor_labels = np.asarray(distractor_labels)
        if set(distractor_labels.tolist()) & set(probe_labels.tolist()):
            raise ValueError("distractor identities must be disjoint from probe identities")
        entries = np.vstack([gallery, distractors])
        entry_labels = np.concatenate([gallery_labels.astype(object), distractor_labels.astype(object)])
    sims = probe @ entries.T
    nearest = np.argmax(sims, axis=1)
    return float(np.mean(entry_labels[nearest] == probe_labels))
