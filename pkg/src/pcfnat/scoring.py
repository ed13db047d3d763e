"""Verification back end: segment averaging, cosine scoring, adaptive
s-norm, EER and minDCF."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

FRAME_RATE = 100  # frames per second at a 10 ms shift


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ContractError("cannot normalize a zero-norm embedding")
    return x / norm


def raw_score(e1, e2) -> float:
    """Cosine similarity (inner product of length-normalized embeddings)."""
    e1, e2 = np.asarray(e1), np.asarray(e2)
    if e1.shape != e2.shape:
        raise ContractError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    return float(np.dot(l2_normalize(e1), l2_normalize(e2)))


# ------------------------------------------------------------------ segmentation

def segment_count(duration: float, min_len=4.0, max_len=6.0, whole_below=8.0) -> int:
    """Number of equal segments for an utterance of ``duration`` seconds.

    Up to ``whole_below`` seconds the utterance is kept whole.  Longer ones
    get ``ceil(duration / max_len)`` pieces, reduced while a piece would be
    shorter than ``min_len``.
    """
    if duration <= 0:
        raise ContractError("utterance is empty")
    if duration <= whole_below:
        return 1
    n = math.ceil(duration / max_len)
    while n > 1 and duration / n < min_len:
        n -= 1
    return n


def segment_bounds(n_frames: int, duration: float | None = None) -> list[tuple[int, int]]:
    if n_frames <= 0:
        raise ContractError("utterance is empty")
    if duration is None:
        duration = n_frames / FRAME_RATE
    n = segment_count(duration)
    edges = [round(i * n_frames / n) for i in range(n + 1)]
    return list(zip(edges[:-1], edges[1:]))


def segment_and_average(frames, extractor, duration: float | None = None) -> np.ndarray:
    """Utterance embedding from ``frames`` (``[n_mels, T]``).

    Short utterances go through ``extractor`` whole.  Long ones are split,
    each segment embedding is length-normalized, and the mean is returned.
    """
    frames = np.asarray(frames)
    bounds = segment_bounds(frames.shape[-1], duration)
    if len(bounds) == 1:
        return np.asarray(extractor(frames)).reshape(-1)
    embs = [l2_normalize(np.asarray(extractor(frames[..., a:b])).reshape(-1)) for a, b in bounds]
    return np.mean(embs, axis=0)


# ------------------------------------------------------------------ trials & cohort

@dataclass
class TrialScoreSet:
    enroll: list
    test: list
    labels: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.raw = np.asarray(self.raw, dtype=np.float64)
        n = len(self.enroll)
        if not (len(self.test) == n == self.labels.size == self.raw.size):
            raise ContractError("trial fields have different lengths")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ContractError("labels must be 0 (nontarget) or 1 (target)")
        if not np.all(np.isfinite(self.raw)):
            raise ContractError("scores must be finite")

    def __len__(self):
        return self.labels.size

    @property
    def scores(self) -> np.ndarray:
        """Normalized scores when present, raw otherwise."""
        return self.raw if self.normalized is None else self.normalized


def score_trials(trials, embeddings: dict) -> TrialScoreSet:
    """``trials`` is a list of ``(label, enroll_id, test_id)``."""
    labels, enroll, test, raw = [], [], [], []
    for label, e, t in trials:
        for utt in (e, t):
            if utt not in embeddings:
                raise ContractError(f"no embedding for {utt!r}")
        labels.append(label)
        enroll.append(e)
        test.append(t)
        raw.append(raw_score(embeddings[e], embeddings[t]))
    return TrialScoreSet(enroll, test, np.array(labels), np.array(raw))


@dataclass
class Cohort:
    matrix: np.ndarray
    top_n: int = 300
    speakers: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)

    @classmethod
    def from_embeddings(cls, embeddings, speaker_ids, top_n=300) -> "Cohort":
        """Speaker-wise averages of length-normalized embeddings, renormalized."""
        embeddings = l2_normalize(embeddings)
        speaker_ids = np.asarray(speaker_ids)
        speakers = list(dict.fromkeys(speaker_ids.tolist()))
        rows = [embeddings[speaker_ids == s].mean(axis=0) for s in speakers]
        return cls(l2_normalize(np.stack(rows)), top_n, speakers)


def top_n_stats(embedding, cohort: np.ndarray, top_n: int) -> tuple[float, float]:
    """Mean and std of the ``top_n`` highest cohort scores (ties broken by
    cohort row index)."""
    if not 1 <= top_n <= len(cohort):
        raise ContractError(f"top_n={top_n} must lie in [1, {len(cohort)}]")
    s = cohort @ l2_normalize(embedding)
    order = np.argsort(-s, kind="stable")[:top_n]
    best = np.sort(s[order])[::-1]
    return float(best.mean()), float(best.std())


def _floor(sigma, eps=1e-8):
    if sigma < eps:
        warnings.warn(f"cohort score std {sigma:.3g} floored at {eps}", RuntimeWarning, stacklevel=3)
        return eps
    return sigma


def snorm_score(score, enroll_stats, test_stats) -> float:
    (mu_e, sd_e), (mu_t, sd_t) = enroll_stats, test_stats
    return 0.5 * ((score - mu_e) / _floor(sd_e) + (score - mu_t) / _floor(sd_t))


def adaptive_snorm(raw: TrialScoreSet, embeddings: dict, cohort: Cohort,
                   top_n: int | None = None) -> TrialScoreSet:
    """Adaptive s-norm of every trial against the cohort's top-N scores."""
    top_n = cohort.top_n if top_n is None else top_n
    cache = {}

    def stats(utt):
        if utt not in cache:
            cache[utt] = top_n_stats(embeddings[utt], cohort.matrix, top_n)
        return cache[utt]

    norm = np.array([snorm_score(s, stats(e), stats(t))
                     for s, e, t in zip(raw.raw, raw.enroll, raw.test)])
    return TrialScoreSet(raw.enroll, raw.test, raw.labels, raw.raw, norm)


# ------------------------------------------------------------------ metrics

def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    n_tar = int(labels.sum())
    n_non = labels.size - n_tar
    if n_tar == 0 or n_non == 0:
        raise ContractError("need at least one target and one nontarget trial")
    return scores, labels, n_tar, n_non


def operating_points(scores, labels):
    """Miss and false-alarm rates for thresholds at every distinct score
    (accept when ``score >= threshold``) plus one rejecting everything.

    Returns ``(thresholds, p_miss, p_fa)`` ordered by increasing threshold.
    """
    scores, labels, n_tar, n_non = _split(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    thresholds, first = np.unique(s, return_index=True)
    tar_below = np.concatenate([[0], np.cumsum(lab)])[first]
    non_below = np.concatenate([[0], np.cumsum(1 - lab)])[first]
    miss = np.append(tar_below, n_tar)
    fa = np.append(n_non - non_below, 0)
    return np.append(thresholds, np.inf), miss / n_tar, fa / n_non


def _eer_from_points(p_miss, p_fa) -> float:
    # p_miss rises and p_fa falls with the threshold; the first point where
    # they cross brackets the EER with its predecessor
    i = int(np.argmax(p_miss >= p_fa))
    if i == 0:
        return float(p_miss[0])
    d0 = p_fa[i - 1] - p_miss[i - 1]
    d1 = p_fa[i] - p_miss[i]
    a = d0 / (d0 - d1)
    return float(p_miss[i - 1] + a * (p_miss[i] - p_miss[i - 1]))


def compute_eer(scores, labels=None) -> float:
    """Equal error rate with linear interpolation between operating points.

    Accepts a :class:`TrialScoreSet` or parallel score/label arrays.
    """
    if isinstance(scores, TrialScoreSet):
        scores, labels = scores.scores, scores.labels
    _, p_miss, p_fa = operating_points(scores, labels)
    return _eer_from_points(p_miss, p_fa)


def compute_min_dcf(scores, labels=None, p_target=0.01, c_miss=1.0, c_fa=1.0) -> float:
    """Minimum detection cost, normalized by the best trivial decision."""
    if not 0 < p_target < 1:
        raise ContractError(f"p_target must lie in (0, 1), got {p_target}")
    if isinstance(scores, TrialScoreSet):
        scores, labels = scores.scores, scores.labels
    _, p_miss, p_fa = operating_points(scores, labels)
    dcf = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1 - p_target)))
