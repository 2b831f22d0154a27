"""Verification back-end: trials, cosine scoring, AS-norm, EER and minDCF.

Error-rate conventions for a threshold ``t``::

    P_miss(t) = P(target score < t)        (false rejection)
    P_fa(t)   = P(nontarget score >= t)    (false acceptance)

Thresholds are swept over every distinct score plus ``+inf``.
"""

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import encoder as enc
from .corpus import atomic_write_bytes, load_utterance
from .errors import CascadeError, ConfigError, InvalidInputError, InvalidRoleError
from .numerics import l2_normalize

LABELS = ("target", "nontarget")
SIGMA_FLOOR = 1e-6


@dataclass
class ScoringConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    asnorm_k: int = 20
    asnorm_enabled: bool = True
    num_trials: int = 2000
    enroll_per_trial: int = 1
    # speakers held out from training to form the evaluation split
    eval_speakers: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ConfigError("scoring.p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ConfigError("scoring costs must be positive")
        if self.asnorm_k < 2:
            raise ConfigError("scoring.asnorm_k must be >= 2")
        if self.num_trials < 2 or self.enroll_per_trial < 1:
            raise ConfigError("scoring: num_trials >= 2 and enroll_per_trial >= 1")
        if self.eval_speakers < 2:
            raise ConfigError("scoring.eval_speakers must be >= 2")


@dataclass
class Trial:
    enroll: List[str]
    test: str
    label: Optional[str] = None


@dataclass
class TrialScoreSet:
    trials: List[Trial]
    raw: np.ndarray
    normalized: Optional[np.ndarray] = None

    def labels(self):
        if any(t.label is None for t in self.trials):
            raise InvalidInputError("trial labels are required for metrics")
        return np.array([t.label == "target" for t in self.trials])

    def scores(self, normalized=False):
        if normalized:
            if self.normalized is None:
                raise InvalidInputError("score set has no normalized scores")
            return self.normalized
        return self.raw


@dataclass
class MetricsReport:
    eer: float
    eer_threshold: float
    min_dcf: float
    dcf_params: Dict[str, float]
    counts: Dict[str, int]
    score_kind: str = "raw"
    tag: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# -- embeddings --------------------------------------------------------------

def enroll_embedding(embeddings):
    """Mean of unit embeddings, renormalized."""
    embs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not embs:
        raise InvalidInputError("no enrollment embeddings")
    return l2_normalize(np.mean(embs, axis=0))


def extract_embeddings(params, manifest_path, records, feature_dim=None):
    """Unit embeddings over each utterance's full feature sequence.

    Sequences of equal length are embedded in one batch.
    """
    seqs = {r.utterance_id: load_utterance(manifest_path, r, feature_dim).astype(np.float64)
            for r in records}
    by_len = defaultdict(list)
    for uid, s in seqs.items():
        by_len[s.shape[0]].append(uid)
    out = {}
    for length in sorted(by_len):
        uids = by_len[length]
        emb, _ = enc.embed_batch(params, np.stack([seqs[u] for u in uids]))
        for u, e in zip(uids, l2_normalize(emb)):
            out[u] = e
    return {r.utterance_id: out[r.utterance_id] for r in records}


def scoring_params(checkpoint, allow_raw=False):
    if checkpoint.role != "finetuned" and not allow_raw:
        raise InvalidRoleError(
            f"checkpoint role is {checkpoint.role!r}; pass allow_raw to score a pretrained model")
    return checkpoint.backbone()


def score_trials(trials, embeddings):
    """Cosine scores against averaged enrollment embeddings.

    ``embeddings`` maps utterance ids to unit vectors. Unresolvable ids are
    collected and reported together.
    """
    missing = sorted({u for t in trials for u in [*t.enroll, t.test] if u not in embeddings})
    if missing:
        raise CascadeError(f"{len(missing)} unresolvable utterance ids, e.g. {missing[:5]}")
    raw = np.empty(len(trials))
    for n, t in enumerate(trials):
        e = enroll_embedding([embeddings[u] for u in t.enroll])
        raw[n] = float(np.clip(e @ embeddings[t.test], -1.0, 1.0))
    return TrialScoreSet(trials=list(trials), raw=raw)


def cohort_embeddings(params, manifest_path, records, feature_dim=None):
    """Per-speaker averaged embeddings of a labeled manifest."""
    embs = extract_embeddings(params, manifest_path, records, feature_dim)
    groups = defaultdict(list)
    for r in records:
        if r.speaker_label is None:
            raise ConfigError("cohort manifest must be labeled")
        groups[r.speaker_label].append(embs[r.utterance_id])
    return np.stack([enroll_embedding(groups[k]) for k in sorted(groups)])


# -- AS-norm -----------------------------------------------------------------

def topk_stats(cohort_scores, k):
    """Mean and population std of the ``k`` largest scores per row."""
    c = np.asarray(cohort_scores, dtype=np.float64)
    if c.shape[-1] < k:
        raise ConfigError(f"cohort of {c.shape[-1]} is smaller than top-k {k}")
    top = -np.sort(-c, axis=-1)[..., :k]
    return top.mean(axis=-1), np.maximum(top.std(axis=-1), SIGMA_FLOOR)


def as_norm_scores(raw, enroll_cohort, test_cohort, k):
    """Adaptive symmetric normalization of raw scores.

    ``enroll_cohort`` and ``test_cohort`` are ``(n_trials, cohort)`` score
    matrices of each trial side against the cohort.
    """
    if k < 2:
        raise ConfigError("AS-norm top-k must be >= 2")
    mu_e, sd_e = topk_stats(enroll_cohort, k)
    mu_t, sd_t = topk_stats(test_cohort, k)
    raw = np.asarray(raw, dtype=np.float64)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


def as_norm(score_set, embeddings, cohort, k):
    """Attach AS-norm scores to ``score_set`` using cohort embeddings."""
    cohort = l2_normalize(np.asarray(cohort, dtype=np.float64))
    if cohort.shape[0] < k:
        raise ConfigError(f"cohort of {cohort.shape[0]} is smaller than top-k {k}")
    enroll = np.stack([enroll_embedding([embeddings[u] for u in t.enroll]) for t in score_set.trials])
    test = np.stack([embeddings[t.test] for t in score_set.trials])
    norm = as_norm_scores(score_set.raw, enroll @ cohort.T, test @ cohort.T, k)
    return TrialScoreSet(trials=score_set.trials, raw=score_set.raw, normalized=norm)


# -- metrics -----------------------------------------------------------------

def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    tar, non = scores[labels], scores[~labels]
    if tar.size == 0 or non.size == 0:
        raise InvalidInputError("need at least one target and one nontarget score")
    return tar, non


def error_rates(scores, labels):
    """``(thresholds, p_miss, p_fa)`` over distinct scores plus ``+inf``."""
    tar, non = _split(scores, labels)
    thr = np.unique(np.concatenate([tar, non]))
    p_miss = np.searchsorted(np.sort(tar), thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(np.sort(non), thr, side="left")) / non.size
    thr = np.append(thr, np.inf)
    return thr, np.append(p_miss, 1.0), np.append(p_fa, 0.0)


def compute_eer(scores, labels):
    """Equal error rate and its threshold.

    Where P_miss and P_fa do not meet at a sweep point the EER is linearly
    interpolated between the two bracketing points.
    """
    thr, p_miss, p_fa = error_rates(scores, labels)
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(p_miss[i]), float(thr[i])
    a, b = i - 1, i
    t = -diff[a] / (diff[b] - diff[a])
    eer = p_miss[a] + t * (p_miss[b] - p_miss[a])
    if math.isinf(thr[b]):
        threshold = float(thr[a])
    else:
        threshold = float(thr[a] + t * (thr[b] - thr[a]))
    return float(eer), threshold


def compute_min_dcf(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0):
    _, p_miss, p_fa = error_rates(scores, labels)
    dcf = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(dcf.min() / norm)


def metrics_report(score_set, cfg=None, normalized=False, tag=""):
    cfg = cfg or ScoringConfig()
    labels = score_set.labels()
    scores = score_set.scores(normalized)
    eer, thr = compute_eer(scores, labels)
    return MetricsReport(
        eer=eer,
        eer_threshold=thr,
        min_dcf=compute_min_dcf(scores, labels, cfg.p_target, cfg.c_miss, cfg.c_fa),
        dcf_params={"p_target": cfg.p_target, "c_miss": cfg.c_miss, "c_fa": cfg.c_fa},
        counts={"targets": int(labels.sum()), "nontargets": int((~labels).sum())},
        score_kind="asnorm" if normalized else "raw",
        tag=tag,
    )


# -- trial and score files ----------------------------------------------------

def make_trials(records, num_trials, enroll_per_trial, rng):
    """Balanced target/nontarget trials over a labeled manifest."""
    by_spk = defaultdict(list)
    for r in records:
        if r.speaker_label is None:
            raise ConfigError("trial generation needs a labeled manifest")
        by_spk[r.speaker_label].append(r.utterance_id)
    speakers = sorted(by_spk)
    if len(speakers) < 2:
        raise ConfigError("trial generation needs at least two speakers")
    eligible = [s for s in speakers if len(by_spk[s]) > enroll_per_trial]
    if not eligible:
        raise ConfigError("no speaker has enough utterances for a target trial")
    trials = []
    n_target = num_trials // 2
    for n in range(num_trials):
        if n < n_target:
            spk = eligible[int(rng.integers(0, len(eligible)))]
            pick = rng.permutation(len(by_spk[spk]))[:enroll_per_trial + 1]
            utts = [by_spk[spk][i] for i in pick]
            trials.append(Trial(enroll=utts[:-1], test=utts[-1], label="target"))
        else:
            a = speakers[int(rng.integers(0, len(speakers)))]
            b = speakers[int(rng.integers(0, len(speakers) - 1))]
            if b >= a:
                b = speakers[speakers.index(b) + 1]
            pool = by_spk[a]
            pick = rng.permutation(len(pool))[:min(enroll_per_trial, len(pool))]
            test = by_spk[b][int(rng.integers(0, len(by_spk[b])))]
            trials.append(Trial(enroll=[pool[i] for i in pick], test=test, label="nontarget"))
    order = rng.permutation(num_trials)
    return [trials[i] for i in order]


def _trial_prefix(t):
    fields = [",".join(t.enroll), t.test]
    if t.label is not None:
        fields.append(t.label)
    return "\t".join(fields)


def parse_trial_line(line):
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
        raise InvalidInputError(f"malformed trial line: {line!r}")
    label = fields[2] if len(fields) == 3 else None
    if label is not None and label not in LABELS:
        raise InvalidInputError(f"bad trial label {label!r}")
    return Trial(enroll=fields[0].split(","), test=fields[1], label=label)


def write_trials(path, trials):
    atomic_write_bytes(path, "".join(_trial_prefix(t) + "\n" for t in trials).encode("utf-8"))


def read_trials(path):
    with open(path, encoding="utf-8") as fh:
        return [parse_trial_line(l) for l in fh if l.strip()]


def score_file_bytes(score_set):
    lines = []
    for n, t in enumerate(score_set.trials):
        fields = [_trial_prefix(t), repr(float(score_set.raw[n]))]
        if score_set.normalized is not None:
            fields.append(repr(float(score_set.normalized[n])))
        lines.append("\t".join(fields) + "\n")
    return "".join(lines).encode("utf-8")


def write_scores(path, score_set):
    atomic_write_bytes(path, score_file_bytes(score_set))


def read_scores(path):
    trials, raw, norm = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            has_label = len(f) >= 3 and f[2] in LABELS
            n_prefix = 3 if has_label else 2
            rest = f[n_prefix:]
            if len(rest) not in (1, 2):
                raise InvalidInputError(f"malformed score line: {line!r}")
            trials.append(Trial(enroll=f[0].split(","), test=f[1],
                                label=f[2] if has_label else None))
            raw.append(float(rest[0]))
            norm.append(float(rest[1]) if len(rest) == 2 else None)
    has_norm = bool(norm) and all(x is not None for x in norm)
    if not has_norm and any(x is not None for x in norm):
        raise InvalidInputError("normalized scores present on only some lines")
    return TrialScoreSet(trials=trials, raw=np.array(raw),
                         normalized=np.array(norm, dtype=float) if has_norm else None)
