"""Confidence-based data filtering by per-segment clustering diarization.

Each VAD segment is cut into sliding windows, embedded and clustered
spectrally. Segments where more than one speaker is detected are dropped;
the rest are scored by the mean cosine between each window embedding and
the cluster centroid and kept only when that score is strictly above the
threshold.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import _backend
from . import encoder as enc
from .corpus import atomic_write_bytes, load_utterance, read_manifest, rebase_records, write_manifest
from .errors import CascadeError, ConfigError, InvalidInputError
from .numerics import Rng, cosine_matrix, l2_normalize, sym_eigen

log = logging.getLogger(__name__)

DECISIONS = ("keep", "drop_multi_speaker", "drop_low_confidence", "drop_too_short", "drop_error")


@dataclass
class FilterConfig:
    window_len: int = 50
    window_shift: int = 25
    max_clusters: int = 8
    eigengap_floor: float = 0.05
    binarize_percentile: float = 30.0
    confidence_threshold: float = 0.4
    extractor_checkpoint: str = ""
    kmeans_restarts: int = 20
    seed: int = 0
    # subtract the manifest-wide mean window embedding before normalizing
    center_embeddings: bool = True
    # segments with fewer windows are treated as a single cluster
    min_cluster_windows: int = 4

    def __post_init__(self):
        if self.window_len < 2 or not 1 <= self.window_shift <= self.window_len:
            raise ConfigError("filter requires window_len >= 2 and 1 <= window_shift <= window_len")
        if self.max_clusters < 2:
            raise ConfigError("filter.max_clusters must be >= 2")
        if not 0 < self.binarize_percentile < 100:
            raise ConfigError("filter.binarize_percentile must lie in (0, 100)")
        if not -1 <= self.confidence_threshold <= 1:
            raise ConfigError("filter.confidence_threshold must lie in [-1, 1]")
        if self.kmeans_restarts < 1:
            raise ConfigError("filter.kmeans_restarts must be >= 1")
        if self.min_cluster_windows < 1:
            raise ConfigError("filter.min_cluster_windows must be >= 1")


@dataclass
class SegmentRecord:
    utterance_id: str
    segment_index: int
    start_frame: int
    end_frame: int
    num_clusters_detected: int
    confidence: Optional[float]
    decision: str
    error: Optional[str] = None

    def to_json(self):
        obj = dataclasses.asdict(self)
        if obj["error"] is None:
            del obj["error"]
        return json.dumps(obj)


def window_offsets(start, end, window_len, window_shift):
    """Window start frames covering ``[start, end)``.

    Regular strides, plus a final window right-aligned to ``end`` when the
    strides leave at least ``window_shift / 2`` frames uncovered.
    """
    if end - start < window_len:
        return []
    offs = list(range(start, end - window_len + 1, window_shift))
    if end - (offs[-1] + window_len) >= window_shift / 2:
        offs.append(end - window_len)
    return offs


def window_embeddings(seq, segment, params, cfg, center=None):
    """Unit-norm embeddings of the sliding windows over ``segment``.

    ``center`` is subtracted before normalizing when given. Returns ``None``
    when the segment is shorter than one window.
    """
    raw = raw_window_embeddings(seq, segment, params, cfg)
    if raw is None:
        return None
    return l2_normalize(raw if center is None else raw - center)


def raw_window_embeddings(seq, segment, params, cfg):
    start, end = segment
    if not 0 <= start < end <= seq.shape[0]:
        raise InvalidInputError(f"segment {segment} outside sequence of {seq.shape[0]} frames")
    offs = window_offsets(start, end, cfg.window_len, cfg.window_shift)
    if not offs:
        return None
    seq = np.asarray(seq, dtype=np.float64)
    batch = np.stack([seq[o:o + cfg.window_len] for o in offs])
    emb, _ = enc.embed_batch(params, batch)
    return emb


def refined_affinity(emb, percentile):
    a = np.maximum(cosine_matrix(emb, emb), 0.0)
    thr = np.percentile(a, percentile, axis=1, keepdims=True)
    a = np.where(a < thr, 0.0, a)
    return 0.5 * (a + a.T)


def estimate_num_clusters(eigvals_ascending, max_clusters, floor):
    """Eigengap choice of k: largest gap among the first ``max_clusters``."""
    lam = eigvals_ascending
    upto = min(max_clusters, len(lam))
    if upto < 2:
        return 1
    gaps = np.diff(lam[:upto])
    g = int(np.argmax(gaps))
    if gaps[g] < floor:
        return 1
    return g + 1


def kmeans(points, k, rng, restarts=20, max_iter=100):
    """Best-of-``restarts`` Lloyd k-means with k-means++ seeding.

    Ties in inertia keep the earliest restart.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    best = None
    for _ in range(restarts):
        idx = [int(rng.integers(0, n))]
        d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
        for _ in range(1, k):
            total = d2.sum()
            if total <= 0:
                nxt = int(rng.integers(0, n))
            else:
                nxt = int(np.searchsorted(np.cumsum(d2 / total), rng.uniform(), side="right"))
                nxt = min(nxt, n - 1)
            idx.append(nxt)
            d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
        labels, centers, inertia, _ = _backend.lloyd(points, np.ascontiguousarray(points[idx]), max_iter)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    return best[0]


def _canonical(labels):
    """Renumber labels by order of first appearance."""
    mapping = {}
    out = np.empty(len(labels), dtype=int)
    for i, l in enumerate(labels):
        out[i] = mapping.setdefault(int(l), len(mapping))
    return out


def spectral_cluster(emb, cfg, rng):
    """Cluster unit embeddings. Returns ``(labels, k, centroids)``."""
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if n == 0:
        raise InvalidInputError("no embeddings to cluster")
    if n < max(2, cfg.min_cluster_windows):
        return np.zeros(n, dtype=int), 1, l2_normalize(emb.mean(axis=0, keepdims=True))
    a = refined_affinity(emb, cfg.binarize_percentile)
    lap = np.diag(a.sum(axis=1)) - a
    w, v = sym_eigen(lap)
    w, v = w[::-1], v[:, ::-1]
    k = estimate_num_clusters(w, cfg.max_clusters, cfg.eigengap_floor)
    if k == 1:
        labels = np.zeros(n, dtype=int)
    else:
        labels = _canonical(kmeans(v[:, :k], k, rng, cfg.kmeans_restarts))
    k = int(labels.max()) + 1
    centroids = l2_normalize(np.stack([emb[labels == c].mean(axis=0) for c in range(k)]))
    return labels, k, centroids


def confidence(emb, labels, centroids):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] == 0:
        raise InvalidInputError("no embeddings")
    cos = np.sum(l2_normalize(emb) * l2_normalize(centroids)[labels], axis=1)
    return float(np.clip(cos, -1.0, 1.0).mean())


def segment_rng(seed, record_index, segment_index):
    return Rng.from_sequence(np.random.SeedSequence(seed, spawn_key=(record_index, segment_index)))


def decide(num_clusters, conf, threshold):
    if num_clusters > 1:
        return "drop_multi_speaker"
    return "keep" if conf > threshold else "drop_low_confidence"


def score_segment(emb, cfg, rng):
    """(num_clusters, confidence or None, decision) for one segment's
    unit-norm window embeddings (``None`` when too short)."""
    if emb is None:
        return 0, None, "drop_too_short"
    _, k, centroids = spectral_cluster(emb, cfg, rng)
    if k > 1:
        return k, None, "drop_multi_speaker"
    labels = np.zeros(emb.shape[0], dtype=int)
    conf = confidence(emb, labels, centroids)
    return 1, conf, decide(1, conf, cfg.confidence_threshold)


@dataclass
class FilterResult:
    kept: list
    segments: List[SegmentRecord]
    summary: dict
    manifest_path: Optional[str] = None


def filter_manifest(manifest_path, cfg, params=None, features=None):
    """Filter every VAD segment of a manifest.

    ``params`` defaults to the backbone of ``cfg.extractor_checkpoint``.
    """
    manifest = read_manifest(manifest_path)
    if params is None:
        if not cfg.extractor_checkpoint:
            raise ConfigError("filter.extractor_checkpoint is not set")
        params = enc.load_checkpoint(cfg.extractor_checkpoint).backbone()
    dim = params["frame.0.weight"].shape[1] if "frame.0.weight" in params \
        else params["embed.weight"].shape[1] // 2
    features = features or {}
    raw, errors = [], {}
    for rec in manifest:
        try:
            seq = features.get(rec.utterance_id)
            if seq is None:
                seq = load_utterance(manifest_path, rec, dim)
        except (OSError, CascadeError) as exc:
            log.warning("%s: %s", rec.utterance_id, exc)
            errors[rec.utterance_id] = str(exc)
            raw.append(None)
            continue
        raw.append([raw_window_embeddings(seq, seg, params, cfg) for seg in rec.vad_segments])
    if manifest and len(errors) > len(manifest) / 2:
        raise CascadeError(f"{len(errors)} of {len(manifest)} records failed to load")
    center = None
    if cfg.center_embeddings:
        pooled = [e for segs in raw if segs for e in segs if e is not None]
        if pooled:
            center = np.concatenate(pooled).mean(axis=0)

    segments, kept = [], []
    for ri, rec in enumerate(manifest):
        if raw[ri] is None:
            for si, (s, e) in enumerate(rec.vad_segments):
                segments.append(SegmentRecord(rec.utterance_id, si, s, e, 0, None, "drop_error",
                                              error=errors[rec.utterance_id]))
            continue
        keep_segs = []
        for si, (seg, emb) in enumerate(zip(rec.vad_segments, raw[ri])):
            if emb is not None:
                emb = l2_normalize(emb if center is None else emb - center)
            k, conf, decision = score_segment(emb, cfg, segment_rng(cfg.seed, ri, si))
            segments.append(SegmentRecord(rec.utterance_id, si, seg[0], seg[1], k, conf, decision))
            if decision == "keep":
                keep_segs.append(seg)
        if keep_segs:
            kept.append(dataclasses.replace(rec, vad_segments=keep_segs))
    return FilterResult(kept=kept, segments=segments, summary=summarize(segments),
                        manifest_path=str(manifest_path))


def summarize(segments):
    counts = {d: 0 for d in DECISIONS}
    kept_frames = total_frames = 0
    for s in segments:
        counts[s.decision] += 1
        total_frames += s.end_frame - s.start_frame
        if s.decision == "keep":
            kept_frames += s.end_frame - s.start_frame
    counts["kept"] = counts.pop("keep")
    return {"kept": counts["kept"], **{d: counts[d] for d in DECISIONS[1:]},
            "kept_frames": kept_frames, "total_frames": total_frames}


def confidence_file_bytes(segments, summary):
    lines = [s.to_json() for s in segments]
    lines.append(json.dumps({"summary": summary}))
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_outputs(result, out_dir):
    out_dir = Path(out_dir)
    kept = result.kept
    if result.manifest_path is not None:
        kept = rebase_records(kept, result.manifest_path, out_dir / "filtered.jsonl")
    write_manifest(out_dir / "filtered.jsonl", kept)
    atomic_write_bytes(out_dir / "confidence.jsonl", confidence_file_bytes(result.segments, result.summary))
    return out_dir / "filtered.jsonl", out_dir / "confidence.jsonl"


def read_confidence_file(path):
    segments, summary = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "summary" in obj:
                summary = obj["summary"]
            else:
                segments.append(SegmentRecord(**obj))
    return segments, summary


def quality_report(segments, manifest):
    """Compare decisions with generated ground truth (evaluation only)."""
    quality = {r.utterance_id: r.truth_quality for r in manifest}
    dropped = [s for s in segments if s.decision != "keep"]
    kept = [s for s in segments if s.decision == "keep"]
    dropped_nonclean = sum(quality[s.utterance_id] != "clean" for s in dropped)
    kept_clean = sum(quality[s.utterance_id] == "clean" for s in kept)
    return {
        "evaluation_only": True,
        "segments": len(segments),
        "kept": len(kept),
        "dropped": len(dropped),
        "dropped_nonclean_fraction": dropped_nonclean / len(dropped) if dropped else None,
        "kept_clean_fraction": kept_clean / len(kept) if kept else None,
        "dropped_fraction": len(dropped) / len(segments) if segments else 0.0,
    }
