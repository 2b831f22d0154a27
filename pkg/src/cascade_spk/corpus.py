"""Synthetic speaker corpora, the binary feature format and the manifest.

Clean frames follow ``x_t = speaker_scale * v_s + u + e_t`` with a speaker
vector ``v_s ~ N(0, I)``, an utterance offset ``u ~ N(0, utterance_noise^2 I)``
and frame noise ``e_t ~ N(0, frame_noise^2 I)``. Multi-speaker utterances are
two speakers' halves back to back; noisy ones use five times the frame noise.
"""

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    InvalidInputError,
    MagicMismatchError,
    MalformedHeaderError,
    ManifestError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numerics import Rng

FEATURE_MAGIC = b"CSPF"
FEATURE_VERSION = 1
FRAMES_PER_SECOND = 100
NOISY_FACTOR = 5.0
QUALITIES = ("clean", "multi_speaker", "noisy")


@dataclass
class SyntheticCorpusSpec:
    num_speakers: int = 50
    utterances_per_speaker: int = 10
    frames_per_utterance: int = 600
    feature_dim: int = 20
    speaker_scale: float = 1.0
    utterance_noise: float = 0.5
    frame_noise: float = 2.0
    multi_speaker_fraction: float = 0.1
    noisy_fraction: float = 0.1
    seed: int = 0
    # probability that VAD splits an utterance into two segments
    vad_split_prob: float = 0.15
    # maximum leading/trailing silence as a fraction of the utterance
    vad_edge_fraction: float = 0.05

    def __post_init__(self):
        for name in ("num_speakers", "utterances_per_speaker", "frames_per_utterance", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"corpus.{name} must be >= 1")
        for name in ("speaker_scale", "utterance_noise", "frame_noise"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"corpus.{name} must be positive")
        for name in ("multi_speaker_fraction", "noisy_fraction", "vad_split_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"corpus.{name} must lie in [0, 1]")
        if self.multi_speaker_fraction + self.noisy_fraction > 1.0:
            raise ConfigError("multi_speaker_fraction + noisy_fraction must not exceed 1")
        if self.multi_speaker_fraction > 0 and self.num_speakers < 2:
            raise ConfigError("multi-speaker utterances need at least two speakers")
        if not 0.0 <= self.vad_edge_fraction < 0.5:
            raise ConfigError("corpus.vad_edge_fraction must lie in [0, 0.5)")


@dataclass
class UtteranceRecord:
    utterance_id: str
    feature_path: str
    frame_count: int
    vad_segments: List[Tuple[int, int]]
    # evaluation-only ground truth
    truth_speakers: List[str] = field(default_factory=list)
    truth_quality: str = "clean"
    # supervision for labeled corpora, None when unlabeled
    speaker_label: Optional[int] = None

    def __post_init__(self):
        self.vad_segments = [(int(s), int(e)) for s, e in self.vad_segments]
        prev_end = 0
        for s, e in self.vad_segments:
            if not (0 <= s < e <= self.frame_count) or s < prev_end:
                raise ManifestError(
                    f"{self.utterance_id}: bad VAD segment ({s}, {e}) for {self.frame_count} frames"
                )
            prev_end = e
        if self.truth_quality not in QUALITIES:
            raise ManifestError(f"{self.utterance_id}: unknown truth_quality {self.truth_quality!r}")


_RECORD_KEYS = [f.name for f in dataclasses.fields(UtteranceRecord)]


# -- feature files -----------------------------------------------------------

def write_features(path, seq):
    """Write a T x D matrix as little-endian float32 with a 16-byte header."""
    arr = np.asarray(seq)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"features must be a non-empty T x D matrix, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("features contain non-finite values")
    t, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, t, d)
    atomic_write_bytes(path, header + payload)


def read_features(path, expected_dim=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_features(data, expected_dim, str(path))


def parse_features(data, expected_dim=None, name="<bytes>"):
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise MagicMismatchError(f"{name}: not a feature file (magic {data[:4]!r})")
    if len(data) < 16:
        raise MalformedHeaderError(f"{name}: header shorter than 16 bytes")
    version, t, d = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{name}: unsupported version {version}")
    if t < 1 or d < 1:
        raise MalformedHeaderError(f"{name}: invalid dimensions {t} x {d}")
    need = 16 + 4 * t * d
    if len(data) < need:
        raise TruncatedFileError(f"{name}: header claims {t} x {d} but payload has {len(data) - 16} bytes")
    if len(data) > need:
        raise DimensionMismatchError(f"{name}: {len(data) - need} bytes beyond the {t} x {d} payload")
    if expected_dim is not None and d != expected_dim:
        raise DimensionMismatchError(f"{name}: feature dim {d}, expected {expected_dim}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(t, d).astype(np.float32)


def crop(seq, start, length):
    """Copy of frames ``[start, start + length)``."""
    t = seq.shape[0]
    if start < 0 or length < 1 or start + length > t:
        raise InvalidInputError(f"crop [{start}, {start + length}) outside [0, {t})")
    return np.array(seq[start:start + length], copy=True)


# -- manifests ---------------------------------------------------------------

def record_to_json(rec):
    obj = dataclasses.asdict(rec)
    obj["vad_segments"] = [list(s) for s in rec.vad_segments]
    return json.dumps(obj, ensure_ascii=False)


def record_from_json(line):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest line: {exc}") from None
    if not isinstance(obj, dict):
        raise ManifestError("manifest line is not a JSON object")
    unknown = set(obj) - set(_RECORD_KEYS)
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    missing = {"utterance_id", "feature_path", "frame_count", "vad_segments"} - set(obj)
    if missing:
        raise ManifestError(f"missing manifest keys: {sorted(missing)}")
    return UtteranceRecord(**obj)


def dumps_manifest(records):
    return "".join(record_to_json(r) + "\n" for r in records)


def write_manifest(path, records):
    atomic_write_bytes(path, dumps_manifest(records).encode("utf-8"))


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [record_from_json(line) for line in fh if line.strip()]


def resolve_feature_path(manifest_path, rec):
    p = Path(rec.feature_path)
    if p.is_absolute():
        return p
    return Path(manifest_path).parent / p


def rebase_records(records, src_manifest, dst_manifest):
    """Rewrite relative feature paths for a manifest moved to ``dst_manifest``."""
    src_dir = Path(src_manifest).parent
    dst_dir = Path(dst_manifest).parent
    out = []
    for rec in records:
        p = Path(rec.feature_path)
        if not p.is_absolute():
            p = Path(os.path.relpath(src_dir / p, dst_dir))
        out.append(dataclasses.replace(rec, feature_path=p.as_posix()))
    return out


def load_utterance(manifest_path, rec, expected_dim=None):
    return read_features(resolve_feature_path(manifest_path, rec), expected_dim)


def atomic_write_bytes(path, data):
    """Write to a temporary sibling and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- generation --------------------------------------------------------------

def _vad_segments(rng, frames, spec):
    edge = int(spec.vad_edge_fraction * frames)
    lead = int(rng.integers(0, edge + 1))
    trail = int(rng.integers(0, edge + 1))
    start, end = lead, frames - trail
    if rng.uniform() < spec.vad_split_prob and end - start > 60:
        cut = int(rng.integers(int(0.3 * frames), int(0.7 * frames) + 1))
        gap = int(rng.integers(5, 21))
        cut = min(max(cut, start + 10), end - gap - 10)
        return [(start, cut), (cut + gap, end)]
    return [(start, end)]


def generate_corpus(spec, out_dir, prefix="utt", labeled=False, manifest_name=None):
    """Generate a corpus under ``out_dir``.

    Writes one feature file per utterance into ``out_dir/feats`` and, when
    ``manifest_name`` is given, the manifest ``out_dir/manifest_name``.
    Returns the list of records. With ``labeled=True`` each record carries
    the index of its (first) speaker as ``speaker_label``.
    """
    out_dir = Path(out_dir)
    rng = Rng(spec.seed)
    n_spk = spec.num_speakers
    n_utt = n_spk * spec.utterances_per_speaker
    t, d = spec.frames_per_utterance, spec.feature_dim

    speakers = rng.gaussian((n_spk, d))
    order = rng.permutation(n_utt)
    n_multi = int(round(spec.multi_speaker_fraction * n_utt))
    n_noisy = int(round(spec.noisy_fraction * n_utt))
    quality = np.array(["clean"] * n_utt, dtype=object)
    quality[order[:n_multi]] = "multi_speaker"
    quality[order[n_multi:n_multi + n_noisy]] = "noisy"

    records = []
    for idx in range(n_utt):
        spk = idx // spec.utterances_per_speaker
        q = quality[idx]
        if q == "multi_speaker":
            other = int(rng.integers(0, n_spk - 1))
            other += other >= spk
            half = t // 2
            parts = []
            for s, n in ((spk, half), (other, t - half)):
                u = spec.utterance_noise * rng.gaussian(d)
                eps = spec.frame_noise * rng.gaussian((n, d))
                parts.append(spec.speaker_scale * speakers[s] + u + eps)
            frames = np.concatenate(parts)
            truth = [f"spk{spk:04d}", f"spk{other:04d}"]
        else:
            sigma = spec.frame_noise * (NOISY_FACTOR if q == "noisy" else 1.0)
            u = spec.utterance_noise * rng.gaussian(d)
            frames = spec.speaker_scale * speakers[spk] + u + sigma * rng.gaussian((t, d))
            truth = [f"spk{spk:04d}"]
        vad = _vad_segments(rng, t, spec)
        uid = f"{prefix}{idx:06d}"
        rel = f"feats/{uid}.cspf"
        write_features(out_dir / rel, frames.astype(np.float32))
        records.append(UtteranceRecord(
            utterance_id=uid,
            feature_path=rel,
            frame_count=t,
            vad_segments=vad,
            truth_speakers=truth,
            truth_quality=str(q),
            speaker_label=spk if labeled else None,
        ))
    if manifest_name is not None:
        write_manifest(out_dir / manifest_name, records)
    return records


def split_by_label(records, num_eval_labels):
    """Split a labeled corpus into train/eval by the highest label values.

    Labels in both halves are renumbered to be contiguous from 0.
    """
    labels = sorted({r.speaker_label for r in records})
    if None in labels:
        raise InvalidInputError("split_by_label needs a labeled manifest")
    if not 0 < num_eval_labels < len(labels):
        raise InvalidInputError("num_eval_labels must leave both splits non-empty")
    eval_set = set(labels[-num_eval_labels:])
    train_map = {l: i for i, l in enumerate(x for x in labels if x not in eval_set)}
    eval_map = {l: i for i, l in enumerate(x for x in labels if x in eval_set)}
    train, evl = [], []
    for r in records:
        if r.speaker_label in eval_set:
            evl.append(dataclasses.replace(r, speaker_label=eval_map[r.speaker_label]))
        else:
            train.append(dataclasses.replace(r, speaker_label=train_map[r.speaker_label]))
    return train, evl
