import dataclasses
import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cascade_spk.corpus import (
    FEATURE_MAGIC,
    SyntheticCorpusSpec,
    UtteranceRecord,
    crop,
    dumps_manifest,
    generate_corpus,
    load_utterance,
    parse_features,
    read_features,
    read_manifest,
    rebase_records,
    record_from_json,
    record_to_json,
    split_by_label,
    write_features,
    write_manifest,
)
from cascade_spk.errors import (
    ConfigError,
    DimensionMismatchError,
    InvalidInputError,
    MagicMismatchError,
    MalformedHeaderError,
    ManifestError,
    TruncatedFileError,
    VersionMismatchError,
)
from cascade_spk.numerics import Rng, l2_normalize


def small_spec(**kw):
    base = dict(num_speakers=6, utterances_per_speaker=3, frames_per_utterance=120, seed=1)
    base.update(kw)
    return SyntheticCorpusSpec(**base)


# -- corpus parameters -------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(num_speakers=0),
    dict(frame_noise=0.0),
    dict(multi_speaker_fraction=0.7, noisy_fraction=0.4),
    dict(noisy_fraction=-0.1),
    dict(num_speakers=1, multi_speaker_fraction=0.1),
])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        small_spec(**kw)


# -- generation ----------------------------------------------------------------

def test_all_clean_when_fractions_zero(tmp_path):
    recs = generate_corpus(small_spec(multi_speaker_fraction=0, noisy_fraction=0), tmp_path)
    assert {r.truth_quality for r in recs} == {"clean"}


def test_generation_is_byte_identical(tmp_path):
    spec = small_spec(multi_speaker_fraction=0.2, noisy_fraction=0.2)
    generate_corpus(spec, tmp_path / "a", manifest_name="m.jsonl")
    generate_corpus(spec, tmp_path / "b", manifest_name="m.jsonl")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_quality_counts_and_truth(tmp_path):
    spec = small_spec(num_speakers=10, utterances_per_speaker=10,
                      multi_speaker_fraction=0.1, noisy_fraction=0.2)
    recs = generate_corpus(spec, tmp_path)
    q = [r.truth_quality for r in recs]
    assert q.count("multi_speaker") == 10 and q.count("noisy") == 20
    for r in recs:
        assert len(r.truth_speakers) == (2 if r.truth_quality == "multi_speaker" else 1)
        if r.truth_quality == "multi_speaker":
            assert r.truth_speakers[0] != r.truth_speakers[1]
        assert r.vad_segments and r.speaker_label is None


def test_noisy_utterances_have_larger_spread(tmp_path):
    spec = small_spec(num_speakers=10, utterances_per_speaker=4, noisy_fraction=0.5,
                      multi_speaker_fraction=0.0)
    recs = generate_corpus(spec, tmp_path, manifest_name="m.jsonl")
    std = {q: [] for q in ("clean", "noisy")}
    for r in recs:
        std[r.truth_quality].append(load_utterance(tmp_path / "m.jsonl", r).std(axis=0).mean())
    # frame noise is 5x larger, so the within-utterance spread is about 5x larger
    ratio = np.mean(std["noisy"]) / np.mean(std["clean"])
    assert 4.5 < ratio < 5.5


def _speaker_gap(records, manifest):
    means = l2_normalize(np.stack([load_utterance(manifest, r).mean(axis=0) for r in records]))
    spk = np.array([r.truth_speakers[0] for r in records])
    c = means @ means.T
    same = spk[:, None] == spk[None, :]
    off = ~np.eye(len(records), dtype=bool)
    return c[same & off].mean() - c[~same].mean()


def test_speaker_gap_grows_with_scale(tmp_path):
    gaps = []
    for scale in (0.5, 1.0, 2.0):
        spec = SyntheticCorpusSpec(num_speakers=200, utterances_per_speaker=10,
                                   speaker_scale=scale, seed=11,
                                   multi_speaker_fraction=0, noisy_fraction=0)
        out = tmp_path / str(scale)
        recs = generate_corpus(spec, out, manifest_name="m.jsonl")
        gaps.append(_speaker_gap(recs, out / "m.jsonl"))
    assert gaps[0] > 0
    assert gaps[0] < gaps[1] < gaps[2]


def test_labeled_generation_and_split(tmp_path):
    recs = generate_corpus(small_spec(num_speakers=8), tmp_path, labeled=True)
    assert sorted({r.speaker_label for r in recs}) == list(range(8))
    train, evl = split_by_label(recs, 3)
    assert sorted({r.speaker_label for r in train}) == list(range(5))
    assert sorted({r.speaker_label for r in evl}) == list(range(3))
    assert {r.truth_speakers[0] for r in train}.isdisjoint({r.truth_speakers[0] for r in evl})
    with pytest.raises(InvalidInputError):
        split_by_label(recs, 8)


# -- crop ----------------------------------------------------------------------

def test_crop_full_and_boundary():
    s = np.arange(20.0).reshape(10, 2)
    assert np.array_equal(crop(s, 0, 10), s)
    with pytest.raises(InvalidInputError):
        crop(s, 9, 2)
    with pytest.raises(InvalidInputError):
        crop(s, -1, 2)


def test_crop_copies():
    s = np.zeros((5, 2))
    c = crop(s, 1, 2)
    c[:] = 1
    assert s.sum() == 0


@given(st.integers(2, 40), st.data())
def test_crop_composes(t, data):
    s = np.arange(3.0 * t).reshape(t, 3)
    a = data.draw(st.integers(0, t - 1))
    n = data.draw(st.integers(1, t - a))
    b = data.draw(st.integers(0, n - 1))
    m = data.draw(st.integers(1, n - b))
    assert np.array_equal(crop(crop(s, a, n), b, m), crop(s, a + b, m))


# -- feature files ---------------------------------------------------------------

@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_feature_round_trip(tmp_path_factory, t, d, seed):
    path = tmp_path_factory.mktemp("f") / "x.cspf"
    x = Rng(seed).gaussian((t, d)).astype(np.float32)
    write_features(path, x)
    y = read_features(path)
    assert y.dtype == np.float32 and np.array_equal(x.view(np.uint32), y.view(np.uint32))


def test_feature_header_layout(tmp_path):
    write_features(tmp_path / "x.cspf", np.ones((3, 2), dtype=np.float32))
    data = (tmp_path / "x.cspf").read_bytes()
    assert data[:4] == b"CSPF"
    assert struct.unpack("<III", data[4:16]) == (1, 3, 2)
    assert len(data) == 16 + 3 * 2 * 4


def _valid_bytes():
    x = np.arange(6, dtype=np.float32).reshape(3, 2)
    return FEATURE_MAGIC + struct.pack("<III", 1, 3, 2) + x.tobytes()


def test_feature_errors_are_distinct():
    good = _valid_bytes()
    assert parse_features(good).shape == (3, 2)
    with pytest.raises(MagicMismatchError):
        parse_features(b"XXXX" + good[4:])
    with pytest.raises(MalformedHeaderError):
        parse_features(good[:10])
    with pytest.raises(VersionMismatchError):
        parse_features(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(TruncatedFileError):
        parse_features(good[:4] + struct.pack("<III", 1, 4, 2) + good[16:])
    with pytest.raises(DimensionMismatchError):
        parse_features(good, expected_dim=3)
    with pytest.raises(DimensionMismatchError):
        parse_features(good + b"\0\0\0\0")


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(InvalidInputError):
        write_features(tmp_path / "x.cspf", np.array([[np.nan]]))


# -- manifests -------------------------------------------------------------------

def test_manifest_round_trip_byte_stable(tmp_path):
    recs = generate_corpus(small_spec(multi_speaker_fraction=0.2), tmp_path, labeled=True)
    text = dumps_manifest(recs)
    again = dumps_manifest([record_from_json(l) for l in text.splitlines()])
    assert text == again
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs


def test_manifest_rejects_unknown_and_missing_keys():
    rec = UtteranceRecord("u", "f.cspf", 10, [(0, 10)])
    obj = json.loads(record_to_json(rec))
    with pytest.raises(ManifestError):
        record_from_json(json.dumps({**obj, "extra": 1}))
    del obj["frame_count"]
    with pytest.raises(ManifestError):
        record_from_json(json.dumps(obj))
    with pytest.raises(ManifestError):
        record_from_json("{not json")


@pytest.mark.parametrize("segs", [[(0, 11)], [(5, 5)], [(0, 5), (4, 8)], [(-1, 3)]])
def test_record_rejects_bad_segments(segs):
    with pytest.raises(ManifestError):
        UtteranceRecord("u", "f", 10, segs)


def test_rebase_keeps_features_resolvable(tmp_path):
    recs = generate_corpus(small_spec(), tmp_path / "corpus", manifest_name="m.jsonl")
    moved = rebase_records(recs, tmp_path / "corpus" / "m.jsonl", tmp_path / "other" / "f.jsonl")
    assert moved[0].feature_path.startswith("../corpus/")
    write_manifest(tmp_path / "other" / "f.jsonl", moved)
    a = load_utterance(tmp_path / "corpus" / "m.jsonl", recs[0])
    b = load_utterance(tmp_path / "other" / "f.jsonl", moved[0])
    assert np.array_equal(a, b)


def test_truth_fields_do_not_affect_training_inputs(tmp_path):
    """Corrupting ground truth leaves every training-side artifact identical."""
    from cascade_spk import dino, encoder as enc

    recs = generate_corpus(small_spec(frames_per_utterance=100), tmp_path, manifest_name="m.jsonl")
    bad = [dataclasses.replace(r, truth_speakers=["x"], truth_quality="noisy") for r in recs]
    write_manifest(tmp_path / "bad.jsonl", bad)
    cfg = dino.DinoConfig(epochs=1, batch_size=4)
    ecfg = enc.EncoderConfig(hidden_dims=[8], embedding_dim=4, head_hidden_dims=[], head_output_dim=5)
    a = dino.pretrain(tmp_path / "m.jsonl", ecfg, cfg)
    b = dino.pretrain(tmp_path / "bad.jsonl", ecfg, cfg)
    assert enc.checkpoint_bytes(a.state.teacher, ecfg, "teacher") == \
        enc.checkpoint_bytes(b.state.teacher, ecfg, "teacher")
