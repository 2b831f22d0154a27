import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cascade_spk import encoder as enc
from cascade_spk.corpus import SyntheticCorpusSpec, generate_corpus

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", help="skip tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-slow"):
        skip = pytest.mark.skip(reason="--skip-slow")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)


TINY = enc.EncoderConfig(feature_dim=5, hidden_dims=[8], embedding_dim=4,
                         head_hidden_dims=[6], head_output_dim=7)


@pytest.fixture
def tiny_cfg():
    return enc.EncoderConfig(**{k: getattr(TINY, k) for k in
                                ("feature_dim", "hidden_dims", "embedding_dim",
                                 "head_hidden_dims", "head_output_dim")})


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 12-speaker labeled corpus shared read-only across tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    spec = SyntheticCorpusSpec(num_speakers=12, utterances_per_speaker=4,
                               frames_per_utterance=200, seed=5)
    records = generate_corpus(spec, out, labeled=True, manifest_name="all.jsonl")
    return out / "all.jsonl", records


def central_diff(f, x, h=1e-4):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Max relative error; entries where both are below ``floor`` compare absolutely."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    scale = np.where(scale < floor, 1.0, scale)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def norm_rel_err(a, b):
    """||a - b|| / max(||a||, ||b||), the usual gradient-check metric."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


ACCEPTANCE_LINES = {}


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion for the summary."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
