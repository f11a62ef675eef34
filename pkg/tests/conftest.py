import numpy as np
import pytest

from pilot_tts.config import RunConfig, get_settings
from pilot_tts.corpus import make_corpus
from pilot_tts.dsp import Waveform

SR = 16000

# Tiny model dims so stage tests finish in seconds
TINY = {
    'FSQ_D': 3,
    'FSQ_HIDDEN': 16,
    'CONTENT_DIM': 16,
    'SPEAKER_DIM': 16,
    'QFORMER_QUERIES': 32,
    'QFORMER_HEADS': 2,
    'D_MODEL': 16,
    'AR_HEADS': 2,
    'AR_BLOCKS': 1,
    'AR_CONTEXT': 256,
    'CFM_D_MODEL': 16,
    'CFM_BLOCKS': 1,
    'CFM_HEADS': 2,
    'TRAIN_BATCH': 2,
    'TRAIN_STEPS_TOKENIZER': 2,
    'TRAIN_STEPS_AR': 2,
    'TRAIN_STEPS_CFM': 2,
    'SAMPLING_MAX_TOKENS': 8,
    'GRIFFIN_LIM_ITERS': 4,
    'PROGRESS': False,
}


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the long overfit / acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running training test (needs --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tone(freq=440.0, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def fade(samples, ms=100.0, sr=SR):
    n = int(sr * ms / 1000.0)
    env = np.ones(samples.size)
    env[:n] = np.linspace(0.0, 1.0, n)
    env[-n:] = np.linspace(1.0, 0.0, n)
    return samples * env


@pytest.fixture
def clean_tone():
    """1 s of 440 Hz with 100 ms fades over a faint noise floor, padded by 0.5 s."""
    noise = np.random.default_rng(1).standard_normal(2 * SR) * 1e-3
    samples = noise.copy()
    samples[SR // 2: SR // 2 + SR] += fade(tone(seconds=1.0, amp=0.3))
    return Waveform(samples, SR)


@pytest.fixture(scope='session')
def demo_corpus(tmp_path_factory):
    """2 speakers x 4 utterances (zh, en)."""
    out = tmp_path_factory.mktemp('corpus')
    records = make_corpus(out, n_speakers=2, utts_per_speaker=4, langs=['zh', 'en'], seed=7)
    return out, records


@pytest.fixture
def tiny_settings():
    return get_settings(overrides=dict(TINY))


@pytest.fixture
def tiny_config(tmp_path, demo_corpus):
    """RunConfig with tiny models, the demo corpus and per-test output dirs."""
    corpus_dir, _ = demo_corpus
    overrides = dict(TINY, PATHS_CORPUS=str(corpus_dir))
    return RunConfig.from_settings(get_settings(overrides=overrides), base_dir=tmp_path)
