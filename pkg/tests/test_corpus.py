from collections import Counter
from itertools import combinations, islice

import numpy as np
import pytest

from pilot_tts.conditioner import cosine, speaker_embed
from pilot_tts.corpus import (CHAR_S, GAP_S, SCENARIOS, SyntheticSpeaker, cross_sample_pairs,
                              dialect_scenario_pairs, hard_cut, make_corpus, make_speakers,
                              mixed_prompt_pairs, synth_utterance)
from pilot_tts.dsp import detect_truncation
from pilot_tts.exceptions import ConfigurationError, ContractError, EmptyInputError, VocabError
from pilot_tts.items import make_record
from pilot_tts.pipelines import FilterPolicy, run_pipeline
from pilot_tts.quality_analyzer import QualityAnalyzer
from pilot_tts.settings import CURATION_SCORERS
from pilot_tts.vocab import DIALECTS
from pilot_tts.wavio import read_wav

from conftest import SR

SPEAKER = SyntheticSpeaker('spk', 150.0, 1.0, 'zh', 42)


@pytest.fixture(scope='module')
def full_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp('full_corpus')
    return out, make_corpus(out, n_speakers=4, utts_per_speaker=8, seed=1234)


def _records(layout):
    """layout: {speaker: [lang, ...]} -> records with ids speaker_k."""
    return [make_record(f'{spk}_{k}', f'{spk}_{k}.wav', 'x', spk, lang, 1.0)
            for spk, langs in layout.items() for k, lang in enumerate(langs)]


# synthesis

def test_utterance_duration():
    w = synth_utterance(SPEAKER, 'abcde')
    assert len(w) == int(round(5 * CHAR_S * SR)) + int(round(4 * GAP_S * SR))
    assert w.duration_s == pytest.approx(0.6)


def test_whitespace_is_skipped():
    assert len(synth_utterance(SPEAKER, 'a b')) == len(synth_utterance(SPEAKER, 'ab'))


def test_synthesis_is_deterministic():
    a = synth_utterance(SPEAKER, '今天天气很好', 'happy', seed=3)
    b = synth_utterance(SPEAKER, '今天天气很好', 'happy', seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_emotion_changes_the_voice():
    neutral = synth_utterance(SPEAKER, 'hello', 'neutral', seed=1)
    happy = synth_utterance(SPEAKER, 'hello', 'happy', seed=1)
    assert len(neutral) == len(happy)
    assert not np.allclose(neutral.samples, happy.samples)


def test_dialect_stretches_duration():
    lengths = {len(synth_utterance(SPEAKER, 'abc', lang=lang)) for lang in DIALECTS}
    assert len(lengths) > 1


def test_markers_become_bursts():
    plain = synth_utterance(SPEAKER, 'ab')
    laughing = synth_utterance(SPEAKER, 'ab[laugh]')
    assert len(laughing) == len(plain) + int(round(GAP_S * SR)) + int(round(0.3 * SR))


def test_bad_inputs():
    with pytest.raises(EmptyInputError):
        synth_utterance(SPEAKER, '   ')
    with pytest.raises(VocabError):
        synth_utterance(SPEAKER, 'hi', 'bored')
    with pytest.raises(ContractError):
        SyntheticSpeaker('low', 50.0, 1.0, 'zh', 0)
    with pytest.raises(VocabError):
        SyntheticSpeaker('x', 120.0, 1.0, 'klingon', 0)


def test_speakers_are_distinct():
    speakers = make_speakers(6, ['zh', 'en'], seed=5)
    assert len({(s.f0_hz, s.formant_shift) for s in speakers}) == 6
    assert [s.lang for s in speakers] == ['zh', 'en'] * 3


def test_hard_cut_ends_mid_energy():
    cut = hard_cut(synth_utterance(SPEAKER, 'hello there', seed=2))
    assert detect_truncation(cut)['offset_truncated']


# corpus

def test_corpus_size(full_corpus):
    out, records = full_corpus
    assert len(records) == 32
    assert len({r['speaker_id'] for r in records}) == 4
    assert all((out / r['audio_path']).is_file() for r in records)


def test_corpus_is_byte_identical(tmp_path):
    first = make_corpus(tmp_path / 'a', n_speakers=2, utts_per_speaker=2, seed=9)
    make_corpus(tmp_path / 'b', n_speakers=2, utts_per_speaker=2, seed=9)
    assert (tmp_path / 'a' / 'manifest.jsonl').read_bytes() == \
        (tmp_path / 'b' / 'manifest.jsonl').read_bytes()
    for record in first:
        assert (tmp_path / 'a' / record['audio_path']).read_bytes() == \
            (tmp_path / 'b' / record['audio_path']).read_bytes()


def test_dialect_speakers_get_mandarin_parallels(tmp_path):
    records = make_corpus(tmp_path, n_speakers=2, utts_per_speaker=3, langs=['yue', 'wuu'],
                          seed=1, mandarin_parallel=2)
    counts = Counter((r['speaker_id'], r['lang'] == 'zh') for r in records)
    assert counts == {('spk00', False): 3, ('spk00', True): 2, ('spk01', False): 3, ('spk01', True): 2}


def test_every_record_passes_default_curation(tmp_path, demo_corpus):
    corpus_dir, records = demo_corpus
    summary = run_pipeline(corpus_dir / 'manifest.jsonl', tmp_path / 'curated.jsonl', FilterPolicy(),
                           QualityAnalyzer(CURATION_SCORERS))
    assert summary == {'total': len(records), 'kept': len(records), 'reasons': {}}


def test_truncated_records_are_rejected(tmp_path):
    make_corpus(tmp_path / 'c', n_speakers=2, utts_per_speaker=3, seed=4, truncated=2)
    summary = run_pipeline(tmp_path / 'c' / 'manifest.jsonl', tmp_path / 'out.jsonl', FilterPolicy(),
                           QualityAnalyzer(CURATION_SCORERS))
    assert summary['kept'] == summary['total'] - 2
    assert summary['reasons'] == {'truncated': 2}


def test_same_speaker_embeddings_are_closer(full_corpus):
    out, records = full_corpus
    embedded = [(r['speaker_id'], speaker_embed(read_wav(out / r['audio_path']))) for r in records]
    same, cross = [], []
    for (spk_a, a), (spk_b, b) in combinations(embedded, 2):
        (same if spk_a == spk_b else cross).append(cosine(a, b))
    assert np.mean(same) - np.mean(cross) >= 0.2


# pair samplers

def test_cross_sample_pairs_stay_within_speaker():
    records = _records({'a': ['zh'] * 3, 'b': ['en'] * 4})
    for pair in islice(cross_sample_pairs(records, np.random.default_rng(0)), 10000):
        assert pair.target['id'] != pair.reference['id']
        assert pair.speaker_matched


def test_cross_sample_reference_is_uniform():
    records = _records({'a': ['zh'] * 3, 'b': ['en'] * 2})
    counts = Counter()
    stream = cross_sample_pairs(records, np.random.default_rng(1))
    while sum(counts.values()) < 10000:
        pair = next(stream)
        if pair.target['id'] == 'a_0':
            counts[pair.reference['id']] += 1
    assert set(counts) == {'a_1', 'a_2'}
    assert counts['a_1'] / 10000 == pytest.approx(0.5, abs=0.03)


def test_singleton_speaker_is_named():
    with pytest.raises(ConfigurationError, match='lonely'):
        cross_sample_pairs(_records({'a': ['zh'] * 2, 'lonely': ['zh']}), np.random.default_rng(0))


def test_mixed_prompt_balance():
    records = _records({'d0': ['yue', 'yue', 'yue', 'zh'], 'd1': ['wuu', 'wuu', 'zh', 'zh']})
    stream = mixed_prompt_pairs(records, np.random.default_rng(2))
    mandarin = 0
    for pair in islice(stream, 100000):
        assert pair.target['lang'] in DIALECTS
        assert pair.speaker_matched
        assert pair.target['id'] != pair.reference['id']
        mandarin += pair.reference['lang'] == 'zh'
    assert 0.48 <= mandarin / 100000 <= 0.52


def test_mixed_prompt_needs_mandarin():
    with pytest.raises(ConfigurationError):
        mixed_prompt_pairs(_records({'d0': ['yue', 'yue']}), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        mixed_prompt_pairs(_records({'m': ['zh', 'zh']}), np.random.default_rng(0))


def test_single_dialect_utterance_gets_mandarin_references(caplog):
    records = _records({'d0': ['yue', 'zh', 'zh']})
    pairs = list(islice(mixed_prompt_pairs(records, np.random.default_rng(4)), 200))
    assert all(p.target['lang'] == 'yue' and p.reference['lang'] == 'zh' for p in pairs)
    assert 'one dialect utterance' in caplog.text


def test_dialect_scenarios():
    records = _records({'d0': ['yue', 'yue', 'zh'], 'd1': ['wuu', 'wuu', 'zh']})
    rng = np.random.default_rng(3)
    same = dialect_scenario_pairs(records, 'same_dialect', rng)
    assert len(same) == 4
    assert all(p.reference['lang'] == p.target['lang'] and p.speaker_matched for p in same)
    mandarin = dialect_scenario_pairs(records, 'mandarin_to_dialect', rng)
    assert all(p.reference['lang'] == 'zh' for p in mandarin)
    cross = dialect_scenario_pairs(records, 'cross_dialect', rng)
    assert all(p.reference['lang'] in DIALECTS and p.reference['lang'] != p.target['lang']
               for p in cross)
    assert set(SCENARIOS) == {'same_dialect', 'mandarin_to_dialect', 'cross_dialect'}
    with pytest.raises(ConfigurationError):
        dialect_scenario_pairs(records, 'whisper', rng)
