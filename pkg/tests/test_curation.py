import json

import numpy as np
import pytest

from pilot_tts.dsp import Waveform
from pilot_tts.exceptions import ConfigurationError, ManifestError, RangeError
from pilot_tts.items import QualityTags, make_record, record_from_dict, record_to_dict
from pilot_tts.pipelines import (FilterPolicy, annotate_sample, filter_manifest, quality_status,
                                 read_manifest, rejection_reason, run_pipeline, write_manifest)
from pilot_tts.quality_analyzer import PluginScorer, QualityAnalyzer, build_scorer, stub_pseudo_mos
from pilot_tts.wavio import write_wav

from conftest import SR, tone


def _noisy_speech(seed=0):
    rng = np.random.default_rng(seed)
    samples = 0.01 * rng.standard_normal(2 * SR)
    samples[SR // 2: 3 * SR // 2] += tone(seconds=1.0, amp=0.3)
    return Waveform(samples)


@pytest.fixture
def wav_record(tmp_path):
    write_wav(tmp_path / 'a.wav', _noisy_speech())
    return make_record('a', 'a.wav', 'hello', 'spk0', 'en', 2.0)


def _tagged(**tags):
    record = make_record('r', 'r.wav', 'x', 'spk', 'zh', 1.0)
    record['tags'] = QualityTags(**tags)
    return record


# scorers

def test_only_selected_scorers_run(wav_record, tmp_path):
    annotated = annotate_sample(wav_record, ['snr', 'rolloff'], tmp_path)
    assert annotated['tags']['snr_db'] == pytest.approx(26.5, abs=1.0)
    assert 'rolloff_hz' in annotated['tags']
    assert 'pseudo_mos' not in annotated['tags']
    assert 'snr_db' not in wav_record['tags']


def test_empty_scorer_set_leaves_record_unchanged(wav_record, tmp_path):
    annotated = annotate_sample(wav_record, [], tmp_path)
    assert record_to_dict(annotated) == record_to_dict(wav_record)


def test_hard_cut_is_flagged(tmp_path):
    write_wav(tmp_path / 'cut.wav', Waveform(tone(seconds=1.0, amp=0.5)[4000:]))
    record = make_record('cut', 'cut.wav', 'x', 'spk', 'zh', 0.75)
    assert annotate_sample(record, ['truncation'], tmp_path)['tags']['truncated'] is True


def test_unreadable_audio_sets_read_error(tmp_path):
    record = make_record('gone', 'missing.wav', 'x', 'spk', 'zh', 1.0)
    annotated = annotate_sample(record, ['snr'], tmp_path)
    assert 'read_error' in annotated['tags']
    assert 'snr_db' not in annotated['tags']
    assert rejection_reason(annotated, FilterPolicy.empty()) == 'read_failure'


def test_pseudo_mos_ignores_manifest_snr(wav_record, tmp_path):
    measured = annotate_sample(wav_record, ['snr', 'pseudo_mos'], tmp_path)['tags']
    wav_record['tags']['snr_db'] = 30.0
    annotated = annotate_sample(wav_record, ['pseudo_mos'], tmp_path)
    assert annotated['tags']['pseudo_mos'] == measured['pseudo_mos']
    assert annotated['tags']['pseudo_mos'] == pytest.approx(
        stub_pseudo_mos(measured['snr_db']), abs=1e-3)
    assert annotated['tags']['snr_db'] == 30.0


def test_rerun_with_failing_scorer_drops_stale_tag(wav_record, tmp_path):
    wav_record['tags']['overlap'] = True
    wav_record['tags']['rolloff_hz'] = 1.0
    broken = PluginScorer('overlap', ['overlap'], lambda record, audio: 1 / 0)
    annotated = annotate_sample(wav_record, QualityAnalyzer([broken, 'snr']), tmp_path)
    assert 'overlap' not in annotated['tags']
    assert annotated['tags']['rolloff_hz'] == 1.0
    assert wav_record['tags']['overlap'] is True


@pytest.mark.parametrize('snr, mos', [(-20.0, 1.0), (0.0, 1.0), (25.0, 3.5), (60.0, 5.0)])
def test_stub_mos_curve(snr, mos):
    assert stub_pseudo_mos(snr) == pytest.approx(mos)


def test_failing_plugin_leaves_its_tag_absent(wav_record, tmp_path):
    plugin = PluginScorer('overlap', ['overlap'], lambda record, audio: {'bogus': 1})
    annotated = annotate_sample(wav_record, QualityAnalyzer([plugin, 'is_speech']), tmp_path)
    assert 'overlap' not in annotated['tags']
    assert annotated['tags']['is_speech'] is True


def test_unknown_scorer():
    with pytest.raises(ConfigurationError):
        build_scorer('loudness')


# filtering

def test_snr_above_floor_is_kept():
    assert rejection_reason(_tagged(snr_db=20.0), FilterPolicy.only(min_snr_db=15.0)) is None


def test_mos_at_threshold_is_rejected():
    assert rejection_reason(_tagged(pseudo_mos=3.5), FilterPolicy.only(min_pseudo_mos=3.5)) == 'low_mos'


def test_missing_tag_is_unscored():
    assert rejection_reason(_tagged(), FilterPolicy.only(min_snr_db=15.0)) == 'unscored'


def test_first_failing_reason_wins():
    record = _tagged(pseudo_mos=2.0, is_speech=True, snr_db=5.0, truncated=True)
    assert rejection_reason(record, FilterPolicy()) == 'low_mos'
    assert rejection_reason(record, FilterPolicy.only(min_snr_db=15.0, reject_truncated=True)) == 'low_snr'


def test_empty_policy_keeps_everything(rng):
    records = [_tagged(pseudo_mos=float(m), snr_db=float(s), truncated=bool(t))
               for m, s, t in zip(rng.uniform(1, 5, 1000), rng.uniform(-10, 40, 1000),
                                  rng.integers(0, 2, 1000))]
    assert all(r['kept'] for r in filter_manifest(records, FilterPolicy.empty()))


def test_policy_rejects_non_finite():
    with pytest.raises(RangeError):
        FilterPolicy(min_snr_db=float('nan'))


def test_quality_status():
    policy = FilterPolicy()
    assert quality_status({'pseudo_mos': 3.0}, policy) == 'deficient'
    assert quality_status({'is_speech': False}, policy) == 'deficient'
    assert quality_status({'pseudo_mos': 4.0, 'is_speech': True}, policy) == 'unknown'
    assert quality_status({'pseudo_mos': 4.0, 'is_speech': True, 'snr_db': 30.0}, policy) == 'clean'


# manifests

def test_record_from_dict_rejects_unknown_tag():
    with pytest.raises(ManifestError):
        record_from_dict({'id': 'a', 'audio_path': 'a.wav', 'text': 'x', 'speaker_id': 's',
                          'lang': 'zh', 'duration_s': 1.0, 'tags': {'loudness': 3}})


def test_manifest_error_names_line(tmp_path):
    path = tmp_path / 'bad.jsonl'
    good = json.dumps({'id': 'a', 'audio_path': 'a.wav', 'text': 'x', 'speaker_id': 's',
                       'lang': 'zh', 'duration_s': 1.0})
    path.write_text(good + '\n{broken\n')
    with pytest.raises(ManifestError) as info:
        read_manifest(path)
    assert info.value.line_number == 2


def test_duplicate_ids(tmp_path):
    records = [make_record('a', 'a.wav', 'x', 's', 'zh', 1.0)] * 2
    path = tmp_path / 'dup.jsonl'
    path.write_text('\n'.join(json.dumps(record_to_dict(r)) for r in records) + '\n')
    with pytest.raises(ManifestError):
        read_manifest(path)


# run_pipeline

def test_empty_manifest(tmp_path):
    (tmp_path / 'in.jsonl').write_text('')
    summary = run_pipeline(tmp_path / 'in.jsonl', tmp_path / 'out.jsonl', FilterPolicy(), ['snr'])
    assert summary == {'total': 0, 'kept': 0, 'reasons': {}}
    assert (tmp_path / 'out.jsonl').read_text() == ''


def test_pipeline_keeps_every_record(tmp_path, demo_corpus):
    corpus_dir, records = demo_corpus
    out = tmp_path / 'out' / 'curated.jsonl'
    summary = run_pipeline(corpus_dir / 'manifest.jsonl', out, FilterPolicy.only(min_snr_db=999.0),
                           ['snr'])
    assert summary['total'] == len(records)
    assert summary['kept'] == 0
    curated = read_manifest(out)
    assert [r['id'] for r in curated] == [r['id'] for r in records]
    assert (out.parent / curated[0]['audio_path']).is_file()


def test_pipeline_is_idempotent(tmp_path, demo_corpus):
    corpus_dir, _ = demo_corpus
    scorers = ['snr', 'rolloff', 'truncation', 'pseudo_mos']
    first, second = tmp_path / 'first.jsonl', tmp_path / 'second.jsonl'
    run_pipeline(corpus_dir / 'manifest.jsonl', first, FilterPolicy(), scorers)
    run_pipeline(first, second, FilterPolicy(), scorers)
    assert first.read_text() == second.read_text()


def test_worker_count_does_not_change_output(tmp_path, demo_corpus):
    corpus_dir, _ = demo_corpus
    serial, threaded = tmp_path / 'serial.jsonl', tmp_path / 'threaded.jsonl'
    run_pipeline(corpus_dir / 'manifest.jsonl', serial, FilterPolicy(), ['snr', 'rolloff'], workers=1)
    run_pipeline(corpus_dir / 'manifest.jsonl', threaded, FilterPolicy(), ['snr', 'rolloff'], workers=4)
    assert serial.read_text() == threaded.read_text()


def test_read_failures_are_counted(tmp_path, wav_record):
    records = [wav_record, make_record('gone', 'missing.wav', 'x', 'spk', 'zh', 1.0)]
    write_manifest(tmp_path / 'in.jsonl', records)
    summary = run_pipeline(tmp_path / 'in.jsonl', tmp_path / 'out.jsonl', FilterPolicy.empty(), ['snr'])
    assert summary == {'total': 2, 'kept': 1, 'reasons': {'read_failure': 1}}
