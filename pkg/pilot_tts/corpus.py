"""
Deterministic synthetic voice corpus and the training-time pair samplers.

Every character of a transcript becomes an 80 ms harmonic tone (50 ms gaps in
between) whose pitch depends on the speaker, the character and an emotion
contour. Dialect utterances are the same voice with a per-dialect pitch tilt
and duration stretch; their Mandarin parallels are the untransformed voice.
Paralinguistic markers become short noise bursts or amplitude-modulated tones.
"""
import logging
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from pilot_tts import settings as defaults
from pilot_tts.dsp import Waveform
from pilot_tts.exceptions import ConfigurationError, ContractError, EmptyInputError, VocabError
from pilot_tts.items import SampleRecord, make_record
from pilot_tts.pipelines import write_manifest
from pilot_tts.vocab import DIALECTS, EMO_TAGS, LANG_TAGS, split_markers
from pilot_tts.wavio import write_wav

logger = logging.getLogger(__name__)

CHAR_S = 0.08
GAP_S = 0.05
RAMP_S = 0.025
SEGMENT_RMS = 0.1
NOISE_FLOOR = 5e-4
MAX_HARMONIC_HZ = 7000.0
MANIFEST_NAME = 'manifest.jsonl'

# emotion -> (pitch scale, contour slope over the utterance, energy)
EMOTION_STYLE = {
    'neutral': (1.00, 0.00, 1.00),
    'happy': (1.12, 0.20, 1.25),
    'sad': (0.90, -0.15, 0.70),
    'angry': (1.08, -0.10, 1.40),
    'fear': (1.15, 0.10, 0.80),
    'contempt': (0.95, -0.20, 0.90),
    'serious': (0.97, -0.05, 1.00),
    'surprise': (1.20, 0.30, 1.20),
    'concern': (0.96, 0.05, 0.85),
    'blue': (0.88, -0.25, 0.65),
    'disgust': (0.93, -0.12, 1.05),
    'psychology': (1.02, 0.08, 0.95),
}

# marker -> burst length in seconds
BURST_S = {'LAUGH': 0.3, 'CRY': 0.3, 'BREATH': 0.2, 'COUGH': 0.12}

PHRASES = {
    'zh': ['今天天气很好', '我们一起去公园', '请把门关上', '这本书很有意思', '明天早上见',
           '他在学习中文', '谢谢你的帮助', '今天真开心[laugh]', '<laugh>这太好笑了</laugh>',
           '我有点累了[breath]'],
    'en': ['hello world', 'good morning', 'see you soon', 'thank you all', 'nice to meet you',
           'the sky is blue', 'open the door', 'that was funny [laugh]', 'wait [breath] for me',
           'so sorry [cry]'],
}
DIALECT_PHRASES = PHRASES['zh']


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0_hz: float
    formant_shift: float
    lang: str
    timbre_seed: int

    def __post_init__(self):
        if not 80.0 <= self.f0_hz <= 400.0:
            raise ContractError(f'f0_hz must lie in [80, 400], got {self.f0_hz}')
        if self.lang not in LANG_TAGS:
            raise VocabError(f'unknown language tag {self.lang!r}; valid tags: {", ".join(LANG_TAGS)}')

    @property
    def tilt(self) -> float:
        """Spectral slope exponent of the harmonic amplitudes."""
        return float(np.random.default_rng(self.timbre_seed).uniform(0.6, 1.6))


@dataclass
class PairedExample:
    target: SampleRecord
    reference: SampleRecord

    @property
    def speaker_matched(self) -> bool:
        return self.target['speaker_id'] == self.reference['speaker_id']


def stable_seed(*parts) -> int:
    """Seed from a crc32 of the joined parts (stable across runs and platforms)."""
    return zlib.crc32(':'.join(str(p) for p in parts).encode('utf-8'))


def make_speakers(n: int, langs: Sequence[str], seed: int) -> List[SyntheticSpeaker]:
    """
    n speakers, languages assigned round-robin.

    Pitch and formant shift are spread evenly over their ranges and then
    shuffled, so no two speakers share both.
    """
    if n < 1:
        raise ContractError(f'need at least one speaker, got {n}')
    if not langs:
        raise ContractError('need at least one language')
    rng = np.random.default_rng(seed)
    f0 = 90.0 + 220.0 * (np.arange(n) + 0.5) / n
    shifts = 0.8 + 0.5 * (np.arange(n) + 0.5) / n
    f0 = f0[rng.permutation(n)]
    shifts = shifts[rng.permutation(n)]
    return [SyntheticSpeaker(speaker_id=f'spk{i:02d}', f0_hz=round(float(f0[i]), 3),
                             formant_shift=round(float(shifts[i]), 4), lang=langs[i % len(langs)],
                             timbre_seed=stable_seed(seed, 'timbre', i))
            for i in range(n)]


def _ramp(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = rise
        env[n - ramp:] = rise[::-1]
    return env


def _normalize(x: np.ndarray, rms: float) -> np.ndarray:
    current = np.sqrt(np.mean(x * x))
    return x * (rms / current) if current > 0 else x


def _harmonic_tone(spk: SyntheticSpeaker, f0: float, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    gains = np.random.default_rng(spk.timbre_seed).uniform(0.7, 1.3, size=64)
    formants = np.array([500.0, 1500.0, 2500.0]) * spk.formant_shift
    out = np.zeros(n)
    for h in range(1, 65):
        freq = h * f0
        if freq > MAX_HARMONIC_HZ:
            break
        emphasis = 1.0 + 2.0 * np.exp(-((freq - formants) / 250.0) ** 2).sum()
        amp = gains[h - 1] * emphasis / h ** spk.tilt
        out += amp * np.sin(2.0 * np.pi * freq * t + 0.3 * h)
    return out


def _character_ratio(ch: str) -> float:
    return 2.0 ** ((ord(ch) % 12) / 24.0)


def _dialect_style(lang: str):
    """(duration scale, pitch slope) for a dialect; (1, 0) otherwise."""
    if lang not in DIALECTS:
        return 1.0, 0.0
    code = stable_seed('dialect', lang)
    return 0.85 + 0.35 * (code % 8) / 7.0, -0.3 + 0.6 * ((code >> 3) % 8) / 7.0


def _burst(name: str, spk: SyntheticSpeaker, rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(round(BURST_S[name] * sr))
    t = np.arange(n) / sr
    if name in ('BREATH', 'COUGH'):
        noise = rng.standard_normal(n)
        # crude lowpass for breath, raw noise with a fast decay for cough
        if name == 'BREATH':
            noise = np.convolve(noise, np.ones(8) / 8.0, mode='same')
        else:
            noise = noise * np.exp(-t / 0.04)
        segment = noise
    else:
        rate, ratio = (5.0, 1.5) if name == 'LAUGH' else (3.0, 1.2)
        segment = _harmonic_tone(spk, spk.f0_hz * ratio, n, sr) * \
            (0.55 + 0.45 * np.sin(2.0 * np.pi * rate * t))
    return _normalize(segment * _ramp(n, int(RAMP_S * sr)), 0.5 * SEGMENT_RMS)


def synth_utterance(spk: SyntheticSpeaker, text: str, emo: str = 'neutral', seed: int = 0,
                    lang: Optional[str] = None, sample_rate: int = defaults.SAMPLE_RATE) -> Waveform:
    """
    Render a transcript with a synthetic voice.

    Args:
        spk: Voice
        text: Transcript; whitespace is skipped, markers become bursts
        emo: Emotion tag (pitch level, contour and energy)
        seed: Seeds the noise floor and the bursts
        lang: Overrides the speaker's language (a dialect speaker's Mandarin
            parallel passes 'zh')
        sample_rate: Output rate

    Returns:
        Waveform lasting n * 0.08 s + (n - 1) * 0.05 s for n plain characters
    """
    if emo not in EMOTION_STYLE:
        raise VocabError(f'unknown emotion tag {emo!r}; valid tags: {", ".join(EMO_TAGS)}')
    lang = lang or spk.lang
    pitch_scale, emo_slope, energy = EMOTION_STYLE[emo]
    dur_scale, dialect_slope = _dialect_style(lang)
    rng = np.random.default_rng(seed)

    # (kind, payload, laughing) units in time order
    units = []
    laughing = False
    for kind, chunk in split_markers(text):
        if kind == 'marker':
            if chunk == 'LAUGH_SPAN_BEGIN':
                laughing = True
            elif chunk == 'LAUGH_SPAN_END':
                laughing = False
            else:
                units.append(('burst', chunk, False))
        else:
            units.extend(('char', ch, laughing) for ch in chunk if not ch.isspace())
    if not units:
        raise EmptyInputError('nothing to synthesize: text has no characters or markers')

    char_n = int(round(CHAR_S * dur_scale * sample_rate))
    gap = np.zeros(int(round(GAP_S * sample_rate)))
    ramp = int(RAMP_S * sample_rate)
    pieces = []
    for i, (kind, payload, laughing) in enumerate(units):
        if i:
            pieces.append(gap)
        if kind == 'burst':
            pieces.append(_burst(payload, spk, rng, sample_rate))
            continue
        progress = i / max(len(units) - 1, 1) - 0.5
        f0 = spk.f0_hz * pitch_scale * _character_ratio(payload) * \
            (1.0 + (emo_slope + dialect_slope) * progress)
        tone = _harmonic_tone(spk, f0, char_n, sample_rate)
        if laughing:
            tone = tone * (0.55 + 0.45 * np.sin(2.0 * np.pi * 5.0 * np.arange(char_n) / sample_rate))
        pieces.append(_normalize(tone * _ramp(char_n, ramp), SEGMENT_RMS * energy))

    samples = np.concatenate(pieces)
    samples = samples + NOISE_FLOOR * rng.standard_normal(samples.size)
    return Waveform(samples, sample_rate)


def hard_cut(w: Waveform, edge_ms: float = defaults.TRUNCATION_EDGE_MS) -> Waveform:
    """
    Cut the recording right after its loudest edge-length window in the
    second half, so it ends mid-tone.
    """
    edge = int(round(w.sample_rate * edge_ms / 1000.0))
    hop = int(round(w.sample_rate * 0.01))
    starts = np.arange(w.samples.size // 2, w.samples.size - edge + 1, hop)
    if starts.size == 0:
        return w
    energy = np.array([np.mean(w.samples[s:s + edge] ** 2) for s in starts])
    end = int(starts[int(np.argmax(energy))]) + edge
    return Waveform(w.samples[:end], w.sample_rate)


def truncation_set(n_items: int = 200, seed: int = 0,
                   sample_rate: int = defaults.SAMPLE_RATE) -> List[Tuple[Waveform, bool]]:
    """
    Labelled clips for measuring the truncation detector.

    Each clip is a harmonic tone (150-300 Hz, syllable-rate amplitude
    modulation) with 50-120 ms ramps, padded with 50-200 ms of noise floor.
    Odd items go through hard_cut and are labelled True.

    Returns:
        (waveform, is_cut) pairs
    """
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        n = int(rng.uniform(1.0, 2.0) * sample_rate)
        t = np.arange(n) / sample_rate
        f0 = rng.uniform(150.0, 300.0)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
        tone = sum(np.sin(2.0 * np.pi * f0 * h * t + phases[h - 1]) / h for h in range(1, 5))
        depth = rng.uniform(0.0, 0.2)
        rate = rng.uniform(4.0, 6.0)
        swing = 0.5 + 0.5 * np.sin(2.0 * np.pi * rate * t + rng.uniform(0.0, 2.0 * np.pi))
        tone = tone * (1.0 - depth * swing)
        tone = _normalize(tone * _ramp(n, int(rng.uniform(0.05, 0.12) * sample_rate)), SEGMENT_RMS)
        pads = [np.zeros(int(rng.uniform(0.05, 0.2) * sample_rate)) for _ in range(2)]
        samples = np.concatenate([pads[0], tone, pads[1]])
        samples = samples + NOISE_FLOOR * rng.standard_normal(samples.size)
        w = Waveform(samples, sample_rate)
        cut = i % 2 == 1
        items.append((hard_cut(w) if cut else w, cut))
    return items


def _phrases(lang: str) -> List[str]:
    return PHRASES.get(lang, DIALECT_PHRASES)


def make_corpus(out_dir: Union[str, Path], n_speakers: int = defaults.CORPUS_SPEAKERS,
                utts_per_speaker: int = defaults.CORPUS_UTTS,
                langs: Sequence[str] = tuple(defaults.CORPUS_LANGS), seed: int = defaults.SEED,
                truncated: int = defaults.CORPUS_TRUNCATED,
                mandarin_parallel: int = defaults.CORPUS_MANDARIN_PARALLEL,
                progress: bool = False) -> List[SampleRecord]:
    """
    Write WAVs under ``out_dir/wavs`` and ``out_dir/manifest.jsonl``.

    Dialect speakers also get ``mandarin_parallel`` Mandarin renderings of
    their first transcripts. The first ``truncated`` records are hard-cut at
    the end.

    Returns:
        The records in manifest order
    """
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ContractError('n_speakers and utts_per_speaker must be >= 1')
    out_dir = Path(out_dir)
    speakers = make_speakers(n_speakers, list(langs), seed)
    rng = np.random.default_rng(seed)

    plan = []
    for spk in speakers:
        phrases = _phrases(spk.lang)
        texts = [phrases[int(k)] for k in rng.integers(0, len(phrases), size=utts_per_speaker)]
        emos = [EMO_TAGS[int(k)] for k in rng.integers(0, 4, size=utts_per_speaker)]
        for k, (text, emo) in enumerate(zip(texts, emos)):
            plan.append((f'{spk.speaker_id}_{k:03d}', spk, text, emo, spk.lang))
        if spk.lang in DIALECTS:
            for k, text in enumerate(texts[:mandarin_parallel]):
                plan.append((f'{spk.speaker_id}_zh{k:03d}', spk, text, 'neutral', 'zh'))

    if truncated > len(plan):
        raise ContractError(f'cannot truncate {truncated} of {len(plan)} records')

    records = []
    for index, (record_id, spk, text, emo, lang) in enumerate(
            tqdm(plan, desc='Synthesizing', unit='utt', disable=not progress)):
        w = synth_utterance(spk, text, emo, seed=stable_seed(seed, record_id), lang=lang)
        if index < truncated:
            w = hard_cut(w)
        rel = f'wavs/{record_id}.wav'
        write_wav(out_dir / rel, w)
        records.append(make_record(record_id, rel, text, spk.speaker_id, lang,
                                   round(w.duration_s, 6), emo=emo))

    write_manifest(out_dir / MANIFEST_NAME, records)
    logger.info('Wrote %d utterances for %d speakers to %s', len(records), n_speakers, out_dir)
    return records


# ---------------------------------------------------------------------------
# Pair samplers
# ---------------------------------------------------------------------------

def _by_speaker(records: Sequence[SampleRecord]) -> Dict[str, List[SampleRecord]]:
    groups: Dict[str, List[SampleRecord]] = defaultdict(list)
    for record in records:
        groups[record['speaker_id']].append(record)
    return dict(groups)


def cross_sample_pairs(records: Sequence[SampleRecord], rng: np.random.Generator
                       ) -> Iterator[PairedExample]:
    """
    Endless stream of (target, reference) pairs for AR training.

    Targets are visited in a fresh random order each pass; the reference is a
    uniformly drawn different utterance of the target's speaker.

    Raises:
        ConfigurationError: a speaker has a single utterance
    """
    groups = _by_speaker(records)
    if not groups:
        raise ConfigurationError('cannot pair an empty manifest')
    for speaker, members in sorted(groups.items()):
        if len(members) < 2:
            raise ConfigurationError(
                f'speaker {speaker} has a single utterance; cross-sample pairing needs two')
    return _cross_stream(list(records), groups, rng)


def _cross_stream(records, groups, rng) -> Iterator[PairedExample]:
    while True:
        for index in rng.permutation(len(records)):
            target = records[int(index)]
            others = [r for r in groups[target['speaker_id']] if r['id'] != target['id']]
            yield PairedExample(target, others[int(rng.integers(len(others)))])


def _dialect_groups(records: Sequence[SampleRecord]):
    """speaker -> (mandarin records, dialect records) for speakers with dialect data."""
    groups = {}
    for speaker, members in sorted(_by_speaker(records).items()):
        dialect = [r for r in members if r['lang'] in DIALECTS]
        if dialect:
            groups[speaker] = ([r for r in members if r['lang'] == 'zh'], dialect)
    return groups


def mixed_prompt_pairs(records: Sequence[SampleRecord], rng: np.random.Generator
                       ) -> Iterator[PairedExample]:
    """
    Endless stream for dialect fine-tuning.

    The target is always a dialect utterance; the reference is a Mandarin or a
    (different) dialect utterance of the same speaker with equal probability.
    A speaker with a single dialect utterance always gets a Mandarin reference.

    Raises:
        ConfigurationError: no dialect data, or a dialect speaker without a
            Mandarin parallel utterance
    """
    groups = _dialect_groups(records)
    if not groups:
        raise ConfigurationError('mixed-prompt pairing needs dialect utterances')
    for speaker, (mandarin, dialect) in groups.items():
        if not mandarin:
            raise ConfigurationError(f'dialect speaker {speaker} has no Mandarin parallel utterance')
        if len(dialect) < 2:
            logger.warning('Dialect speaker %s has one dialect utterance; its references are all Mandarin',
                           speaker)
    targets = [r for _, dialect in groups.values() for r in dialect]
    return _mixed_stream(targets, groups, rng)


def _mixed_stream(targets, groups, rng) -> Iterator[PairedExample]:
    while True:
        for index in rng.permutation(len(targets)):
            target = targets[int(index)]
            mandarin, dialect = groups[target['speaker_id']]
            pool = [r for r in dialect if r['id'] != target['id']]
            if rng.random() < 0.5 or not pool:
                pool = mandarin
            yield PairedExample(target, pool[int(rng.integers(len(pool)))])


SCENARIOS = ('same_dialect', 'mandarin_to_dialect', 'cross_dialect')


def dialect_scenario_pairs(records: Sequence[SampleRecord], scenario: str,
                           rng: np.random.Generator) -> List[PairedExample]:
    """
    One evaluation pair per dialect utterance.

    same_dialect: reference is another dialect utterance of the same speaker.
    mandarin_to_dialect: reference is the speaker's Mandarin utterance.
    cross_dialect: reference is an utterance in a different dialect (another
    speaker when the corpus has no multi-dialect speaker).
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f'unknown scenario {scenario!r}; valid: {", ".join(SCENARIOS)}')
    groups = _dialect_groups(records)
    pairs = []
    for speaker, (mandarin, dialect) in groups.items():
        for target in dialect:
            if scenario == 'same_dialect':
                pool = [r for r in dialect if r['id'] != target['id'] and r['lang'] == target['lang']]
            elif scenario == 'mandarin_to_dialect':
                pool = mandarin
            else:
                pool = [r for r in records if r['lang'] in DIALECTS and r['lang'] != target['lang']]
            if not pool:
                logger.warning('No %s reference for %s, skipping', scenario, target['id'])
                continue
            pairs.append(PairedExample(target, pool[int(rng.integers(len(pool)))]))
    return pairs
