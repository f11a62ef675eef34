"""
Quality scorers for curation.

Each scorer looks at one record (and its decoded audio) and returns a tag
patch, e.g. {'snr_db': 23.1}. The DSP scorers measure real quantities; the
model-backed ones (perceptual MOS, speech/non-speech, overlap, synthetic
speech, speaker consistency) are plugin seams with deterministic stubs.

QualityAnalyzer runs the configured set. Each scorer sits behind its name in
CURATION_SCORERS; a failing scorer is logged and its tag stays absent.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Union

import numpy as np

from pilot_tts import dsp
from pilot_tts import settings as defaults
from pilot_tts.dsp import Waveform
from pilot_tts.exceptions import ConfigurationError, PilotTTSError
from pilot_tts.items import SampleRecord, get_tags

logger = logging.getLogger(__name__)

TagPatch = Dict[str, object]


def stub_pseudo_mos(snr_db: float) -> float:
    """Fixed monotone SNR -> MOS curve: clip(1 + snr_db / 10, 1, 5)."""
    return float(np.clip(1.0 + snr_db / 10.0, 1.0, 5.0))


class Scorer:
    """
    Base scorer. Subclasses set ``name`` and implement ``score``.
    """
    name = ''
    tags = ()

    def score(self, record: SampleRecord, audio: Waveform) -> TagPatch:
        raise NotImplementedError


class SNRScorer(Scorer):
    name = 'snr'
    tags = ('snr_db',)

    def __init__(self, frame_ms: float = defaults.VAD_FRAME_MS):
        self.frame_ms = frame_ms

    def score(self, record, audio):
        return {'snr_db': round(dsp.estimate_snr(audio, self.frame_ms), 4)}


class RolloffScorer(Scorer):
    name = 'rolloff'
    tags = ('rolloff_hz',)

    def __init__(self, fraction: float = defaults.ROLLOFF_FRACTION):
        self.fraction = fraction

    def score(self, record, audio):
        return {'rolloff_hz': round(dsp.spectral_rolloff(audio, self.fraction), 4)}


class TruncationScorer(Scorer):
    name = 'truncation'
    tags = ('truncated',)

    def __init__(self, edge_ms: float = defaults.TRUNCATION_EDGE_MS,
                 thresh: float = defaults.TRUNCATION_THRESH):
        self.edge_ms = edge_ms
        self.thresh = thresh

    def score(self, record, audio):
        flags = dsp.detect_truncation(audio, self.edge_ms, self.thresh)
        return {'truncated': bool(flags['onset_truncated'] or flags['offset_truncated'])}


class PseudoMOSScorer(Scorer):
    """Stand-in for a perceptual MOS predictor, driven by the SNR of this audio."""
    name = 'pseudo_mos'
    tags = ('pseudo_mos',)

    def __init__(self, frame_ms: float = defaults.VAD_FRAME_MS):
        self.frame_ms = frame_ms

    def score(self, record, audio):
        snr = dsp.estimate_snr(audio, self.frame_ms)
        return {'pseudo_mos': round(stub_pseudo_mos(snr), 4)}


class SpeechScorer(Scorer):
    """Stand-in for a speech/non-speech classifier: any VAD interval counts."""
    name = 'is_speech'
    tags = ('is_speech',)

    def __init__(self, frame_ms: float = defaults.VAD_FRAME_MS,
                 thresh_db: float = defaults.VAD_THRESH_DB):
        self.frame_ms = frame_ms
        self.thresh_db = thresh_db

    def score(self, record, audio):
        return {'is_speech': bool(dsp.energy_vad(audio, self.frame_ms, self.thresh_db))}


class ConstantScorer(Scorer):
    """Stub for a model-backed detector that always reports the same value."""

    def __init__(self, name: str, tag: str, value: bool):
        self.name = name
        self.tags = (tag,)
        self.value = value

    def score(self, record, audio):
        return {self.tags[0]: self.value}


class PluginScorer(Scorer):
    """
    Wraps an external detector: ``fn(record, audio) -> tag patch``.

    Only keys listed in ``tags`` are accepted from the patch.
    """

    def __init__(self, name: str, tags: Iterable[str],
                 fn: Callable[[SampleRecord, Waveform], TagPatch]):
        self.name = name
        self.tags = tuple(tags)
        self.fn = fn

    def score(self, record, audio):
        patch = self.fn(record, audio) or {}
        stray = set(patch) - set(self.tags)
        if stray:
            raise PilotTTSError(f'plugin {self.name!r} returned undeclared tags {sorted(stray)}')
        return patch


# Built-in scorers, in the order they run
SCORER_ORDER = ('snr', 'rolloff', 'truncation', 'pseudo_mos', 'is_speech', 'overlap',
                'synthetic', 'speaker_consistent')


def build_scorer(name: str, settings=None) -> Scorer:
    """
    Instantiate a built-in scorer by name.

    Args:
        name: One of SCORER_ORDER
        settings: Optional scrapy Settings for scorer parameters

    Returns:
        Scorer instance
    """
    get = (lambda key, default: settings.getfloat(key, default)) if settings is not None else (
        lambda key, default: default)
    if name == 'snr':
        return SNRScorer(get('VAD_FRAME_MS', defaults.VAD_FRAME_MS))
    if name == 'rolloff':
        return RolloffScorer(get('ROLLOFF_FRACTION', defaults.ROLLOFF_FRACTION))
    if name == 'truncation':
        return TruncationScorer(get('TRUNCATION_EDGE_MS', defaults.TRUNCATION_EDGE_MS),
                                get('TRUNCATION_THRESH', defaults.TRUNCATION_THRESH))
    if name == 'pseudo_mos':
        return PseudoMOSScorer(get('VAD_FRAME_MS', defaults.VAD_FRAME_MS))
    if name == 'is_speech':
        return SpeechScorer(get('VAD_FRAME_MS', defaults.VAD_FRAME_MS),
                            get('VAD_THRESH_DB', defaults.VAD_THRESH_DB))
    if name == 'overlap':
        return ConstantScorer('overlap', 'overlap', False)
    if name == 'synthetic':
        return ConstantScorer('synthetic', 'synthetic', False)
    if name == 'speaker_consistent':
        return ConstantScorer('speaker_consistent', 'speaker_consistent', True)
    raise ConfigurationError(
        f'unknown scorer {name!r}; valid scorers: {", ".join(SCORER_ORDER)}')


def build_scorers(names: Iterable[Union[str, Scorer]], settings=None) -> List[Scorer]:
    """Scorers for ``names`` (strings or ready Scorer objects), built-ins in SCORER_ORDER."""
    scorers = [n if isinstance(n, Scorer) else build_scorer(n, settings) for n in names]
    rank = {name: i for i, name in enumerate(SCORER_ORDER)}
    return sorted(scorers, key=lambda s: rank.get(s.name, len(rank)))


class QualityAnalyzer:
    """
    Runs a scorer set over one record.
    """

    def __init__(self, scorers: Iterable[Union[str, Scorer]] = (), settings=None):
        self.scorers = build_scorers(scorers, settings)

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.scorers]

    def analyze(self, record: SampleRecord, audio: Optional[Waveform]) -> TagPatch:
        """
        Score one record. Tags owned by the selected scorers are cleared first,
        so a scorer that fails leaves its tag absent rather than stale.

        Returns:
            The combined patch of every scorer that succeeded
        """
        combined: TagPatch = {}
        tags = get_tags(record)
        for scorer in self.scorers:
            for key in scorer.tags:
                tags.pop(key, None)
        for scorer in self.scorers:
            try:
                patch = scorer.score(record, audio)
            except Exception as e:
                logger.warning('Scorer %s failed for %s: %s', scorer.name, record.get('id'), e)
                continue
            for key, value in patch.items():
                tags[key] = value
            combined.update(patch)
        return combined
