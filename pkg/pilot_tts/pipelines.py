"""
Curation pipelines: annotate -> filter -> store.

Each stage is a class with ``process_item``; run_pipeline wires them
together for a whole manifest. Filtering never drops a record, it only sets
``kept`` so excluded samples stay in the output together with their tags.
"""
import copy
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from tqdm import tqdm

from pilot_tts import settings as defaults
from pilot_tts.exceptions import ManifestError, RangeError
from pilot_tts.items import SampleRecord, get_tags, record_from_dict, record_to_dict
from pilot_tts.quality_analyzer import QualityAnalyzer, Scorer
from pilot_tts.wavio import read_wav

logger = logging.getLogger(__name__)

# The one threshold the curation recipe fixes: MOS <= 3.5 is deficient
MOS_THRESHOLD = 3.5

REASON_ORDER = ('read_failure', 'low_mos', 'non_speech', 'low_snr', 'low_bandwidth',
                'truncated', 'overlap', 'synthetic', 'speaker_inconsistent')
UNSCORED = 'unscored'


def _optional_float(settings, name: str) -> Optional[float]:
    value = settings.get(name)
    if value is None or (isinstance(value, str) and value.strip().lower() in ('', 'none', 'off')):
        return None
    return settings.getfloat(name)


@dataclass(frozen=True)
class FilterPolicy:
    """Joint filtering criteria; None / False disables a criterion."""
    min_pseudo_mos: Optional[float] = defaults.POLICY_MIN_PSEUDO_MOS
    min_snr_db: Optional[float] = defaults.POLICY_MIN_SNR_DB
    min_rolloff_hz: Optional[float] = defaults.POLICY_MIN_ROLLOFF_HZ
    require_speech: bool = defaults.POLICY_REQUIRE_SPEECH
    reject_truncated: bool = defaults.POLICY_REJECT_TRUNCATED
    reject_overlap: bool = defaults.POLICY_REJECT_OVERLAP
    reject_synthetic: bool = defaults.POLICY_REJECT_SYNTHETIC
    require_speaker_consistent: bool = defaults.POLICY_REQUIRE_SPEAKER_CONSISTENT

    def __post_init__(self):
        for name in ('min_pseudo_mos', 'min_snr_db', 'min_rolloff_hz'):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise RangeError(f'policy threshold {name} must be finite, got {value}')

    @classmethod
    def empty(cls) -> 'FilterPolicy':
        """Policy with every criterion disabled (keeps everything)."""
        return cls(min_pseudo_mos=None, min_snr_db=None, min_rolloff_hz=None,
                   require_speech=False, reject_truncated=False, reject_overlap=False,
                   reject_synthetic=False, require_speaker_consistent=False)

    @classmethod
    def from_settings(cls, settings) -> 'FilterPolicy':
        return cls(
            min_pseudo_mos=_optional_float(settings, 'POLICY_MIN_PSEUDO_MOS'),
            min_snr_db=_optional_float(settings, 'POLICY_MIN_SNR_DB'),
            min_rolloff_hz=_optional_float(settings, 'POLICY_MIN_ROLLOFF_HZ'),
            require_speech=settings.getbool('POLICY_REQUIRE_SPEECH'),
            reject_truncated=settings.getbool('POLICY_REJECT_TRUNCATED'),
            reject_overlap=settings.getbool('POLICY_REJECT_OVERLAP'),
            reject_synthetic=settings.getbool('POLICY_REJECT_SYNTHETIC'),
            require_speaker_consistent=settings.getbool('POLICY_REQUIRE_SPEAKER_CONSISTENT'),
        )

    @classmethod
    def only(cls, **criteria) -> 'FilterPolicy':
        """An empty policy with just the given criteria enabled."""
        return replace(cls.empty(), **criteria)

    def as_dict(self) -> Dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def rejection_reason(record: SampleRecord, policy: FilterPolicy) -> Optional[str]:
    """
    First failing criterion for a record, or None when it passes.

    Criteria are checked in REASON_ORDER. An enabled criterion whose tag is
    absent fails with 'unscored'.
    """
    tags = record.get('tags') or {}
    if 'read_error' in tags:
        return 'read_failure'

    checks = (
        ('low_mos', policy.min_pseudo_mos is not None, 'pseudo_mos',
         lambda v: v > policy.min_pseudo_mos),
        ('non_speech', policy.require_speech, 'is_speech', lambda v: bool(v)),
        ('low_snr', policy.min_snr_db is not None, 'snr_db',
         lambda v: v >= policy.min_snr_db),
        ('low_bandwidth', policy.min_rolloff_hz is not None, 'rolloff_hz',
         lambda v: v >= policy.min_rolloff_hz),
        ('truncated', policy.reject_truncated, 'truncated', lambda v: not v),
        ('overlap', policy.reject_overlap, 'overlap', lambda v: not v),
        ('synthetic', policy.reject_synthetic, 'synthetic', lambda v: not v),
        ('speaker_inconsistent', policy.require_speaker_consistent, 'speaker_consistent',
         lambda v: bool(v)),
    )
    for reason, enabled, tag, passes in checks:
        if not enabled:
            continue
        if tag not in tags or tags[tag] is None:
            return UNSCORED
        if not passes(tags[tag]):
            return reason
    return None


def quality_status(tags, policy: Optional[FilterPolicy] = None) -> str:
    """
    Stage-one status of a sample: 'deficient', 'clean' or 'unknown'.

    Deficient means MOS at or below 3.5, non-speech, or SNR under the policy
    floor. Clean needs all three measured and passing.
    """
    policy = policy or FilterPolicy()
    mos_floor = policy.min_pseudo_mos if policy.min_pseudo_mos is not None else MOS_THRESHOLD
    mos, speech, snr = tags.get('pseudo_mos'), tags.get('is_speech'), tags.get('snr_db')
    if mos is not None and mos <= mos_floor:
        return 'deficient'
    if speech is False:
        return 'deficient'
    if snr is not None and policy.min_snr_db is not None and snr < policy.min_snr_db:
        return 'deficient'
    if mos is None or speech is None or snr is None:
        return 'unknown'
    return 'clean'


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------

def read_manifest(path: Union[str, Path]) -> List[SampleRecord]:
    """
    Parse a JSON Lines manifest. Blank lines are skipped.

    Raises:
        ManifestError: with the 1-based line number of the first bad line
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise ManifestError(f'{path}: {e}')
    records: List[SampleRecord] = []
    seen = set()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f'invalid JSON ({e.msg})', number)
        record = record_from_dict(row, number)
        if record['id'] in seen:
            raise ManifestError(f'duplicate id {record["id"]!r}', number)
        seen.add(record['id'])
        records.append(record)
    return records


def manifest_line(record: SampleRecord) -> str:
    return json.dumps(record_to_dict(record), ensure_ascii=False)


def write_manifest(path: Union[str, Path], records: Iterable[SampleRecord]) -> Path:
    """Write records as JSON Lines (replaces the file atomically)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with tmp.open('w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(manifest_line(record) + '\n')
    os.replace(tmp, path)
    return path


def resolve_audio_path(record: SampleRecord, base_dir: Union[str, Path, None]) -> Path:
    audio = Path(record['audio_path'])
    if audio.is_absolute() or base_dir is None:
        return audio
    return Path(base_dir) / audio


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def annotate_sample(record: SampleRecord, scorers: Union[QualityAnalyzer, Iterable],
                    base_dir: Union[str, Path, None] = None) -> SampleRecord:
    """
    Run the scorer set on one record.

    Args:
        record: Input record (not modified)
        scorers: QualityAnalyzer or iterable of scorer names / Scorer objects
        base_dir: Directory that relative audio paths are resolved against

    Returns:
        Copy of the record with the scorers' tags filled in. Unreadable audio
        sets the read_error tag instead; the record is never dropped.
    """
    analyzer = scorers if isinstance(scorers, QualityAnalyzer) else QualityAnalyzer(scorers)
    annotated = copy.deepcopy(record)
    tags = get_tags(annotated)
    if not analyzer.scorers:
        return annotated
    try:
        audio = read_wav(resolve_audio_path(annotated, base_dir))
    except Exception as e:
        logger.warning('Could not read audio for %s: %s', annotated.get('id'), e)
        tags['read_error'] = str(e)
        return annotated
    tags.pop('read_error', None)
    analyzer.analyze(annotated, audio)
    return annotated


def filter_manifest(records: List[SampleRecord], policy: FilterPolicy) -> List[SampleRecord]:
    """Set ``kept`` on every record from its tags; nothing is removed."""
    for record in records:
        record['kept'] = rejection_reason(record, policy) is None
    return records


class AnnotationPipeline:
    """
    Pipeline stage that fills quality tags from the configured scorers.
    """

    def __init__(self, analyzer: QualityAnalyzer, base_dir: Union[str, Path, None] = None):
        self.analyzer = analyzer
        self.base_dir = base_dir

    def process_item(self, record: SampleRecord) -> SampleRecord:
        return annotate_sample(record, self.analyzer, self.base_dir)


class FilterPipeline:
    """
    Pipeline stage that sets ``kept`` and counts rejection reasons.
    """

    def __init__(self, policy: FilterPolicy):
        self.policy = policy
        self.total = 0
        self.kept = 0
        self.reasons: Counter = Counter()

    def process_item(self, record: SampleRecord) -> SampleRecord:
        reason = rejection_reason(record, self.policy)
        record['kept'] = reason is None
        self.total += 1
        if reason is None:
            self.kept += 1
        else:
            self.reasons[reason] += 1
        return record

    def summary(self) -> Dict:
        return {'total': self.total, 'kept': self.kept, 'reasons': dict(sorted(self.reasons.items()))}


class RelocationPipeline:
    """
    Pipeline stage that rewrites relative audio paths for a new manifest directory.
    """

    def __init__(self, source_dir: Path, target_dir: Path):
        self.source_dir = Path(source_dir).resolve()
        self.target_dir = Path(target_dir).resolve()

    def process_item(self, record: SampleRecord) -> SampleRecord:
        audio = Path(record['audio_path'])
        if not audio.is_absolute() and self.source_dir != self.target_dir:
            moved = os.path.relpath(self.source_dir / audio, self.target_dir)
            record['audio_path'] = Path(moved).as_posix()
        return record


def run_pipeline(in_manifest: Union[str, Path], out_manifest: Union[str, Path],
                 policy: FilterPolicy, scorers: Union[QualityAnalyzer, Iterable[Union[str, Scorer]]],
                 workers: int = defaults.CURATION_WORKERS, progress: bool = False) -> Dict:
    """
    Annotate, filter and write a full tagged manifest.

    Args:
        in_manifest: JSONL input
        out_manifest: JSONL output (every input record, with tags and kept)
        policy: Filter criteria
        scorers: Scorer set
        workers: Threads used for annotation
        progress: Show a tqdm bar

    Returns:
        {'total': int, 'kept': int, 'reasons': {reason: count}}
    """
    in_manifest, out_manifest = Path(in_manifest), Path(out_manifest)
    records = read_manifest(in_manifest)
    analyzer = scorers if isinstance(scorers, QualityAnalyzer) else QualityAnalyzer(scorers)
    annotation = AnnotationPipeline(analyzer, in_manifest.parent)
    filtering = FilterPipeline(policy)
    relocation = RelocationPipeline(in_manifest.parent, out_manifest.parent)

    bar = tqdm(total=len(records), desc='Annotating', unit='utt', disable=not progress)
    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            annotated = []
            for record in pool.map(annotation.process_item, records):
                annotated.append(record)
                bar.update(1)
    else:
        annotated = []
        for record in records:
            annotated.append(annotation.process_item(record))
            bar.update(1)
    bar.close()

    output = [relocation.process_item(filtering.process_item(r)) for r in annotated]
    write_manifest(out_manifest, output)
    summary = filtering.summary()
    logger.info('Curation kept %d of %d records', summary['kept'], summary['total'])
    return summary
