"""
Scrapy Items for manifest rows and their quality tags.

A field that was never assigned is absent (``'snr_db' not in tags``); absent
tags mean the scorer did not run and are never filled with defaults.
"""
from typing import Dict, Optional

import scrapy

from pilot_tts.exceptions import ManifestError


class QualityTags(scrapy.Item):
    """
    Item to store the curation scorers' output for one utterance.
    """
    pseudo_mos = scrapy.Field()  # type: float
    is_speech = scrapy.Field()  # type: bool
    snr_db = scrapy.Field()  # type: float
    rolloff_hz = scrapy.Field()  # type: float
    truncated = scrapy.Field()  # type: bool
    overlap = scrapy.Field()  # type: bool
    synthetic = scrapy.Field()  # type: bool
    speaker_consistent = scrapy.Field()  # type: bool

    # Set instead of the scores when the audio could not be read
    read_error = scrapy.Field()  # type: str


class SampleRecord(scrapy.Item):
    """
    Item to store one utterance of a manifest (curation input and training row).
    """
    id = scrapy.Field()  # type: str
    audio_path = scrapy.Field()  # type: str  # relative to the manifest directory
    text = scrapy.Field()  # type: str
    speaker_id = scrapy.Field()  # type: str
    lang = scrapy.Field()  # type: str
    emo = scrapy.Field()  # type: Optional[str]
    duration_s = scrapy.Field()  # type: float
    tags = scrapy.Field()  # type: QualityTags
    kept = scrapy.Field()  # type: Optional[bool]


# Manifest key order
RECORD_FIELDS = ('id', 'audio_path', 'text', 'speaker_id', 'lang', 'emo',
                 'duration_s', 'tags', 'kept')
TAG_FIELDS = ('pseudo_mos', 'is_speech', 'snr_db', 'rolloff_hz', 'truncated',
              'overlap', 'synthetic', 'speaker_consistent', 'read_error')
REQUIRED_FIELDS = ('id', 'audio_path', 'text', 'speaker_id', 'lang', 'duration_s')


def make_record(record_id: str, audio_path: str, text: str, speaker_id: str, lang: str,
                duration_s: float, emo: Optional[str] = None) -> SampleRecord:
    record = SampleRecord(id=record_id, audio_path=audio_path, text=text, speaker_id=speaker_id,
                          lang=lang, duration_s=float(duration_s), tags=QualityTags())
    if emo is not None:
        record['emo'] = emo
    return record


def get_tags(record: SampleRecord) -> QualityTags:
    """The record's tags, creating an empty QualityTags when missing."""
    tags = record.get('tags')
    if tags is None:
        tags = QualityTags()
        record['tags'] = tags
    return tags


def record_to_dict(record: SampleRecord) -> Dict:
    """Plain dict in manifest key order, absent fields omitted."""
    row = {}
    for key in RECORD_FIELDS:
        if key not in record:
            continue
        if key == 'tags':
            tags = record['tags']
            row['tags'] = {k: tags[k] for k in TAG_FIELDS if k in tags}
        else:
            row[key] = record[key]
    return row


def record_from_dict(row: Dict, line_number: int = 0) -> SampleRecord:
    """
    Build a SampleRecord from a parsed manifest row.

    Args:
        row: Decoded JSON object
        line_number: Used in error messages

    Returns:
        SampleRecord with a QualityTags item (possibly empty)
    """
    if not isinstance(row, dict):
        raise ManifestError('expected a JSON object', line_number)
    missing = [k for k in REQUIRED_FIELDS if k not in row]
    if missing:
        raise ManifestError(f'missing field(s): {", ".join(missing)}', line_number)
    unknown = sorted(set(row) - set(RECORD_FIELDS))
    if unknown:
        raise ManifestError(f'unknown field(s): {", ".join(unknown)}', line_number)

    try:
        duration = float(row['duration_s'])
    except (TypeError, ValueError):
        raise ManifestError('duration_s is not a number', line_number)
    if not duration > 0:
        raise ManifestError('duration_s must be positive', line_number)

    record = SampleRecord()
    for key in RECORD_FIELDS:
        if key in row and key != 'tags':
            record[key] = row[key]
    record['duration_s'] = duration

    tags = QualityTags()
    raw_tags = row.get('tags') or {}
    if not isinstance(raw_tags, dict):
        raise ManifestError('tags must be an object', line_number)
    for key, value in raw_tags.items():
        if key not in TAG_FIELDS:
            raise ManifestError(f'unknown tag: {key}', line_number)
        tags[key] = value
    record['tags'] = tags
    return record
