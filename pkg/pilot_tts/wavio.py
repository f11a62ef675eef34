"""
PCM16 WAV reading and writing.
"""
import logging
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

from pilot_tts import settings as defaults
from pilot_tts.dsp import Waveform, resample
from pilot_tts.exceptions import AudioReadError

logger = logging.getLogger(__name__)


def read_wav(path: Union[str, Path], target_rate: int = defaults.SAMPLE_RATE) -> Waveform:
    """
    Read a WAV file as mono float samples at ``target_rate``.

    Integer PCM is scaled to [-1, 1]; multichannel audio is averaged; other
    sample rates are resampled.

    Raises:
        AudioReadError: missing, unreadable or empty file
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError, EOFError) as e:
        raise AudioReadError(f'{path}: {e}') from e

    if data.dtype.kind == 'i':
        samples = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    elif data.dtype.kind == 'u':
        info = np.iinfo(data.dtype)
        samples = (data.astype(np.float64) - (info.max + 1) / 2.0) / ((info.max + 1) / 2.0)
    elif data.dtype.kind == 'f':
        samples = data.astype(np.float64)
    else:
        raise AudioReadError(f'{path}: unsupported sample type {data.dtype}')

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise AudioReadError(f'{path}: no samples')
    if rate != target_rate:
        logger.info('Resampling %s from %d Hz to %d Hz', path, rate, target_rate)
        samples = resample(samples, rate, target_rate)
    return Waveform(samples, target_rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.round(clipped * 32767.0).astype('<i2')


def write_wav(path: Union[str, Path], w: Waveform) -> Path:
    """Write mono PCM16 (samples are clipped to [-1, 1])."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate), to_pcm16(w.samples))
    return path
