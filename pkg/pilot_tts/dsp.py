"""
Waveform-level signal processing.

Mel features for the models plus the measurable quality scorers behind the
curation pipeline (VAD, SNR, spectral rolloff, truncation) and a Griffin-Lim
inverse for audible smoke output.
"""
import logging
from dataclasses import dataclass
from math import gcd
from typing import Dict, List, Tuple

import numpy as np
from scipy import signal as sps

from pilot_tts import settings as defaults
from pilot_tts.exceptions import (
    ContractError,
    EmptyInputError,
    NotEstimableError,
    RangeError,
    UndefinedRolloffError,
)

logger = logging.getLogger(__name__)

# Below this the non-speech power is treated as digital silence
NOISE_POWER_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono samples in [-1, 1] at ``sample_rate`` Hz."""
    samples: np.ndarray
    sample_rate: int = defaults.SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractError(f'sample_rate must be positive, got {self.sample_rate}')
        if self.samples.size == 0:
            raise EmptyInputError('waveform has no samples')

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = defaults.SAMPLE_RATE
    n_fft: int = defaults.MEL_N_FFT
    hop: int = defaults.MEL_HOP
    win: int = defaults.MEL_WIN
    n_mels: int = defaults.MEL_N_MELS
    fmin: float = defaults.MEL_FMIN
    fmax: float = defaults.MEL_FMAX
    log_floor: float = defaults.MEL_LOG_FLOOR
    norm_mean: float = defaults.MEL_NORM_MEAN
    norm_std: float = defaults.MEL_NORM_STD

    @property
    def mel_fps(self) -> float:
        return self.sample_rate / self.hop

    @classmethod
    def from_settings(cls, settings) -> 'MelConfig':
        return cls(
            sample_rate=settings.getint('SAMPLE_RATE'),
            n_fft=settings.getint('MEL_N_FFT'),
            hop=settings.getint('MEL_HOP'),
            win=settings.getint('MEL_WIN'),
            n_mels=settings.getint('MEL_N_MELS'),
            fmin=settings.getfloat('MEL_FMIN'),
            fmax=settings.getfloat('MEL_FMAX'),
            log_floor=settings.getfloat('MEL_LOG_FLOOR'),
            norm_mean=settings.getfloat('MEL_NORM_MEAN'),
            norm_std=settings.getfloat('MEL_NORM_STD'),
        )


DEFAULT_MEL = MelConfig()


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def frame_count(length: int, win: int, hop: int) -> int:
    """Frames of an uncentred STFT: floor((length - win) / hop) + 1."""
    if length < win:
        return 0
    return (length - win) // hop + 1


def _window(win: int) -> np.ndarray:
    return sps.get_window('hann', win, fftbins=True)


def stft(samples: np.ndarray, n_fft: int, hop: int, win: int) -> np.ndarray:
    """
    Uncentred short-time Fourier transform.

    Each frame is ``win`` samples under a Hann window, zero-padded to n_fft.

    Returns:
        Complex array, frames x (n_fft // 2 + 1)
    """
    samples = np.asarray(samples, dtype=np.float64)
    frames = frame_count(samples.size, win, hop)
    if frames == 0:
        raise EmptyInputError(f'{samples.size} samples is shorter than one {win}-sample window')
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    return np.fft.rfft(samples[idx] * _window(win)[None, :], n=n_fft, axis=1)


def istft(spec: np.ndarray, hop: int, win: int, n_fft: int) -> np.ndarray:
    """Windowed overlap-add inverse of stft()."""
    frames = spec.shape[0]
    window = _window(win)
    length = (frames - 1) * hop + win
    out = np.zeros(length)
    norm = np.zeros(length)
    chunks = np.fft.irfft(spec, n=n_fft, axis=1)[:, :win]
    for i in range(frames):
        start = i * hop
        out[start:start + win] += chunks[i] * window
        norm[start:start + win] += window * window
    return out / np.maximum(norm, 0.1 * norm.max())


# ---------------------------------------------------------------------------
# Mel features
# ---------------------------------------------------------------------------

def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """(lower, center, upper) Hz per band, shape n_mels x 3, HTK spacing."""
    points = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return np.stack([points[:-2], points[1:-1], points[2:]], axis=1)


def mel_filterbank(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Triangular filters with unit peak, shape n_mels x (n_fft // 2 + 1)."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    edges = mel_band_edges(cfg)
    lower, center, upper = edges[:, 0:1], edges[:, 1:2], edges[:, 2:3]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(w: Waveform, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """
    Log-mel energies of a waveform.

    Args:
        w: Input waveform (at cfg.sample_rate)
        cfg: STFT / filterbank settings

    Returns:
        frames x n_mels array of natural-log energies, floored at log(cfg.log_floor)
    """
    if w.samples.size < cfg.win:
        raise EmptyInputError(
            f'{w.samples.size} samples is shorter than one {cfg.win}-sample window')
    magnitude = np.abs(stft(w.samples, cfg.n_fft, cfg.hop, cfg.win))
    energies = magnitude @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def normalize_mel(mel: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Log-mel to normalized log-mel units."""
    return (mel - cfg.norm_mean) / cfg.norm_std


def denormalize_mel(mel: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    return mel * cfg.norm_std + cfg.norm_mean


# ---------------------------------------------------------------------------
# Frame energies
# ---------------------------------------------------------------------------

def _frame_rms(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    count = frame_count(samples.size, frame, hop)
    if count == 0:
        return np.sqrt(np.array([np.mean(samples * samples)]))
    idx = np.arange(frame)[None, :] + hop * np.arange(count)[:, None]
    chunk = samples[idx]
    return np.sqrt(np.mean(chunk * chunk, axis=1))


def _frame_length(w: Waveform, frame_ms: float) -> int:
    if frame_ms <= 0:
        raise ContractError(f'frame_ms must be positive, got {frame_ms}')
    return max(1, int(round(w.sample_rate * frame_ms / 1000.0)))


def energy_vad(w: Waveform, frame_ms: float = defaults.VAD_FRAME_MS,
               thresh_db: float = defaults.VAD_THRESH_DB,
               merge_gap_s: float = defaults.VAD_MERGE_GAP_S) -> List[Tuple[float, float]]:
    """
    Energy-based speech activity detection.

    Frames (non-overlapping, ``frame_ms`` long) whose RMS is within
    ``thresh_db`` of the loudest frame are active. Runs of active frames become
    intervals; intervals separated by less than ``merge_gap_s`` are merged.

    Returns:
        [(start_s, end_s), ...] in time order; [] for silence
    """
    frame = _frame_length(w, frame_ms)
    rms = _frame_rms(w.samples, frame, frame)
    peak = rms.max()
    if peak <= 0:
        return []
    with np.errstate(divide='ignore'):
        level_db = 20.0 * np.log10(rms / peak)
    active = level_db > -thresh_db

    intervals: List[List[float]] = []
    start = None
    for i, flag in enumerate(np.append(active, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            t0, t1 = start * frame / w.sample_rate, i * frame / w.sample_rate
            if intervals and t0 - intervals[-1][1] < merge_gap_s:
                intervals[-1][1] = t1
            else:
                intervals.append([t0, t1])
            start = None
    return [(a, b) for a, b in intervals]


def estimate_snr(w: Waveform, frame_ms: float = defaults.VAD_FRAME_MS) -> float:
    """
    Signal-to-noise ratio in dB from an energy partition of the frames.

    Frames louder than the midpoint (in dB) between the 10th-percentile frame
    and the loudest frame count as speech. The non-speech power estimates the
    noise and is subtracted from the speech-frame power:
    10 * log10((P_speech - P_noise) / P_noise).

    Raises:
        NotEstimableError: silence, or no usable speech / non-speech split
    """
    frame = _frame_length(w, frame_ms)
    power = _frame_rms(w.samples, frame, frame) ** 2
    if power.size < 2 or power.max() <= 0:
        raise NotEstimableError('no energy to partition into speech and non-speech')
    level = 10.0 * np.log10(np.maximum(power, 1e-30))
    low, high = np.percentile(level, 10), level.max()
    if high - low < 1.0:
        raise NotEstimableError('frame energies are flat (all speech or all noise)')
    speech = level > (low + high) / 2.0
    if speech.all() or not speech.any():
        raise NotEstimableError('no non-speech frames to estimate noise from')
    p_noise = max(float(power[~speech].mean()), NOISE_POWER_FLOOR)
    p_speech = float(power[speech].mean())
    return float(10.0 * np.log10(max(p_speech - p_noise, NOISE_POWER_FLOOR) / p_noise))


def spectral_rolloff(w: Waveform, fraction: float = 0.85, n_fft: int = defaults.MEL_N_FFT) -> float:
    """
    Frequency (Hz) below which ``fraction`` of the mean power spectrum lies.

    The power spectrum is averaged over Hann-windowed frames of n_fft samples
    (hop n_fft / 4); the result is the centre of the first bin whose
    cumulative energy reaches the fraction.
    """
    if not 0.0 < fraction < 1.0:
        raise RangeError(f'fraction must lie in (0, 1), got {fraction}')
    samples = w.samples
    if samples.size < n_fft:
        samples = np.pad(samples, (0, n_fft - samples.size))
    power = np.mean(np.abs(stft(samples, n_fft, n_fft // 4, n_fft)) ** 2, axis=0)
    total = power.sum()
    if not total > 0:
        raise UndefinedRolloffError('spectral rolloff is undefined for a silent signal')
    cumulative = np.cumsum(power)
    index = int(np.searchsorted(cumulative, fraction * total, side='left'))
    return float(min(index, power.size - 1) * w.sample_rate / n_fft)


def detect_truncation(w: Waveform, edge_ms: float = defaults.TRUNCATION_EDGE_MS,
                      thresh: float = defaults.TRUNCATION_THRESH) -> Dict[str, bool]:
    """
    Flag recordings that start or end mid-energy.

    The RMS of the first and last ``edge_ms`` is compared with the loudest
    ``edge_ms`` frame (10 ms hop); above ``thresh`` times that peak the edge
    counts as cut.

    Returns:
        {'onset_truncated': bool, 'offset_truncated': bool}
    """
    edge = _frame_length(w, edge_ms)
    hop = max(1, int(round(w.sample_rate * 0.01)))
    peak = _frame_rms(w.samples, edge, hop).max()
    if peak <= 0:
        return {'onset_truncated': False, 'offset_truncated': False}
    head = w.samples[:edge]
    tail = w.samples[-edge:]
    head_rms = float(np.sqrt(np.mean(head * head)))
    tail_rms = float(np.sqrt(np.mean(tail * tail)))
    return {
        'onset_truncated': head_rms > thresh * peak,
        'offset_truncated': tail_rms > thresh * peak,
    }


# ---------------------------------------------------------------------------
# Inversion and resampling
# ---------------------------------------------------------------------------

def griffin_lim(mel: np.ndarray, iters: int = defaults.GRIFFIN_LIM_ITERS,
                cfg: MelConfig = DEFAULT_MEL, seed: int = 0, normalize: bool = True) -> Waveform:
    """
    Waveform from a log-mel spectrogram.

    The mel energies are mapped back to linear magnitudes with the filterbank
    pseudo-inverse (clipped at zero), then the phase is refined by ``iters``
    rounds of STFT projection starting from seeded random phase.

    Args:
        mel: frames x n_mels natural-log energies
        iters: Phase-refinement rounds, at least 1
        cfg: Must match the config the mel was computed with
        seed: Initial phase seed
        normalize: Scale the output peak to 0.9

    Returns:
        Waveform of (frames - 1) * hop + win samples
    """
    if iters < 1:
        raise ContractError(f'iters must be >= 1, got {iters}')
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != cfg.n_mels or mel.shape[0] == 0:
        raise EmptyInputError(f'expected frames x {cfg.n_mels} mel, got {mel.shape}')
    inverse = np.linalg.pinv(mel_filterbank(cfg))
    magnitude = np.maximum(np.exp(mel) @ inverse.T, 0.0)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    samples = istft(magnitude * phase, cfg.hop, cfg.win, cfg.n_fft)
    for _ in range(iters - 1):
        rebuilt = stft(samples, cfg.n_fft, cfg.hop, cfg.win)
        phase = np.exp(1j * np.angle(rebuilt))
        samples = istft(magnitude * phase, cfg.hop, cfg.win, cfg.n_fft)
    if normalize:
        peak = np.abs(samples).max()
        if peak > 0:
            samples = samples * (0.9 / peak)
    return Waveform(samples, cfg.sample_rate)


def spectral_mae(w: Waveform, magnitude: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> float:
    """Mean absolute difference between |STFT(w)| and a target magnitude."""
    rebuilt = np.abs(stft(w.samples, cfg.n_fft, cfg.hop, cfg.win))
    frames = min(rebuilt.shape[0], magnitude.shape[0])
    return float(np.mean(np.abs(rebuilt[:frames] - magnitude[:frames])))


def resample(samples: np.ndarray, source_rate: int, target_rate: int) -> np.ndarray:
    """Windowed-sinc (polyphase) resampling."""
    if source_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    factor = gcd(int(source_rate), int(target_rate))
    return sps.resample_poly(np.asarray(samples, dtype=np.float64),
                             int(target_rate) // factor, int(source_rate) // factor)
