import numpy as np
import pytest
from scipy.io import wavfile

from pilot_tts import dsp
from pilot_tts.corpus import truncation_set
from pilot_tts.dsp import Waveform
from pilot_tts.exceptions import (AudioReadError, ContractError, EmptyInputError, NotEstimableError,
                                  RangeError, UndefinedRolloffError)
from pilot_tts.wavio import read_wav, write_wav

from conftest import SR, fade, tone


def test_waveform_rejects_empty():
    with pytest.raises(EmptyInputError):
        Waveform(np.array([]))


# mel

def test_one_second_gives_97_frames():
    mel = dsp.mel_spectrogram(Waveform(tone(seconds=1.0)))
    assert mel.shape == (97, 80)


def test_frame_count_formula_for_random_lengths(rng):
    for length in rng.integers(640, 6000, size=20):
        mel = dsp.mel_spectrogram(Waveform(0.1 * rng.standard_normal(int(length))))
        assert mel.shape[0] == (int(length) - 640) // 160 + 1


def test_shorter_than_window():
    with pytest.raises(EmptyInputError):
        dsp.mel_spectrogram(Waveform(np.ones(639)))


def test_silence_sits_on_the_floor():
    mel = dsp.mel_spectrogram(Waveform(np.zeros(SR)))
    np.testing.assert_allclose(mel, np.log(1e-5))


def test_tone_lands_in_its_band():
    mel = dsp.mel_spectrogram(Waveform(tone(freq=1000.0, seconds=1.0)))
    peaks = mel.argmax(axis=1)
    assert (peaks == peaks[0]).all()
    bin_1k = int(round(1000.0 * 1024 / SR))
    assert abs(int(peaks[0]) - int(dsp.mel_filterbank()[:, bin_1k].argmax())) <= 1


def test_normalize_mel_inverts():
    mel = np.linspace(-11.5, 2.0, 160).reshape(2, 80)
    np.testing.assert_allclose(dsp.denormalize_mel(dsp.normalize_mel(mel)), mel)
    assert dsp.normalize_mel(np.full((1, 80), -6.0)).max() == 0.0


# vad

def _burst_signal(*spans, seconds=2.0):
    samples = np.zeros(int(seconds * SR))
    for start, end in spans:
        a, b = int(start * SR), int(end * SR)
        samples[a:b] = tone(seconds=(b - a) / SR, amp=0.5)
    return Waveform(samples)


def test_vad_silence():
    assert dsp.energy_vad(Waveform(np.zeros(SR))) == []


def test_vad_single_burst():
    intervals = dsp.energy_vad(_burst_signal((0.5, 1.0)))
    assert len(intervals) == 1
    start, end = intervals[0]
    assert start == pytest.approx(0.5, abs=0.02)
    assert end == pytest.approx(1.0, abs=0.02)


def test_vad_merges_close_bursts():
    intervals = dsp.energy_vad(_burst_signal((0.5, 0.8), (0.85, 1.2)))
    assert len(intervals) == 1


def test_vad_keeps_distant_bursts_apart():
    intervals = dsp.energy_vad(_burst_signal((0.2, 0.5), (1.0, 1.4)))
    assert len(intervals) == 2


def test_vad_rejects_bad_frame():
    with pytest.raises(ContractError):
        dsp.energy_vad(Waveform(np.ones(100)), frame_ms=0)


# snr

def _snr_signal(target_db, seed=0):
    rng = np.random.default_rng(seed)
    n = 2 * SR
    gate = np.zeros(n)
    gate[n // 4: 3 * n // 4] = 1.0
    noise = 0.01 * rng.standard_normal(n)
    sine = np.sqrt(2.0) * 0.01 * 10 ** (target_db / 20) * np.sin(2 * np.pi * 440.0 * np.arange(n) / SR)
    return Waveform(sine * gate + noise)


@pytest.mark.parametrize('target', [0, 6, 12, 20, 30])
def test_snr_of_constructed_mixes(target):
    assert dsp.estimate_snr(_snr_signal(target)) == pytest.approx(target, abs=0.5)


def test_snr_of_silence():
    with pytest.raises(NotEstimableError):
        dsp.estimate_snr(Waveform(np.zeros(SR)))


def test_snr_of_steady_tone():
    with pytest.raises(NotEstimableError):
        dsp.estimate_snr(Waveform(tone(seconds=1.0)))


# rolloff

def _lowpass_noise(cutoff_hz, seconds=4.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * SR)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    spectrum[np.fft.rfftfreq(n, 1.0 / SR) > cutoff_hz] = 0.0
    return Waveform(0.1 * np.fft.irfft(spectrum, n=n))


def test_rolloff_of_band_limited_noise():
    assert 3600.0 <= dsp.spectral_rolloff(_lowpass_noise(4000.0), fraction=0.95) <= 4000.0


def test_rolloff_of_a_tone():
    rolloff = dsp.spectral_rolloff(Waveform(tone(freq=1000.0, seconds=1.0)))
    assert abs(rolloff - 1000.0) <= SR / 1024


def test_rolloff_monotone_and_scale_invariant():
    w = _lowpass_noise(6000.0)
    assert dsp.spectral_rolloff(w, 0.95) >= dsp.spectral_rolloff(w, 0.85)
    assert dsp.spectral_rolloff(Waveform(0.25 * w.samples), 0.85) == dsp.spectral_rolloff(w, 0.85)


@pytest.mark.parametrize('fraction', [0.0, 1.0, -0.2, 1.5])
def test_rolloff_fraction_range(fraction):
    with pytest.raises(RangeError):
        dsp.spectral_rolloff(Waveform(tone()), fraction)


def test_rolloff_of_silence():
    with pytest.raises(UndefinedRolloffError):
        dsp.spectral_rolloff(Waveform(np.zeros(SR)))


# truncation

def test_faded_tone_is_not_truncated(clean_tone):
    assert dsp.detect_truncation(clean_tone) == {'onset_truncated': False, 'offset_truncated': False}


def test_hard_cut_tone():
    faded = fade(tone(seconds=1.0), ms=100.0)
    flags = dsp.detect_truncation(Waveform(faded[SR // 2:]))
    assert flags['onset_truncated']
    assert not flags['offset_truncated']


def test_silence_is_not_truncated():
    assert dsp.detect_truncation(Waveform(np.zeros(SR))) == {'onset_truncated': False,
                                                             'offset_truncated': False}


def test_truncation_recall_and_false_positives():
    items = truncation_set(200, seed=3)
    assert sum(cut for _, cut in items) == 100
    flagged = [any(dsp.detect_truncation(w).values()) for w, _ in items]
    recall = np.mean([f for f, (_, cut) in zip(flagged, items) if cut])
    false_pos = np.mean([f for f, (_, cut) in zip(flagged, items) if not cut])
    assert recall >= 0.95
    assert false_pos <= 0.05


# griffin-lim

def _harmonic(seconds=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return Waveform(fade(sum(0.3 / k * np.sin(2 * np.pi * 220.0 * k * t) for k in range(1, 5)), ms=50))


def test_griffin_lim_keeps_dominant_band():
    mel = dsp.mel_spectrogram(Waveform(tone(freq=1000.0, seconds=0.5)))
    rebuilt = dsp.mel_spectrogram(dsp.griffin_lim(mel, 60))
    assert rebuilt.shape == mel.shape
    assert rebuilt.mean(axis=0).argmax() == mel.mean(axis=0).argmax()


def test_griffin_lim_output_peak():
    out = dsp.griffin_lim(dsp.mel_spectrogram(_harmonic()), 4)
    assert np.abs(out.samples).max() == pytest.approx(0.9)


def test_griffin_lim_floor_mel_is_near_silent():
    out = dsp.griffin_lim(np.full((20, 80), np.log(1e-5)), 10, normalize=False)
    assert np.abs(out.samples).max() < 1e-2


def test_griffin_lim_more_iterations_fit_better():
    mel = dsp.mel_spectrogram(_harmonic())
    target = np.maximum(np.exp(mel) @ np.linalg.pinv(dsp.mel_filterbank()).T, 0.0)
    coarse = dsp.spectral_mae(dsp.griffin_lim(mel, 1, normalize=False), target)
    fine = dsp.spectral_mae(dsp.griffin_lim(mel, 60, normalize=False), target)
    assert fine <= coarse


def test_griffin_lim_needs_an_iteration():
    with pytest.raises(ContractError):
        dsp.griffin_lim(np.zeros((4, 80)), 0)


# wav io

def test_wav_round_trip(tmp_path):
    w = Waveform(tone(seconds=0.25, amp=0.5))
    back = read_wav(write_wav(tmp_path / 'a.wav', w))
    assert back.sample_rate == SR
    np.testing.assert_allclose(back.samples, w.samples, atol=1.0 / 32767)


def test_wav_is_resampled(tmp_path):
    path = tmp_path / 'low.wav'
    wavfile.write(str(path), 8000, (tone(seconds=0.5, sr=8000) * 16000).astype(np.int16))
    assert len(read_wav(path)) == SR // 2


def test_missing_wav(tmp_path):
    with pytest.raises(AudioReadError):
        read_wav(tmp_path / 'nope.wav')


def test_write_clips(tmp_path):
    back = read_wav(write_wav(tmp_path / 'loud.wav', Waveform(np.full(100, 3.0))))
    assert back.samples.max() <= 1.0
