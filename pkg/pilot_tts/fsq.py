"""
Finite scalar quantization tokenizer.

Latents are projected down to D dims, bounded with K * tanh, rounded to an
integer grid {-K..K} (straight-through), and read as a mixed-radix number to
get one token id per 40 ms. The toy encoder maps groups of four mel frames
(100 fps -> 25 Hz) through two framed linear layers.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np

from pilot_tts import dsp
from pilot_tts import settings as defaults
from pilot_tts import tensor as T
from pilot_tts.dsp import MelConfig, Waveform
from pilot_tts.exceptions import EmptyInputError, RangeError, ShapeError
from pilot_tts.layers import Linear, Module
from pilot_tts.tensor import Tensor

logger = logging.getLogger(__name__)

TOKEN_RATE_HZ = 25
FRAMES_PER_TOKEN = 4


@dataclass(frozen=True)
class FsqConfig:
    D: int = defaults.FSQ_D
    K: int = defaults.FSQ_K
    hidden: int = defaults.FSQ_HIDDEN

    @property
    def levels(self) -> int:
        return 2 * self.K + 1

    @property
    def codebook_size(self) -> int:
        return self.levels ** self.D

    @classmethod
    def from_settings(cls, settings) -> 'FsqConfig':
        return cls(D=settings.getint('FSQ_D'), K=settings.getint('FSQ_K'),
                   hidden=settings.getint('FSQ_HIDDEN'))


@dataclass
class TokenSequence:
    ids: np.ndarray
    rate_hz: int = TOKEN_RATE_HZ
    truncated: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __len__(self):
        return int(self.ids.size)

    def tolist(self) -> List[int]:
        return [int(i) for i in self.ids]


# ---------------------------------------------------------------------------
# Quantizer math
# ---------------------------------------------------------------------------

def fsq_bound(z: Tensor, K: int) -> Tensor:
    return T.scale(T.tanh(z), float(K))


def fsq_quantize(h: Tensor, down: Linear, cfg: FsqConfig) -> Tensor:
    """
    Latent rows (N x hidden) -> digit rows (N x D) with values in [-K, K].

    ROUND is recorded as identity for the backward pass.
    """
    if h.shape[-1] != down.weight.shape[0]:
        raise ShapeError(f'latent width {h.shape[-1]} != projection input {down.weight.shape[0]}')
    return T.round_ste(fsq_bound(down(h), cfg.K))


def fsq_dequantize(digits: Tensor, up: Linear) -> Tensor:
    """Digit rows (N x D) -> latent rows through the up-projection."""
    return up(digits)


def token_index(digits, cfg: FsqConfig):
    """
    id = sum_j (digit_j + K) * (2K+1)^j.

    Accepts one code (D digits) or a batch (N x D); returns an int or an array.
    """
    digits = np.asarray(digits)
    if digits.shape[-1] != cfg.D:
        raise ShapeError(f'expected {cfg.D} digits, got shape {digits.shape}')
    values = np.rint(digits).astype(np.int64)
    if values.min() < -cfg.K or values.max() > cfg.K:
        raise RangeError(f'digits must lie in [-{cfg.K}, {cfg.K}]')
    weights = cfg.levels ** np.arange(cfg.D, dtype=np.int64)
    ids = ((values + cfg.K) * weights).sum(axis=-1)
    return int(ids) if ids.ndim == 0 else ids


def index_to_code(token_id, cfg: FsqConfig) -> np.ndarray:
    """Inverse of token_index: D digits in [-K, K] (or N x D for an id array)."""
    ids = np.asarray(token_id, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.codebook_size):
        raise RangeError(f'token id outside [0, {cfg.codebook_size - 1}]')
    digits = []
    rest = ids.copy()
    for _ in range(cfg.D):
        digits.append(rest % cfg.levels - cfg.K)
        rest = rest // cfg.levels
    return np.stack(digits, axis=-1)


# ---------------------------------------------------------------------------
# Toy tokenizer
# ---------------------------------------------------------------------------

class FsqTokenizer(Module):
    """
    Framed-linear encoder -> FSQ -> framed-linear decoder, trained on
    normalized mel reconstruction.
    """

    def __init__(self, cfg: FsqConfig, rng: np.random.Generator, dtype=np.float32,
                 n_mels: int = defaults.MEL_N_MELS):
        self.cfg = cfg
        self.n_mels = n_mels
        width = FRAMES_PER_TOKEN * n_mels
        self.enc1 = Linear(width, cfg.hidden, rng, dtype)
        self.enc2 = Linear(cfg.hidden, cfg.hidden, rng, dtype)
        self.down = Linear(cfg.hidden, cfg.D, rng, dtype)
        self.up = Linear(cfg.D, cfg.hidden, rng, dtype)
        self.dec1 = Linear(cfg.hidden, cfg.hidden, rng, dtype)
        self.dec2 = Linear(cfg.hidden, width, rng, dtype)

    def frames(self, mel_norm: np.ndarray) -> Tensor:
        """Group 4 mel frames per row: (F x n_mels) -> (F//4 x 4*n_mels)."""
        mel_norm = np.asarray(mel_norm)
        count = mel_norm.shape[0] // FRAMES_PER_TOKEN
        if count == 0:
            raise EmptyInputError(
                f'{mel_norm.shape[0]} mel frames is fewer than one token ({FRAMES_PER_TOKEN} frames)')
        grouped = mel_norm[:count * FRAMES_PER_TOKEN].reshape(count, FRAMES_PER_TOKEN * self.n_mels)
        return T.constant(grouped, dtype=self.dtype)

    def encode(self, mel_norm: np.ndarray) -> Tensor:
        return self.enc2(T.gelu(self.enc1(self.frames(mel_norm))))

    def quantize(self, latents: Tensor) -> Tensor:
        return fsq_quantize(latents, self.down, self.cfg)

    def decode(self, digits: Tensor) -> Tensor:
        """Digits (N x D) -> normalized mel (4N x n_mels)."""
        out = self.dec2(T.gelu(self.dec1(fsq_dequantize(digits, self.up))))
        return T.reshape(out, (out.shape[0] * FRAMES_PER_TOKEN, self.n_mels))

    def reconstruction_loss(self, mel_norm: np.ndarray) -> Tensor:
        digits = self.quantize(self.encode(mel_norm))
        recon = self.decode(digits)
        target = np.asarray(mel_norm)[:recon.shape[0]]
        return T.mse(recon, T.constant(target, like=recon))

    def tokenize(self, mel_norm: np.ndarray) -> np.ndarray:
        with T.no_grad():
            digits = self.quantize(self.encode(mel_norm))
        return np.atleast_1d(token_index(digits.data, self.cfg))


def tokenize_audio(w: Waveform, tokenizer: FsqTokenizer, mel_cfg: MelConfig = dsp.DEFAULT_MEL
                   ) -> TokenSequence:
    """
    Waveform -> 25 Hz token ids (one per four mel frames).

    Raises:
        EmptyInputError: audio too short for a single token
    """
    if w.samples.size < mel_cfg.win:
        raise EmptyInputError('audio is shorter than one 40 ms token')
    mel = dsp.normalize_mel(dsp.mel_spectrogram(w, mel_cfg), mel_cfg)
    return TokenSequence(tokenizer.tokenize(mel))


def write_token_file(path: Union[str, Path], sequences: Iterable[Sequence[int]]) -> Path:
    """One utterance per line, space-separated decimal ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [' '.join(str(int(i)) for i in seq) for seq in sequences]
    path.write_text('\n'.join(lines) + ('\n' if lines else ''), encoding='utf-8')
    return path


def read_token_file(path: Union[str, Path]) -> List[np.ndarray]:
    """Inverse of write_token_file; a missing final newline is accepted."""
    text = Path(path).read_text(encoding='utf-8')
    return [np.array([int(t) for t in line.split()], dtype=np.int64) for line in text.splitlines()]
