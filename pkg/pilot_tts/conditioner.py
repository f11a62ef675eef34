"""
Reference conditioning: frozen content and speaker featurizers plus the
trainable Q-Former that compresses content features into 32 condition tokens.

The frozen maps are seeded random projections. They are plain numpy arrays
(never Tensors), so they cannot appear in a gradient set.
"""
import functools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from pilot_tts import dsp
from pilot_tts import settings as defaults
from pilot_tts import tensor as T
from pilot_tts.dsp import MelConfig, Waveform
from pilot_tts.exceptions import DurationError, EmptyInputError, ShapeError
from pilot_tts.layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, sinusoidal_table
from pilot_tts.tensor import Tensor

logger = logging.getLogger(__name__)

MIN_SPEAKER_SECONDS = 0.5
SPEAKER_BANDS = 32


class FrozenFeaturizer:
    """
    Seeded stand-ins for the pretrained content encoder and speaker encoder.
    """

    def __init__(self, seed: int = defaults.FEATURIZER_SEED, mel_cfg: MelConfig = dsp.DEFAULT_MEL,
                 content_dim: int = defaults.CONTENT_DIM, speaker_dim: int = defaults.SPEAKER_DIM):
        self.seed = seed
        self.mel_cfg = mel_cfg
        rng = np.random.default_rng(seed)
        self.content_map = rng.normal(0.0, 1.0 / np.sqrt(mel_cfg.n_mels),
                                      size=(mel_cfg.n_mels, content_dim))
        bands = np.array_split(np.arange(mel_cfg.n_mels), SPEAKER_BANDS)
        self.band_pool = np.zeros((mel_cfg.n_mels, SPEAKER_BANDS))
        for b, members in enumerate(bands):
            self.band_pool[members, b] = 1.0 / len(members)
        if speaker_dim > 2 * SPEAKER_BANDS:
            raise ShapeError(f'speaker_dim is at most {2 * SPEAKER_BANDS}, got {speaker_dim}')
        q, _ = np.linalg.qr(rng.normal(size=(2 * SPEAKER_BANDS, 2 * SPEAKER_BANDS)))
        self.speaker_map = q[:, :speaker_dim]

    def content_features(self, w: Waveform) -> np.ndarray:
        """
        frames x content_dim features at 50 fps.

        Normalized mel -> frozen linear map -> tanh -> 2:1 average pooling.
        """
        mel = dsp.normalize_mel(dsp.mel_spectrogram(w, self.mel_cfg), self.mel_cfg)
        projected = np.tanh(mel @ self.content_map)
        pairs = projected.shape[0] // 2
        if pairs == 0:
            raise EmptyInputError('audio too short for one content frame')
        return 0.5 * (projected[0:2 * pairs:2] + projected[1:2 * pairs:2])

    def speaker_embed(self, w: Waveform) -> np.ndarray:
        """
        Unit-norm static speaker vector.

        Band-pooled mel statistics (mean and std over the louder frames), each
        half centred across bands, through a frozen orthonormal map.
        """
        if w.duration_s < MIN_SPEAKER_SECONDS:
            raise DurationError(
                f'speaker embedding needs >= {MIN_SPEAKER_SECONDS} s of audio, got {w.duration_s:.3f} s')
        mel = dsp.normalize_mel(dsp.mel_spectrogram(w, self.mel_cfg), self.mel_cfg)
        energy = mel.mean(axis=1)
        voiced = energy > 0.5 * (energy.min() + energy.max())
        if voiced.sum() < 2:
            voiced = np.ones_like(voiced)
        banded = mel[voiced] @ self.band_pool
        mean, std = banded.mean(axis=0), banded.std(axis=0)
        stats = np.concatenate([mean - mean.mean(), std - std.mean()])
        vector = stats @ self.speaker_map
        norm = np.linalg.norm(vector)
        if norm == 0:
            vector = np.zeros_like(vector)
            vector[0] = 1.0
            return vector
        return vector / norm


@functools.lru_cache(maxsize=4)
def get_featurizer(seed: int = defaults.FEATURIZER_SEED, mel_cfg: MelConfig = dsp.DEFAULT_MEL,
                   content_dim: int = defaults.CONTENT_DIM, speaker_dim: int = defaults.SPEAKER_DIM
                   ) -> FrozenFeaturizer:
    return FrozenFeaturizer(seed, mel_cfg, content_dim, speaker_dim)


def featurizer_from_settings(settings, mel_cfg: MelConfig) -> FrozenFeaturizer:
    return get_featurizer(settings.getint('FEATURIZER_SEED'), mel_cfg,
                          settings.getint('CONTENT_DIM'), settings.getint('SPEAKER_DIM'))


def content_features(w: Waveform, seed: int = defaults.FEATURIZER_SEED,
                     mel_cfg: MelConfig = dsp.DEFAULT_MEL) -> np.ndarray:
    return get_featurizer(seed, mel_cfg).content_features(w)


def speaker_embed(w: Waveform, seed: int = defaults.FEATURIZER_SEED,
                  mel_cfg: MelConfig = dsp.DEFAULT_MEL) -> np.ndarray:
    return get_featurizer(seed, mel_cfg).speaker_embed(w)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64).reshape(-1), np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


class QFormer(Module):
    """
    32 learned queries cross-attend to content features (sinusoidal positions
    on the keys), then one Conformer-lite block: self-attention, a width-3
    framed linear over neighbouring tokens, and a feed-forward, each residual
    with layer norm. A final linear maps to d_model.
    """

    def __init__(self, d_feat: int, d_model: int, rng: np.random.Generator, dtype=np.float32,
                 n_queries: int = defaults.QFORMER_QUERIES, heads: int = defaults.QFORMER_HEADS):
        self.queries = T.parameter(rng.normal(0.0, 0.5, size=(n_queries, d_model)), dtype=dtype)
        self.feat_proj = Linear(d_feat, d_model, rng, dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.norm_cross = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.norm_self = LayerNorm(d_model, dtype)
        self.conv = Linear(3 * d_model, d_model, rng, dtype)
        self.norm_conv = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, rng, dtype, hidden=2 * d_model)
        self.norm_ffn = LayerNorm(d_model, dtype)
        self.out = Linear(d_model, d_model, rng, dtype)
        self.shift_prev = np.eye(n_queries, k=-1)
        self.shift_next = np.eye(n_queries, k=1)
        self._d_model = d_model

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def __call__(self, features) -> Tensor:
        """
        Args:
            features: frames x d_feat content features (array or Tensor)

        Returns:
            n_queries x d_model condition tokens
        """
        f = features if isinstance(features, Tensor) else T.constant(features, like=self.queries)
        if f.data.ndim != 2 or f.shape[0] == 0:
            raise EmptyInputError(f'Q-Former needs a non-empty frames x d_feat input, got {f.shape}')
        if f.shape[1] != self.feat_proj.weight.shape[0]:
            raise ShapeError(f'feature width {f.shape[1]} != {self.feat_proj.weight.shape[0]}')
        values = self.feat_proj(f)
        positions = T.constant(sinusoidal_table(f.shape[0], self._d_model), like=values)
        keys = T.add(values, positions)
        x = self.norm_cross(T.add(self.queries, self.cross_attn(self.queries, values, keys=keys)))
        x = self.norm_self(T.add(x, self.self_attn(x)))
        prev = T.matmul(T.constant(self.shift_prev, like=x), x)
        nxt = T.matmul(T.constant(self.shift_next, like=x), x)
        x = self.norm_conv(T.add(x, self.conv(T.concat_cols([prev, x, nxt]))))
        x = self.norm_ffn(T.add(x, self.ffn(x)))
        return self.out(x)


def qformer_condition(features, qformer: QFormer) -> Tensor:
    """Content features -> the Q-Former's fixed-count condition tokens."""
    return qformer(features)


@dataclass
class ConditionBundle:
    """Static speaker vector s plus the 32 condition tokens c."""
    s: np.ndarray
    c: Tensor

    def __post_init__(self):
        self.s = np.asarray(self.s).reshape(-1)


def condition_bundle(reference: Waveform, qformer: QFormer,
                     featurizer: Optional[FrozenFeaturizer] = None) -> ConditionBundle:
    featurizer = featurizer or get_featurizer()
    return ConditionBundle(s=featurizer.speaker_embed(reference),
                           c=qformer_condition(featurizer.content_features(reference), qformer))
