"""
Conditional flow matching mel decoder.

Training regresses the model's velocity onto the analytic field of the
optimal-transport path from noise to the target mel; sampling integrates the
learned field with fixed-step Euler. The backbone is a small transformer over
mel frames whose layer norms are modulated by the time step (adaLN).
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from pilot_tts import settings as defaults
from pilot_tts import tensor as T
from pilot_tts.exceptions import EmptyInputError, RangeError, ShapeError
from pilot_tts.fsq import FRAMES_PER_TOKEN, TokenSequence
from pilot_tts.layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, \
    sinusoidal_embedding, sinusoidal_table
from pilot_tts.tensor import Tensor

logger = logging.getLogger(__name__)

TIME_SCALE = 1000.0


@dataclass(frozen=True)
class FlowPathConfig:
    sigma_min: float = defaults.CFM_SIGMA_MIN
    steps: int = defaults.CFM_STEPS

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise RangeError(f'sigma_min must lie in [0, 1), got {self.sigma_min}')
        if self.steps < 1:
            raise RangeError(f'steps must be >= 1, got {self.steps}')

    @classmethod
    def from_settings(cls, settings) -> 'FlowPathConfig':
        return cls(sigma_min=settings.getfloat('CFM_SIGMA_MIN'), steps=settings.getint('CFM_STEPS'))


@dataclass(frozen=True)
class CfmConfig:
    d_model: int = defaults.CFM_D_MODEL
    blocks: int = defaults.CFM_BLOCKS
    heads: int = defaults.CFM_HEADS
    n_mels: int = defaults.MEL_N_MELS
    speaker_dim: int = defaults.SPEAKER_DIM
    codebook_size: int = 3 ** defaults.FSQ_D

    @classmethod
    def from_settings(cls, settings) -> 'CfmConfig':
        return cls(d_model=settings.getint('CFM_D_MODEL'), blocks=settings.getint('CFM_BLOCKS'),
                   heads=settings.getint('CFM_HEADS'), n_mels=settings.getint('MEL_N_MELS'),
                   speaker_dim=settings.getint('SPEAKER_DIM'),
                   codebook_size=(2 * settings.getint('FSQ_K') + 1) ** settings.getint('FSQ_D'))


@dataclass
class DecoderCondition:
    """Reference mel (normalized), speaker vector and the target's tokens."""
    ref_mel: np.ndarray
    s: np.ndarray
    tokens: TokenSequence

    @property
    def frames(self) -> int:
        return FRAMES_PER_TOKEN * len(self.tokens)


def ot_path(x0: np.ndarray, x1: np.ndarray, t: float, cfg: FlowPathConfig = FlowPathConfig()
            ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Point and velocity on the conditional OT path.

    x_t = (1 - (1 - sigma_min) t) x0 + t x1,  u_t = x1 - (1 - sigma_min) x0
    """
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f'x0 {x0.shape} and x1 {x1.shape} differ')
    if not 0.0 <= t <= 1.0:
        raise RangeError(f't must lie in [0, 1], got {t}')
    k = 1.0 - cfg.sigma_min
    return (1.0 - k * t) * x0 + t * x1, x1 - k * x0


class ExactField:
    """
    Velocity of the OT path toward a known target: (x1 - (1 - sigma) x) / (1 - (1 - sigma) t).

    Stands in for a trained model in tests of the loss and the sampler.
    """

    def __init__(self, x1: np.ndarray, sigma_min: float = 0.0):
        self.x1 = np.asarray(x1, dtype=np.float64)
        self.sigma_min = sigma_min

    def __call__(self, x, t: float, cond=None) -> Tensor:
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        k = 1.0 - self.sigma_min
        return T.constant((self.x1 - k * x) / (1.0 - k * t), dtype=np.float64)


class DitBlock(Module):
    """Transformer block with time-modulated (shift, scale) layer norms."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, rng, dtype)
        self.modulation = Linear(d_model, 4 * d_model, rng, dtype, std=0.02)
        self._d = d_model

    def _modulate(self, x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        one = T.constant(np.ones((1, self._d)), like=scale)
        return T.add_row(T.mul_row(x, T.add(scale, one)), shift)

    def __call__(self, x: Tensor, time: Tensor) -> Tensor:
        mod = self.modulation(time)
        d = self._d
        shift1, scale1 = T.slice_cols(mod, 0, d), T.slice_cols(mod, d, 2 * d)
        shift2, scale2 = T.slice_cols(mod, 2 * d, 3 * d), T.slice_cols(mod, 3 * d, 4 * d)
        x = T.add(x, self.attn(self._modulate(self.norm1(x), shift1, scale1)))
        return T.add(x, self.ffn(self._modulate(self.norm2(x), shift2, scale2)))


class DitLite(Module):
    """
    Velocity model v(x_t, t, condition) over mel frames.
    """

    def __init__(self, cfg: CfmConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_model
        self.token_emb = Embedding(cfg.codebook_size, d, rng, dtype, std=1.0)
        self.cond_proj = Linear(d + cfg.speaker_dim + cfg.n_mels, d, rng, dtype)
        self.in_proj = Linear(cfg.n_mels + d, d, rng, dtype)
        self.time_fc1 = Linear(d, d, rng, dtype)
        self.time_fc2 = Linear(d, d, rng, dtype)
        self.blocks = [DitBlock(d, cfg.heads, rng, dtype) for _ in range(cfg.blocks)]
        self.norm = LayerNorm(d, dtype)
        self.out_proj = Linear(d, cfg.n_mels, rng, dtype)

    def time_embedding(self, t: float) -> Tensor:
        base = T.constant(sinusoidal_embedding([t * TIME_SCALE], self.cfg.d_model),
                          like=self.norm.gamma)
        return self.time_fc2(T.gelu(self.time_fc1(base)))

    def __call__(self, x_t, t: float, cond: Union[DecoderCondition, Tensor]) -> Tensor:
        """
        Args:
            x_t: frames x n_mels noisy mel (array or Tensor)
            t: Flow time in [0, 1]
            cond: DecoderCondition, or precomputed conditioning frames

        Returns:
            frames x n_mels velocity
        """
        frames = cond if isinstance(cond, Tensor) else build_condition_frames(self, cond)
        x = x_t if isinstance(x_t, Tensor) else T.constant(x_t, like=self.norm.gamma)
        if x.shape != (frames.shape[0], self.cfg.n_mels):
            raise ShapeError(f'noisy mel {x.shape} does not match {frames.shape[0]} condition frames')
        h = self.in_proj(T.concat_cols([x, frames]))
        h = T.add(h, T.constant(sinusoidal_table(h.shape[0], self.cfg.d_model), like=h))
        time = self.time_embedding(t)
        for block in self.blocks:
            h = block(h, time)
        return self.out_proj(self.norm(h))


def build_condition_frames(model: DitLite, cond: DecoderCondition) -> Tensor:
    """
    Per-frame conditioning: token embeddings repeated x4 (25 Hz -> 100 fps),
    concatenated with the broadcast speaker vector and the mean reference mel,
    projected to d_model.
    """
    count = len(cond.tokens)
    if count == 0:
        raise EmptyInputError('decoder condition has no tokens')
    ref = np.asarray(cond.ref_mel)
    if ref.ndim != 2 or ref.shape[1] != model.cfg.n_mels or ref.shape[0] == 0:
        raise ShapeError(f'reference mel must be frames x {model.cfg.n_mels}, got {ref.shape}')
    frames = FRAMES_PER_TOKEN * count
    repeat = np.repeat(np.eye(count), FRAMES_PER_TOKEN, axis=0)
    tokens = model.token_emb(cond.tokens.ids)
    repeated = T.matmul(T.constant(repeat, like=tokens), tokens)
    speaker = T.constant(np.tile(np.asarray(cond.s).reshape(1, -1), (frames, 1)), like=tokens)
    summary = T.constant(np.tile(ref.mean(axis=0, keepdims=True), (frames, 1)), like=tokens)
    return model.cond_proj(T.concat_cols([repeated, speaker, summary]))


def cfm_loss(model: Callable, cond: DecoderCondition, x1: np.ndarray, rng: np.random.Generator,
             cfg: FlowPathConfig = FlowPathConfig()) -> Tensor:
    """
    Flow-matching regression loss for one item.

    t ~ U(0, 1) and x0 ~ N(0, I) are drawn from ``rng``; the loss is the mean
    squared difference between the model velocity and u_t.
    """
    x1 = np.asarray(x1)
    if x1.shape[0] != cond.frames:
        raise ShapeError(
            f'target has {x1.shape[0]} frames but {len(cond.tokens)} tokens need {cond.frames}')
    t = float(rng.uniform(0.0, 1.0))
    x0 = rng.standard_normal(x1.shape)
    x_t, u_t = ot_path(x0, x1, t, cfg)
    v = model(x_t, t, cond)
    return T.mse(v, T.constant(u_t, like=v))


def euler_sample(model: Callable, cond: Optional[DecoderCondition], frames: int,
                 cfg: FlowPathConfig = FlowPathConfig(), seed: int = 0,
                 n_mels: int = defaults.MEL_N_MELS) -> np.ndarray:
    """
    Integrate the velocity field from N(0, I) noise with ``cfg.steps`` Euler steps.

    Returns:
        frames x n_mels normalized mel
    """
    if cond is not None and frames != cond.frames:
        raise ShapeError(f'{frames} frames requested but the condition aligns to {cond.frames}')
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((frames, n_mels))
    dt = 1.0 / cfg.steps
    with T.no_grad():
        frames_cond = build_condition_frames(model, cond) if isinstance(model, DitLite) else cond
        for k in range(cfg.steps):
            v = model(x, k * dt, frames_cond)
            x = x + dt * np.asarray(v.data, dtype=np.float64)
    return x
