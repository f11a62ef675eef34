"""
Autoregressive text-to-semantic model.

Sequence layout per item:

    [s, c_1..c_32, e_BT, lang, emo, text..., e_ET, e_BA, audio..., e_EA]

s and c are continuous vectors projected into the stream; everything else is
a vocabulary id. The loss covers the audio tokens and the closing e_EA only.
Ablation variants drop s (no_spk) or both s and c (no_both).
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from pilot_tts import settings as defaults
from pilot_tts import tensor as T
from pilot_tts.conditioner import ConditionBundle, QFormer, qformer_condition
from pilot_tts.exceptions import ConfigurationError, ContractError, ShapeError
from pilot_tts.fsq import TokenSequence
from pilot_tts.layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, \
    sinusoidal_table
from pilot_tts.tensor import Tensor
from pilot_tts.vocab import DEFAULT_EMO, DEFAULT_LANG, Vocab, build_vocab, encode_text

logger = logging.getLogger(__name__)

VARIANTS = ('full', 'no_spk', 'no_both')


@dataclass(frozen=True)
class VariantConfig:
    mode: str
    use_speaker: bool
    use_conditions: bool


def ablation_variant(mode: str) -> VariantConfig:
    """
    Model configuration for one ablation setting.

    full keeps s and the 32 condition tokens, no_spk drops s, no_both drops both.
    """
    if mode == 'full':
        return VariantConfig(mode, True, True)
    if mode == 'no_spk':
        return VariantConfig(mode, False, True)
    if mode == 'no_both':
        return VariantConfig(mode, False, False)
    raise ContractError(f'unknown variant {mode!r}; valid variants: {", ".join(VARIANTS)}')


@dataclass(frozen=True)
class ArConfig:
    d_model: int = defaults.D_MODEL
    heads: int = defaults.AR_HEADS
    blocks: int = defaults.AR_BLOCKS
    context: int = defaults.AR_CONTEXT
    speaker_dim: int = defaults.SPEAKER_DIM
    content_dim: int = defaults.CONTENT_DIM
    n_queries: int = defaults.QFORMER_QUERIES
    qformer_heads: int = defaults.QFORMER_HEADS
    variant: str = defaults.AR_VARIANT
    text_mode: str = 'explicit'

    @classmethod
    def from_settings(cls, settings) -> 'ArConfig':
        return cls(
            d_model=settings.getint('D_MODEL'),
            heads=settings.getint('AR_HEADS'),
            blocks=settings.getint('AR_BLOCKS'),
            context=settings.getint('AR_CONTEXT'),
            speaker_dim=settings.getint('SPEAKER_DIM'),
            content_dim=settings.getint('CONTENT_DIM'),
            n_queries=settings.getint('QFORMER_QUERIES'),
            qformer_heads=settings.getint('QFORMER_HEADS'),
            variant=settings.get('AR_VARIANT'),
        )


@dataclass(frozen=True)
class SamplingConfig:
    top_k: int = defaults.SAMPLING_TOP_K
    temperature: float = defaults.SAMPLING_TEMPERATURE
    max_tokens: int = defaults.SAMPLING_MAX_TOKENS
    seed: int = defaults.SEED

    @classmethod
    def from_settings(cls, settings) -> 'SamplingConfig':
        return cls(top_k=settings.getint('SAMPLING_TOP_K'),
                   temperature=settings.getfloat('SAMPLING_TEMPERATURE'),
                   max_tokens=settings.getint('SAMPLING_MAX_TOKENS'),
                   seed=settings.getint('SEED'))

    @property
    def greedy(self) -> bool:
        return self.temperature <= 0 or self.top_k == 1


@dataclass
class ArInput:
    """
    One assembled sequence.

    ``ids`` holds vocabulary ids with -1 on the continuous prefix positions
    (s and c). ``mask[p]`` is true when position p is a training target.
    """
    ids: np.ndarray
    mask: np.ndarray
    n_prefix: int
    prompt_length: int
    text_span: tuple
    s: Optional[np.ndarray] = None
    c: Optional[Tensor] = None

    @property
    def length(self) -> int:
        return int(self.ids.size)

    @property
    def n_targets(self) -> int:
        return int(self.mask.sum())


def resolve_tags(lang: Optional[str], emo: Optional[str], vocab: Vocab):
    if lang is None:
        logger.info('No language tag given, using %r', DEFAULT_LANG)
        lang = DEFAULT_LANG
    if emo is None:
        logger.info('No emotion tag given, using %r', DEFAULT_EMO)
        emo = DEFAULT_EMO
    return vocab.lang_id(lang), vocab.emo_id(emo)


def assemble_sequence(text: str, tokens: Optional[TokenSequence], bundle: Optional[ConditionBundle],
                      lang: Optional[str] = None, emo: Optional[str] = None,
                      vocab: Optional[Vocab] = None, variant: str = 'full',
                      text_mode: str = 'explicit') -> ArInput:
    """
    Lay out one sequence.

    Args:
        text: Transcript (markers allowed)
        tokens: Target audio tokens; None for an inference prompt (no targets)
        bundle: Speaker vector and condition tokens (may be None for no_both)
        lang: Language tag, default 'zh'
        emo: Emotion tag, default 'neutral'
        vocab: Vocabulary (built on demand)
        variant: 'full', 'no_spk' or 'no_both'
        text_mode: 'explicit' or 'implicit' paralinguistic markers

    Returns:
        ArInput whose length is prefix + 3 + T_text + 2 + N_audio + 1
    """
    vocab = vocab or build_vocab()
    config = ablation_variant(variant)
    lang_id, emo_id = resolve_tags(lang, emo, vocab)
    text_ids = encode_text(text, vocab, text_mode)

    n_prefix = 0
    s = c = None
    if config.use_speaker:
        if bundle is None:
            raise ContractError(f'variant {variant} needs a speaker embedding')
        s = bundle.s
        n_prefix += 1
    if config.use_conditions:
        if bundle is None or bundle.c is None:
            raise ContractError(f'variant {variant} needs condition tokens')
        c = bundle.c
        n_prefix += c.shape[0]

    audio = [] if tokens is None else [int(t) for t in vocab.audio_id(tokens.ids)]
    body = [vocab.special('e_BT'), lang_id, emo_id] + text_ids + \
        [vocab.special('e_ET'), vocab.special('e_BA')] + audio + [vocab.special('e_EA')]
    ids = np.array([-1] * n_prefix + body, dtype=np.int64)

    prompt_length = n_prefix + 3 + len(text_ids) + 2
    mask = np.zeros(ids.size, dtype=bool)
    if tokens is not None:
        mask[prompt_length:] = True
    text_span = (n_prefix + 3, n_prefix + 3 + len(text_ids))
    return ArInput(ids=ids, mask=mask, n_prefix=n_prefix, prompt_length=prompt_length,
                   text_span=text_span, s=s, c=c)


def pad_batch(batch: Sequence[ArInput], vocab: Optional[Vocab] = None) -> List[ArInput]:
    """Right-pad every item with PAD to the longest length; padding is never a target."""
    vocab = vocab or build_vocab()
    if not batch:
        return []
    longest = max(item.length for item in batch)
    padded = []
    for item in batch:
        extra = longest - item.length
        if extra == 0:
            padded.append(item)
            continue
        padded.append(replace(
            item,
            ids=np.concatenate([item.ids, np.full(extra, vocab.special('PAD'), dtype=np.int64)]),
            mask=np.concatenate([item.mask, np.zeros(extra, dtype=bool)]),
        ))
    return padded


class DecoderBlock(Module):
    """Pre-norm causal self-attention + feed-forward."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x), causal=True))
        return T.add(x, self.ffn(self.norm2(x)))


class ArModel(Module):
    """
    Decoder-only transformer over the assembled sequence.

    The output head scores audio tokens plus e_EA and shares its weights with
    the matching rows of the token embedding table.
    """

    def __init__(self, cfg: ArConfig, rng: np.random.Generator, dtype=np.float32,
                 vocab: Optional[Vocab] = None):
        self.cfg = cfg
        self.variant = ablation_variant(cfg.variant)
        self.vocab = vocab or build_vocab()
        d = cfg.d_model
        self.tok_emb = Embedding(self.vocab.size, d, rng, dtype)
        self.s_proj = Linear(cfg.speaker_dim, d, rng, dtype) if self.variant.use_speaker else None
        self.c_proj = Linear(d, d, rng, dtype) if self.variant.use_conditions else None
        self.qformer = QFormer(cfg.content_dim, d, rng, dtype, n_queries=cfg.n_queries,
                               heads=cfg.qformer_heads) if self.variant.use_conditions else None
        self.blocks = [DecoderBlock(d, cfg.heads, rng, dtype) for _ in range(cfg.blocks)]
        self.norm = LayerNorm(d, dtype)
        self.head_bias = T.parameter(np.zeros(self.vocab.head_size), dtype=dtype)
        self.positions = sinusoidal_table(cfg.context, d)
        self.head_rows = np.concatenate([
            np.arange(self.vocab.audio_size) + self.vocab.audio_offset,
            [self.vocab.special('e_EA')],
        ]).astype(np.int64)

    # -- conditioning -----------------------------------------------------------

    def condition(self, content: Optional[np.ndarray], speaker: Optional[np.ndarray]
                  ) -> ConditionBundle:
        """ConditionBundle from precomputed frozen features of a reference."""
        c = None
        if self.qformer is not None and content is not None:
            c = qformer_condition(content, self.qformer)
        s = speaker if speaker is not None else np.zeros(self.cfg.speaker_dim)
        return ConditionBundle(s=s, c=c)

    # -- forward ----------------------------------------------------------------

    def embed(self, ids: np.ndarray, n_prefix: int, s=None, c: Optional[Tensor] = None) -> Tensor:
        length = int(np.asarray(ids).size)
        if length > self.cfg.context:
            raise ShapeError(f'sequence of {length} positions exceeds context {self.cfg.context}')
        parts = []
        if self.variant.use_speaker:
            parts.append(self.s_proj(T.constant(np.asarray(s).reshape(1, -1), like=self.head_bias)))
        if self.variant.use_conditions:
            parts.append(self.c_proj(c))
        parts.append(self.tok_emb(np.asarray(ids)[n_prefix:]))
        x = parts[0] if len(parts) == 1 else T.concat_rows(parts)
        if x.shape[0] != length:
            raise ShapeError(f'prefix of {x.shape[0] - (length - n_prefix)} rows, expected {n_prefix}')
        return T.add(x, T.constant(self.positions[:length], like=x))

    def hidden(self, inp: ArInput) -> Tensor:
        x = self.embed(inp.ids, inp.n_prefix, inp.s, inp.c)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def head(self, h: Tensor) -> Tensor:
        """Rows of hidden states -> scores over audio tokens + e_EA."""
        weights = T.gather_rows(self.tok_emb.table, self.head_rows)
        return T.add_row(T.matmul(h, T.transpose(weights)), self.head_bias)

    def logits(self, inp: ArInput) -> Tensor:
        """Head scores for every position (row p predicts position p + 1)."""
        return self.head(self.hidden(inp))

    def targets(self, inp: ArInput) -> np.ndarray:
        """Head class of each position's token (0 where the position is not a target)."""
        out = np.zeros(inp.length, dtype=np.int64)
        for p in np.nonzero(inp.mask)[0]:
            out[p] = self.vocab.id_to_class(int(inp.ids[p]))
        return out


def _prediction_rows(model: ArModel, inp: ArInput):
    """(logits, targets, mask) for the rows that predict the audio region."""
    start, stop = inp.prompt_length - 1, inp.length - 1
    if stop <= start or not inp.mask[start + 1:stop + 1].any():
        return None
    h = model.hidden(inp)
    logits = model.head(T.slice_rows(h, start, stop))
    targets = model.targets(inp)[start + 1:stop + 1]
    return logits, targets, inp.mask[start + 1:stop + 1]


def teacher_forced_loss(model: ArModel, batch: Sequence[ArInput]) -> Tensor:
    """
    Mean next-token cross-entropy over every masked position in the batch.

    Raises:
        ContractError: no item in the batch has a target position
    """
    pieces = [r for r in (_prediction_rows(model, inp) for inp in pad_batch(batch, model.vocab))
              if r is not None]
    if not pieces:
        raise ContractError('teacher_forced_loss: the batch has no target positions')
    logits = pieces[0][0] if len(pieces) == 1 else T.concat_rows([p[0] for p in pieces])
    targets = np.concatenate([p[1] for p in pieces])
    mask = np.concatenate([p[2] for p in pieces])
    return T.masked_cross_entropy(logits, targets, mask)


def token_accuracy(model: ArModel, batch: Sequence[ArInput]) -> float:
    """Teacher-forced next-token accuracy over the masked positions."""
    correct = total = 0
    with T.no_grad():
        for inp in batch:
            rows = _prediction_rows(model, inp)
            if rows is None:
                continue
            logits, targets, mask = rows
            predicted = logits.data.argmax(axis=1)
            correct += int(((predicted == targets) & mask).sum())
            total += int(mask.sum())
    return correct / total if total else 0.0


def sample_class(scores: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    """Greedy when temperature <= 0 or top_k == 1; otherwise top-k sampling."""
    if sampling.greedy:
        return int(np.argmax(scores))
    scaled = scores.astype(np.float64) / sampling.temperature
    k = min(sampling.top_k, scaled.size) if sampling.top_k > 0 else scaled.size
    top = np.argpartition(-scaled, k - 1)[:k]
    top = top[np.argsort(-scaled[top], kind='stable')]
    probs = np.exp(scaled[top] - scaled[top].max())
    probs /= probs.sum()
    return int(top[rng.choice(k, p=probs)])


def generate(model: ArModel, text: str, bundle: Optional[ConditionBundle], lang: Optional[str] = None,
             emo: Optional[str] = None, sampling: SamplingConfig = SamplingConfig()) -> TokenSequence:
    """
    Sample audio tokens after e_BA until e_EA or max_tokens.

    The last generated token must still fit the context window, so at most
    ``context - prompt_length + 1`` tokens are sampled.

    Returns:
        TokenSequence; ``truncated`` is set when max_tokens or the context
        was reached first

    Raises:
        ConfigurationError: the prompt alone exceeds the context
    """
    prompt = assemble_sequence(text, None, bundle, lang, emo, model.vocab, model.variant.mode,
                               model.cfg.text_mode)
    if prompt.prompt_length > model.cfg.context:
        raise ConfigurationError(
            f'prompt of {prompt.prompt_length} positions exceeds context {model.cfg.context}; '
            'shorten the text')
    limit = min(sampling.max_tokens, model.cfg.context - prompt.prompt_length + 1)
    ids = list(prompt.ids[:prompt.prompt_length])
    rng = np.random.default_rng(sampling.seed)
    generated: List[int] = []
    truncated = True
    with T.no_grad():
        for _ in range(limit):
            step = ArInput(ids=np.array(ids, dtype=np.int64), mask=np.zeros(len(ids), dtype=bool),
                           n_prefix=prompt.n_prefix, prompt_length=len(ids),
                           text_span=prompt.text_span, s=prompt.s, c=prompt.c)
            h = model.hidden(step)
            scores = model.head(T.slice_rows(h, h.shape[0] - 1, h.shape[0])).data[0]
            cls = sample_class(scores, sampling, rng)
            if cls == model.vocab.eos_class:
                truncated = False
                break
            generated.append(cls)
            ids.append(model.vocab.class_to_id(cls))
    if truncated:
        logger.info('Generation stopped after %d tokens without e_EA (max_tokens=%d, context=%d)',
                    len(generated), sampling.max_tokens, model.cfg.context)
    return TokenSequence(np.array(generated, dtype=np.int64), truncated=truncated)
