"""
Training stages: FSQ tokenizer, autoregressive model, CFM decoder.

Each stage reads the corpus manifest, trains with Adam for a fixed step
budget, and writes a checkpoint, its JSON sidecar and a step,loss CSV whose
step-0 row is the loss over the whole training set at initialization.
Runs are deterministic given the seed.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from pilot_tts import dsp
from pilot_tts import tensor as T
from pilot_tts.ar_model import ArConfig, ArInput, ArModel, assemble_sequence, teacher_forced_loss
from pilot_tts.cfm import DecoderCondition, DitLite, cfm_loss
from pilot_tts.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from pilot_tts.conditioner import FrozenFeaturizer, featurizer_from_settings
from pilot_tts.config import RunConfig
from pilot_tts.corpus import cross_sample_pairs, mixed_prompt_pairs
from pilot_tts.dsp import MelConfig, Waveform
from pilot_tts.exceptions import ConfigurationError, ContractError, EmptyInputError
from pilot_tts.export_utils import ExportUtils
from pilot_tts.fsq import FRAMES_PER_TOKEN, FsqTokenizer, TokenSequence, tokenize_audio
from pilot_tts.items import SampleRecord
from pilot_tts.layers import Adam, Module
from pilot_tts.pipelines import read_manifest, resolve_audio_path
from pilot_tts.tensor import Graph, Tensor
from pilot_tts.vocab import DIALECTS, build_vocab
from pilot_tts.wavio import read_wav

logger = logging.getLogger(__name__)

STAGES = ('tokenizer', 'ar', 'cfm')
UPSTREAM = {'tokenizer': (), 'ar': ('tokenizer',), 'cfm': ('tokenizer',)}
EVAL_SEED_OFFSET = 7919


@dataclass
class Utterance:
    """One training record with its cached features."""
    record: SampleRecord
    waveform: Waveform
    mel: np.ndarray
    tokens: Optional[TokenSequence] = None
    content: Optional[np.ndarray] = None
    speaker: Optional[np.ndarray] = None

    @property
    def id(self) -> str:
        return self.record['id']

    @property
    def target_mel(self) -> np.ndarray:
        """Normalized mel cut to four frames per token."""
        return self.mel[:FRAMES_PER_TOKEN * len(self.tokens)]


@dataclass
class TrainResult:
    stage: str
    steps: int
    losses: List[Tuple[int, float]]
    final_loss: float
    model: Module
    checkpoint: Optional[Path] = None
    loss_log: Optional[Path] = None
    meta: Dict = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return self.losses[0][1]


def load_utterances(manifest: Union[str, Path], mel_cfg: MelConfig) -> List[Utterance]:
    """
    Records of a manifest with audio and normalized mel.

    Records a curated manifest marks ``kept: false`` are skipped.
    """
    manifest = Path(manifest)
    records = [r for r in read_manifest(manifest) if r.get('kept', True)]
    if not records:
        raise EmptyInputError(f'{manifest}: no usable records')
    utterances = []
    for record in records:
        w = read_wav(resolve_audio_path(record, manifest.parent), mel_cfg.sample_rate)
        mel = dsp.normalize_mel(dsp.mel_spectrogram(w, mel_cfg), mel_cfg)
        utterances.append(Utterance(record, w, mel))
    return utterances


def attach_tokens(utterances: Sequence[Utterance], tokenizer: FsqTokenizer, mel_cfg: MelConfig):
    for utt in utterances:
        utt.tokens = tokenize_audio(utt.waveform, tokenizer, mel_cfg)


def attach_features(utterances: Sequence[Utterance], featurizer: FrozenFeaturizer):
    for utt in utterances:
        utt.content = featurizer.content_features(utt.waveform)
        utt.speaker = featurizer.speaker_embed(utt.waveform)


def mean_loss(losses: Sequence[Tensor]) -> Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return T.scale(total, 1.0 / len(losses))


def fit(model: Module, batch_loss: Callable[[int], Tensor], evaluate: Callable[[], float],
        steps: int, lr: float, clip_norm: float, desc: str = 'Training',
        progress: bool = False) -> Tuple[List[Tuple[int, float]], float]:
    """
    Adam loop shared by every stage.

    Args:
        model: Module whose parameters are optimised
        batch_loss: step -> scalar loss of that step's batch
        evaluate: Full-set loss under no_grad
        steps: Number of updates (0 leaves the model untouched)
        lr: Learning rate
        clip_norm: Global gradient norm cap

    Returns:
        (loss rows, final full-set loss); row 0 is the initial full-set loss,
        row k the batch loss of step k before its update
    """
    graph = Graph(model.named_parameters())
    optimizer = Adam(graph.parameters, lr=lr, clip_norm=clip_norm)
    rows = [(0, evaluate())]
    bar = tqdm(range(1, steps + 1), desc=desc, unit='step', disable=not progress)
    for step in bar:
        loss = batch_loss(step)
        value = loss.item()
        if not np.isfinite(value):
            raise ContractError(f'{desc}: loss became {value} at step {step}')
        optimizer.step(graph.backward(loss))
        rows.append((step, value))
        bar.set_postfix(loss=f'{value:.4f}')
    bar.close()
    final = evaluate() if steps else rows[0][1]
    return rows, final


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def train_tokenizer(cfg: RunConfig, utterances: Sequence[Utterance], steps: int,
                    progress: bool = False) -> Tuple[FsqTokenizer, List, float]:
    rng = np.random.default_rng(cfg.seed)
    tokenizer = FsqTokenizer(cfg.fsq, np.random.default_rng(cfg.seed), n_mels=cfg.cfm.n_mels)
    mels = [u.mel for u in utterances if u.mel.shape[0] >= FRAMES_PER_TOKEN]
    if not mels:
        raise EmptyInputError('no utterance is long enough for one token')
    size = min(cfg.train.batch, len(mels))

    def batch_loss(step):
        picks = rng.choice(len(mels), size=size, replace=False)
        return mean_loss([tokenizer.reconstruction_loss(mels[int(i)]) for i in picks])

    def evaluate():
        with T.no_grad():
            return mean_loss([tokenizer.reconstruction_loss(m) for m in mels]).item()

    rows, final = fit(tokenizer, batch_loss, evaluate, steps, cfg.train.lr, cfg.train.clip_norm,
                      'tokenizer', progress)
    return tokenizer, rows, final


def pair_stream(utterances: Sequence[Utterance], pairing: str, rng: np.random.Generator):
    """PairedExample stream over the records, mapped back to Utterances."""
    by_id = {u.id: u for u in utterances}
    records = [u.record for u in utterances]
    if pairing == 'cross_sample':
        stream = cross_sample_pairs(records, rng)
    elif pairing == 'mixed_prompt':
        stream = mixed_prompt_pairs(records, rng)
    else:
        raise ConfigurationError(f'unknown pairing {pairing!r}')
    for pair in stream:
        yield by_id[pair.target['id']], by_id[pair.reference['id']]


def ar_input(model: ArModel, target: Utterance, reference: Utterance) -> ArInput:
    bundle = model.condition(reference.content, reference.speaker)
    return assemble_sequence(target.record['text'], target.tokens, bundle,
                             lang=target.record['lang'], emo=target.record.get('emo'),
                             vocab=model.vocab, variant=model.variant.mode,
                             text_mode=model.cfg.text_mode)


def eval_pairs(utterances: Sequence[Utterance], pairing: str, seed: int
               ) -> List[Tuple[Utterance, Utterance]]:
    """One fixed (target, reference) pair per target utterance."""
    if pairing == 'mixed_prompt':
        wanted = {u.id for u in utterances if u.record['lang'] in DIALECTS}
    else:
        wanted = {u.id for u in utterances}
    stream = pair_stream(utterances, pairing, np.random.default_rng(seed + EVAL_SEED_OFFSET))
    seen: Dict[str, Tuple[Utterance, Utterance]] = {}
    while len(seen) < len(wanted):
        target, reference = next(stream)
        seen.setdefault(target.id, (target, reference))
    return [seen[k] for k in sorted(seen)]


def train_ar(cfg: RunConfig, utterances: Sequence[Utterance], steps: int,
             variant: Optional[str] = None, seed: Optional[int] = None, pairing: Optional[str] = None,
             progress: bool = False) -> Tuple[ArModel, List, float]:
    """
    Teacher-forced training on cross-sample (or mixed-prompt) pairs.

    Utterances must already carry tokens and frozen features.
    """
    seed = cfg.seed if seed is None else seed
    pairing = pairing or cfg.train.pairing
    ar_cfg = cfg.ar if variant is None else ArConfig(**{**asdict(cfg.ar), 'variant': variant})
    vocab = build_vocab(cfg.fsq.codebook_size)
    model = ArModel(ar_cfg, np.random.default_rng(seed), vocab=vocab)
    stream = pair_stream(utterances, pairing, np.random.default_rng(seed))
    fixed = eval_pairs(utterances, pairing, seed)

    def batch_loss(step):
        batch = [ar_input(model, *next(stream)) for _ in range(cfg.train.batch)]
        return teacher_forced_loss(model, batch)

    def evaluate():
        with T.no_grad():
            return teacher_forced_loss(model, [ar_input(model, t, r) for t, r in fixed]).item()

    rows, final = fit(model, batch_loss, evaluate, steps, cfg.train.lr, cfg.train.clip_norm,
                      f'ar ({ar_cfg.variant})', progress)
    return model, rows, final


def decoder_condition(target: Utterance, reference: Utterance) -> DecoderCondition:
    return DecoderCondition(ref_mel=reference.mel, s=reference.speaker, tokens=target.tokens)


def train_cfm(cfg: RunConfig, utterances: Sequence[Utterance], steps: int,
              progress: bool = False) -> Tuple[DitLite, List, float]:
    rng = np.random.default_rng(cfg.seed)
    model = DitLite(cfg.cfm, np.random.default_rng(cfg.seed))
    stream = pair_stream(utterances, 'cross_sample', np.random.default_rng(cfg.seed))
    fixed = eval_pairs(utterances, 'cross_sample', cfg.seed)

    def batch_loss(step):
        losses = []
        for _ in range(cfg.train.batch):
            target, reference = next(stream)
            losses.append(cfm_loss(model, decoder_condition(target, reference), target.target_mel,
                                   rng, cfg.flow))
        return mean_loss(losses)

    def evaluate():
        eval_rng = np.random.default_rng(cfg.seed + EVAL_SEED_OFFSET)
        with T.no_grad():
            return mean_loss([cfm_loss(model, decoder_condition(t, r), t.target_mel, eval_rng,
                                       cfg.flow) for t, r in fixed]).item()

    rows, final = fit(model, batch_loss, evaluate, steps, cfg.train.lr, cfg.train.clip_norm,
                      'cfm', progress)
    return model, rows, final


# ---------------------------------------------------------------------------
# Checkpoint loading
# ---------------------------------------------------------------------------

def load_tokenizer(cfg: RunConfig) -> FsqTokenizer:
    tensors, _ = load_checkpoint(cfg.paths.checkpoint('tokenizer'), stage='tokenizer')
    tokenizer = FsqTokenizer(cfg.fsq, np.random.default_rng(cfg.seed), n_mels=cfg.cfm.n_mels)
    tokenizer.load_state_dict(tensors)
    return tokenizer


def load_ar(cfg: RunConfig) -> ArModel:
    tensors, meta = load_checkpoint(cfg.paths.checkpoint('ar'), stage='ar')
    variant = meta.get('variant', cfg.ar.variant)
    model = ArModel(ArConfig(**{**asdict(cfg.ar), 'variant': variant}), np.random.default_rng(cfg.seed),
                    vocab=build_vocab(cfg.fsq.codebook_size))
    model.load_state_dict(tensors)
    return model


def load_cfm(cfg: RunConfig) -> DitLite:
    tensors, _ = load_checkpoint(cfg.paths.checkpoint('cfm'), stage='cfm')
    model = DitLite(cfg.cfm, np.random.default_rng(cfg.seed))
    model.load_state_dict(tensors)
    return model


def prepare_utterances(cfg: RunConfig, stage: str, manifest: Optional[Union[str, Path]] = None
                       ) -> List[Utterance]:
    """Load the manifest and attach what ``stage`` needs (upstream checkpoints first)."""
    mel_cfg = MelConfig.from_settings(cfg.settings)
    tokenizer = load_tokenizer(cfg) if 'tokenizer' in UPSTREAM[stage] else None
    utterances = load_utterances(manifest or cfg.paths.manifest, mel_cfg)
    if tokenizer is not None:
        attach_tokens(utterances, tokenizer, mel_cfg)
        attach_features(utterances, featurizer_from_settings(cfg.settings, mel_cfg))
    return utterances


def run_stage(cfg: RunConfig, stage: str, steps: Optional[int] = None,
              manifest: Optional[Union[str, Path]] = None, progress: bool = False) -> TrainResult:
    """
    Train one stage and write its checkpoint, sidecar and loss CSV.

    Raises:
        DependencyError: an upstream checkpoint is missing
    """
    if stage not in STAGES:
        raise ConfigurationError(f'unknown stage {stage!r}; valid stages: {", ".join(STAGES)}')
    steps = cfg.train.steps[stage] if steps is None else steps
    if steps < 0:
        raise ConfigurationError(f'steps must be >= 0, got {steps}')
    utterances = prepare_utterances(cfg, stage, manifest)
    logger.info('Training %s for %d steps on %d utterances', stage, steps, len(utterances))

    if stage == 'tokenizer':
        model, rows, final = train_tokenizer(cfg, utterances, steps, progress)
        config = asdict(cfg.fsq)
    elif stage == 'ar':
        model, rows, final = train_ar(cfg, utterances, steps, progress=progress)
        config = asdict(model.cfg)
    else:
        model, rows, final = train_cfm(cfg, utterances, steps, progress)
        config = asdict(cfg.cfm)

    meta = {
        'format_version': FORMAT_VERSION,
        'stage': stage,
        'seed': cfg.seed,
        'steps': steps,
        'utterances': len(utterances),
        'initial_loss': rows[0][1],
        'final_loss': final,
        'config': config,
    }
    if stage == 'ar':
        meta['variant'] = model.cfg.variant
        meta['pairing'] = cfg.train.pairing
        meta['vocab'] = model.vocab.layout()
        meta['parameters'] = model.num_parameters()
    checkpoint = save_checkpoint(cfg.paths.checkpoint(stage), model.state_dict(), meta)
    loss_log = ExportUtils.write_loss_csv(cfg.paths.loss_log(stage), rows)
    return TrainResult(stage, steps, rows, final, model, checkpoint, loss_log, meta)
