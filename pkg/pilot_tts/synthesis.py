"""
Zero-shot synthesis: reference conditioning -> AR tokens -> CFM mel -> Griffin-Lim.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from pilot_tts import dsp
from pilot_tts.ar_model import ArModel, SamplingConfig, generate
from pilot_tts.cfm import DecoderCondition, DitLite, FlowPathConfig, euler_sample
from pilot_tts.checkpoint import save_tensor_file
from pilot_tts.conditioner import FrozenFeaturizer, featurizer_from_settings
from pilot_tts.config import RunConfig
from pilot_tts.dsp import MelConfig, Waveform
from pilot_tts.exceptions import EmptyInputError
from pilot_tts.export_utils import ExportUtils
from pilot_tts.trainer import load_ar, load_cfm, load_tokenizer
from pilot_tts.vocab import DEFAULT_EMO, DEFAULT_LANG, build_vocab
from pilot_tts.wavio import read_wav, write_wav

logger = logging.getLogger(__name__)

MEL_TENSOR_NAME = 'mel'


@dataclass
class SynthesisResult:
    mel: np.ndarray
    waveform: Waveform
    tokens: np.ndarray
    truncated: bool
    meta: Dict


def synthesize_mel(ar: ArModel, cfm: DitLite, featurizer: FrozenFeaturizer, text: str,
                   reference: Waveform, lang: Optional[str], emo: Optional[str],
                   sampling: SamplingConfig, flow: FlowPathConfig, mel_cfg: MelConfig,
                   seed: int):
    """
    Normalized mel for ``text`` in the reference voice.

    Returns:
        (mel frames x n_mels, TokenSequence)
    """
    content = featurizer.content_features(reference)
    speaker = featurizer.speaker_embed(reference)
    bundle = ar.condition(content, speaker)
    tokens = generate(ar, text, bundle, lang, emo, replace(sampling, seed=seed))
    if len(tokens) == 0:
        raise EmptyInputError('the model ended the utterance before emitting any audio token')
    ref_mel = dsp.normalize_mel(dsp.mel_spectrogram(reference, mel_cfg), mel_cfg)
    cond = DecoderCondition(ref_mel=ref_mel, s=speaker, tokens=tokens)
    mel = euler_sample(cfm, cond, cond.frames, flow, seed=seed, n_mels=mel_cfg.n_mels)
    return mel, tokens


def synthesize(cfg: RunConfig, text: str, ref_audio: Union[str, Path], out_wav: Union[str, Path],
               out_mel: Union[str, Path], lang: Optional[str] = None, emo: Optional[str] = None,
               seed: Optional[int] = None) -> SynthesisResult:
    """
    Full inference run writing a WAV, the mel tensor file and a metadata JSON
    next to the WAV.

    Raises:
        VocabError: unknown lang / emo tag (checked before anything is loaded)
        DependencyError: a checkpoint is missing
    """
    vocab = build_vocab(cfg.fsq.codebook_size)
    vocab.lang_id(lang or DEFAULT_LANG)
    vocab.emo_id(emo or DEFAULT_EMO)
    seed = cfg.seed if seed is None else seed
    mel_cfg = MelConfig.from_settings(cfg.settings)

    load_tokenizer(cfg)
    ar = load_ar(cfg)
    cfm = load_cfm(cfg)
    reference = read_wav(ref_audio, mel_cfg.sample_rate)
    featurizer = featurizer_from_settings(cfg.settings, mel_cfg)

    mel, tokens = synthesize_mel(ar, cfm, featurizer, text, reference, lang, emo, cfg.sampling,
                                 cfg.flow, mel_cfg, seed)
    mel32 = mel.astype(np.float32)
    save_tensor_file(out_mel, MEL_TENSOR_NAME, mel32)
    waveform = dsp.griffin_lim(dsp.denormalize_mel(mel32.astype(np.float64), mel_cfg),
                               cfg.settings.getint('GRIFFIN_LIM_ITERS'), mel_cfg, seed=seed)
    write_wav(out_wav, waveform)

    meta = {
        'text': text,
        'lang': lang or DEFAULT_LANG,
        'emo': emo or DEFAULT_EMO,
        'seed': seed,
        'reference': str(ref_audio),
        'tokens': tokens.tolist(),
        'truncated': tokens.truncated,
        'frames': int(mel.shape[0]),
        'variant': ar.cfg.variant,
        'sampling': {'top_k': cfg.sampling.top_k, 'temperature': cfg.sampling.temperature,
                     'max_tokens': cfg.sampling.max_tokens},
        'cfm_steps': cfg.flow.steps,
    }
    meta_path = Path(out_wav).with_suffix('.json')
    meta_path.write_text(ExportUtils.export_to_json(meta), encoding='utf-8')
    logger.info('Synthesized %d tokens (%d mel frames) to %s', len(tokens), mel.shape[0], out_wav)
    return SynthesisResult(mel32, waveform, tokens.ids, tokens.truncated, meta)
