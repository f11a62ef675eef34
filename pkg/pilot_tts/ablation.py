"""
Conditioning ablation: full vs no speaker embedding vs no conditioning at all.

Every configuration is trained with the same step budget per seed and scored
on held-in pairs with two proxies:
    token_acc  1 - normalized token edit distance of greedy generations
    sim_proxy  speaker-embedding cosine between the reference and the
               generated tokens rendered through the tokenizer decoder
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import textdistance
from tqdm import tqdm

from pilot_tts import dsp
from pilot_tts import tensor as T
from pilot_tts.ar_model import VARIANTS, ArModel, SamplingConfig, generate
from pilot_tts.conditioner import (MIN_SPEAKER_SECONDS, FrozenFeaturizer, cosine,
                                   featurizer_from_settings)
from pilot_tts.config import RunConfig
from pilot_tts.dsp import MelConfig
from pilot_tts.export_utils import ExportUtils
from pilot_tts.fsq import FsqTokenizer, index_to_code
from pilot_tts.trainer import Utterance, eval_pairs, load_tokenizer, prepare_utterances, train_ar

logger = logging.getLogger(__name__)


def token_accuracy_proxy(generated: Sequence[int], reference: Sequence[int]) -> float:
    """1 - normalized Levenshtein distance between two token sequences."""
    if not generated and not reference:
        return 1.0
    return 1.0 - textdistance.levenshtein.normalized_distance(list(generated), list(reference))


def render_tokens(tokens: np.ndarray, tokenizer: FsqTokenizer, mel_cfg: MelConfig,
                  iters: int, seed: int) -> dsp.Waveform:
    """Tokens -> tokenizer decoder mel -> Griffin-Lim audio."""
    digits = index_to_code(np.asarray(tokens, dtype=np.int64), tokenizer.cfg)
    with T.no_grad():
        mel = tokenizer.decode(T.constant(digits, dtype=tokenizer.dtype)).data
    log_mel = dsp.denormalize_mel(mel.astype(np.float64), mel_cfg)
    return dsp.griffin_lim(log_mel, iters, mel_cfg, seed=seed)


def evaluate_variant(model: ArModel, pairs, tokenizer: FsqTokenizer, featurizer: FrozenFeaturizer,
                     mel_cfg: MelConfig, sampling: SamplingConfig, iters: int, seed: int) -> Dict:
    accuracies, similarities = [], []
    for target, reference in pairs:
        bundle = model.condition(reference.content, reference.speaker)
        tokens = generate(model, target.record['text'], bundle, target.record['lang'],
                          target.record.get('emo'), sampling)
        accuracies.append(token_accuracy_proxy(tokens.tolist(), target.tokens.tolist()))
        if len(tokens) == 0:
            similarities.append(0.0)
            continue
        audio = render_tokens(tokens.ids, tokenizer, mel_cfg, iters, seed)
        if audio.duration_s < MIN_SPEAKER_SECONDS:
            logger.info('Generated audio for %s too short for a speaker embedding', target.id)
            similarities.append(0.0)
            continue
        similarities.append(cosine(featurizer.speaker_embed(audio), reference.speaker))
    return {'token_acc': float(np.mean(accuracies)), 'sim_proxy': float(np.mean(similarities))}


def run_ablation(cfg: RunConfig, seeds: Optional[Sequence[int]] = None, steps: Optional[int] = None,
                 eval_utts: Optional[int] = None, out_csv: Optional[Path] = None,
                 progress: bool = False) -> Dict:
    """
    Train and score every variant for every seed.

    Returns:
        {'rows': [{config, seed, token_acc, sim_proxy}], 'steps': int,
         'csv': Path, 'meta': {...}}
    """
    settings = cfg.settings
    seeds = list(settings.getlist('ABLATION_SEEDS') if seeds is None else seeds)
    seeds = [int(s) for s in seeds]
    steps = settings.getint('ABLATION_STEPS') if steps is None else steps
    eval_utts = settings.getint('ABLATION_EVAL_UTTS') if eval_utts is None else eval_utts
    mel_cfg = MelConfig.from_settings(settings)

    utterances: List[Utterance] = prepare_utterances(cfg, 'ar')
    tokenizer = load_tokenizer(cfg)
    featurizer = featurizer_from_settings(settings, mel_cfg)
    iters = settings.getint('GRIFFIN_LIM_ITERS')

    rows = []
    budget = {}
    jobs = [(seed, variant) for seed in seeds for variant in VARIANTS]
    for seed, variant in tqdm(jobs, desc='Ablation', unit='run', disable=not progress):
        model, losses, _ = train_ar(cfg, utterances, steps, variant=variant, seed=seed,
                                    pairing='cross_sample')
        budget[(variant, seed)] = losses[-1][0]
        pairs = eval_pairs(utterances, 'cross_sample', seed)[:eval_utts]
        sampling = SamplingConfig(top_k=1, temperature=0.0, max_tokens=cfg.sampling.max_tokens,
                                  seed=seed)
        scores = evaluate_variant(model, pairs, tokenizer, featurizer, mel_cfg, sampling, iters, seed)
        rows.append({'config': variant, 'seed': seed, **scores})
        logger.info('Ablation %s seed %d: %s', variant, seed, scores)

    meta = {
        'configs': list(VARIANTS),
        'seeds': seeds,
        'steps': steps,
        'equal_step_budget': len(set(budget.values())) <= 1,
        'eval_utts': eval_utts,
    }
    out_csv = Path(out_csv) if out_csv else cfg.paths.reports / 'ablation.csv'
    ExportUtils.write_ablation_csv(out_csv, rows)
    out_csv.with_suffix('.json').write_text(ExportUtils.export_to_json(meta), encoding='utf-8')
    return {'rows': rows, 'steps': steps, 'csv': out_csv, 'meta': meta}
