#!/usr/bin/env python
"""
Main script for the pilot_tts desk-scale speech synthesis stack.

Usage:
    python ptts.py corpus [--out DIR] [--speakers N] [--utts N] [--truncated N]
    python ptts.py curate <in_manifest> <out_manifest> [--policy.min_snr_db=20]
    python ptts.py train --stage {tokenizer,ar,cfm} [--steps N]
    python ptts.py synth --text TEXT --ref REF.wav [--lang zh] [--emo happy]
    python ptts.py ablate [--seeds 0,1,2,3,4] [--steps N]
    python ptts.py selfcheck

Every command accepts --config FILE (key=value lines with dotted keys),
--set key=value and --dotted.key=value overrides, and -v for INFO logging.

Exit codes: 0 success, 1 self-check failure, 2 usage, 3 missing dependency,
4 bad data.
"""
import os
import sys

# Single-threaded BLAS keeps training byte-reproducible; --parallel opts out.
if '--parallel' not in sys.argv:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ.setdefault(_var, '1')

import argparse
import logging
from pathlib import Path
from typing import List, Optional

from scrapy.utils.log import configure_logging

from pilot_tts import __version__
from pilot_tts.config import RunConfig, get_settings, parse_overrides
from pilot_tts.exceptions import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, ConfigurationError, PilotTTSError
from pilot_tts.export_utils import ExportUtils

logger = logging.getLogger('ptts')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Curate a speech corpus, train the tokenizer / AR / CFM stages and synthesize.'
    )
    parser.add_argument('--version', action='version', version=f'pilot_tts {__version__}')
    parser.add_argument('--config', help='key=value config file')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a setting (repeatable)')
    parser.add_argument('-v', '--verbose', action='store_true', help='Log at INFO level')
    parser.add_argument('--parallel', action='store_true',
                        help='Let BLAS use every core (training is no longer byte-reproducible)')
    parser.add_argument('--no-progress', action='store_true', help='Disable progress bars')
    sub = parser.add_subparsers(dest='command', metavar='command')

    corpus = sub.add_parser('corpus', help='Build the synthetic demo corpus')
    corpus.add_argument('--out', help='Output directory (default: paths.corpus)')
    corpus.add_argument('--speakers', type=int, help='Number of speakers')
    corpus.add_argument('--utts', type=int, help='Utterances per speaker')
    corpus.add_argument('--langs', help='Comma-separated language tags, assigned round-robin')
    corpus.add_argument('--seed', type=int, help='Corpus seed')
    corpus.add_argument('--truncated', type=int, help='Number of hard-cut records')

    curate = sub.add_parser('curate', help='Annotate and filter a manifest')
    curate.add_argument('in_manifest', help='Input JSONL manifest')
    curate.add_argument('out_manifest', help='Output JSONL manifest (every record, tagged)')
    curate.add_argument('--workers', type=int, help='Annotation threads')
    curate.add_argument('--scorers', help='Comma-separated scorer names')

    train = sub.add_parser('train', help='Train one stage')
    train.add_argument('--stage', required=True, choices=('tokenizer', 'ar', 'cfm'))
    train.add_argument('--steps', type=int, help='Optimisation steps (default from settings)')
    train.add_argument('--manifest', help='Training manifest (default: the corpus manifest)')
    train.add_argument('--variant', choices=('full', 'no_spk', 'no_both'), help='AR variant')
    train.add_argument('--pairing', choices=('cross_sample', 'mixed_prompt'), help='AR pairing')
    train.add_argument('--seed', type=int, help='Training seed')

    synth = sub.add_parser('synth', help='Synthesize speech for a text in a reference voice')
    synth.add_argument('--text', required=True)
    synth.add_argument('--ref', required=True, help='Reference WAV')
    synth.add_argument('--lang', help='Language / dialect tag (default zh)')
    synth.add_argument('--emo', help='Emotion tag (default neutral)')
    synth.add_argument('--seed', type=int)
    synth.add_argument('--out-wav', default='synth.wav')
    synth.add_argument('--out-mel', default='synth.mel.ptts')

    ablate = sub.add_parser('ablate', help='Compare full / no_spk / no_both conditioning')
    ablate.add_argument('--seeds', help='Comma-separated seeds')
    ablate.add_argument('--steps', type=int, help='Step budget per configuration')
    ablate.add_argument('--out', help='Report CSV (default: paths.reports/ablation.csv)')

    sub.add_parser('selfcheck', help='Run the 64-bit verification suites')
    return parser


def split_overrides(extra: List[str]) -> List[str]:
    """Leftover '--section.key=value' arguments; anything else is a usage error."""
    overrides = []
    for arg in extra:
        if arg.startswith('--') and '=' in arg and '.' in arg.split('=', 1)[0]:
            overrides.append(arg[2:])
        else:
            raise ConfigurationError(f'unrecognized argument: {arg}')
    return overrides


def cmd_corpus(args, cfg: RunConfig, progress: bool) -> int:
    from pilot_tts.corpus import make_corpus

    settings = cfg.settings
    out = Path(args.out) if args.out else cfg.paths.corpus
    langs = args.langs.split(',') if args.langs else settings.getlist('CORPUS_LANGS')
    records = make_corpus(
        out,
        n_speakers=args.speakers or settings.getint('CORPUS_SPEAKERS'),
        utts_per_speaker=args.utts or settings.getint('CORPUS_UTTS'),
        langs=langs,
        seed=cfg.seed if args.seed is None else args.seed,
        truncated=settings.getint('CORPUS_TRUNCATED') if args.truncated is None else args.truncated,
        mandarin_parallel=settings.getint('CORPUS_MANDARIN_PARALLEL'),
        progress=progress,
    )
    speakers = {r['speaker_id'] for r in records}
    print("\n" + "=" * 60)
    print("CORPUS SUMMARY")
    print("=" * 60)
    print(f"Records:  {len(records)}")
    print(f"Speakers: {len(speakers)}")
    print(f"Manifest: {out / 'manifest.jsonl'}")
    print("=" * 60 + "\n")
    return EXIT_OK


def cmd_curate(args, cfg: RunConfig, progress: bool) -> int:
    from pilot_tts.pipelines import run_pipeline
    from pilot_tts.quality_analyzer import QualityAnalyzer

    settings = cfg.settings
    names = args.scorers.split(',') if args.scorers else settings.getlist('CURATION_SCORERS')
    summary = run_pipeline(args.in_manifest, args.out_manifest, cfg.policy,
                           QualityAnalyzer(names, settings),
                           workers=args.workers or settings.getint('CURATION_WORKERS'),
                           progress=progress)
    print(ExportUtils.curation_report(summary))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, progress: bool) -> int:
    from pilot_tts.trainer import run_stage

    result = run_stage(cfg, args.stage, steps=args.steps, manifest=args.manifest, progress=progress)
    print(ExportUtils.training_report(result.stage, result.steps, result.initial_loss,
                                      result.final_loss, result.checkpoint, result.loss_log))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig, progress: bool) -> int:
    from pilot_tts.synthesis import synthesize

    result = synthesize(cfg, args.text, args.ref, args.out_wav, args.out_mel, lang=args.lang,
                        emo=args.emo, seed=args.seed)
    print("\n" + "=" * 60)
    print("SYNTHESIS SUMMARY")
    print("=" * 60)
    print(f"Tokens:     {len(result.tokens)}{' (hit max_tokens)' if result.truncated else ''}")
    print(f"Mel frames: {result.mel.shape[0]}")
    print(f"Duration:   {result.waveform.duration_s:.2f} s")
    print(f"WAV:        {args.out_wav}")
    print(f"Mel:        {args.out_mel}")
    print("=" * 60 + "\n")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, progress: bool) -> int:
    from pilot_tts.ablation import run_ablation

    seeds = [int(s) for s in args.seeds.split(',')] if args.seeds else None
    report = run_ablation(cfg, seeds=seeds, steps=args.steps, out_csv=args.out, progress=progress)
    print(ExportUtils.ablation_report(report['rows'], report['steps']))
    print(f"Report: {report['csv']}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: RunConfig, progress: bool) -> int:
    from pilot_tts.selfcheck import run_selfcheck

    results = run_selfcheck()
    print(ExportUtils.selfcheck_report(results))
    return EXIT_OK if all(passed for _, passed, _ in results) else EXIT_CHECK_FAILED


COMMANDS = {
    'corpus': cmd_corpus,
    'curate': cmd_curate,
    'train': cmd_train,
    'synth': cmd_synth,
    'ablate': cmd_ablate,
    'selfcheck': cmd_selfcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    try:
        overrides = parse_overrides(args.set + split_overrides(extra))
        if args.verbose:
            overrides['LOG_LEVEL'] = 'INFO'
        if getattr(args, 'seed', None) is not None and args.command in ('train', 'corpus'):
            overrides['SEED'] = args.seed
        if getattr(args, 'variant', None):
            overrides['AR_VARIANT'] = args.variant
        if getattr(args, 'pairing', None):
            overrides['AR_PAIRING'] = args.pairing
        settings = get_settings(args.config, overrides)
        configure_logging(settings)
        cfg = RunConfig.from_settings(settings)
        logger.info('Running %s', args.command)
        progress = settings.getbool('PROGRESS') and not args.no_progress and sys.stderr.isatty()
        return COMMANDS[args.command](args, cfg, progress)
    except PilotTTSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return PilotTTSError.exit_code


if __name__ == '__main__':
    sys.exit(main())
