"""
Run configuration.

Settings are layered the scrapy way: the ``pilot_tts.settings`` module at
'default' priority, a flat key=value config file at 'project', and command
line overrides at 'cmdline'. Dotted lower-case keys map onto the upper-case
setting names (``policy.min_snr_db`` -> ``POLICY_MIN_SNR_DB``).
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from scrapy.settings import Settings

from pilot_tts import settings as default_settings
from pilot_tts.ar_model import ArConfig, SamplingConfig
from pilot_tts.cfm import CfmConfig, FlowPathConfig
from pilot_tts.exceptions import ConfigurationError
from pilot_tts.fsq import FsqConfig
from pilot_tts.pipelines import FilterPolicy

logger = logging.getLogger(__name__)

SEED_ENV = 'PTTS_SEED'
KNOWN_KEYS = frozenset(k for k in dir(default_settings) if k.isupper())


def setting_name(key: str) -> str:
    """'policy.min_snr_db' -> 'POLICY_MIN_SNR_DB'; unknown keys are a usage error."""
    name = key.strip().replace('.', '_').replace('-', '_').upper()
    if name not in KNOWN_KEYS:
        raise ConfigurationError(f'unknown config key {key!r}')
    return name


def parse_value(name: str, raw: str):
    """Coerce a text value to the type of the setting's default."""
    default = getattr(default_settings, name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ('1', '0', 'true', 'false', 'yes', 'no', 'on', 'off'):
                raise ValueError(raw)
            return lowered in ('1', 'true', 'yes', 'on')
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [part.strip() for part in raw.split(',') if part.strip()]
            if default and isinstance(default[0], int):
                return [int(i) for i in items]
            return items
        if default is None and raw.lower() in ('', 'none'):
            return None
    except ValueError:
        raise ConfigurationError(f'bad value {raw!r} for {name}')
    return raw


def read_config_file(path: Union[str, Path]) -> Dict[str, object]:
    """
    Parse a key=value file (``#`` comments, blank lines ignored).

    Returns:
        {SETTING_NAME: typed value}
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f'config file not found: {path}')
    values = {}
    for number, line in enumerate(path.read_text(encoding='utf-8').splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f'{path}:{number}: expected key=value, got {line!r}')
        key, raw = line.split('=', 1)
        name = setting_name(key)
        values[name] = parse_value(name, raw)
    return values


def parse_overrides(pairs: Iterable[str]) -> Dict[str, object]:
    """['policy.min_snr_db=999', ...] -> {SETTING_NAME: typed value}."""
    values = {}
    for pair in pairs:
        if '=' not in pair:
            raise ConfigurationError(f'override must be key=value, got {pair!r}')
        key, raw = pair.split('=', 1)
        name = setting_name(key.lstrip('-'))
        values[name] = parse_value(name, raw)
    return values


def get_settings(config_file: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, object]] = None) -> Settings:
    """
    Layered Settings object.

    PTTS_SEED is used only when neither the config file nor the overrides set
    the seed.
    """
    settings = Settings()
    settings.setmodule(default_settings, priority='default')
    file_values = read_config_file(config_file) if config_file else {}
    settings.setdict(file_values, priority='project')
    overrides = overrides or {}
    if 'SEED' not in file_values and 'SEED' not in overrides and os.environ.get(SEED_ENV):
        try:
            settings.set('SEED', int(os.environ[SEED_ENV]), priority='project')
        except ValueError:
            raise ConfigurationError(f'{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}')
    settings.setdict(overrides, priority='cmdline')
    return settings


@dataclass(frozen=True)
class RunPaths:
    corpus: Path
    checkpoints: Path
    reports: Path

    @property
    def manifest(self) -> Path:
        return self.corpus / 'manifest.jsonl'

    def checkpoint(self, stage: str) -> Path:
        return self.checkpoints / f'{stage}.ptts'

    def loss_log(self, stage: str) -> Path:
        return self.reports / f'{stage}_loss.csv'


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    batch: int
    clip_norm: float
    steps: Dict[str, int]
    pairing: str

    @classmethod
    def from_settings(cls, settings: Settings) -> 'TrainConfig':
        return cls(lr=settings.getfloat('TRAIN_LR'), batch=settings.getint('TRAIN_BATCH'),
                   clip_norm=settings.getfloat('TRAIN_CLIP_NORM'),
                   steps={'tokenizer': settings.getint('TRAIN_STEPS_TOKENIZER'),
                          'ar': settings.getint('TRAIN_STEPS_AR'),
                          'cfm': settings.getint('TRAIN_STEPS_CFM')},
                   pairing=settings.get('AR_PAIRING'))


@dataclass(frozen=True)
class RunConfig:
    """Everything one subcommand needs, materialised from Settings."""
    seed: int
    paths: RunPaths
    fsq: FsqConfig
    ar: ArConfig
    cfm: CfmConfig
    sampling: SamplingConfig
    flow: FlowPathConfig
    policy: FilterPolicy
    train: TrainConfig
    settings: Settings

    @classmethod
    def from_settings(cls, settings: Settings, base_dir: Union[str, Path] = '.',
                      create_dirs: bool = True) -> 'RunConfig':
        base = Path(base_dir)
        paths = RunPaths(*(
            (base / settings.get(name)).resolve()
            for name in ('PATHS_CORPUS', 'PATHS_CHECKPOINTS', 'PATHS_REPORTS')
        ))
        if create_dirs:
            for directory in (paths.checkpoints, paths.reports):
                directory.mkdir(parents=True, exist_ok=True)
        if settings.get('AR_PAIRING') not in ('cross_sample', 'mixed_prompt'):
            raise ConfigurationError(
                f"ar.pairing must be 'cross_sample' or 'mixed_prompt', got {settings.get('AR_PAIRING')!r}")
        try:
            return cls(
                seed=settings.getint('SEED'),
                paths=paths,
                fsq=FsqConfig.from_settings(settings),
                ar=ArConfig.from_settings(settings),
                cfm=CfmConfig.from_settings(settings),
                sampling=SamplingConfig.from_settings(settings),
                flow=FlowPathConfig.from_settings(settings),
                policy=FilterPolicy.from_settings(settings),
                train=TrainConfig.from_settings(settings),
                settings=settings,
            )
        except ValueError as e:
            raise ConfigurationError(str(e))
