"""
64-bit verification suites behind ``ptts.py selfcheck``.

Each check returns (passed, detail). A check that raises counts as a failure
and the remaining checks still run.
"""
import logging
from typing import Callable, List, Tuple

import numpy as np

from pilot_tts import dsp
from pilot_tts import tensor as T
from pilot_tts.ar_model import DecoderBlock, assemble_sequence
from pilot_tts.cfm import CfmConfig, DecoderCondition, DitBlock, DitLite, ExactField, FlowPathConfig, \
    cfm_loss, euler_sample, ot_path
from pilot_tts.conditioner import ConditionBundle, QFormer
from pilot_tts.corpus import cross_sample_pairs, mixed_prompt_pairs, truncation_set
from pilot_tts.fsq import FsqConfig, FsqTokenizer, TokenSequence, index_to_code, token_index, tokenize_audio
from pilot_tts.gradcheck import check_gradients
from pilot_tts.items import make_record
from pilot_tts.vocab import build_vocab

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
F64 = np.float64


def _module_loss(forward: Callable, rng: np.random.Generator):
    """Scalar loss through ``forward`` against a fixed random target."""
    target = {}

    def fn():
        out = forward()
        if 'y' not in target:
            target['y'] = rng.standard_normal(out.shape)
        return T.mse(out, T.constant(target['y'], like=out))
    return fn


def check_fsq_exactness() -> Tuple[bool, str]:
    cfg = FsqConfig()
    ids = np.arange(cfg.codebook_size)
    ok = cfg.codebook_size == 6561 and np.array_equal(token_index(index_to_code(ids, cfg), cfg), ids)
    return ok, f'{cfg.codebook_size} ids round-trip'


def check_token_rate() -> Tuple[bool, str]:
    rng = np.random.default_rng(0)
    w = dsp.Waveform(0.1 * rng.standard_normal(32000))
    count = len(tokenize_audio(w, FsqTokenizer(FsqConfig(), np.random.default_rng(0))))
    return 48 <= count <= 50, f'{count} tokens for 2.0 s'


def check_flow_oracle() -> Tuple[bool, str]:
    rng = np.random.default_rng(1)
    cfg = FlowPathConfig(sigma_min=1e-4)
    worst = 0.0
    h = 1e-6
    for _ in range(1000):
        x0, x1 = rng.standard_normal((2, 4, 3))
        t = float(rng.uniform(h, 1.0 - h))
        _, u = ot_path(x0, x1, t, cfg)
        numeric = (ot_path(x0, x1, t + h, cfg)[0] - ot_path(x0, x1, t - h, cfg)[0]) / (2 * h)
        worst = max(worst, float(np.abs(numeric - u).max()))
    x1 = rng.standard_normal((8, 80))
    sampled = euler_sample(ExactField(x1, 0.0), None, 8, FlowPathConfig(0.0, 1), seed=3)
    endpoint = float(np.abs(sampled - x1).max())
    return worst < 1e-8 and endpoint < 1e-10, f'fd err {worst:.1e}, endpoint err {endpoint:.1e}'


def check_gradient_suite() -> Tuple[bool, str]:
    rng = np.random.default_rng(2)
    d = 8
    results = []

    x = T.parameter(rng.standard_normal((5, d)), dtype=F64)
    w = T.parameter(rng.standard_normal((d, d)), dtype=F64)
    row = T.parameter(rng.standard_normal((1, d)), dtype=F64)
    gamma = T.parameter(1.0 + 0.1 * rng.standard_normal(d), dtype=F64)
    beta = T.parameter(0.1 * rng.standard_normal(d), dtype=F64)
    ops = {
        'matmul': lambda: T.mean_all(T.tanh(T.matmul(x, w))),
        'rows': lambda: T.mean_all(T.gelu(T.mul_row(T.add_row(x, row), row))),
        'softmax': lambda: T.sum_all(T.mul(T.softmax_rows(x), x)),
        'layer_norm': lambda: T.sum_all(T.mul(T.layer_norm(x, gamma, beta), x)),
        'attention': lambda: T.mean_all(T.exp(T.scale(T.attention(x, x, x, causal=True), 0.5))),
        'cross_entropy': lambda: T.masked_cross_entropy(T.matmul(x, w), np.arange(5) % d,
                                                         np.array([1, 1, 0, 1, 1], dtype=bool)),
    }
    params = {'x': x, 'w': w, 'row': row, 'gamma': gamma, 'beta': beta}
    for name, fn in ops.items():
        results.append((name, check_gradients(fn, params, probes=40, rng=rng)))

    qformer = QFormer(6, d, rng, F64, n_queries=4, heads=2)
    feats = rng.standard_normal((7, 6))
    results.append(('qformer', check_gradients(_module_loss(lambda: qformer(feats), rng),
                                               qformer.parameters(), probes=60, rng=rng)))
    block = DecoderBlock(d, 2, rng, F64)
    hidden = T.constant(rng.standard_normal((6, d)), dtype=F64)
    results.append(('ar_block', check_gradients(_module_loss(lambda: block(hidden), rng),
                                                block.parameters(), probes=60, rng=rng)))
    dit = DitBlock(d, 2, rng, F64)
    time = T.constant(rng.standard_normal((1, d)), dtype=F64)
    results.append(('dit_block', check_gradients(_module_loss(lambda: dit(hidden, time), rng),
                                                 dit.parameters(), probes=60, rng=rng)))

    worst = max(results, key=lambda r: r[1].max_rel_error)
    ok = all(r.passed(GRAD_TOLERANCE) for _, r in results)
    return ok, f'worst {worst[0]} rel err {worst[1].max_rel_error:.1e}'


def check_sequence_layout() -> Tuple[bool, str]:
    rng = np.random.default_rng(4)
    vocab = build_vocab()
    bundle = ConditionBundle(s=np.zeros(64), c=T.constant(np.zeros((32, 8))))
    for _ in range(1000):
        n_text = int(rng.integers(0, 40))
        n_audio = int(rng.integers(1, 60))
        text = ''.join(chr(int(c)) for c in rng.integers(97, 123, size=n_text))
        tokens = TokenSequence(rng.integers(0, vocab.audio_size, size=n_audio))
        inp = assemble_sequence(text, tokens, bundle, vocab=vocab)
        if inp.length != 1 + 32 + 3 + n_text + 2 + n_audio + 1:
            return False, f'length {inp.length} for T_text={n_text}, N_audio={n_audio}'
        if inp.mask[:inp.prompt_length].any():
            return False, 'prompt position marked as a target'
    return True, '1000 random layouts'


def check_samplers() -> Tuple[bool, str]:
    records = []
    for s in range(4):
        for k in range(4):
            records.append(make_record(f's{s}_{k}', f'{s}_{k}.wav', 'x', f's{s}', 'zh', 1.0))
    stream = cross_sample_pairs(records, np.random.default_rng(5))
    for _ in range(100000):
        pair = next(stream)
        if pair.target['id'] == pair.reference['id'] or not pair.speaker_matched:
            return False, 'cross-sample produced a self or cross-speaker pair'

    dialect = []
    for s in range(2):
        for k in range(3):
            dialect.append(make_record(f'd{s}_{k}', f'd{s}_{k}.wav', 'x', f'd{s}', 'yue', 1.0))
        dialect.append(make_record(f'd{s}_zh', f'd{s}_zh.wav', 'x', f'd{s}', 'zh', 1.0))
    mixed = mixed_prompt_pairs(dialect, np.random.default_rng(6))
    mandarin = sum(next(mixed).reference['lang'] == 'zh' for _ in range(100000)) / 100000
    return 0.48 <= mandarin <= 0.52, f'Mandarin reference fraction {mandarin:.4f}'


def check_dsp_accuracy() -> Tuple[bool, str]:
    rng = np.random.default_rng(7)
    sr = 16000
    worst = 0.0
    for target in (0, 6, 12, 20, 30):
        n = sr * 2
        gate = np.zeros(n)
        gate[n // 4: 3 * n // 4] = 1.0
        noise = rng.standard_normal(n) * 0.01
        tone = np.sin(2 * np.pi * 440.0 * np.arange(n) / sr) * np.sqrt(2.0) * 0.01 * 10 ** (target / 20)
        estimate = dsp.estimate_snr(dsp.Waveform(tone * gate + noise, sr))
        worst = max(worst, abs(estimate - target))
    tone = dsp.Waveform(np.sin(2 * np.pi * 1000.0 * np.arange(sr) / sr), sr)
    bin_hz = sr / 1024
    rolloff_err = abs(dsp.spectral_rolloff(tone) - 1000.0)
    flagged = [(any(dsp.detect_truncation(w).values()), cut) for w, cut in truncation_set(200, seed=9)]
    recall = np.mean([f for f, cut in flagged if cut])
    false_pos = np.mean([f for f, cut in flagged if not cut])
    ok = worst <= 0.5 and rolloff_err <= bin_hz and recall >= 0.95 and false_pos <= 0.05
    return ok, (f'snr err {worst:.2f} dB, rolloff err {rolloff_err:.1f} Hz, '
                f'truncation recall {recall:.2f} fp {false_pos:.2f}')


def check_cfm_smoke() -> Tuple[bool, str]:
    rng = np.random.default_rng(8)
    cfg = CfmConfig(d_model=16, blocks=1, heads=2, n_mels=8, speaker_dim=4, codebook_size=27)
    model = DitLite(cfg, rng, F64)
    cond = DecoderCondition(ref_mel=rng.standard_normal((6, 8)), s=rng.standard_normal(4),
                            tokens=TokenSequence([1, 5, 26]))
    x1 = rng.standard_normal((12, 8))
    loss = cfm_loss(model, cond, x1, np.random.default_rng(0)).item()
    exact = cfm_loss(ExactField(x1, 1e-4), cond, x1, np.random.default_rng(0),
                     FlowPathConfig(sigma_min=1e-4)).item()
    return np.isfinite(loss) and exact < 1e-20, f'loss {loss:.3f}, exact-field loss {exact:.1e}'


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ('fsq_exactness', check_fsq_exactness),
    ('token_rate', check_token_rate),
    ('flow_field_oracle', check_flow_oracle),
    ('gradient_suite', check_gradient_suite),
    ('sequence_layout', check_sequence_layout),
    ('sampler_statistics', check_samplers),
    ('dsp_accuracy', check_dsp_accuracy),
    ('cfm_smoke', check_cfm_smoke),
]


def run_selfcheck() -> List[Tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check()
        except Exception as e:
            logger.warning('Self-check %s raised: %s', name, e)
            passed, detail = False, f'{type(e).__name__}: {e}'
        results.append((name, bool(passed), detail))
    return results
