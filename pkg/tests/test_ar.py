from dataclasses import replace

import numpy as np
import pytest

from pilot_tts import tensor as T
from pilot_tts.ar_model import (VARIANTS, ArConfig, ArModel, SamplingConfig, ablation_variant,
                                assemble_sequence, generate, pad_batch, sample_class,
                                teacher_forced_loss, token_accuracy)
from pilot_tts.conditioner import ConditionBundle
from pilot_tts.exceptions import ConfigurationError, ContractError, VocabError
from pilot_tts.fsq import TokenSequence
from pilot_tts.layers import Adam
from pilot_tts.vocab import (DIALECTS, EMO_TAGS, LANG_TAGS, build_vocab, encode_text, split_markers,
                             strip_markers)

F64 = np.float64
SMALL = build_vocab(audio_size=27)
TINY_AR = ArConfig(d_model=16, heads=2, blocks=1, context=256, speaker_dim=16, content_dim=16,
                   qformer_heads=2)


def _bundle(rows=32, width=8, speaker_dim=64):
    return ConditionBundle(s=np.zeros(speaker_dim), c=T.constant(np.zeros((rows, width))))


def _model(variant='full', vocab=SMALL, dtype=F64, seed=0):
    return ArModel(replace(TINY_AR, variant=variant), np.random.default_rng(seed), dtype, vocab)


def _item(model, text='hello', tokens=(1, 2, 3, 4), seed=1, **kwargs):
    rng = np.random.default_rng(seed)
    bundle = model.condition(rng.standard_normal((12, 16)), rng.standard_normal(16))
    seq = TokenSequence(list(tokens)) if tokens is not None else None
    return assemble_sequence(text, seq, bundle, vocab=model.vocab, variant=model.variant.mode,
                             **kwargs)


# vocabulary

def test_vocab_counts():
    vocab = build_vocab()
    assert vocab.audio_size == 6561
    assert len(LANG_TAGS) == 16 and len(DIALECTS) == 14
    assert len(EMO_TAGS) == 12
    assert vocab.layout()['audio'] == [256, 6816]


def test_vocab_ranges_are_disjoint():
    vocab = build_vocab()
    tagged = list(vocab.specials.values()) + list(vocab.langs.values()) + \
        list(vocab.emos.values()) + list(vocab.paraling.values())
    assert len(set(tagged)) == len(tagged)
    assert min(tagged) == 256 + 6561
    assert max(tagged) == vocab.size - 1


def test_head_classes_map_to_audio_or_end():
    vocab = build_vocab(audio_size=27)
    ids = [vocab.class_to_id(c) for c in range(vocab.head_size)]
    assert ids[-1] == vocab.special('e_EA')
    assert all(256 <= i < 256 + 27 for i in ids[:-1])
    assert [vocab.id_to_class(i) for i in ids] == list(range(vocab.head_size))
    with pytest.raises(VocabError):
        vocab.id_to_class(65)


def test_markers():
    assert split_markers('hi [laugh] there') == [('text', 'hi '), ('marker', 'LAUGH'),
                                                  ('text', ' there')]
    assert strip_markers('<laugh>ha</laugh>') == 'ha'
    vocab = build_vocab()
    explicit = encode_text('a[cough]', vocab)
    assert explicit == [97, vocab.marker_id('COUGH')]
    assert encode_text('a[cough]', vocab, mode='implicit') == [97]


def test_text_is_utf8_bytes():
    assert encode_text('好', build_vocab()) == list('好'.encode('utf-8'))


# sequence layout

def test_training_layout_length():
    inp = assemble_sequence('hello', TokenSequence(np.arange(10)), _bundle(), vocab=SMALL)
    assert inp.length == 54
    assert inp.n_targets == 11
    assert not inp.mask[:inp.prompt_length].any()
    assert inp.mask[inp.prompt_length:].all()


def test_inference_prompt_has_no_targets():
    inp = assemble_sequence('hello', None, _bundle(), vocab=SMALL)
    assert inp.length == 44
    assert inp.n_targets == 0


def test_layout_order():
    inp = assemble_sequence('ab', TokenSequence([5]), _bundle(), lang='en', emo='happy', vocab=SMALL)
    body = inp.ids[inp.n_prefix:].tolist()
    assert inp.n_prefix == 33
    assert body == [SMALL.special('e_BT'), SMALL.lang_id('en'), SMALL.emo_id('happy'), 97, 98,
                    SMALL.special('e_ET'), SMALL.special('e_BA'), 256 + 5, SMALL.special('e_EA')]
    assert inp.text_span == (36, 38)


def test_missing_tags_use_defaults():
    inp = assemble_sequence('hi', None, _bundle(), vocab=SMALL)
    assert inp.ids[inp.n_prefix + 1] == SMALL.lang_id('zh')
    assert inp.ids[inp.n_prefix + 2] == SMALL.emo_id('neutral')


def test_unknown_tags():
    with pytest.raises(VocabError):
        assemble_sequence('hi', None, _bundle(), emo='bored', vocab=SMALL)
    with pytest.raises(VocabError):
        assemble_sequence('hi', None, _bundle(), lang='xx', vocab=SMALL)


def test_variant_lengths():
    tokens = TokenSequence(np.arange(10))
    lengths = {v: assemble_sequence('hello', tokens, _bundle(), vocab=SMALL, variant=v).length
               for v in VARIANTS}
    assert lengths == {'full': 54, 'no_spk': 53, 'no_both': 21}
    assert assemble_sequence('hello', tokens, None, vocab=SMALL, variant='no_both').length == 21


def test_unknown_variant():
    with pytest.raises(ContractError):
        ablation_variant('no_text')


def test_padding_is_never_a_target():
    short = assemble_sequence('a', TokenSequence([1]), _bundle(), vocab=SMALL)
    long = assemble_sequence('abcdef', TokenSequence([1, 2, 3]), _bundle(), vocab=SMALL)
    padded = pad_batch([short, long], SMALL)
    assert padded[0].length == padded[1].length == long.length
    assert padded[0].n_targets == short.n_targets
    assert (padded[0].ids[short.length:] == SMALL.special('PAD')).all()


# model

def test_untrained_loss_is_log_class_count():
    vocab = build_vocab()
    model = ArModel(TINY_AR, np.random.default_rng(0), np.float32, vocab)
    loss = teacher_forced_loss(model, [_item(model, tokens=np.arange(0, 6561, 400))]).item()
    assert loss == pytest.approx(np.log(6562), abs=0.1)


def test_duplicated_batch_keeps_loss():
    model = _model()
    a, b = _item(model, 'hello', (1, 2, 3)), _item(model, 'a longer text', (4, 5, 6, 7, 8), seed=2)
    single = teacher_forced_loss(model, [a, b]).item()
    doubled = teacher_forced_loss(model, [a, b, a, b]).item()
    assert doubled == pytest.approx(single, abs=1e-6)


def test_loss_needs_a_target():
    model = _model()
    with pytest.raises(ContractError):
        teacher_forced_loss(model, [_item(model, tokens=None)])


def test_logits_are_causal():
    model = _model()
    inp = _item(model, 'abcdefgh')
    before = model.logits(inp).data
    t = inp.text_span[0] + 4
    inp.ids[t] = 200
    after = model.logits(inp).data
    np.testing.assert_array_equal(after[:t], before[:t])
    assert not np.array_equal(after[t:], before[t:])


def test_text_positions_carry_no_gradient():
    model = _model()
    inp = _item(model, 'abcdefgh')
    h = T.parameter(model.hidden(inp).data)
    logits = model.head(h)
    targets = np.zeros(inp.length, dtype=np.int64)
    targets[:-1] = model.targets(inp)[1:]
    mask = np.zeros(inp.length, dtype=bool)
    mask[:-1] = inp.mask[1:]
    grads = T.Graph({'h': h}).backward(T.masked_cross_entropy(logits, targets, mask))
    assert not grads['h'][:inp.prompt_length - 1].any()
    assert grads['h'][inp.prompt_length - 1:-1].any()


@pytest.mark.parametrize('variant', VARIANTS)
def test_every_variant_trains(variant):
    model = _model(variant, dtype=np.float32)
    graph = T.Graph(model.named_parameters())
    loss = teacher_forced_loss(model, [_item(model)])
    grads = graph.backward(loss)
    Adam(graph.parameters, lr=1e-3).step(grads)
    assert np.isfinite(loss.item())
    assert ('s_proj.weight' in grads) == (variant == 'full')
    assert ('qformer.queries' in grads) == (variant != 'no_both')


def test_token_accuracy_range():
    model = _model()
    assert 0.0 <= token_accuracy(model, [_item(model)]) <= 1.0


# sampling

def test_top_one_is_greedy(rng):
    scores = rng.standard_normal(30)
    greedy = sample_class(scores, SamplingConfig(temperature=0.0), rng)
    for seed in range(5):
        assert sample_class(scores, SamplingConfig(top_k=1), np.random.default_rng(seed)) == greedy


def test_top_k_stays_in_top_k(rng):
    scores = np.arange(30, dtype=float)
    picks = {sample_class(scores, SamplingConfig(top_k=3, temperature=5.0), rng) for _ in range(200)}
    assert picks <= {27, 28, 29}


def test_generation_is_seeded():
    model = _model()
    bundle = model.condition(np.ones((10, 16)), np.ones(16) / 4)
    sampling = SamplingConfig(top_k=5, temperature=1.0, max_tokens=6, seed=11)
    first = generate(model, 'hello', bundle, sampling=sampling)
    second = generate(model, 'hello', bundle, sampling=sampling)
    assert first.tolist() == second.tolist()
    assert len(first) <= 6
    assert all(0 <= t < SMALL.audio_size for t in first.tolist())


def test_generation_respects_max_tokens():
    model = _model()
    model.head_bias.data[SMALL.eos_class] = -1e4
    out = generate(model, 'hi', model.condition(np.ones((4, 16)), np.ones(16)),
                   sampling=SamplingConfig(temperature=0.0, max_tokens=5))
    assert len(out) == 5
    assert out.truncated


def test_generation_stops_at_end():
    model = _model()
    model.head_bias.data[SMALL.eos_class] = 1e4
    out = generate(model, 'hi', model.condition(np.ones((4, 16)), np.ones(16)),
                   sampling=SamplingConfig(temperature=0.0, max_tokens=5))
    assert len(out) == 0
    assert not out.truncated



def test_generation_stops_at_the_context():
    model = ArModel(replace(TINY_AR, context=64), np.random.default_rng(0), F64, SMALL)
    model.head_bias.data[SMALL.eos_class] = -1e4
    bundle = model.condition(np.ones((4, 16)), np.ones(16))
    prompt = assemble_sequence('hi', None, bundle, vocab=SMALL, variant=model.variant.mode,
                               text_mode=model.cfg.text_mode)
    out = generate(model, 'hi', bundle, sampling=SamplingConfig(temperature=0.0, max_tokens=100))
    assert out.truncated
    assert len(out) == 64 - prompt.prompt_length + 1


def test_prompt_longer_than_context():
    model = ArModel(replace(TINY_AR, context=64), np.random.default_rng(0), F64, SMALL)
    with pytest.raises(ConfigurationError):
        generate(model, 'x' * 100, model.condition(np.ones((4, 16)), np.ones(16)),
                 sampling=SamplingConfig(max_tokens=5))

@pytest.mark.slow
def test_overfit_single_sequence():
    model = _model(dtype=np.float32)
    tokens = [3, 17, 17, 5, 26, 0, 9, 12]
    item = _item(model, 'memorize', tokens)
    graph = T.Graph(model.named_parameters())
    opt = Adam(graph.parameters, lr=3e-3)
    for _ in range(600):
        loss = teacher_forced_loss(model, [item])
        opt.step(graph.backward(loss))
    assert teacher_forced_loss(model, [item]).item() < 0.05
    out = generate(model, 'memorize', ConditionBundle(s=item.s, c=item.c),
                   sampling=SamplingConfig(temperature=0.0, max_tokens=20))
    assert out.tolist() == tokens
