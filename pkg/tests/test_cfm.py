import numpy as np
import pytest

from pilot_tts import tensor as T
from pilot_tts.cfm import (CfmConfig, DecoderCondition, DitLite, ExactField, FlowPathConfig,
                           build_condition_frames, cfm_loss, euler_sample, ot_path)
from pilot_tts.exceptions import EmptyInputError, RangeError, ShapeError
from pilot_tts.fsq import TokenSequence
from pilot_tts.gradcheck import check_gradients
from pilot_tts.layers import Adam

F64 = np.float64
TINY = CfmConfig(d_model=16, blocks=1, heads=2, n_mels=8, speaker_dim=4, codebook_size=27)


def _cond(rng, tokens=(1, 5, 26), speaker=None):
    s = rng.standard_normal(4) if speaker is None else speaker
    return DecoderCondition(ref_mel=rng.standard_normal((6, 8)), s=s, tokens=TokenSequence(list(tokens)))


# path

def test_path_endpoints(rng):
    x0, x1 = rng.standard_normal((2, 5, 8))
    np.testing.assert_array_equal(ot_path(x0, x1, 0.0)[0], x0)
    np.testing.assert_allclose(ot_path(x0, x1, 1.0, FlowPathConfig(sigma_min=0.0))[0], x1)


def test_path_velocity_matches_finite_differences(rng):
    cfg = FlowPathConfig(sigma_min=1e-4)
    h = 1e-6
    for _ in range(200):
        x0, x1 = rng.standard_normal((2, 4, 3))
        t = float(rng.uniform(h, 1.0 - h))
        _, u = ot_path(x0, x1, t, cfg)
        numeric = (ot_path(x0, x1, t + h, cfg)[0] - ot_path(x0, x1, t - h, cfg)[0]) / (2 * h)
        np.testing.assert_allclose(numeric, u, atol=1e-8)


@pytest.mark.parametrize('t', [-0.1, 1.5])
def test_path_time_range(t, rng):
    x = rng.standard_normal((2, 2))
    with pytest.raises(RangeError):
        ot_path(x, x, t)


@pytest.mark.parametrize('sigma_min, steps', [(1.0, 10), (-0.1, 10), (1e-4, 0)])
def test_flow_config_validation(sigma_min, steps):
    with pytest.raises(RangeError):
        FlowPathConfig(sigma_min=sigma_min, steps=steps)


# loss

def test_exact_field_has_zero_loss(rng):
    x1 = rng.standard_normal((12, 8))
    cfg = FlowPathConfig(sigma_min=1e-4)
    loss = cfm_loss(ExactField(x1, 1e-4), _cond(rng), x1, np.random.default_rng(3), cfg).item()
    assert loss < 1e-20


def test_zero_model_loss_is_mean_square_velocity(rng):
    x1 = rng.standard_normal((12, 8))

    def zero_model(x, t, cond):
        return T.constant(np.zeros_like(x), dtype=F64)

    loss = cfm_loss(zero_model, _cond(rng), x1, np.random.default_rng(5)).item()
    draws = np.random.default_rng(5)
    t = draws.uniform(0.0, 1.0)
    x0 = draws.standard_normal(x1.shape)
    _, u = ot_path(x0, x1, t)
    assert loss == pytest.approx(np.mean(u * u), rel=1e-12)


def test_loss_checks_alignment(rng):
    model = DitLite(TINY, rng, F64)
    with pytest.raises(ShapeError):
        cfm_loss(model, _cond(rng), rng.standard_normal((10, 8)), rng)


def test_dit_loss_is_finite(rng):
    model = DitLite(TINY, rng)
    loss = cfm_loss(model, _cond(rng), rng.standard_normal((12, 8)), rng)
    assert np.isfinite(loss.item())


# sampler

def test_single_euler_step_lands_on_target(rng):
    x1 = rng.standard_normal((8, 80))
    for seed in range(3):
        out = euler_sample(ExactField(x1, 0.0), None, 8, FlowPathConfig(0.0, 1), seed=seed)
        np.testing.assert_allclose(out, x1, atol=1e-12)


def test_euler_error_does_not_grow_with_steps(rng):
    x1 = rng.standard_normal((8, 80))
    sigma = 1e-2
    errors = [np.abs(euler_sample(ExactField(x1, sigma), None, 8, FlowPathConfig(sigma, steps),
                                  seed=4) - x1).max()
              for steps in range(1, 11)]
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 5 * sigma


def test_sampling_is_seeded(rng):
    model = DitLite(TINY, rng)
    cond = _cond(rng)
    first = euler_sample(model, cond, 12, FlowPathConfig(steps=3), seed=9, n_mels=8)
    again = euler_sample(model, cond, 12, FlowPathConfig(steps=3), seed=9, n_mels=8)
    np.testing.assert_array_equal(first, again)
    assert first.shape == (12, 8)


def test_sampler_checks_frames(rng):
    model = DitLite(TINY, rng)
    with pytest.raises(ShapeError):
        euler_sample(model, _cond(rng), 10, n_mels=8)


# conditioning

def test_tokens_upsample_to_mel_rate(rng):
    model = DitLite(TINY, rng)
    frames = build_condition_frames(model, _cond(rng, tokens=np.arange(25)))
    assert frames.shape == (100, 16)


def test_speaker_reaches_every_frame(rng):
    model = DitLite(TINY, rng, F64)
    cond = _cond(rng)
    other = DecoderCondition(ref_mel=cond.ref_mel, s=cond.s + 1.0, tokens=cond.tokens)
    a = build_condition_frames(model, cond).data
    b = build_condition_frames(model, other).data
    assert (np.abs(a - b).max(axis=1) > 0).all()


def test_no_tokens(rng):
    with pytest.raises(EmptyInputError):
        build_condition_frames(DitLite(TINY, rng), _cond(rng, tokens=()))


def test_reference_mel_width(rng):
    cond = DecoderCondition(ref_mel=np.zeros((4, 80)), s=np.zeros(4), tokens=TokenSequence([1]))
    with pytest.raises(ShapeError):
        build_condition_frames(DitLite(TINY, rng), cond)


def test_dit_gradients(rng):
    model = DitLite(CfmConfig(d_model=8, blocks=1, heads=2, n_mels=4, speaker_dim=3, codebook_size=9),
                    rng, F64)
    cond = DecoderCondition(ref_mel=rng.standard_normal((3, 4)), s=rng.standard_normal(3),
                            tokens=TokenSequence([0, 8]))
    x = rng.standard_normal((8, 4))
    probe = T.constant(rng.standard_normal((8, 4)), dtype=F64)
    result = check_gradients(lambda: T.sum_all(T.mul(model(x, 0.3, cond), probe)),
                             model.parameters(), probes=150, rng=rng)
    assert result.passed(1e-4)


@pytest.mark.slow
def test_overfit_loss_mostly_decreases(rng):
    model = DitLite(TINY, rng)
    cond = _cond(rng)
    x1 = rng.standard_normal((12, 8))
    graph = T.Graph(model.named_parameters())
    opt = Adam(graph.parameters, lr=1e-3)
    losses = []
    for _ in range(100):
        loss = cfm_loss(model, cond, x1, np.random.default_rng(0))
        losses.append(loss.item())
        opt.step(graph.backward(loss))
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert increases <= 5
    assert losses[-1] < losses[0]
