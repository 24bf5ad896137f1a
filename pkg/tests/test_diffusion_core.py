import math

import numpy as np
import pytest
import torch

from denoiser import attention, base_cross_attention
from diffusion_core import (LatentCodec, TextEncoder, NoiseSchedule, add_noise, build_vocabulary, vocabulary_hash,
                            sinusoidal_embedding, encode_text)
from toyworld import make_caption
from errors import ConfigurationError, ShapeError, TokenizationError
from constants import *


def test_codec_is_exactly_invertible():
    codec = LatentCodec()
    images = np.random.default_rng(0).uniform(size=(2, WILD_SIZE, WILD_SIZE, 3))
    z = codec.encode_image(images)
    assert z.shape == (2, LATENT_CHANNELS, WILD_SIZE // CODEC_FACTOR, WILD_SIZE // CODEC_FACTOR)
    np.testing.assert_allclose(codec.decode_latent(z), images, atol=1e-12)


def test_codec_accepts_single_image_and_rejects_odd_sizes():
    codec = LatentCodec()
    assert codec.encode_image(np.zeros((FACE_SIZE, FACE_SIZE, 3))).shape == (1, LATENT_CHANNELS, 8, 8)
    with pytest.raises(ShapeError):
        codec.encode_image(np.zeros((30, 30, 3)))
    with pytest.raises(ShapeError):
        codec.decode(torch.zeros(1, 12, 4, 4, dtype=torch.float64))


def test_codec_preserves_energy():
    codec = LatentCodec()
    images = np.random.default_rng(1).uniform(size=(1, FACE_SIZE, FACE_SIZE, 3))
    z = codec.encode_image(images)
    assert float((z ** 2).sum()) == pytest.approx(float((images ** 2).sum()), rel=1e-12)


def test_every_caption_and_template_fits():
    encoder = TextEncoder(32)
    for template in NEUTRAL_TEMPLATES:
        assert len(encoder.tokenize(template)) == TEXT_LENGTH
    for expression in EXPRESSIONS:
        for color in BACKGROUND_COLORS:
            for position in POSITIONS:
                ids = encoder.tokenize(make_caption(expression, color, position))
                assert len(ids) == TEXT_LENGTH
                assert PAD_ID not in ids[:3]


def test_distinct_captions_get_distinct_tokens():
    encoder = TextEncoder(32)
    captions = [make_caption(e, c, p) for e in EXPRESSIONS for c in BACKGROUND_COLORS for p in POSITIONS]
    captions += list(NEUTRAL_TEMPLATES)
    assert len({tuple(encoder.tokenize(c)) for c in captions}) == len(captions)


def test_unknown_word_is_rejected():
    encoder = TextEncoder(32)
    with pytest.raises(TokenizationError):
        encoder.tokenize("a face on a teal background")


def test_null_condition_is_all_padding():
    encoder = TextEncoder(32)
    assert encoder.tokenize("") == [PAD_ID] * TEXT_LENGTH
    null = encoder.null_condition()
    assert null.shape == (TEXT_LENGTH, 32)
    torch.testing.assert_close(null, encoder("")[0])


def test_text_encoder_batch_shape():
    encoder = TextEncoder(32)
    out = encoder(["a face", make_caption("smile", "red", "left")])
    assert out.shape == (2, TEXT_LENGTH, 32)
    assert encode_text(encoder, "a face").shape == (TEXT_LENGTH, 32)


def test_vocabulary_is_stable():
    assert vocabulary_hash(build_vocabulary()) == vocabulary_hash(build_vocabulary())
    assert build_vocabulary()[0] == PAD_TOKEN
    assert not set(STOP_WORDS) & set(build_vocabulary())


def test_sinusoidal_embedding_shape():
    emb = sinusoidal_embedding(torch.arange(5), 7)
    assert emb.shape == (5, 7)
    torch.testing.assert_close(emb[0, :3], torch.ones(3, dtype=torch.float64))


def test_schedule_is_monotone():
    schedule = NoiseSchedule(1000, 1e-4, 0.02)
    ab = schedule.alpha_bars
    assert ab.dtype == torch.float64
    assert torch.all(ab[1:] < ab[:-1])
    assert 0. < float(ab[-1]) < float(ab[0]) < 1.
    assert schedule.describe() == "linear 0.0001 0.02 1000"


def test_schedule_rejects_bad_betas():
    with pytest.raises(ConfigurationError):
        NoiseSchedule(1000, 0.02, 1e-4)


def test_add_noise_matches_closed_form():
    schedule = NoiseSchedule()
    z0 = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    eps = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    t = torch.tensor([0, 500, 999])
    z_t = add_noise(z0, t, eps, schedule)
    for i in range(3):
        ab = float(schedule.alpha_bars[t[i]])
        torch.testing.assert_close(z_t[i], math.sqrt(ab) * z0[i] + math.sqrt(1. - ab) * eps[i])


def test_degenerate_schedule_keeps_latent():
    schedule = NoiseSchedule.degenerate()
    z0 = torch.randn(2, 4, 2, 2, dtype=torch.float64)
    torch.testing.assert_close(add_noise(z0, torch.tensor([10, 900]), torch.randn_like(z0), schedule), z0)


def test_add_noise_rejects_bad_input():
    schedule = NoiseSchedule()
    z0 = torch.zeros(1, 4, 2, 2)
    with pytest.raises(ShapeError):
        add_noise(z0, torch.tensor([1000]), torch.zeros_like(z0), schedule)
    with pytest.raises(ShapeError):
        add_noise(z0, torch.tensor([1]), torch.zeros(1, 4, 2, 3), schedule)


def test_schedule_matches_running_product():
    schedule = NoiseSchedule(1000, 1e-4, 0.02)
    product = 1.
    for beta in np.linspace(1e-4, 0.02, 1000):
        product *= 1. - beta
    assert abs(float(schedule.alpha_bars[999]) - product) < 1e-10


def test_first_timestep_barely_noises():
    schedule = NoiseSchedule()
    assert float(schedule.alpha_bars[0]) > 0.99
    generator = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, LATENT_CHANNELS, 4, 4, generator=generator, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
    z_t = add_noise(z0, torch.zeros(4, dtype=torch.long), eps, schedule)
    assert float(torch.linalg.norm(z_t - z0) / torch.linalg.norm(z0)) < 0.15


@pytest.mark.parametrize("t", [0, 250, 500, 999])
def test_add_noise_preserves_unit_variance(t):
    schedule = NoiseSchedule()
    generator = torch.Generator().manual_seed(t)
    z0 = torch.randn(10000, 1, 1, 1, generator=generator, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
    z_t = add_noise(z0, torch.tensor([t]), eps, schedule)
    assert float(z_t.var()) == pytest.approx(1., rel=0.05)


def test_attention_rows_are_distributions():
    generator = torch.Generator().manual_seed(3)
    q, k, v = (torch.randn(2, 5, 4, generator=generator, dtype=torch.float64) for _ in range(3))
    _, scores = attention(q, k, v, return_scores=True)
    assert scores.shape == (2, 5, 5)
    assert torch.all(scores >= 0.)
    assert float((scores.sum(-1) - 1.).abs().max()) < 1e-12


def test_single_key_returns_its_value():
    generator = torch.Generator().manual_seed(4)
    q = torch.randn(1, 3, 4, generator=generator, dtype=torch.float64)
    k = torch.randn(1, 1, 4, generator=generator, dtype=torch.float64)
    v = torch.randn(1, 1, 6, generator=generator, dtype=torch.float64)
    torch.testing.assert_close(attention(q, k, v), v.expand(1, 3, 6))


def test_two_by_two_attention_by_hand():
    eye = torch.eye(2, dtype=torch.float64)
    near = math.exp(1. / math.sqrt(2.)) / (math.exp(1. / math.sqrt(2.)) + 1.)
    expected = torch.tensor([[near, 1. - near], [1. - near, near]], dtype=torch.float64)
    torch.testing.assert_close(attention(eye, eye, eye), expected)


def test_base_cross_attention_projects_then_attends():
    generator = torch.Generator().manual_seed(5)
    f_z = torch.randn(2, 6, 4, generator=generator, dtype=torch.float64)
    context = torch.randn(2, TEXT_LENGTH, 4, generator=generator, dtype=torch.float64)
    eye = torch.eye(4, dtype=torch.float64)
    torch.testing.assert_close(base_cross_attention(f_z, context, eye, eye, eye), attention(f_z, context, context))

    w_q, w_k, w_v = (torch.randn(3, 4, generator=generator, dtype=torch.float64) for _ in range(3))
    torch.testing.assert_close(base_cross_attention(f_z, context, w_q, w_k, w_v),
                               attention(f_z @ w_q.T, context @ w_k.T, context @ w_v.T))
    with pytest.raises(ShapeError):
        base_cross_attention(f_z, context, torch.randn(3, 5, dtype=torch.float64), w_k, w_v)
