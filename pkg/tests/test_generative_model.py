import pytest
import torch

from pps_vae.distributions import standard_normal_log_prob, straight_through
from pps_vae.errors import ContractViolation
from pps_vae.generative_model import (GenerationTrace, context_log_likelihood, convcnp_predict,
                                      generate_unconditional, location_log_prob_under_prior, prior_location_logits,
                                      reconstruct, score_trace, target_log_likelihood)
from pps_vae.inference_model import infer_context, lookup_values, union_mask
from pps_vae.neural_blocks import PPSVAE, ModelConfig


def _context_from_indices(y, indices):
    onehots = torch.nn.functional.one_hot(torch.tensor([indices]), num_classes=y.shape[-2] * y.shape[-1]).float()
    mask = union_mask(onehots, y.shape[-2], y.shape[-1])
    return mask, lookup_values(y, mask)


def test_convcnp_ignores_location_order(tiny_model, random_images):
    y = random_images(1)
    mask, values = _context_from_indices(y, [3, 17, 8, 30])
    reordered_mask, reordered_values = _context_from_indices(y, [30, 8, 3, 17, 8])
    assert torch.equal(mask, reordered_mask)
    first = convcnp_predict(tiny_model, mask, values)
    second = convcnp_predict(tiny_model, reordered_mask, reordered_values)
    assert torch.equal(first.mean, second.mean)
    assert torch.equal(first.scale, second.scale)


def test_circular_convcnp_is_translation_equivariant():
    torch.manual_seed(0)
    model = PPSVAE(ModelConfig(image_channels=1, height=8, width=8, latent_dim=4, hidden_channels=8, blocks=2,
                               padding_mode='circular'))
    y = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    mask, values = _context_from_indices(y, [0, 9, 27, 50, 63])
    shift = dict(shifts=(3, 5), dims=(2, 3))
    shifted = convcnp_predict(model, torch.roll(mask, **shift), torch.roll(values, **shift))
    original = convcnp_predict(model, mask, values)
    assert torch.allclose(shifted.mean, torch.roll(original.mean, **shift), atol=1e-5)
    assert torch.allclose(shifted.scale, torch.roll(original.scale, **shift), atol=1e-5)


def test_convcnp_rejects_values_off_mask(tiny_model, random_images):
    y = random_images(1)
    mask, _ = _context_from_indices(y, [1, 2])
    with pytest.raises(ContractViolation):
        convcnp_predict(tiny_model, mask, y)


def test_likelihoods_of_empty_and_full_masks(tiny_model, random_images, tiny_config):
    y = random_images(2)
    a = torch.randn(2, tiny_config.latent_dim)
    assert torch.equal(context_log_likelihood(tiny_model, y, torch.zeros(2, 1, 6, 6), a), torch.zeros(2))
    full = torch.ones(2, 1, 6, 6)
    assert torch.equal(target_log_likelihood(tiny_model, y, full, y), torch.zeros(2))


def test_prior_location_scores(tiny_model, tiny_config):
    a = torch.randn(2, tiny_config.latent_dim)
    logits = prior_location_logits(tiny_model, a)
    assert logits.shape == (2, 36)
    onehots = torch.nn.functional.one_hot(torch.tensor([[0, 5], [7, 7]]), 36).float()
    expected = torch.log_softmax(logits, dim=-1).gather(1, torch.tensor([[0, 5], [7, 7]])).sum(dim=1)
    assert torch.allclose(location_log_prob_under_prior(tiny_model, onehots, a), expected, atol=1e-5)
    with pytest.raises(ContractViolation):
        location_log_prob_under_prior(tiny_model, torch.zeros(2, 0, 36), a)


def test_generated_images_are_the_sum_of_their_parts(tiny_model, make_generator):
    traces = generate_unconditional(tiny_model, 5, 4, 0.5, make_generator(0))
    assert len(traces) == 5
    for trace in traces:
        assert len(trace) == 1
        assert torch.equal(trace.image, trace.context_values + trace.target_values)
        assert bool(((trace.mask == 0) | (trace.mask == 1)).all())
        assert 1 <= int(trace.mask.sum()) <= 4
        assert float((trace.context_values * (1 - trace.mask)).abs().sum()) == 0
        assert float((trace.target_values * trace.mask).abs().sum()) == 0
        assert trace.onehots.shape == (1, 4, 36)


def test_generation_is_deterministic(tiny_model, make_generator):
    first = GenerationTrace.stack(generate_unconditional(tiny_model, 3, 2, 0.5, make_generator(4)))
    second = GenerationTrace.stack(generate_unconditional(tiny_model, 3, 2, 0.5, make_generator(4)))
    assert torch.equal(first.image, second.image)
    sampled = GenerationTrace.stack(generate_unconditional(tiny_model, 3, 2, 0.5, make_generator(4),
                                                           sample_targets=True))
    assert sampled.image.shape == first.image.shape


def test_generation_rejects_bad_sizes(tiny_model, make_generator):
    with pytest.raises(ContractViolation):
        generate_unconditional(tiny_model, 0, 2, 0.5, make_generator(0))
    with pytest.raises(ContractViolation):
        generate_unconditional(tiny_model, 1, 36, 0.5, make_generator(0))


def test_reconstruction_keeps_context_values(rgb_model, make_generator):
    y = torch.rand(2, 3, 8, 8, generator=make_generator(0))
    trace = reconstruct(rgb_model, y, 5, 0.5, make_generator(1))
    assert torch.equal(trace.context_values, y * trace.mask)
    assert torch.equal(trace.image * trace.mask, y * trace.mask)
    assert torch.equal(trace.image, trace.context_values + trace.target_values)
    assert trace.a.shape == (2, 4)


def test_split_and_stack(tiny_model, make_generator):
    traces = generate_unconditional(tiny_model, 3, 2, 0.5, make_generator(0))
    stacked = GenerationTrace.stack(traces)
    assert len(stacked) == 3
    assert torch.equal(stacked.split()[1].image, traces[1].image)


def test_score_trace_is_the_sum_of_its_factors(tiny_model, make_generator):
    trace = GenerationTrace.stack(generate_unconditional(tiny_model, 4, 3, 0.5, make_generator(2)))
    expected = (standard_normal_log_prob(trace.a, batch_dims=1)
                + location_log_prob_under_prior(tiny_model, straight_through(trace.onehots), trace.a)
                + context_log_likelihood(tiny_model, trace.image, trace.mask, trace.a)
                + target_log_likelihood(tiny_model, trace.image, trace.mask, trace.context_values))
    assert torch.allclose(score_trace(tiny_model, trace), expected, atol=1e-6)
    assert bool(torch.isfinite(expected).all())


def test_reconstruction_context_matches_inference(tiny_model, random_images, make_generator):
    y = random_images(2)
    trace = reconstruct(tiny_model, y, 3, 0.5, make_generator(5))
    ctx = infer_context(tiny_model, y, 3, 0.5, make_generator(5), hard=True)
    assert torch.equal(trace.mask, ctx.mask.detach())
