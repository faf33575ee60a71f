"""Guided sampling loop, delayed subject conditioning, expression control."""

import pytest
import torch

from facepersona.errors import ConfigError, MissingReferenceError
from facepersona.expression import compose_condition, extract_expression
from facepersona.mapper import PromptTemplate
from facepersona.sampler import (
    InferenceConfig,
    cfg_noise,
    dsc_generate,
    expression_conditional_generate,
    generate,
)


class CountingDenoiser:
    """Wraps a denoiser, tallying calls per conditioning tensor."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.cond_ids = []

    def __call__(self, z_t, t, cond):
        self.calls += 1
        self.cond_ids.append(id(cond))
        return self.inner(z_t, t, cond)


class TestCfgNoise:
    def _parts(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(2, 4, 4, generator=g)
        cond = torch.randn(3, 8, generator=g)
        uncond = torch.randn(3, 8, generator=g)
        from test_diffusion import LinearDenoiser

        return z, cond, uncond, LinearDenoiser(z.shape, 8, seed)

    def test_scale_zero_is_unconditional(self):
        z, cond, uncond, den = self._parts(0)
        out = cfg_noise(z, 3, cond, uncond, 0.0, den)
        assert torch.allclose(out, den(z, 3, uncond))

    def test_scale_one_is_conditional(self):
        z, cond, uncond, den = self._parts(1)
        out = cfg_noise(z, 3, cond, uncond, 1.0, den)
        assert torch.allclose(out, den(z, 3, cond))

    def test_matches_formula_oracle(self):
        for seed in range(10):
            z, cond, uncond, den = self._parts(seed)
            scale = 1.0 + seed * 0.7
            out = cfg_noise(z, 5, cond, uncond, scale, den)
            eps_c, eps_u = den(z, 5, cond), den(z, 5, uncond)
            expected = eps_u + scale * (eps_c - eps_u)
            assert torch.allclose(out, expected, atol=1e-6)


@pytest.fixture()
def face(face_batch):
    images, _, _ = face_batch
    return images[0]


@pytest.fixture()
def template():
    return PromptTemplate("A photo of S*")


class TestGenerate:
    def test_same_seed_is_bit_identical(self, toy_stack, fresh_mapper, face, template):
        cfg = InferenceConfig(num_steps=6, seed=42)
        a = generate(face, template, cfg, toy_stack, fresh_mapper)
        b = generate(face, template, cfg, toy_stack, fresh_mapper)
        assert torch.equal(a, b)

    def test_different_seeds_differ(self, toy_stack, fresh_mapper, face, template):
        a = generate(face, template, InferenceConfig(num_steps=6, seed=1),
                     toy_stack, fresh_mapper)
        b = generate(face, template, InferenceConfig(num_steps=6, seed=2),
                     toy_stack, fresh_mapper)
        assert not torch.equal(a, b)

    def test_denoiser_call_budget(self, toy_stack, fresh_mapper, face, template):
        from dataclasses import replace

        for steps in (1, 5):
            counter = CountingDenoiser(toy_stack.denoiser)
            stack = replace(toy_stack, denoiser=counter)
            generate(face, template, InferenceConfig(num_steps=steps, seed=0),
                     stack, fresh_mapper)
            assert counter.calls == 2 * steps

    def test_prompt_words_reach_the_output(self, toy_stack, fresh_mapper, face):
        cfg = InferenceConfig(num_steps=6, seed=3)
        a = generate(face, PromptTemplate("A photo of S* at the beach"),
                     cfg, toy_stack, fresh_mapper)
        b = generate(face, PromptTemplate("A photo of S* in the mountains"),
                     cfg, toy_stack, fresh_mapper)
        assert not torch.equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            InferenceConfig(num_steps=0)
        with pytest.raises(ConfigError):
            InferenceConfig(guidance_scale=-1.0)
        with pytest.raises(ConfigError):
            InferenceConfig(scheduler_kind="ddim")
        with pytest.raises(ConfigError):
            InferenceConfig(dsc_alpha=1.5)


class TestDscGenerate:
    def test_alpha_one_bit_equals_generate(self, toy_stack, fresh_mapper, face, template):
        for seed in (0, 1, 17):
            cfg = InferenceConfig(num_steps=6, seed=seed, dsc_alpha=1.0)
            plain = generate(face, template, cfg, toy_stack, fresh_mapper)
            dsc = dsc_generate(face, template, cfg, toy_stack, fresh_mapper)
            assert dsc.switch_step == 0
            assert torch.equal(plain, dsc.image)

    def test_alpha_zero_uses_class_prompt_only(self, toy_stack, fresh_mapper, face,
                                               template):
        cfg = InferenceConfig(num_steps=6, seed=0, dsc_alpha=0.0)
        result = dsc_generate(face, template, cfg, toy_stack, fresh_mapper)
        assert result.switch_step == 6
        assert result.schedule == ["class"] * 6

    def test_step_split_30_steps(self, toy_stack, fresh_mapper, face, template):
        cfg = InferenceConfig(num_steps=30, seed=0, dsc_alpha=0.8)
        result = dsc_generate(face, template, cfg, toy_stack, fresh_mapper)
        assert result.schedule.count("class") == 6
        assert result.schedule.count("identifier") == 24
        assert result.schedule[:6] == ["class"] * 6

    def test_conditioning_actually_switches(self, toy_stack, fresh_mapper, face,
                                            template):
        from dataclasses import replace

        counter = CountingDenoiser(toy_stack.denoiser)
        stack = replace(toy_stack, denoiser=counter)
        cfg = InferenceConfig(num_steps=5, seed=0, dsc_alpha=0.6)
        result = dsc_generate(face, template, cfg, stack, fresh_mapper)
        assert result.switch_step == 2
        # conditional branch ids: first 2 steps one tensor, remaining 3 another
        cond_ids = counter.cond_ids[0::2]
        assert len(set(cond_ids[:2])) == 1
        assert len(set(cond_ids[2:])) == 1
        assert cond_ids[0] != cond_ids[-1]


class TestExpressionConditionalGenerate:
    def test_reference_equals_training_branch(self, toy_stack, fresh_mapper, face):
        # inference_cond with reference == the train-mode no-drop composition
        identity = toy_stack.identity_encoder.extract(face)
        v_exp = extract_expression(face, toy_stack.expression_extractor)
        rng = torch.Generator().manual_seed(0)
        train_cond = compose_condition(identity, v_exp, fresh_mapper.uncond_expression,
                                       "train", rng=rng, drop_prob=0.0)
        infer_cond = compose_condition(identity, v_exp, fresh_mapper.uncond_expression,
                                       "inference_cond")
        assert torch.equal(train_cond.values, infer_cond.values)

    def test_zero_stub_reference_gives_zero_tail(self, toy_stack, fresh_mapper, face):
        from facepersona.toys import ZeroExpressionExtractor

        identity = toy_stack.identity_encoder.extract(face)
        v_exp = extract_expression(face, ZeroExpressionExtractor(dim=16))
        cond = compose_condition(identity, v_exp, fresh_mapper.uncond_expression,
                                 "inference_cond")
        assert torch.all(cond.values[-16:] == 0)

    def test_two_references_give_different_images(self, toy_stack, fresh_mapper,
                                                  face_batch, template):
        images, _, _ = face_batch
        cfg = InferenceConfig(num_steps=6, seed=5)
        a = expression_conditional_generate(images[0], images[1], template, cfg,
                                            toy_stack, fresh_mapper)
        b = expression_conditional_generate(images[0], images[2], template, cfg,
                                            toy_stack, fresh_mapper)
        assert not torch.equal(a, b)

    def test_failed_reference_extraction(self, toy_stack, fresh_mapper, face, template):
        from dataclasses import replace

        from test_expression import FailingExtractor

        stack = replace(toy_stack, expression_extractor=FailingExtractor())
        with pytest.raises(MissingReferenceError):
            expression_conditional_generate(face, face, template,
                                            InferenceConfig(num_steps=2, seed=0),
                                            stack, fresh_mapper)
