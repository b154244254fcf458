import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import central_difference, micro_embed_config, micro_system, relative_error

import hypermod.shapes as shapes
from hypermod.embedding import (
    ContrastiveConfig,
    EmbedConfig,
    JointEmbedding,
    cosine_alignment_loss,
    directional_loss,
    global_loss,
    info_nce,
    train_contrastive,
)
from hypermod.errors import NotTrainedError, VocabularyError


@pytest.fixture()
def frozen_random_model(torch_seed):
    model = JointEmbedding(EmbedConfig())
    model.freeze()
    return model


class TestEncoders:
    def test_image_embedding_unit_norm(self, frozen_random_model):
        v = frozen_random_model.encode_image(torch.rand(5, 3, 32, 32))
        assert v.shape == (5, 64)
        assert torch.allclose(v.norm(dim=-1), torch.ones(5), atol=1e-5)

    def test_same_scene_same_embedding(self, frozen_random_model):
        spec = shapes.SceneSpec("square", "blue", "large", "light")
        a = torch.from_numpy(shapes.render(spec)).permute(2, 0, 1)
        b = torch.from_numpy(shapes.render(spec)).permute(2, 0, 1)
        assert torch.equal(frozen_random_model.encode_image(a), frozen_random_model.encode_image(b))

    def test_text_embedding_contract(self, frozen_random_model):
        v = frozen_random_model.encode_text("a red circle")
        assert v.shape == (64,)
        assert abs(float(v.norm()) - 1.0) <= 1e-5
        assert torch.equal(v, frozen_random_model.encode_text("a red circle"))

    def test_token_permutation_invariance(self, frozen_random_model):
        a = frozen_random_model.encode_text("a red circle")
        b = frozen_random_model.encode_text("circle red a")
        assert torch.allclose(a, b, atol=1e-6)

    def test_oov_token_error_names_token(self, frozen_random_model):
        with pytest.raises(VocabularyError, match="purple"):
            frozen_random_model.encode_text("a purple circle")

    def test_untrained_raises(self, torch_seed):
        model = JointEmbedding(EmbedConfig())
        with pytest.raises(NotTrainedError):
            model.encode_image(torch.rand(3, 32, 32))
        with pytest.raises(NotTrainedError):
            model.encode_text("a circle")


class TestPromptDirection:
    def test_self_difference_is_zero(self, frozen_random_model):
        d = frozen_random_model.prompt_direction("a circle", "a circle")
        assert torch.equal(d, torch.zeros_like(d))

    def test_antisymmetry_exact(self, frozen_random_model):
        a, b = "a red circle", "a circle"
        assert torch.equal(
            frozen_random_model.prompt_direction(a, b), -frozen_random_model.prompt_direction(b, a)
        )

    def test_norm_at_most_two(self, frozen_random_model):
        d = frozen_random_model.prompt_direction("a small yellow cross on light background", "a circle")
        assert float(d.norm()) <= 2.0 + 1e-6


class TestAlignmentLosses:
    def test_parallel_vectors_zero(self):
        u = torch.tensor([1.0, 0.0, 0.0])
        v = torch.tensor([2.0, 0.0, 0.0])
        assert torch.allclose(cosine_alignment_loss(u, v), torch.tensor(0.0), atol=1e-6)

    def test_orthogonal_vectors_one(self):
        u = torch.tensor([0.0, 1.0, 0.0])
        v = torch.tensor([1.0, 0.0, 0.0])
        assert torch.allclose(cosine_alignment_loss(u, v), torch.tensor(1.0), atol=1e-6)

    def test_antiparallel_vectors_two(self):
        u = torch.tensor([-1.0, 0.0])
        v = torch.tensor([1.0, 0.0])
        assert torch.allclose(cosine_alignment_loss(u, v), torch.tensor(2.0), atol=1e-6)

    def test_zero_vector_orthogonal_convention(self, caplog):
        import logging

        u = torch.zeros(4)
        v = torch.tensor([1.0, 0.0, 0.0, 0.0])
        with caplog.at_level(logging.WARNING, logger="hypermod.embedding"):
            loss = cosine_alignment_loss(u, v)
        assert torch.allclose(loss, torch.tensor(1.0))
        assert any("zero-norm" in r.message for r in caplog.records)

    @given(st.floats(0.05, 20.0))
    @settings(max_examples=20, deadline=None)
    def test_scale_invariance(self, c):
        u = torch.tensor([0.3, -0.2, 0.9])
        v = torch.tensor([0.1, 0.5, -0.4])
        base = cosine_alignment_loss(u, v)
        scaled = cosine_alignment_loss(u, c * v)
        assert torch.allclose(base, scaled, atol=1e-5)

    def test_range_bounds(self, torch_seed):
        u = torch.randn(100, 8)
        v = torch.randn(100, 8)
        loss = cosine_alignment_loss(u, v)
        assert loss.min() >= 0.0 and loss.max() <= 2.0

    def test_global_loss_endpoints(self, frozen_random_model, torch_seed):
        x = torch.rand(3, 32, 32)
        e = frozen_random_model.encode_image(x)
        t = frozen_random_model.encode_text("a circle")
        # identical / antiparallel / orthogonal handled at the vector level
        assert torch.allclose(cosine_alignment_loss(e, e), torch.tensor(0.0), atol=1e-5)
        assert torch.allclose(cosine_alignment_loss(e, -e), torch.tensor(2.0), atol=1e-5)
        got = global_loss(frozen_random_model, x, "a circle")
        assert torch.allclose(got, cosine_alignment_loss(e, t), atol=1e-6)

    def test_directional_loss_scale_invariant_in_prompt(self, frozen_random_model, torch_seed):
        y, x = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
        a = directional_loss(frozen_random_model, y, x, "a red circle", "a circle")
        # identical prompt direction scaled by 2 via doubled difference: emulate
        # by checking against the vector-level loss directly
        u = frozen_random_model.encode_image(y) - frozen_random_model.encode_image(x)
        v = frozen_random_model.prompt_direction("a red circle", "a circle")
        assert torch.allclose(a, cosine_alignment_loss(u, v), atol=1e-6)
        assert torch.allclose(a, cosine_alignment_loss(u, 3.0 * v), atol=1e-5)

    def test_directional_gradient_matches_finite_differences(self):
        """64-bit micro images: autograd pixel gradient vs central differences."""
        bundle, embedding, editor, rsim = micro_system(seed=3)
        y = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        loss = directional_loss(embedding, y, x, "a red circle", "a circle")
        loss.backward()

        def scalar():
            with torch.no_grad():
                return float(directional_loss(embedding, y, x, "a red circle", "a circle"))

        rng = np.random.default_rng(1)
        for flat in rng.choice(y.numel(), size=8, replace=False):
            fd = central_difference(scalar, y, int(flat), h=1e-6)
            an = y.grad.view(-1)[int(flat)].item()
            assert relative_error(fd, an) <= 1e-3, (flat, fd, an)


class TestInfoNCE:
    def test_loss_nonnegative_on_identical_pairs(self, torch_seed):
        v = torch.nn.functional.normalize(torch.randn(8, 16), dim=-1)
        loss = info_nce(v, v, log_temperature=torch.tensor(0.0))
        assert float(loss) >= 0.0

    def test_perfect_alignment_beats_random(self, torch_seed):
        v = torch.nn.functional.normalize(torch.randn(32, 16), dim=-1)
        rand = torch.nn.functional.normalize(torch.randn(32, 16), dim=-1)
        lt = torch.tensor(np.log(0.07), dtype=torch.float32)
        assert float(info_nce(v, v, lt)) < float(info_nce(v, rand, lt))


class TestTraining:
    def test_requires_2000_samples(self):
        with pytest.raises(ValueError, match="2000"):
            train_contrastive(shapes.generate_dataset(50, seed=0))

    def test_trained_model_properties(self, embedding):
        assert embedding.trained
        assert embedding.temperature > 0.0

    def test_trained_semantic_ordering(self, embedding):
        """Matching caption scores higher than a contradicting one."""
        spec = shapes.SceneSpec("circle", "red", "large", "dark")
        img = torch.from_numpy(shapes.render(spec)).permute(2, 0, 1)
        e = embedding.encode_image(img)
        match = float(e @ embedding.encode_text("a red circle"))
        clash = float(e @ embedding.encode_text("a blue square"))
        assert match > clash

    def test_save_load_round_trip(self, embedding, tmp_path):
        embedding.save(tmp_path / "e.ckpt")
        back = JointEmbedding.load(tmp_path / "e.ckpt")
        assert back.trained
        assert abs(back.temperature - embedding.temperature) < 1e-6
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(back.encode_image(x), embedding.encode_image(x))
        assert torch.equal(back.encode_text("a circle"), embedding.encode_text("a circle"))
