"""Micro model configurations and finite-difference utilities for tests."""

from __future__ import annotations

import torch

from hypermod.editor import Editor, EditorConfig
from hypermod.embedding import EmbedConfig, JointEmbedding
from hypermod.generator import GeneratorBundle, GeneratorConfig
from hypermod.training import ShapeFeatureNet


def micro_gen_config(resolution: int = 8) -> GeneratorConfig:
    ups = {4: (), 8: (1,)}[resolution]
    return GeneratorConfig(
        channels=(6, 4),
        base_channels=5,
        base_resolution=4,
        upsample_after=ups,
        d_w=8,
        d_z=8,
        mapping_hidden=8,
    )


def micro_embed_config(resolution: int = 8) -> EmbedConfig:
    return EmbedConfig(d_e=8, image_size=resolution, widths=(8, 8), token_dim=8, text_hidden=8)


def micro_editor_config(resolution: int = 8) -> EditorConfig:
    return EditorConfig(feature_channels=8, feature_size=resolution // 2, image_size=resolution, d_e=8)


def micro_system(seed: int = 0, dtype=torch.float64, resolution: int = 8):
    """Randomly initialized micro pipeline with every component marked trained."""
    torch.manual_seed(seed)
    bundle = GeneratorBundle(micro_gen_config(resolution))
    embedding = JointEmbedding(micro_embed_config(resolution))
    editor = Editor(bundle.config, selection=(1, 2), config=micro_editor_config(resolution))
    rsim = ShapeFeatureNet(feature_dim=8)
    if dtype == torch.float64:
        for m in (bundle.generator, bundle.mapping, bundle.encoder, embedding.image_encoder, embedding.text_encoder, editor, rsim):
            m.double()
        embedding.log_temperature.data = embedding.log_temperature.data.double()
    bundle.freeze()
    embedding.freeze()
    rsim.freeze()
    return bundle, embedding, editor, rsim


def central_difference(fn, tensor: torch.Tensor, flat_index: int, h: float) -> float:
    """Central finite difference of scalar fn() along one tensor entry."""
    flat = tensor.data.view(-1)
    orig = flat[flat_index].item()
    flat[flat_index] = orig + h
    up = fn()
    flat[flat_index] = orig - h
    down = fn()
    flat[flat_index] = orig
    return (up - down) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """|a-b| relative to the larger magnitude, floored at the finite-difference
    noise level so that true-zero gradients compare as equal."""
    return abs(a - b) / max(abs(a), abs(b), floor)
