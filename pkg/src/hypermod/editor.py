"""Hypernetwork editor: turns an image plus a prompt direction into
multiplicative weight factors for the generator's convolution kernels.

The chain is: a conv backbone extracts a feature map from the source image;
the fusion modulator rescales and shifts that map per channel as a function of
the prompt direction; one hypernetwork head per selected generator layer
downsamples the modulated map to a vector, expands it into two vectors sized
by the target kernel's channel counts, forms their outer product per kernel
position, and refines the result through two square fully connected layers.
The final layer is zero-initialized, so a fresh editor emits exactly zero
factors and editing reduces to plain reconstruction.

Factors apply multiplicatively: each selected kernel becomes
``theta + delta * theta`` with everything else untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state_arrays, save_checkpoint, state_dict_arrays
from .embedding import JointEmbedding
from .errors import NotTrainedError, ShapeMismatchError
from .generator import GeneratorBundle, GeneratorConfig, GeneratorWeights, _group_norm, synthesize

WeightFactors = dict[int, torch.Tensor]


@dataclass(frozen=True)
class EditorConfig:
    feature_channels: int = 128
    feature_size: int = 16
    image_size: int = 32
    d_e: int = 64


class FeatureBackbone(nn.Module):
    """Stride-2 stem plus two residual blocks; image -> (C_h, S/2, S/2) features."""

    def __init__(self, config: EditorConfig):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.stem = nn.Sequential(nn.Conv2d(3, c, 3, stride=2, padding=1), _group_norm(c), nn.LeakyReLU(0.2))
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1),
                _group_norm(c),
                nn.LeakyReLU(0.2),
                nn.Conv2d(c, c, 3, padding=1),
                _group_norm(c),
            )
            for _ in range(2)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.config.image_size
        if x.shape[-3:] != (3, s, s):
            raise ShapeMismatchError(f"expected (*, 3, {s}, {s}) image, got {tuple(x.shape)}")
        h = self.stem(x)
        for block in self.blocks:
            h = F.leaky_relu(h + block(h), 0.2)
        return h


class FusionModulator(nn.Module):
    """Per-channel affine conditioning of a feature map on a prompt direction."""

    def __init__(self, config: EditorConfig, hidden: int = 128):
        super().__init__()
        c = config.feature_channels
        self.scale = nn.Sequential(nn.Linear(config.d_e, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, c))
        self.shift = nn.Sequential(nn.Linear(config.d_e, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, c))
        with torch.no_grad():
            for mlp, bias in ((self.scale, 1.0), (self.shift, 0.0)):
                mlp[-1].weight.mul_(0.01)
                mlp[-1].bias.fill_(bias)

    def forward(self, xbar: torch.Tensor, dt: torch.Tensor) -> torch.Tensor:
        if dt.dim() == 1:
            dt = dt.unsqueeze(0)
        a = self.scale(dt)[:, :, None, None]
        b = self.shift(dt)[:, :, None, None]
        return xbar * a + b


class HyperHead(nn.Module):
    """Per-layer factor head: modulated features -> one kernel-shaped array."""

    def __init__(self, c_out: int, c_in: int, config: EditorConfig, kernel_size: int = 3):
        super().__init__()
        self.c_out, self.c_in, self.k = c_out, c_in, kernel_size
        ch = config.feature_channels
        n_down = int(round(math.log2(config.feature_size)))
        downs: list[nn.Module] = []
        for i in range(n_down):
            downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            if config.feature_size >> (i + 1) > 1:  # GroupNorm is degenerate on 1x1 maps
                downs.append(_group_norm(ch))
            downs.append(nn.LeakyReLU(0.2))
        self.downs = nn.Sequential(*downs)
        k2 = kernel_size * kernel_size
        self.fc1 = nn.Linear(ch, k2 * c_in)
        self.fc2 = nn.Linear(ch, k2 * c_out)
        flat = c_out * c_in
        self.fc3 = nn.Linear(flat, flat)
        self.fc4 = nn.Linear(flat, flat)
        with torch.no_grad():
            self.fc4.weight.zero_()
            self.fc4.bias.zero_()

    def outer_product(self, xhat: torch.Tensor) -> torch.Tensor:
        """Rank-one factor draft per kernel position, before the square FC pair.

        Shape (B, k, k, c_out, c_in); each (c_out, c_in) slice is an outer
        product of the two expanded vectors.
        """
        h = self.downs(xhat).flatten(1)
        v1 = self.fc1(h).view(-1, self.k, self.k, self.c_in)
        v2 = self.fc2(h).view(-1, self.k, self.k, self.c_out)
        return torch.einsum("bxyo,bxyi->bxyoi", v2, v1)

    def forward(self, xhat: torch.Tensor) -> torch.Tensor:
        draft = self.outer_product(xhat)
        b = draft.shape[0]
        flat = draft.reshape(b, self.k * self.k, self.c_out * self.c_in)
        flat = self.fc4(F.leaky_relu(self.fc3(flat), 0.2))
        delta = flat.view(b, self.k, self.k, self.c_out, self.c_in)
        return delta.permute(0, 3, 4, 1, 2).contiguous()


class Editor(nn.Module):
    """Backbone, fusion modulator, and one head per selected generator layer."""

    def __init__(self, gen_config: GeneratorConfig, selection, config: EditorConfig | None = None):
        super().__init__()
        self.config = config or EditorConfig()
        self.gen_config = gen_config
        layers = tuple(sorted(selection))
        if not layers:
            raise ValueError("selection must contain at least one layer")
        for i in layers:
            if not 1 <= i <= gen_config.n_layers:
                raise ValueError(f"layer index {i} outside [1, {gen_config.n_layers}]")
        self.selection = layers
        self.backbone = FeatureBackbone(self.config)
        self.fmm = FusionModulator(self.config)
        self.heads = nn.ModuleDict(
            {
                str(i): HyperHead(gen_config.out_channels(i), gen_config.in_channels(i), self.config, gen_config.kernel_size)
                for i in layers
            }
        )

    def factors(self, x: torch.Tensor, dt: torch.Tensor) -> WeightFactors:
        """Weight factors for every selected layer, batched per sample."""
        xbar = self.backbone(x)
        xhat = self.fmm(xbar, dt)
        return {i: self.heads[str(i)](xhat) for i in self.selection}

    def head_parameter_count(self) -> int:
        return sum(p.numel() for p in self.heads.parameters())

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        gen_cfg = asdict(self.gen_config)
        gen_cfg["channels"] = list(gen_cfg["channels"])
        gen_cfg["upsample_after"] = list(gen_cfg["upsample_after"])
        meta = {
            "selection": list(self.selection),
            "gen_config": gen_cfg,
            "editor_config": asdict(self.config),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, "editor", state_dict_arrays(self), meta)

    @classmethod
    def load(cls, path: str | Path) -> "Editor":
        ckpt = load_checkpoint(path, expect_kind="editor")
        raw = dict(ckpt.meta["gen_config"])
        raw["channels"] = tuple(raw["channels"])
        raw["upsample_after"] = tuple(raw["upsample_after"])
        editor = cls(GeneratorConfig(**raw), ckpt.meta["selection"], EditorConfig(**ckpt.meta["editor_config"]))
        load_state_arrays(editor, ckpt.arrays)
        return editor


def reassign(weights: GeneratorWeights, factors: WeightFactors) -> GeneratorWeights:
    """Apply multiplicative factors: kernel <- kernel + delta * kernel.

    Layers absent from ``factors`` and all non-kernel parameters pass through
    unchanged; the input weights object is never mutated. Batched factors
    produce batched kernels.
    """
    new_kernels = list(weights.conv_w)
    n = weights.config.n_layers
    for layer, delta in sorted(factors.items()):
        if not 1 <= layer <= n:
            raise ShapeMismatchError(f"layer index {layer} outside [1, {n}]")
        theta = weights.conv_w[layer - 1]
        if delta.dim() not in (4, 5) or tuple(delta.shape[-4:]) != tuple(theta.shape[-4:]):
            raise ShapeMismatchError(
                f"layer {layer}: factor shape {tuple(delta.shape)} does not match kernel {tuple(theta.shape)}"
            )
        new_kernels[layer - 1] = theta + delta * theta
    return weights.replace_kernels(new_kernels)


def interpolate_factors(da: WeightFactors, db: WeightFactors, eta: float) -> WeightFactors:
    """Layerwise convex combination eta*da + (1-eta)*db.

    The endpoints short-circuit to exact copies, so eta in {0, 1} reproduces
    the pure factor sets bit for bit.
    """
    if set(da) != set(db):
        raise ValueError(f"mismatched layer sets: {sorted(da)} vs {sorted(db)}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta {eta} outside [0, 1]")
    if eta == 1.0:
        return {i: t.clone() for i, t in da.items()}
    if eta == 0.0:
        return {i: t.clone() for i, t in db.items()}
    return {i: eta * da[i] + (1.0 - eta) * db[i] for i in da}


@dataclass
class EditResult:
    image: torch.Tensor  # (3, H, W) or (B, 3, H, W), values in [0, 1]
    factors: WeightFactors
    w_init: torch.Tensor


class EditPipeline:
    """Frozen generator + embedding plus a (trainable) editor, wired together."""

    def __init__(self, bundle: GeneratorBundle, embedding: JointEmbedding, editor: Editor):
        if embedding.config.d_e != editor.config.d_e:
            raise ShapeMismatchError("embedding and editor disagree on the direction dimensionality")
        if bundle.config.resolution != editor.config.image_size:
            raise ShapeMismatchError("generator resolution and editor image size differ")
        self.bundle = bundle
        self.embedding = embedding
        self.editor = editor

    def _as_batch(self, x) -> tuple[torch.Tensor, bool]:
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x)).permute(2, 0, 1)
        if x.dim() == 3:
            return x.unsqueeze(0), True
        return x, False

    def reconstruct(self, x) -> torch.Tensor:
        xb, squeeze = self._as_batch(x)
        with torch.no_grad():
            y = synthesize(self.bundle.weights(), self.bundle.invert(xb))
        return y.squeeze(0) if squeeze else y

    def edit(self, x, target_text: str | list[str], source_text: str | list[str]) -> EditResult:
        """Invert, condition, generate factors, reassign, synthesize."""
        if not self.bundle.trained:
            raise NotTrainedError("generator bundle has not been pretrained")
        if not self.embedding.trained:
            raise NotTrainedError("embedding has not been trained")
        xb, squeeze = self._as_batch(x)
        with torch.no_grad():
            w_init = self.bundle.invert(xb)
            dt = self.embedding.prompt_direction(target_text, source_text)
            factors = self.editor.factors(xb, dt)
            y = synthesize(reassign(self.bundle.weights(), factors), w_init)
        if squeeze:
            y = y.squeeze(0)
            w_init = w_init.squeeze(0)
            factors = {i: t.squeeze(0) for i, t in factors.items()}
        return EditResult(image=y, factors=factors, w_init=w_init)

    def edit_with_factors(self, x, factors: WeightFactors) -> torch.Tensor:
        """Synthesize an edit from externally supplied factors (interpolation path)."""
        xb, squeeze = self._as_batch(x)
        with torch.no_grad():
            w_init = self.bundle.invert(xb)
            batched = {i: (t if t.dim() == 5 else t.unsqueeze(0)) for i, t in factors.items()}
            y = synthesize(reassign(self.bundle.weights(), batched), w_init)
        return y.squeeze(0) if squeeze else y
