"""Miniature style-modulated convolutional generator with an inversion encoder.

The generator grows a learned 4x4 constant to the target resolution through a
fixed plan of 3x3 convolutions whose kernels are scaled per input channel by a
style vector (an affine function of that layer's latent) and demodulated per
output channel, StyleGAN2 fashion. Each layer reads its own latent vector, so
the latent code is a (n_layers, d_w) array. A convolutional encoder maps an
image back to such a code; generator and encoder are pretrained jointly as a
reconstruction autoencoder, after which the weights are frozen and the
generator is only ever driven through :func:`synthesize`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state_arrays, save_checkpoint, state_dict_arrays
from .errors import ConvergenceError, NotTrainedError, ShapeMismatchError


@dataclass(frozen=True)
class GeneratorConfig:
    channels: tuple[int, ...] = (64, 64, 64, 64, 32, 32, 16, 16)
    base_channels: int = 64
    base_resolution: int = 4
    upsample_after: tuple[int, ...] = (2, 4, 6)  # 1-based layer indices
    d_w: int = 64
    d_z: int = 64
    mapping_hidden: int = 64
    kernel_size: int = 3

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    @property
    def resolution(self) -> int:
        return self.base_resolution * 2 ** len(self.upsample_after)

    def in_channels(self, layer: int) -> int:
        """Input channel count of a 1-based layer index."""
        return self.base_channels if layer == 1 else self.channels[layer - 2]

    def out_channels(self, layer: int) -> int:
        return self.channels[layer - 1]

    def kernel_shape(self, layer: int) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels(layer), self.in_channels(layer), k, k)


@dataclass
class GeneratorWeights:
    """All tensors the synthesis pass reads, as a plain value object.

    ``conv_w[i]`` may carry a leading batch dimension, which is how per-sample
    reassigned kernels flow through a batched synthesis.
    """

    config: GeneratorConfig
    const: torch.Tensor
    conv_w: list[torch.Tensor]
    conv_b: list[torch.Tensor]
    affine_w: list[torch.Tensor]
    affine_b: list[torch.Tensor]
    torgb_w: torch.Tensor
    torgb_b: torch.Tensor

    def validate(self) -> None:
        cfg = self.config
        if len(self.conv_w) != cfg.n_layers:
            raise ShapeMismatchError(f"expected {cfg.n_layers} conv kernels, got {len(self.conv_w)}")
        for i, w in enumerate(self.conv_w, start=1):
            expect = cfg.kernel_shape(i)
            if tuple(w.shape[-4:]) != expect or w.dim() not in (4, 5):
                raise ShapeMismatchError(f"layer {i}: kernel shape {tuple(w.shape)} does not match {expect}")

    def replace_kernels(self, new_conv_w: list[torch.Tensor]) -> "GeneratorWeights":
        return GeneratorWeights(
            config=self.config,
            const=self.const,
            conv_w=list(new_conv_w),
            conv_b=self.conv_b,
            affine_w=self.affine_w,
            affine_b=self.affine_b,
            torgb_w=self.torgb_w,
            torgb_b=self.torgb_b,
        )


class ToyGenerator(nn.Module):
    """Parameter owner for the synthesis network."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size
        self.const = nn.Parameter(torch.randn(config.base_channels, config.base_resolution, config.base_resolution))
        conv_w, conv_b, affine_w, affine_b = [], [], [], []
        for layer in range(1, config.n_layers + 1):
            c_out, c_in = config.out_channels(layer), config.in_channels(layer)
            conv_w.append(nn.Parameter(torch.randn(c_out, c_in, k, k) / math.sqrt(c_in * k * k)))
            conv_b.append(nn.Parameter(torch.zeros(c_out)))
            affine_w.append(nn.Parameter(torch.randn(c_in, config.d_w) / math.sqrt(config.d_w)))
            affine_b.append(nn.Parameter(torch.ones(c_in)))
        self.conv_w = nn.ParameterList(conv_w)
        self.conv_b = nn.ParameterList(conv_b)
        self.affine_w = nn.ParameterList(affine_w)
        self.affine_b = nn.ParameterList(affine_b)
        c_last = config.channels[-1]
        self.torgb_w = nn.Parameter(torch.randn(3, c_last, 1, 1) / math.sqrt(c_last))
        self.torgb_b = nn.Parameter(torch.zeros(3))

    def weights(self) -> GeneratorWeights:
        return GeneratorWeights(
            config=self.config,
            const=self.const,
            conv_w=list(self.conv_w),
            conv_b=list(self.conv_b),
            affine_w=list(self.affine_w),
            affine_b=list(self.affine_b),
            torgb_w=self.torgb_w,
            torgb_b=self.torgb_b,
        )

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return synthesize(self.weights(), w)


def _modulated_conv(x: torch.Tensor, kernel: torch.Tensor, styles: torch.Tensor, demodulate: bool) -> torch.Tensor:
    """Grouped convolution with per-sample, style-scaled kernels."""
    b, c_in, h, w = x.shape
    if kernel.dim() == 4:
        kernel = kernel.unsqueeze(0)
    c_out = kernel.shape[1]
    weight = kernel * styles[:, None, :, None, None]
    if demodulate:
        weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
    weight = weight.reshape(-1, c_in, kernel.shape[-2], kernel.shape[-1])
    out = F.conv2d(x.reshape(1, b * c_in, h, w), weight, padding=kernel.shape[-1] // 2, groups=b)
    return out.reshape(b, c_out, h, w)


def synthesize(weights: GeneratorWeights, w: torch.Tensor, demodulate: bool = True) -> torch.Tensor:
    """Run the synthesis network: latents (B, nL, d_w) -> images (B, 3, H, W) in [0, 1].

    Differentiable with respect to both the weights and the latents. A
    (nL, d_w) latent is treated as a batch of one.
    """
    cfg = weights.config
    squeeze = w.dim() == 2
    if squeeze:
        w = w.unsqueeze(0)
    if w.shape[-2] != cfg.n_layers or w.shape[-1] != cfg.d_w:
        raise ShapeMismatchError(f"latent shape {tuple(w.shape)} does not match ({cfg.n_layers}, {cfg.d_w})")
    weights.validate()

    b = w.shape[0]
    x = weights.const.unsqueeze(0).expand(b, -1, -1, -1)
    for layer in range(1, cfg.n_layers + 1):
        i = layer - 1
        styles = F.linear(w[:, i], weights.affine_w[i], weights.affine_b[i])
        x = _modulated_conv(x, weights.conv_w[i], styles, demodulate)
        x = F.leaky_relu(x + weights.conv_b[i][None, :, None, None], 0.2)
        if layer in cfg.upsample_after:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    rgb = F.conv2d(x, weights.torgb_w, weights.torgb_b)
    out = torch.sigmoid(rgb)
    return out.squeeze(0) if squeeze else out


class MappingNetwork(nn.Module):
    """Two-layer MLP from noise space to latent space."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(config.d_z, config.mapping_hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(config.mapping_hidden, config.d_w),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class InversionEncoder(nn.Module):
    """Convolutional image-to-latent encoder emitting one vector per layer."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        n_down = int(round(math.log2(config.resolution / 4)))
        widths = [min(128, 48 * 2**i) for i in range(n_down + 1)]
        layers: list[nn.Module] = [nn.Conv2d(3, widths[0], 3, padding=1), _group_norm(widths[0]), nn.LeakyReLU(0.2)]
        for i in range(n_down):
            layers += [
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                _group_norm(widths[i + 1]),
                nn.LeakyReLU(0.2),
            ]
        self.trunk = nn.Sequential(*layers)
        flat = widths[-1] * 16
        self.head = nn.Sequential(nn.Linear(flat, 256), nn.LeakyReLU(0.2), nn.Linear(256, config.n_layers * config.d_w))
        with torch.no_grad():
            self.head[-1].weight.mul_(0.1)
            self.head[-1].bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (3, self.config.resolution, self.config.resolution):
            raise ShapeMismatchError(
                f"expected (*, 3, {self.config.resolution}, {self.config.resolution}) input, got {tuple(x.shape)}"
            )
        h = self.trunk(x).flatten(1)
        return self.head(h).view(-1, self.config.n_layers, self.config.d_w)


@contextmanager
def thread_count(threads: int | None):
    """Temporarily pin the intra-op thread count (single-thread determinism mode)."""
    if threads is None:
        yield
        return
    prev = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def sample_noise(seed: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Seeded standard-normal draw feeding the mapping network."""
    g = torch.Generator().manual_seed(seed)
    return torch.randn(dim, generator=g).to(dtype)


class GeneratorBundle:
    """Generator, mapping network, and inversion encoder as one frozen unit."""

    def __init__(self, config: GeneratorConfig):
        self.config = config
        self.generator = ToyGenerator(config)
        self.mapping = MappingNetwork(config)
        self.encoder = InversionEncoder(config)
        self.trained = False

    def weights(self) -> GeneratorWeights:
        return self.generator.weights()

    def freeze(self) -> None:
        for m in (self.generator, self.mapping, self.encoder):
            m.requires_grad_(False)
            m.eval()
        self.trained = True

    def sample_latent(self, seed: int) -> torch.Tensor:
        """Seeded z ~ N(0, 1) through the mapping network, broadcast to all layers."""
        z = sample_noise(seed, self.config.d_z, self.generator.const.dtype)
        with torch.no_grad():
            w = self.mapping(z)
        return w.unsqueeze(0).repeat(self.config.n_layers, 1)

    def invert(self, x: torch.Tensor) -> torch.Tensor:
        """Image(s) -> latent code(s). Requires the pretrained encoder."""
        if not self.trained:
            raise NotTrainedError("inversion encoder has not been pretrained")
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        with torch.no_grad():
            w = self.encoder(x)
        return w.squeeze(0) if squeeze else w

    def save(self, path: str | Path) -> None:
        arrays = {}
        arrays.update(state_dict_arrays(self.generator, "generator."))
        arrays.update(state_dict_arrays(self.mapping, "mapping."))
        arrays.update(state_dict_arrays(self.encoder, "encoder."))
        meta = {"config": asdict(self.config), "trained": self.trained}
        save_checkpoint(path, "generator", arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorBundle":
        ckpt = load_checkpoint(path, expect_kind="generator")
        raw = dict(ckpt.meta["config"])
        raw["channels"] = tuple(raw["channels"])
        raw["upsample_after"] = tuple(raw["upsample_after"])
        bundle = cls(GeneratorConfig(**raw))
        load_state_arrays(bundle.generator, ckpt.arrays, "generator.")
        load_state_arrays(bundle.mapping, ckpt.arrays, "mapping.")
        load_state_arrays(bundle.encoder, ckpt.arrays, "encoder.")
        if ckpt.meta.get("trained"):
            bundle.freeze()
        return bundle


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    holdout_fraction: float = 0.1
    psnr_gate_db: float = 22.0
    broadcast_weight: float = 0.5
    moment_weight: float = 0.1
    embed_weight: float = 0.0
    log_every: int = 200
    threads: int | None = None


@dataclass
class PretrainResult:
    bundle: GeneratorBundle
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    holdout_psnr: float = 0.0
    gate_passed: bool = False


def _psnr_db(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(F.mse_loss(a, b))
    if mse <= 1e-10:
        return 100.0
    return min(10.0 * math.log10(1.0 / mse), 100.0)


def pretrain_generator(
    samples,
    gen_config: GeneratorConfig | None = None,
    cfg: PretrainConfig | None = None,
    embedding=None,
    enforce_gate: bool = True,
) -> PretrainResult:
    """Jointly train generator + encoder as a reconstruction autoencoder.

    Three terms: pixel MSE on the per-layer inversion path, pixel MSE on the
    layer-averaged broadcast path (so single-vector latents synthesize cleanly),
    and a moment-matching term pulling the mapping network's output
    distribution onto the encoder's latent statistics. If an embedding model
    is supplied, an embedding-feature MSE is added with ``embed_weight``.

    Returns the frozen bundle; raises ConvergenceError when the held-out PSNR
    gate is missed and ``enforce_gate`` is set.
    """
    gen_config = gen_config or GeneratorConfig()
    cfg = cfg or PretrainConfig()
    if len(samples) < 2000:
        raise ValueError(f"pretraining requires >= 2000 samples, got {len(samples)}")

    with thread_count(cfg.threads):
        torch.manual_seed(cfg.seed)
        bundle = GeneratorBundle(gen_config)
        params = (
            list(bundle.generator.parameters())
            + list(bundle.encoder.parameters())
            + list(bundle.mapping.parameters())
        )
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)

        images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
        g = torch.Generator().manual_seed(cfg.seed)
        perm = torch.randperm(len(samples), generator=g)
        n_hold = max(1, int(len(samples) * cfg.holdout_fraction))
        hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

        weights = bundle.weights()
        curve: list[tuple[int, float]] = []
        for step in range(cfg.steps):
            batch = train_idx[torch.randint(len(train_idx), (cfg.batch_size,), generator=g)]
            x = images[batch]
            w = bundle.encoder(x)
            recon = synthesize(weights, w)
            loss = F.mse_loss(recon, x)
            if cfg.broadcast_weight > 0:
                w_mean = w.mean(dim=1, keepdim=True).expand(-1, gen_config.n_layers, -1)
                loss = loss + cfg.broadcast_weight * F.mse_loss(synthesize(weights, w_mean), x)
            if cfg.moment_weight > 0:
                z = torch.randn(cfg.batch_size, gen_config.d_z, generator=g)
                wz = bundle.mapping(z)
                wf = w.detach().reshape(-1, gen_config.d_w)
                loss = loss + cfg.moment_weight * (
                    F.mse_loss(wz.mean(0), wf.mean(0)) + F.mse_loss(wz.std(0), wf.std(0))
                )
            if embedding is not None and cfg.embed_weight > 0:
                loss = loss + cfg.embed_weight * F.mse_loss(embedding.encode_image(recon), embedding.encode_image(x))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if not torch.isfinite(loss):
                raise ConvergenceError(f"non-finite pretraining loss at step {step}")
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                curve.append((step, loss.item()))

        bundle.freeze()
        with torch.no_grad():
            vals = []
            for i in range(0, n_hold, 64):
                x = images[hold_idx[i : i + 64]]
                recon = synthesize(weights, bundle.encoder(x))
                vals.extend(_psnr_db(recon[j], x[j]) for j in range(len(x)))
            psnr = float(np.mean(vals))

    result = PretrainResult(bundle=bundle, loss_curve=curve, holdout_psnr=psnr, gate_passed=psnr >= cfg.psnr_gate_db)
    if enforce_gate and not result.gate_passed:
        raise ConvergenceError(
            f"held-out reconstruction PSNR {psnr:.2f} dB below the {cfg.psnr_gate_db} dB gate", result
        )
    return result
