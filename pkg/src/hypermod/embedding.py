"""Joint text-image embedding trained contrastively on captioned renders.

Both encoders emit unit-norm vectors in a shared space. The image branch is a
small strided conv stack; the text branch mean-pools learned token embeddings
through a two-layer MLP, so token order never matters. Prompt conditioning
downstream works on differences of text embeddings, and the two alignment
losses here (directional and global) are the editing objectives.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import shapes
from .checkpoint import load_checkpoint, load_state_arrays, save_checkpoint, state_dict_arrays
from .errors import ConvergenceError, NotTrainedError, VocabularyError
from .generator import _group_norm, thread_count

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class EmbedConfig:
    d_e: int = 64
    image_size: int = 32
    widths: tuple[int, ...] = (32, 64, 96, 128)
    token_dim: int = 64
    text_hidden: int = 128
    vocab: tuple[str, ...] = shapes.VOCABULARY


class ImageEncoder(nn.Module):
    def __init__(self, config: EmbedConfig):
        super().__init__()
        self.config = config
        blocks: list[nn.Module] = []
        c_prev = 3
        for c in config.widths:
            blocks += [nn.Conv2d(c_prev, c, 3, stride=2, padding=1), _group_norm(c), nn.LeakyReLU(0.2)]
            c_prev = c
        self.trunk = nn.Sequential(*blocks)
        spatial = config.image_size // 2 ** len(config.widths)
        if spatial < 1:
            raise ValueError("image_size too small for the configured block count")
        self.head = nn.Linear(config.widths[-1] * spatial * spatial, config.d_e)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = self.head(self.trunk(x).flatten(1))
        return F.normalize(v, dim=-1)


class TextEncoder(nn.Module):
    def __init__(self, config: EmbedConfig):
        super().__init__()
        self.config = config
        self.tokens = nn.Embedding(len(config.vocab), config.token_dim)
        self.mlp = nn.Sequential(
            nn.Linear(config.token_dim, config.text_hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(config.text_hidden, config.d_e),
        )

    def forward(self, idx: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.tokens(idx) * mask.unsqueeze(-1)
        pooled = emb.sum(dim=1) / mask.sum(dim=1, keepdim=True).clamp(min=1.0)
        return F.normalize(self.mlp(pooled), dim=-1)


class JointEmbedding:
    """Trained encoder pair plus the contrastive temperature."""

    def __init__(self, config: EmbedConfig):
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(0.15)))
        self._token_index = {tok: i for i, tok in enumerate(config.vocab)}
        self.trained = False

    @property
    def temperature(self) -> float:
        return float(self.log_temperature.exp())

    def freeze(self) -> None:
        self.image_encoder.requires_grad_(False).eval()
        self.text_encoder.requires_grad_(False).eval()
        self.log_temperature.requires_grad_(False)
        self.trained = True

    def _require_trained(self):
        if not self.trained:
            raise NotTrainedError("embedding has not been trained")

    def token_ids(self, text: str | list[str]) -> list[int]:
        tokens = text.split() if isinstance(text, str) else list(text)
        ids = []
        for tok in tokens:
            if tok not in self._token_index:
                raise VocabularyError(tok)
            ids.append(self._token_index[tok])
        return ids

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embedding of image(s); differentiable w.r.t. pixels."""
        self._require_trained()
        squeeze = x.dim() == 3
        v = self.image_encoder(x.unsqueeze(0) if squeeze else x)
        return v.squeeze(0) if squeeze else v

    def _encode_token_batch(self, token_lists: list[list[int]]) -> torch.Tensor:
        width = max(len(t) for t in token_lists)
        idx = torch.zeros(len(token_lists), width, dtype=torch.long)
        mask = torch.zeros(len(token_lists), width, dtype=self.text_encoder.tokens.weight.dtype)
        for r, toks in enumerate(token_lists):
            idx[r, : len(toks)] = torch.tensor(toks, dtype=torch.long)
            mask[r, : len(toks)] = 1.0
        return self.text_encoder(idx, mask)

    def encode_text(self, text: str | list[str]) -> torch.Tensor:
        self._require_trained()
        return self._encode_token_batch([self.token_ids(text)]).squeeze(0)

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        self._require_trained()
        return self._encode_token_batch([self.token_ids(t) for t in texts])

    def prompt_direction(self, target: str | list[str], source: str | list[str]) -> torch.Tensor:
        """Difference of text embeddings, target minus source. Not renormalized."""
        return self.encode_text(target) - self.encode_text(source)

    def save(self, path: str | Path) -> None:
        arrays = {}
        arrays.update(state_dict_arrays(self.image_encoder, "image_encoder."))
        arrays.update(state_dict_arrays(self.text_encoder, "text_encoder."))
        arrays["log_temperature"] = self.log_temperature.detach().numpy()
        cfg = asdict(self.config)
        cfg["widths"] = list(cfg["widths"])
        cfg["vocab"] = list(cfg["vocab"])
        save_checkpoint(path, "embedding", arrays, {"config": cfg, "trained": self.trained})

    @classmethod
    def load(cls, path: str | Path) -> "JointEmbedding":
        ckpt = load_checkpoint(path, expect_kind="embedding")
        raw = dict(ckpt.meta["config"])
        raw["widths"] = tuple(raw["widths"])
        raw["vocab"] = tuple(raw["vocab"])
        model = cls(EmbedConfig(**raw))
        load_state_arrays(model.image_encoder, ckpt.arrays, "image_encoder.")
        load_state_arrays(model.text_encoder, ckpt.arrays, "text_encoder.")
        with torch.no_grad():
            model.log_temperature.copy_(torch.from_numpy(ckpt.arrays["log_temperature"]))
        if ckpt.meta.get("trained"):
            model.freeze()
        return model


def cosine_alignment_loss(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """1 - cos(u, v) with an epsilon-guarded denominator, in [0, 2].

    An exactly zero operand falls back to the orthogonal convention (loss 1)
    and is reported through the module logger.
    """
    num = (u * v).sum(dim=-1)
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        logger.warning("cosine_alignment_loss: zero-norm operand, using orthogonal convention (loss 1)")
    return 1.0 - num / (nu * nv + COSINE_EPS)


def directional_loss(
    embedding: JointEmbedding,
    y: torch.Tensor,
    x: torch.Tensor,
    target_text: str | list[str],
    source_text: str | list[str],
) -> torch.Tensor:
    """Misalignment between the image-embedding shift y-x and the prompt shift.

    Batched inputs reduce to the mean over the batch. Differentiable w.r.t. y.
    """
    diff_img = embedding.encode_image(y) - embedding.encode_image(x)
    diff_txt = embedding.prompt_direction(target_text, source_text)
    return cosine_alignment_loss(diff_img, diff_txt).mean()


def global_loss(embedding: JointEmbedding, y: torch.Tensor, text: str | list[str]) -> torch.Tensor:
    """Misalignment between an image embedding and a single text embedding."""
    return cosine_alignment_loss(embedding.encode_image(y), embedding.encode_text(text)).mean()


@dataclass
class ContrastiveConfig:
    steps: int = 6000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1
    retrieval_gate: float = 0.90
    gallery_size: int = 32
    full_caption_prob: float = 0.5
    noise_std: float = 0.05
    log_every: int = 200
    threads: int | None = None


@dataclass
class ContrastiveResult:
    model: JointEmbedding
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    retrieval_top1: float = 0.0
    gate_passed: bool = False


_MIX_TEMPLATES = ("shape", "color_shape", "size_shape", "background_shape")


def info_nce(img: torch.Tensor, txt: torch.Tensor, log_temperature: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE over matched rows of unit-norm embeddings."""
    logits = img @ txt.t() / log_temperature.exp()
    labels = torch.arange(img.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def retrieval_accuracy(model: JointEmbedding, samples, gallery_size: int = 32, seed: int = 0) -> float:
    """Image-to-caption top-1 accuracy against a fixed caption gallery.

    The gallery is ``gallery_size`` distinct captions sampled (seeded) from the
    evaluation captions; accuracy is scored on the samples whose caption made
    the gallery.
    """
    rng = random.Random(seed)
    distinct = sorted({s.caption for s in samples})
    gallery = rng.sample(distinct, min(gallery_size, len(distinct)))
    gallery_pos = {c: i for i, c in enumerate(gallery)}
    eval_samples = [s for s in samples if s.caption in gallery_pos]
    if not eval_samples:
        raise ValueError("no evaluation samples fall inside the caption gallery")
    with torch.no_grad():
        txt = model.encode_texts(gallery)
        hits = 0
        for i in range(0, len(eval_samples), 64):
            chunk = eval_samples[i : i + 64]
            imgs = torch.from_numpy(np.stack([s.image for s in chunk])).permute(0, 3, 1, 2)
            pred = (model.encode_image(imgs) @ txt.t()).argmax(dim=1)
            hits += sum(int(pred[j]) == gallery_pos[chunk[j].caption] for j in range(len(chunk)))
    return hits / len(eval_samples)


def train_contrastive(
    samples,
    config: EmbedConfig | None = None,
    cfg: ContrastiveConfig | None = None,
    enforce_gate: bool = True,
) -> ContrastiveResult:
    """Train the joint embedding with symmetric InfoNCE.

    Captions are re-templated on the fly: each picked sample keeps its full
    caption with probability ``full_caption_prob``, otherwise one of the
    partial templates is used, so prompt phrasings like "a red circle" are
    grounded alongside full captions. Pixel noise of ``noise_std`` is added to
    training images so the image embedding ignores imperceptible
    perturbations; without it, gradient-based editing can move embeddings
    without visibly changing the image.
    """
    config = config or EmbedConfig()
    cfg = cfg or ContrastiveConfig()
    if len(samples) < 2000:
        raise ValueError(f"contrastive training requires >= 2000 samples, got {len(samples)}")

    with thread_count(cfg.threads):
        torch.manual_seed(cfg.seed)
        model = JointEmbedding(config)
        params = list(model.image_encoder.parameters()) + list(model.text_encoder.parameters())
        params.append(model.log_temperature)
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)

        images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
        g = torch.Generator().manual_seed(cfg.seed)
        perm = torch.randperm(len(samples), generator=g)
        n_hold = max(1, int(len(samples) * cfg.holdout_fraction))
        hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
        caption_rng = random.Random(cfg.seed)

        curve: list[tuple[int, float]] = []
        for step in range(cfg.steps):
            batch = train_idx[torch.randint(len(train_idx), (cfg.batch_size,), generator=g)]
            captions = []
            for i in batch.tolist():
                if caption_rng.random() < cfg.full_caption_prob:
                    captions.append(samples[i].caption)
                else:
                    captions.append(shapes.caption(samples[i].labels, caption_rng.choice(_MIX_TEMPLATES)))
            x = images[batch]
            if cfg.noise_std > 0:
                x = (x + cfg.noise_std * torch.randn(x.shape, generator=g)).clamp(0.0, 1.0)
            img = model.image_encoder(x)
            txt = model._encode_token_batch([model.token_ids(c) for c in captions])
            loss = info_nce(img, txt, model.log_temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                raise ConvergenceError(f"non-finite contrastive loss at step {step}")
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                curve.append((step, loss.item()))

        model.freeze()
        top1 = retrieval_accuracy(model, [samples[i] for i in hold_idx.tolist()], cfg.gallery_size, seed=cfg.seed)

    result = ContrastiveResult(model=model, loss_curve=curve, retrieval_top1=top1, gate_passed=top1 >= cfg.retrieval_gate)
    if enforce_gate and not result.gate_passed:
        raise ConvergenceError(
            f"held-out retrieval top-1 {top1:.3f} below the {cfg.retrieval_gate:.2f} gate", result
        )
    return result
