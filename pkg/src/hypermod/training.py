"""Editor training: objective assembly and the optimization loop.

The objective is a weighted sum of three terms computed between the edited
image and the frozen reconstruction of the same latent: a text-image alignment
term (directional by default, global in the ablation), the Euclidean pixel
norm of the change, and a feature-similarity term from a frozen shape
classifier that plays the role of an identity network at this scale. Only the
editor's own parameters (backbone, fusion modulator, heads) receive gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state_arrays, save_checkpoint, state_dict_arrays
from .editor import Editor, EditorConfig, reassign
from .embedding import JointEmbedding, cosine_alignment_loss
from .errors import ConvergenceError, NotTrainedError, ShapeMismatchError
from .generator import GeneratorBundle, _group_norm, synthesize, thread_count
from .selector import LayerSelection, read_selection_csv
from . import shapes


class ShapeFeatureNet(nn.Module):
    """Small shape classifier whose penultimate features act as identity features."""

    def __init__(self, feature_dim: int = 128):
        super().__init__()
        widths = (32, 64, 96)
        blocks: list[nn.Module] = []
        c_prev = 3
        for c in widths:
            blocks += [nn.Conv2d(c_prev, c, 3, stride=2, padding=1), _group_norm(c), nn.LeakyReLU(0.2)]
            c_prev = c
        self.trunk = nn.Sequential(*blocks)
        # Pool to a small spatial map, not a single vector: rotated-shape
        # identity needs layout information.
        self.embed = nn.Linear(widths[-1] * 4, feature_dim)
        self.classify = nn.Linear(feature_dim, len(shapes.SHAPES))
        self.trained = False

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate-layer features; requires the trained, frozen net."""
        if not self.trained:
            raise NotTrainedError("shape feature net has not been trained")
        return self._features(x)

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        h = F.adaptive_avg_pool2d(self.trunk(x), 2).flatten(1)
        return F.leaky_relu(self.embed(h), 0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self._features(x))

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.trained = True

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, "rsim", state_dict_arrays(self), {"trained": self.trained})

    @classmethod
    def load(cls, path: str | Path) -> "ShapeFeatureNet":
        ckpt = load_checkpoint(path, expect_kind="rsim")
        net = cls()
        load_state_arrays(net, ckpt.arrays)
        if ckpt.meta.get("trained"):
            net.freeze()
        return net


_CHANNEL_PERMS = torch.tensor([[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]])


def train_shape_features(
    samples,
    steps: int = 600,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    color_augment: bool = True,
) -> ShapeFeatureNet:
    """Train the frozen identity-feature surrogate on exact shape labels.

    ``color_augment`` permutes RGB channels per sample during training so the
    learned features track geometry, not palette: the similarity term built on
    them then penalizes shape changes without resisting color edits.
    """
    torch.manual_seed(seed)
    net = ShapeFeatureNet()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    labels = torch.tensor([shapes.SHAPES.index(s.labels.shape) for s in samples])
    g = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        batch = torch.randint(len(samples), (batch_size,), generator=g)
        x = images[batch]
        if color_augment:
            perms = _CHANNEL_PERMS[torch.randint(len(_CHANNEL_PERMS), (len(batch),), generator=g)]
            x = torch.gather(x, 1, perms[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3]))
        loss = F.cross_entropy(net(x), labels[batch])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.freeze()
    return net


def similarity_loss(y_edit: torch.Tensor, y_recon: torch.Tensor, rsim: ShapeFeatureNet) -> torch.Tensor:
    """1 - cos between identity features of the edit and the reconstruction."""
    return cosine_alignment_loss(rsim.features(y_edit), rsim.features(y_recon)).mean()


def l2_loss(y_edit: torch.Tensor, y_recon: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """Euclidean norm of the pixel change, per image, averaged over the batch.

    ``normalize`` divides each norm by sqrt(pixel count), giving a per-pixel
    RMS instead of the raw norm.
    """
    if y_edit.shape != y_recon.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(y_edit.shape)} vs {tuple(y_recon.shape)}")
    squeeze = y_edit.dim() == 3
    if squeeze:
        y_edit, y_recon = y_edit.unsqueeze(0), y_recon.unsqueeze(0)
    diff = (y_edit - y_recon).flatten(1)
    norms = diff.norm(dim=1)
    if normalize:
        norms = norms / (diff.shape[1] ** 0.5)
    return norms.mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    align: torch.Tensor
    l2: torch.Tensor
    sim: torch.Tensor


@dataclass
class TrainConfig:
    steps: int = 5000
    prompt_pool: list[tuple[str, str]] = field(default_factory=list)  # (target, source) pairs
    loss_mode: str = "directional"  # or "global"
    selection: LayerSelection | tuple[int, ...] | str = "all"
    lambda_clip: float = 1.0
    lambda_norm: float = 1.0
    lambda_sim: float = 0.1
    batch_size: int = 4
    learning_rate: float = 0.001
    seed: int = 0
    l2_normalize: bool = False
    directional_reference: str = "source"  # or "reconstruction"
    lr_schedule: str = "constant"  # or "cosine"
    preservation_warmup: float = 0.0  # fraction of steps with alignment only
    align_gate: float = 0.5
    checkpoint_every: int = 500
    threads: int | None = None

    def __post_init__(self):
        if min(self.lambda_clip, self.lambda_norm, self.lambda_sim) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.prompt_pool:
            raise ValueError("prompt_pool must be nonempty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mode not in ("directional", "global"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.directional_reference not in ("source", "reconstruction"):
            raise ValueError(f"unknown directional_reference {self.directional_reference!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.preservation_warmup < 1.0:
            raise ValueError("preservation_warmup must be in [0, 1)")

    def resolve_selection(self, n_layers: int) -> tuple[int, ...]:
        if isinstance(self.selection, str):
            if self.selection != "all":
                raise ValueError(f"unknown selection spec {self.selection!r}")
            return tuple(range(1, n_layers + 1))
        if isinstance(self.selection, LayerSelection):
            return self.selection.layers
        return tuple(sorted(self.selection))


def total_loss(
    x: torch.Tensor,
    y_edit: torch.Tensor,
    y_recon: torch.Tensor,
    prompts: tuple[str, str],
    cfg: TrainConfig,
    embedding: JointEmbedding,
    rsim: ShapeFeatureNet,
) -> LossBreakdown:
    """Weighted sum of alignment, pixel-change, and identity-feature terms.

    ``prompts`` is a (target, source) pair. Directional mode aligns the
    embedding shift from a reference image to the edit with the prompt
    direction; the reference is the real image x by default, or the frozen
    reconstruction when ``cfg.directional_reference`` says so (that choice
    removes the inversion error from the measured shift, which matters when
    reconstruction displacement in embedding space rivals the edit's). Global
    mode aligns the edit's embedding with the target text directly.
    """
    target_text, source_text = prompts
    if cfg.loss_mode == "directional":
        ref = x if cfg.directional_reference == "source" else y_recon
        u = embedding.encode_image(y_edit) - embedding.encode_image(ref)
        v = embedding.prompt_direction(target_text, source_text)
        align = cosine_alignment_loss(u, v.unsqueeze(0) if u.dim() > 1 else v).mean()
    else:
        align = cosine_alignment_loss(embedding.encode_image(y_edit), embedding.encode_text(target_text)).mean()
    l2 = l2_loss(y_edit, y_recon, normalize=cfg.l2_normalize)
    sim = similarity_loss(y_edit, y_recon, rsim)
    return LossBreakdown(
        total=cfg.lambda_clip * align + cfg.lambda_norm * l2 + cfg.lambda_sim * sim,
        align=align,
        l2=l2,
        sim=sim,
    )


LOSS_COLUMNS = ("step", "total", "align", "l2", "sim")


@dataclass
class TrainResult:
    editor: Editor
    rows: list[tuple[int, float, float, float, float]]
    align_initial: float
    align_final: float
    gate_passed: bool

    def write_losses_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOSS_COLUMNS)
            writer.writerows(self.rows)


def train_editor(
    cfg: TrainConfig,
    bundle: GeneratorBundle,
    embedding: JointEmbedding,
    rsim: ShapeFeatureNet,
    samples,
    out_dir: str | Path | None = None,
    editor_config: EditorConfig | None = None,
    enforce_gate: bool = True,
) -> TrainResult:
    """Optimize the editor against the assembled objective.

    Inversions, reconstructions, source-image embeddings, and prompt
    directions are all frozen, so they are computed once up front. Each step
    draws an image batch and one prompt pair from the pool. Checkpoints are
    written atomically every ``checkpoint_every`` steps when ``out_dir`` is
    given; a non-finite loss aborts, leaving the last good checkpoint behind.

    The gate requires the final alignment term (tail-averaged) to sit below
    ``align_gate`` times its step-0 value.
    """
    for component, name in ((bundle.trained, "generator bundle"), (embedding.trained, "embedding"), (rsim.trained, "identity features")):
        if not component:
            raise NotTrainedError(f"{name} must be trained before editor training")

    with thread_count(cfg.threads):
        torch.manual_seed(cfg.seed)
        selection = cfg.resolve_selection(bundle.config.n_layers)
        editor = Editor(bundle.config, selection, editor_config or EditorConfig(d_e=embedding.config.d_e))
        opt = torch.optim.Adam(editor.parameters(), lr=cfg.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps) if cfg.lr_schedule == "cosine" else None
        weights = bundle.weights()

        images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
        with torch.no_grad():
            w_init = torch.cat([bundle.invert(images[i : i + 128]) for i in range(0, len(images), 128)])
            y_recon = torch.cat([synthesize(weights, w_init[i : i + 128]) for i in range(0, len(images), 128)])
            ref_images = images if cfg.directional_reference == "source" else y_recon
            e_ref = torch.cat([embedding.encode_image(ref_images[i : i + 128]) for i in range(0, len(images), 128)])
            recon_feats = torch.cat([rsim.features(y_recon[i : i + 128]) for i in range(0, len(images), 128)])
            directions = [embedding.prompt_direction(t, s) for t, s in cfg.prompt_pool]
            target_embeds = [embedding.encode_text(t) for t, _ in cfg.prompt_pool]

        out_path = Path(out_dir) if out_dir is not None else None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)

        g = torch.Generator().manual_seed(cfg.seed)
        rows: list[tuple[int, float, float, float, float]] = []

        def checkpoint(tag_step: int) -> None:
            if out_path is not None:
                editor.save(out_path / "editor.ckpt", extra_meta={"step": tag_step, "loss_mode": cfg.loss_mode})

        for step in range(cfg.steps):
            batch = torch.randint(len(samples), (cfg.batch_size,), generator=g)
            pair = int(torch.randint(len(cfg.prompt_pool), (1,), generator=g))
            x = images[batch]
            factors = editor.factors(x, directions[pair])
            y_edit = synthesize(reassign(weights, factors), w_init[batch])

            if cfg.loss_mode == "directional":
                align = cosine_alignment_loss(embedding.encode_image(y_edit) - e_ref[batch], directions[pair].unsqueeze(0)).mean()
            else:
                align = cosine_alignment_loss(embedding.encode_image(y_edit), target_embeds[pair].unsqueeze(0)).mean()
            l2 = l2_loss(y_edit, y_recon[batch], normalize=cfg.l2_normalize)
            sim = cosine_alignment_loss(rsim.features(y_edit), recon_feats[batch]).mean()
            # Penalty continuation: the preservation terms switch on after the
            # warmup so optimization reliably enters the editing basin first.
            warm = step < cfg.preservation_warmup * cfg.steps
            loss = cfg.lambda_clip * align + (0.0 if warm else cfg.lambda_norm * l2 + cfg.lambda_sim * sim)

            if not torch.isfinite(loss):
                raise ConvergenceError(f"non-finite loss at step {step}; last good checkpoint retained")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            rows.append((step, loss.item(), align.item(), l2.item(), sim.item()))
            if (step + 1) % cfg.checkpoint_every == 0:
                checkpoint(step)

        checkpoint(cfg.steps - 1)
        if out_path is not None:
            TrainResult(editor, rows, 0, 0, False).write_losses_csv(out_path / "losses.csv")

    tail = max(1, min(25, cfg.steps // 20))
    align_initial = rows[0][2]
    align_final = float(np.mean([r[2] for r in rows[-tail:]]))
    gate_passed = align_final <= cfg.align_gate * align_initial
    result = TrainResult(editor, rows, align_initial, align_final, gate_passed)
    if enforce_gate and not gate_passed:
        raise ConvergenceError(
            f"alignment term only reached {align_final:.4f} from {align_initial:.4f} "
            f"(gate {cfg.align_gate:.0%} reduction)",
            result,
        )
    return result


def parse_prompt_pool(text: str) -> list[tuple[str, str]]:
    """Parse 'source -> target' pairs separated by ';' into (target, source) tuples."""
    pool = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "->" not in chunk:
            raise ValueError(f"prompt pair {chunk!r} must use 'source -> target'")
        source, target = (part.strip() for part in chunk.split("->", 1))
        pool.append((target, source))
    if not pool:
        raise ValueError("no prompt pairs given")
    return pool


def load_train_config_file(path: str | Path) -> tuple[TrainConfig, dict[str, str]]:
    """Read a flat key=value config file.

    TrainConfig keys are consumed; everything else (checkpoint paths, data
    dir, output dir) is returned for the caller. Prompt pairs go under the
    ``prompts`` key; ``selection`` is 'all', a comma list of layer indices, or
    a path to a selection CSV.
    """
    entries: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()

    kwargs: dict = {}
    if "prompts" in entries:
        kwargs["prompt_pool"] = parse_prompt_pool(entries.pop("prompts"))
    if "selection" in entries:
        raw = entries.pop("selection")
        if raw == "all":
            kwargs["selection"] = "all"
        elif raw.endswith(".csv"):
            kwargs["selection"] = read_selection_csv(raw)
        else:
            kwargs["selection"] = tuple(int(v) for v in raw.split(","))
    for key, cast in (
        ("steps", int),
        ("loss_mode", str),
        ("directional_reference", str),
        ("lr_schedule", str),
        ("lambda_clip", float),
        ("lambda_norm", float),
        ("lambda_sim", float),
        ("preservation_warmup", float),
        ("batch_size", int),
        ("learning_rate", float),
        ("seed", int),
        ("checkpoint_every", int),
    ):
        if key in entries:
            kwargs[key] = cast(entries.pop(key))
    if "l2_normalize" in entries:
        kwargs["l2_normalize"] = entries.pop("l2_normalize").lower() in ("1", "true", "yes")
    return TrainConfig(**kwargs), entries
