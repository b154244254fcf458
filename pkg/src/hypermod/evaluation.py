"""Evaluation: image metrics, the exact-label attribute oracle, edit reports,
and the ablation grid driver.

The oracle is a four-head classifier trained on labeled renders and used only
at evaluation time; edit success is "the oracle reads the target value off the
edited image", and preservation is "no other attribute changed between the
reconstruction and the edit".
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter
from torch import nn

from . import shapes
from .checkpoint import load_checkpoint, load_state_arrays, save_checkpoint, state_dict_arrays
from .editor import EditPipeline, WeightFactors, interpolate_factors
from .errors import ConvergenceError, NotTrainedError, ShapeMismatchError
from .generator import _group_norm
from .training import ShapeFeatureNet, TrainConfig, train_editor

PSNR_CAP_DB = 100.0

ATTRIBUTES = ("shape", "color", "size", "background")
_ATTRIBUTE_VALUES = {
    "shape": shapes.SHAPES,
    "color": shapes.COLORS,
    "size": shapes.SIZES,
    "background": shapes.BACKGROUNDS,
}


def to_numpy_image(x) -> np.ndarray:
    """Normalize a (H, W, 3) array or a (3, H, W) tensor to float64 numpy."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu()
        if x.dim() == 3 and x.shape[0] == 3:
            x = x.permute(1, 2, 0)
        x = x.numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a, b = to_numpy_image(a), to_numpy_image(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(a, b, win_size: int = 7, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity with a uniform window and standard stabilizers.

    Channels are scored independently and averaged; local statistics use an
    unbiased covariance normalization and the border half-window is cropped
    before averaging.
    """
    a, b = to_numpy_image(a), to_numpy_image(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < win_size:
        raise ValueError(f"images smaller than the {win_size}x{win_size} window")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    np_win = win_size * win_size
    cov_norm = np_win / (np_win - 1)
    pad = (win_size - 1) // 2

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        ux = uniform_filter(x, size=win_size)
        uy = uniform_filter(y, size=win_size)
        uxx = uniform_filter(x * x, size=win_size)
        uyy = uniform_filter(y * y, size=win_size)
        uxy = uniform_filter(x * y, size=win_size)
        vx = cov_norm * (uxx - ux * ux)
        vy = cov_norm * (uyy - uy * uy)
        vxy = cov_norm * (uxy - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(float(np.mean(s[pad:-pad, pad:-pad])))
    return float(np.mean(vals))


class AttributeOracle(nn.Module):
    """Shared trunk, one classification head per attribute."""

    def __init__(self):
        super().__init__()
        widths = (32, 64, 128)
        blocks: list[nn.Module] = []
        c_prev = 3
        for c in widths:
            blocks += [nn.Conv2d(c_prev, c, 3, stride=2, padding=1), _group_norm(c), nn.LeakyReLU(0.2)]
            c_prev = c
        self.trunk = nn.Sequential(*blocks)
        # 4x4 spatial pooling: rotation-dependent shape classes need layout.
        self.neck = nn.Linear(widths[-1] * 16, 256)
        self.heads = nn.ModuleDict({attr: nn.Linear(256, len(vals)) for attr, vals in _ATTRIBUTE_VALUES.items()})
        self.trained = False

    def logits(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        h = F.leaky_relu(self.neck(F.adaptive_avg_pool2d(self.trunk(x), 4).flatten(1)), 0.2)
        return {attr: head(h) for attr, head in self.heads.items()}

    def predict(self, x: torch.Tensor) -> list[dict[str, str]]:
        """Attribute labels for a batch of images."""
        if not self.trained:
            raise NotTrainedError("oracle has not been trained")
        if x.dim() == 3:
            x = x.unsqueeze(0)
        with torch.no_grad():
            logits = self.logits(x)
        out = []
        for i in range(x.shape[0]):
            out.append({attr: _ATTRIBUTE_VALUES[attr][int(logits[attr][i].argmax())] for attr in ATTRIBUTES})
        return out

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.trained = True

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, "oracle", state_dict_arrays(self), {"trained": self.trained})

    @classmethod
    def load(cls, path: str | Path) -> "AttributeOracle":
        ckpt = load_checkpoint(path, expect_kind="oracle")
        oracle = cls()
        load_state_arrays(oracle, ckpt.arrays)
        if ckpt.meta.get("trained"):
            oracle.freeze()
        return oracle


@dataclass
class OracleResult:
    oracle: AttributeOracle
    accuracy: dict[str, float]
    gate_passed: bool


def train_oracle(
    samples,
    steps: int = 2500,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    holdout_fraction: float = 0.1,
    accuracy_gate: float = 0.95,
    enforce_gate: bool = True,
) -> OracleResult:
    """Train the four-head oracle; every head must clear the accuracy gate."""
    torch.manual_seed(seed)
    oracle = AttributeOracle()
    opt = torch.optim.Adam(oracle.parameters(), lr=lr)

    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    labels = {
        attr: torch.tensor([_ATTRIBUTE_VALUES[attr].index(getattr(s.labels, attr)) for s in samples])
        for attr in ATTRIBUTES
    }
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(samples), generator=g)
    n_hold = max(1, int(len(samples) * holdout_fraction))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    for _ in range(steps):
        batch = train_idx[torch.randint(len(train_idx), (batch_size,), generator=g)]
        logits = oracle.logits(images[batch])
        loss = sum(F.cross_entropy(logits[attr], labels[attr][batch]) for attr in ATTRIBUTES)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()

    oracle.freeze()
    accuracy = {}
    with torch.no_grad():
        logits = oracle.logits(images[hold_idx])
        for attr in ATTRIBUTES:
            pred = logits[attr].argmax(dim=1)
            accuracy[attr] = float((pred == labels[attr][hold_idx]).float().mean())
    gate_passed = all(acc >= accuracy_gate for acc in accuracy.values())
    result = OracleResult(oracle, accuracy, gate_passed)
    if enforce_gate and not gate_passed:
        raise ConvergenceError(f"oracle accuracy below the {accuracy_gate:.0%} gate: {accuracy}", result)
    return result


def prompt_target(target_text: str, source_text: str) -> tuple[str, str]:
    """The (attribute, value) a prompt pair introduces, from the closed vocab.

    Exactly one attribute value must appear in the target and not the source.
    """
    added = set(target_text.split()) - set(source_text.split())
    hits = []
    for tok in added:
        for attr, vals in _ATTRIBUTE_VALUES.items():
            if tok in vals:
                hits.append((attr, tok))
    if len(hits) != 1:
        raise ValueError(
            f"prompt pair ({target_text!r}, {source_text!r}) must introduce exactly one attribute value, found {hits}"
        )
    return hits[0]


REPORT_COLUMNS = (
    "index",
    "psnr",
    "ssim",
    "directional_alignment",
    "identity_score",
    "shape_before",
    "color_before",
    "size_before",
    "background_before",
    "shape_after",
    "color_after",
    "size_after",
    "background_after",
    "target_success",
    "preserved",
)


@dataclass
class EditReport:
    rows: list[dict] = field(default_factory=list)
    target_attribute: str = ""
    target_value: str = ""

    @property
    def target_success_rate(self) -> float:
        return float(np.mean([r["target_success"] for r in self.rows]))

    @property
    def preservation_rate(self) -> float:
        return float(np.mean([r["preserved"] for r in self.rows]))

    def attribute_preservation_rate(self, attr: str) -> float:
        return float(np.mean([r[f"{attr}_before"] == r[f"{attr}_after"] for r in self.rows]))

    def mean(self, column: str) -> float:
        return float(np.mean([r[column] for r in self.rows]))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in REPORT_COLUMNS})


def evaluate_edit(
    pipeline: EditPipeline,
    rsim: ShapeFeatureNet,
    oracle: AttributeOracle,
    samples,
    prompts: tuple[str, str],
    batch_size: int = 32,
) -> EditReport:
    """Per-image edit metrics plus oracle-based success and preservation.

    ``prompts`` is a (target, source) pair. "Before" labels are read off the
    reconstruction and "after" labels off the edit, so preservation isolates
    what the weight factors changed rather than inversion error. Success means
    the oracle reads the prompt's target value on the edited image;
    preservation means every other attribute label is unchanged.
    """
    target_text, source_text = prompts
    attr, value = prompt_target(target_text, source_text)
    report = EditReport(target_attribute=attr, target_value=value)
    with torch.no_grad():
        dt = pipeline.embedding.prompt_direction(target_text, source_text)

    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = torch.from_numpy(np.stack([s.image for s in chunk])).permute(0, 3, 1, 2).contiguous()
        result = pipeline.edit(x, target_text, source_text)
        y = result.image
        with torch.no_grad():
            recon = pipeline.reconstruct(x)
            e_shift = pipeline.embedding.encode_image(y) - pipeline.embedding.encode_image(x)
            align = F.cosine_similarity(e_shift, dt.unsqueeze(0), dim=1)
            ident = F.cosine_similarity(rsim.features(y), rsim.features(recon), dim=1)
        before = oracle.predict(recon)
        after = oracle.predict(y)
        for j in range(len(chunk)):
            row = {
                "index": start + j,
                "psnr": psnr(y[j], recon[j]),
                "ssim": ssim(y[j], recon[j]),
                "directional_alignment": float(align[j]),
                "identity_score": float(ident[j]),
            }
            for a in ATTRIBUTES:
                row[f"{a}_before"] = before[j][a]
                row[f"{a}_after"] = after[j][a]
            row["target_success"] = int(after[j][attr] == value)
            row["preserved"] = int(all(before[j][a] == after[j][a] for a in ATTRIBUTES if a != attr))
            report.rows.append(row)
    return report


ABLATION_COLUMNS = (
    "loss_mode",
    "selection",
    "steps",
    "seed",
    "head_params",
    "target_success",
    "preservation",
    "mean_psnr",
    "mean_ssim",
    "mean_alignment",
    "mean_identity",
    "failed",
    "error",
)


@dataclass
class AblationCell:
    loss_mode: str
    selection_kind: str
    head_params: int = 0
    report: EditReport | None = None
    failed: bool = False
    error: str = ""


def run_ablation(
    bundle,
    embedding,
    rsim: ShapeFeatureNet,
    oracle: AttributeOracle,
    train_samples,
    eval_samples,
    prompt_pool: list[tuple[str, str]],
    selection,
    steps: int,
    seed: int = 0,
    cells: list[tuple[str, str]] | None = None,
    out_csv: str | Path | None = None,
    editor_config=None,
    **train_overrides,
) -> list[AblationCell]:
    """Train every requested (loss_mode, selection_kind) cell under one budget.

    ``cells`` defaults to the full 2x2 grid over {directional, global} x
    {all, selected}. A failed cell is recorded and the grid continues.
    """
    if cells is None:
        cells = [(m, s) for m in ("directional", "global") for s in ("all", "selected")]
    results = []
    for loss_mode, sel_kind in cells:
        cell = AblationCell(loss_mode=loss_mode, selection_kind=sel_kind)
        try:
            cfg = TrainConfig(
                steps=steps,
                prompt_pool=list(prompt_pool),
                loss_mode=loss_mode,
                selection="all" if sel_kind == "all" else selection,
                seed=seed,
                **train_overrides,
            )
            trained = train_editor(cfg, bundle, embedding, rsim, train_samples, editor_config=editor_config, enforce_gate=False)
            cell.head_params = trained.editor.head_parameter_count()
            pipeline = EditPipeline(bundle, embedding, trained.editor)
            cell.report = evaluate_edit(pipeline, rsim, oracle, eval_samples, prompt_pool[0])
        except Exception as exc:  # noqa: BLE001 - cell failures are data, not fatal
            cell.failed = True
            cell.error = f"{type(exc).__name__}: {exc}"
        results.append(cell)

    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ABLATION_COLUMNS)
            for c in results:
                r = c.report
                writer.writerow(
                    [
                        c.loss_mode,
                        c.selection_kind,
                        steps,
                        seed,
                        c.head_params,
                        "" if r is None else f"{r.target_success_rate:.4f}",
                        "" if r is None else f"{r.preservation_rate:.4f}",
                        "" if r is None else f"{r.mean('psnr'):.4f}",
                        "" if r is None else f"{r.mean('ssim'):.4f}",
                        "" if r is None else f"{r.mean('directional_alignment'):.4f}",
                        "" if r is None else f"{r.mean('identity_score'):.4f}",
                        int(c.failed),
                        c.error,
                    ]
                )
    return results


def _to_uint8(img: np.ndarray, upscale: int) -> np.ndarray:
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if upscale > 1:
        arr = np.repeat(np.repeat(arr, upscale, axis=0), upscale, axis=1)
    return arr


def render_edit_grid(pipeline: EditPipeline, images, prompts: tuple[str, str], k: int, upscale: int = 4) -> np.ndarray:
    """Rows of [source | reconstruction | edit] for the first k (H, W, 3) images."""
    target_text, source_text = prompts
    rows = []
    for img in images[:k]:
        x = torch.from_numpy(img).permute(2, 0, 1)
        recon = pipeline.reconstruct(x)
        edit = pipeline.edit(x, target_text, source_text).image
        tiles = [_to_uint8(to_numpy_image(t), upscale) for t in (img, recon, edit)]
        sep = np.full((tiles[0].shape[0], 2, 3), 255, dtype=np.uint8)
        rows.append(np.concatenate([tiles[0], sep, tiles[1], sep, tiles[2]], axis=1))
    hsep = np.full((2, rows[0].shape[1], 3), 255, dtype=np.uint8)
    out = rows[0]
    for r in rows[1:]:
        out = np.concatenate([out, hsep, r], axis=0)
    return out


def render_interpolation_strip(
    pipeline: EditPipeline,
    image,
    factors_a: WeightFactors,
    factors_b: WeightFactors,
    eta_steps: int = 6,
    upscale: int = 4,
) -> np.ndarray:
    """Frames from factors_b (eta=0) to factors_a (eta=1), left to right."""
    etas = np.linspace(0.0, 1.0, eta_steps)
    tiles = []
    for eta in etas:
        mixed = interpolate_factors(factors_a, factors_b, float(eta))
        frame = pipeline.edit_with_factors(image, mixed)
        tiles.append(_to_uint8(to_numpy_image(frame), upscale))
    sep = np.full((tiles[0].shape[0], 2, 3), 255, dtype=np.uint8)
    out = tiles[0]
    for t in tiles[1:]:
        out = np.concatenate([out, sep, t], axis=1)
    return out
