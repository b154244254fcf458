"""Adaptive layer selection via short latent-probe optimizations.

For a given prompt pair, random latent codes are optimized for a few steps
against the directional alignment loss with every network frozen. Layers whose
latent vectors moved the most are the ones the edit wants to touch; a
mean-plus-scaled-spread threshold over the per-layer displacements picks the
set of generator layers that get hypernetwork heads.

The threshold arithmetic deliberately runs in plain Python floats (sequential
sums) so it is reproducible digit-for-digit against a hand calculation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .embedding import JointEmbedding, cosine_alignment_loss
from .errors import NotTrainedError, ProbeDivergenceError
from .generator import GeneratorBundle, synthesize

DEFAULT_LAMBDA_STD = 0.6
DEFAULT_PROBE_STEPS = 50
DEFAULT_PROBE_LR = 0.01
DEFAULT_PROBE_SEEDS = (0, 1, 2, 3)


@dataclass(frozen=True)
class LayerSelection:
    """Chosen layer indices (1-based, ascending) plus the probe statistics."""

    layers: tuple[int, ...]
    lambda_std: float | None = None
    delta_omega: tuple[float, ...] = ()
    phi: float | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("selection must be nonempty")
        if list(self.layers) != sorted(set(self.layers)):
            raise ValueError("layers must be strictly increasing")


def probe_optimize(
    bundle: GeneratorBundle,
    embedding: JointEmbedding,
    target_text: str,
    source_text: str,
    m: int = DEFAULT_PROBE_STEPS,
    seeds: Sequence[int] = DEFAULT_PROBE_SEEDS,
    lr: float = DEFAULT_PROBE_LR,
) -> np.ndarray:
    """Mean absolute per-layer latent displacement after m probe steps.

    Each seed starts from a sampled broadcast latent, renders the starting
    image, then optimizes the full per-layer code so the rendered image's
    embedding moves along the prompt direction, with generator and embedding
    frozen. Steps are normalized gradient descent (lr * g / ||g||): the fixed
    step length keeps the first step bounded even though the alignment loss is
    degenerate at the exact start, and the displacement each layer accumulates
    is its share of the loss gradient, which is the signal the threshold
    compares. Returns the per-layer displacement averaged over latent
    dimensions and then over seeds, shape (n_layers,).
    """
    if not bundle.trained:
        raise NotTrainedError("generator bundle has not been pretrained")
    if not embedding.trained:
        raise NotTrainedError("embedding has not been trained")
    if m < 0:
        raise ValueError("m must be >= 0")
    if not seeds:
        raise ValueError("at least one probe seed is required")

    weights = bundle.weights()
    with torch.no_grad():
        dt = embedding.prompt_direction(target_text, source_text)

    per_seed = []
    for seed in seeds:
        w0 = bundle.sample_latent(seed)
        with torch.no_grad():
            x0 = synthesize(weights, w0.unsqueeze(0))
            e_x0 = embedding.encode_image(x0)
        w = w0.clone().requires_grad_(True)
        for step in range(m):
            y = synthesize(weights, w.unsqueeze(0))
            u = embedding.encode_image(y) - e_x0
            loss = cosine_alignment_loss(u, dt.unsqueeze(0)).mean()
            (grad,) = torch.autograd.grad(loss, w)
            with torch.no_grad():
                norm = grad.norm()
                if norm > 0:
                    w -= lr * grad / norm
            if not torch.isfinite(w).all():
                raise ProbeDivergenceError(
                    f"probe diverged at seed {seed}, step {step}: non-finite latent "
                    f"(last loss {loss.item():.4g}, lr {lr})"
                )
        per_seed.append((w.detach() - w0).abs().mean(dim=1).numpy().astype(np.float64))
    return np.mean(per_seed, axis=0)


def adaptive_threshold(dw: Sequence[float], lambda_std: float) -> float:
    """mean(dw) + lambda_std * population_std(dw), in plain float arithmetic."""
    values = [float(v) for v in dw]
    if not values:
        raise ValueError("dw must contain at least one value")
    if any(not math.isfinite(v) for v in values):
        raise ValueError("dw entries must be finite")
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean + lambda_std * math.sqrt(var)


def select_layers(dw: Sequence[float], lambda_std: float = DEFAULT_LAMBDA_STD) -> LayerSelection:
    """Layers whose displacement meets the adaptive threshold (1-based).

    An empty result falls back to the single best layer, so downstream head
    construction always has something to build.
    """
    values = [float(v) for v in dw]
    phi = adaptive_threshold(values, lambda_std)
    chosen = [i for i, v in enumerate(values, start=1) if v >= phi]
    if not chosen:
        best = max(range(len(values)), key=lambda i: values[i])
        chosen = [best + 1]
    return LayerSelection(layers=tuple(chosen), lambda_std=lambda_std, delta_omega=tuple(values), phi=phi)


SELECTION_COLUMNS = ("layer", "delta_omega", "phi", "selected")


def write_selection_csv(path: str | Path, selection: LayerSelection) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SELECTION_COLUMNS)
        for i, dw in enumerate(selection.delta_omega, start=1):
            writer.writerow([i, repr(dw), repr(selection.phi), int(i in selection.layers)])


def read_selection_csv(path: str | Path) -> LayerSelection:
    layers, dws, phi = [], [], None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dws.append(float(row["delta_omega"]))
            phi = float(row["phi"])
            if int(row["selected"]):
                layers.append(int(row["layer"]))
    return LayerSelection(layers=tuple(layers), lambda_std=None, delta_omega=tuple(dws), phi=phi)
