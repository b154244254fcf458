"""Acceptance suite: one test per acceptance criterion, in order.

Run with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line per
criterion. Heavyweight models come from the cached session fixtures; the
training budgets behind them live in conftest.py, and recorded build times are
checked against the stated wall-clock budgets where the criteria set them.
"""

from __future__ import annotations

import csv
import math
import time

import numpy as np
import pytest
import torch

from conftest import (
    ABLATION_STEPS,
    CACHE_DIR,
    RED_PROMPT_POOL,
    build_time,
)
from helpers import central_difference, micro_system, relative_error

import hypermod.shapes as shapes
from hypermod.editor import EditPipeline, Editor, interpolate_factors, reassign
from hypermod.embedding import retrieval_accuracy
from hypermod.evaluation import evaluate_edit, run_ablation
from hypermod.generator import GeneratorConfig, ToyGenerator, synthesize
from hypermod.selector import adaptive_threshold, select_layers
from hypermod.training import TrainConfig, total_loss


def check(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# 1. Reassignment oracle equivalence


def test_c1_reassignment_matches_loop_oracle():
    rng = np.random.default_rng(42)
    start = time.monotonic()
    worst = 0.0
    for _ in range(100):
        c_out = int(rng.integers(1, 7))
        c_in = int(rng.integers(1, 7))
        k = 3
        batched = bool(rng.integers(0, 2))
        cfg = GeneratorConfig(channels=(c_out,), base_channels=c_in, upsample_after=(), d_w=4, d_z=4)
        torch.manual_seed(int(rng.integers(10_000)))
        weights = ToyGenerator(cfg).double().weights()
        theta = weights.conv_w[0].detach()
        shape = ((2,) if batched else ()) + (c_out, c_in, k, k)
        delta = torch.from_numpy(rng.standard_normal(shape))

        got = reassign(weights, {1: delta}).conv_w[0].detach().numpy()

        expect = np.empty(shape, dtype=np.float64)
        th = theta.numpy()
        dl = delta.numpy()
        for idx in np.ndindex(*shape):
            t = th[idx[-4:]]
            expect[idx] = t + dl[idx] * t
        worst = max(worst, float(np.abs(got.reshape(expect.shape) - expect).max()))
    elapsed = time.monotonic() - start
    check(
        "1 reassignment oracle equivalence",
        worst == 0.0 and elapsed < 10.0,
        f"max abs diff {worst} over 100 instances in {elapsed:.1f}s",
    )


# --------------------------------------------------------------------------
# 2. Identity at initialization


def test_c2_identity_at_init(gen_bundle, embedding, eval_dataset):
    start = time.monotonic()
    torch.manual_seed(0)
    editor = Editor(gen_bundle.config, selection=range(1, gen_bundle.config.n_layers + 1))
    pipeline = EditPipeline(gen_bundle, embedding, editor)
    x = torch.from_numpy(np.stack([s.image for s in eval_dataset[:50]])).permute(0, 3, 1, 2)
    edited = pipeline.edit(x, "a red circle", "a circle").image
    recon = pipeline.reconstruct(x)
    diff = float((edited - recon).abs().max())
    elapsed = time.monotonic() - start
    check("2 identity-at-init", diff <= 1e-6 and elapsed < 30.0, f"max abs pixel diff {diff:.2e} in {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. Gradient fidelity on the micro config


def test_c3_gradient_fidelity_micro():
    start = time.monotonic()
    bundle, embedding, editor, rsim = micro_system(seed=7, dtype=torch.float64)
    with torch.no_grad():
        for head in editor.heads.values():
            head.fc4.weight.normal_(std=0.05)
            head.fc4.bias.normal_(std=0.05)
    prompts = ("a red circle", "a circle")
    cfg = TrainConfig(prompt_pool=[prompts])
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    weights = bundle.weights()
    w_init = bundle.invert(x)
    y_recon = synthesize(weights, w_init).detach()

    def forward():
        factors = editor.factors(x, embedding.prompt_direction(*prompts))
        y_edit = synthesize(reassign(weights, factors), w_init)
        return total_loss(x, y_edit, y_recon, prompts, cfg, embedding, rsim).total

    loss = forward()
    editor.zero_grad()
    loss.backward()

    def scalar():
        with torch.no_grad():
            return float(forward())

    rng = np.random.default_rng(11)
    names = [n for n, _ in editor.named_parameters() if n.startswith("heads.")]
    params = dict(editor.named_parameters())
    worst = 0.0
    for k in rng.choice(len(names), size=20, replace=True):
        p = params[names[int(k)]]
        flat = int(rng.integers(p.numel()))
        fd = central_difference(scalar, p, flat, h=1e-6)
        an = p.grad.view(-1)[flat].item()
        worst = max(worst, relative_error(fd, an))
    elapsed = time.monotonic() - start
    check(
        "3 gradient fidelity",
        worst <= 1e-3 and elapsed < 120.0,
        f"worst rel err {worst:.2e} over 20 hypernetwork parameters in {elapsed:.1f}s",
    )


# --------------------------------------------------------------------------
# 4. Embedding retrieval gate


def test_c4_embedding_gate(embedding):
    fresh = shapes.generate_dataset(500, seed=123)
    top1 = retrieval_accuracy(embedding, fresh, gallery_size=32, seed=0)
    built = build_time("embed.ckpt")
    budget_ok = built is None or built <= 20 * 60
    check(
        "4 embedding gate",
        top1 >= 0.90 and budget_ok,
        f"held-out top-1 retrieval {top1:.3f} over a 32-caption gallery"
        + (f", trained in {built:.0f}s" if built else ""),
    )


# --------------------------------------------------------------------------
# 5. Edit efficacy


def test_c5_edit_efficacy(gen_bundle, embedding, rsim, oracle, editor_single, eval_dataset, single_losses_csv):
    pipeline = EditPipeline(gen_bundle, embedding, editor_single)
    report = evaluate_edit(pipeline, rsim, oracle, eval_dataset[:200], ("a red circle", "a circle"))
    success = report.target_success_rate
    shape_pres = report.attribute_preservation_rate("shape")
    align = report.mean("directional_alignment")

    with open(single_losses_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    align0 = float(rows[0]["align"])
    tail = [float(r["align"]) for r in rows[-25:]]
    align_drop_ok = float(np.mean(tail)) <= 0.5 * align0

    built = build_time("editor_red/editor.ckpt")
    budget_ok = built is None or built <= 45 * 60
    check(
        "5 edit efficacy",
        success >= 0.85 and shape_pres >= 0.90 and align > 0.2 and align_drop_ok and budget_ok,
        f"target success {success:.3f}, shape preservation {shape_pres:.3f}, "
        f"mean alignment {align:.3f}, align term {align0:.3f}->{np.mean(tail):.3f}"
        + (f", trained in {built:.0f}s" if built else ""),
    )


# --------------------------------------------------------------------------
# 6 & 8 share the equal-budget ablation cells


@pytest.fixture(scope="session")
def ablation_rows(gen_bundle, embedding, rsim, oracle, world_dataset, eval_dataset, color_selection):
    path = CACHE_DIR / "ablation.csv"
    if not path.exists():
        start = time.monotonic()
        run_ablation(
            gen_bundle,
            embedding,
            rsim,
            oracle,
            world_dataset,
            eval_dataset[:200],
            RED_PROMPT_POOL,
            selection=color_selection,
            steps=ABLATION_STEPS,
            seed=0,
            cells=[("directional", "all"), ("global", "all"), ("directional", "selected")],
            out_csv=path,
        )
        from conftest import record_build_time

        record_build_time("ablation.csv", time.monotonic() - start)
    with open(path, newline="") as fh:
        return {(r["loss_mode"], r["selection"]): r for r in csv.DictReader(fh)}


def test_c6_directional_vs_global_trend(ablation_rows):
    d = ablation_rows[("directional", "all")]
    g = ablation_rows[("global", "all")]
    assert d["failed"] == "0" and g["failed"] == "0", (d["error"], g["error"])
    pres_d, pres_g = float(d["preservation"]), float(g["preservation"])
    psnr_d, psnr_g = float(d["mean_psnr"]), float(g["mean_psnr"])
    check(
        "6 directional vs global trend",
        pres_d >= pres_g and psnr_d >= psnr_g,
        f"preservation {pres_d:.3f} vs {pres_g:.3f}; psnr {psnr_d:.2f} vs {psnr_g:.2f} dB (equal budget {ABLATION_STEPS} steps)",
    )


# --------------------------------------------------------------------------
# 7. Selector correctness against a brute-force oracle


def test_c7_selector_correctness():
    def naive(values, lam):
        n = len(values)
        total = 0.0
        for v in values:
            total += v
        mean = total / n
        acc = 0.0
        for v in values:
            acc += (v - mean) ** 2
        return mean + lam * math.sqrt(acc / n)

    rng = np.random.default_rng(7)
    mismatches = 0
    monotone_violations = 0
    for _ in range(500):
        n = int(rng.integers(1, 18))
        values = [float(v) for v in rng.uniform(0, 10, size=n)]
        lam = float(rng.uniform(0, 2))
        phi = adaptive_threshold(values, lam)
        if phi != naive(values, lam):
            mismatches += 1
        expect = [i for i, v in enumerate(values, 1) if v >= phi] or [int(np.argmax(values)) + 1]
        if list(select_layers(values, lam).layers) != expect:
            mismatches += 1
        hi = {i for i, v in enumerate(values, 1) if v >= adaptive_threshold(values, lam + 0.5)}
        lo = {i for i, v in enumerate(values, 1) if v >= phi}
        if not hi <= lo:
            monotone_violations += 1

    worked = select_layers([1, 2, 3, 9], 0.6)
    worked_ok = worked.layers == (4,) and abs(worked.phi - 5.6175) < 1e-3
    check(
        "7 selector correctness",
        mismatches == 0 and monotone_violations == 0 and worked_ok,
        f"500 random instances exact, monotone; [1,2,3,9]@0.6 -> L={list(worked.layers)}, phi={worked.phi:.4f}",
    )


def test_c8_selector_efficiency_trend(gen_bundle, color_selection, ablation_rows):
    sel = ablation_rows[("directional", "selected")]
    full = ablation_rows[("directional", "all")]
    assert sel["failed"] == "0" and full["failed"] == "0", (sel["error"], full["error"])
    params_sel, params_full = int(sel["head_params"]), int(full["head_params"])
    succ_sel, succ_full = float(sel["target_success"]), float(full["target_success"])
    ratio_ok = params_sel <= 0.5 * params_full
    success_ok = succ_sel >= 0.9 * succ_full
    check(
        "8 selector efficiency trend",
        ratio_ok and success_ok,
        f"selected layers {list(color_selection.layers)}: params {params_sel / params_full:.2f}x of full, "
        f"success {succ_sel:.3f} vs {succ_full:.3f} (equal budget)",
    )


# --------------------------------------------------------------------------
# 9. Interpolation endpoints and continuity


def test_c9_interpolation(gen_bundle, embedding, editor_multi, eval_dataset):
    pipeline = EditPipeline(gen_bundle, embedding, editor_multi)
    etas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    endpoint_exact = True
    continuity = True
    for s in eval_dataset[:20]:
        x = torch.from_numpy(s.image).permute(2, 0, 1)
        fa = pipeline.edit(x, "a red circle", "a circle").factors
        fb = pipeline.edit(x, "a blue circle", "a circle").factors
        frames = [pipeline.edit_with_factors(x, interpolate_factors(fa, fb, e)) for e in etas]
        pure_a = pipeline.edit_with_factors(x, fa)
        pure_b = pipeline.edit_with_factors(x, fb)
        endpoint_exact &= torch.equal(frames[-1], pure_a) and torch.equal(frames[0], pure_b)
        adjacent = max(float((a - b).abs().max()) for a, b in zip(frames, frames[1:]))
        endpoints = float((frames[-1] - frames[0]).abs().max())
        continuity &= adjacent < endpoints
    check(
        "9 interpolation endpoints and continuity",
        endpoint_exact and continuity,
        f"endpoints bit-exact={endpoint_exact}, adjacent<endpoint diff={continuity} over 20 images",
    )


# --------------------------------------------------------------------------
# 10. Prompt-swap antisymmetry


def test_c10_prompt_swap_antisymmetry(embedding):
    rng = np.random.default_rng(5)
    templates = list(shapes.CAPTION_TEMPLATES)
    exact = True
    for _ in range(100):
        spec_a = shapes.generate_dataset(1, seed=int(rng.integers(10_000)))[0].labels
        spec_b = shapes.generate_dataset(1, seed=int(rng.integers(10_000)))[0].labels
        a = shapes.caption(spec_a, templates[int(rng.integers(len(templates)))])
        b = shapes.caption(spec_b, templates[int(rng.integers(len(templates)))])
        exact &= torch.equal(embedding.prompt_direction(a, b), -embedding.prompt_direction(b, a))
    check("10 prompt-swap antisymmetry", exact, "100 random prompt pairs negate exactly")
