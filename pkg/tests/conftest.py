"""Shared fixtures.

Trained components are expensive on CPU, so session fixtures cache their
checkpoints under .cache/ at the repo root (override with HYPERMOD_CACHE).
Delete that directory to retrain everything from scratch; every builder is
fully seeded, so a rebuild reproduces the same artifacts. Builder wall times
land in .cache/build_times.json for the runtime-budget checks.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import hypermod as hm
from hypermod.embedding import ContrastiveConfig, JointEmbedding, train_contrastive
from hypermod.evaluation import AttributeOracle, train_oracle
from hypermod.generator import GeneratorBundle, PretrainConfig, pretrain_generator
from hypermod.selector import LayerSelection, probe_optimize, read_selection_csv, select_layers, write_selection_csv
from hypermod.training import ShapeFeatureNet, TrainConfig, train_editor, train_shape_features
from hypermod.editor import Editor

CACHE_DIR = Path(os.environ.get("HYPERMOD_CACHE", Path(__file__).resolve().parent.parent / ".cache"))
BUILD_TIMES = CACHE_DIR / "build_times.json"

# Training budgets for the cached artifacts, sized for a small CPU box.
PRETRAIN_STEPS = 2500
EMBED_STEPS = 6000
EDITOR_STEPS = 700
EDITOR_MULTI_STEPS = 450
ABLATION_STEPS = 320

# The single-attribute edit task: make the shape red, phrased per shape class
# so the pool covers the whole image distribution. (target, source) order.
RED_PROMPT_POOL = [(f"a red {s}", f"a {s}") for s in hm.shapes.SHAPES]
RED_BLUE_POOL = [("a red circle", "a circle"), ("a blue circle", "a circle")]


def record_build_time(name: str, seconds: float) -> None:
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    times = json.loads(BUILD_TIMES.read_text()) if BUILD_TIMES.exists() else {}
    times[name] = seconds
    BUILD_TIMES.write_text(json.dumps(times, indent=2))


def build_time(name: str) -> float | None:
    if BUILD_TIMES.exists():
        return json.loads(BUILD_TIMES.read_text()).get(name)
    return None


def _cached(name: str, build, save, load):
    path = CACHE_DIR / name
    if path.exists():
        return load(path)
    start = time.monotonic()
    obj = build()
    record_build_time(name, time.monotonic() - start)
    path.parent.mkdir(parents=True, exist_ok=True)
    save(obj, path)
    return obj


def cached_probe(bundle, embedding, target: str, source: str, m: int, seeds: tuple[int, ...]) -> np.ndarray:
    """Probe displacements, cached as .npy keyed by the probe arguments."""
    slug = "".join(t[0] for t in (target + " " + source).split())
    tag = f"probe_m{m}_s{seeds[0]}-{seeds[-1]}n{len(seeds)}_{slug}.npy"

    def build():
        return probe_optimize(bundle, embedding, target, source, m=m, seeds=seeds)

    return _cached(tag, build, lambda arr, p: np.save(p, arr), np.load)


@pytest.fixture(scope="session")
def world_dataset():
    return hm.generate_dataset(4000, seed=7)


@pytest.fixture(scope="session")
def embed_dataset():
    return hm.generate_dataset(2000, seed=0)


@pytest.fixture(scope="session")
def eval_dataset():
    return hm.generate_dataset(600, seed=99)


@pytest.fixture(scope="session")
def gen_bundle(world_dataset) -> GeneratorBundle:
    def build():
        return pretrain_generator(world_dataset, cfg=PretrainConfig(steps=PRETRAIN_STEPS, seed=0)).bundle

    return _cached("gen.ckpt", build, lambda b, p: b.save(p), GeneratorBundle.load)


@pytest.fixture(scope="session")
def embedding(embed_dataset) -> JointEmbedding:
    def build():
        return train_contrastive(embed_dataset, cfg=ContrastiveConfig(steps=EMBED_STEPS, seed=0)).model

    return _cached("embed.ckpt", build, lambda m, p: m.save(p), JointEmbedding.load)


@pytest.fixture(scope="session")
def rsim(world_dataset) -> ShapeFeatureNet:
    def build():
        return train_shape_features(world_dataset, seed=0)

    return _cached("rsim.ckpt", build, lambda m, p: m.save(p), ShapeFeatureNet.load)


@pytest.fixture(scope="session")
def oracle(world_dataset) -> AttributeOracle:
    def build():
        return train_oracle(world_dataset, seed=0).oracle

    return _cached("oracle.ckpt", build, lambda r, p: r.save(p), AttributeOracle.load)


@pytest.fixture(scope="session")
def color_selection(gen_bundle, embedding) -> LayerSelection:
    def build():
        dw = probe_optimize(gen_bundle, embedding, "a red circle", "a circle")
        return select_layers(dw, lambda_std=0.6)

    return _cached("selection.csv", build, lambda s, p: write_selection_csv(p, s), read_selection_csv)


def _train_cached_editor(name, cfg, gen_bundle, embedding, rsim, samples):
    def build():
        out = CACHE_DIR / (name + ".run")
        result = train_editor(cfg, gen_bundle, embedding, rsim, samples, out_dir=out, enforce_gate=False)
        return result.editor

    return _cached(name + "/editor.ckpt", build, lambda e, p: e.save(p), Editor.load)


@pytest.fixture(scope="session")
def editor_single(gen_bundle, embedding, rsim, world_dataset) -> Editor:
    """The headline single-attribute (red) model, all layers."""
    cfg = TrainConfig(steps=EDITOR_STEPS, prompt_pool=RED_PROMPT_POOL, selection="all", seed=0)
    return _train_cached_editor("editor_red", cfg, gen_bundle, embedding, rsim, world_dataset)


@pytest.fixture(scope="session")
def editor_multi(gen_bundle, embedding, rsim, world_dataset) -> Editor:
    """A two-attribute (red/blue) model used for interpolation tests."""
    cfg = TrainConfig(steps=EDITOR_MULTI_STEPS, prompt_pool=RED_BLUE_POOL, selection="all", seed=0)
    return _train_cached_editor("editor_multi", cfg, gen_bundle, embedding, rsim, world_dataset)


@pytest.fixture(scope="session")
def single_losses_csv(editor_single):
    # Materialized by the editor_single build; reused for the alignment gate check.
    return CACHE_DIR / "editor_red.run" / "losses.csv"


@pytest.fixture()
def torch_seed():
    torch.manual_seed(1234)
    return 1234
