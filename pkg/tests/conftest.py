"""Shared fixtures: a session-scoped pipeline world and a miniature setup
for whole-pipeline gradient checks."""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from sur.adapter import LossConfig, new_adapter
from sur.dataset import (
    SimilarityScorer,
    build_knowledge_cache,
    clean_gate,
    load_image,
    synth_corpus,
    write_manifest,
)
from sur.diffusion import (
    condition_pool,
    make_schedule,
    new_denoiser,
    pretrain_denoiser,
    save_denoiser,
)
from sur.encoders import (
    Vocabulary,
    build_bundle,
    encode_text,
    load_bundle,
    save_bundle,
    tokenize,
)
from sur.tensor import Tensor


@dataclass(frozen=True)
class World:
    root: Path
    data: Path
    encoders: Path
    denoiser: Path


@pytest.fixture(scope="session")
def world(tmp_path_factory) -> World:
    """64-record corpus, 13b-toy encoders, cleaned + embedded data, and a
    pretrained frozen denoiser with the encoder bundle embedded."""
    root = tmp_path_factory.mktemp("world")
    data = root / "data"
    records = synth_corpus(0, 64, data)

    vocab = Vocabulary.from_texts([f"{r.simple_prompt} {r.complex_prompt}" for r in records])
    enc_dir = root / "encoders"
    save_bundle(build_bundle(0, "13b-toy", vocab), enc_dir)
    bundle = load_bundle(enc_dir)

    clean_gate(records, SimilarityScorer(bundle), data)
    build_knowledge_cache(records, bundle, bundle.llm.n_layers, data)
    write_manifest(data, records)

    examples = []
    for rec in records:
        if rec.retained is False:
            continue
        ids, _ = tokenize(rec.simple_prompt, bundle.vocab, bundle.l_max)
        enc = encode_text(bundle.text, ids)
        examples.append((load_image(data, rec), condition_pool(enc).data))
    sched = make_schedule()
    den = new_denoiser(0, resolution=bundle.resolution, d_cond=bundle.d_en)
    pretrain_denoiser(den, sched, examples, steps=1200, batch_size=8, lr=1e-3, seed=0)
    den_dir = root / "denoiser"
    save_denoiser(den, sched, den_dir)
    shutil.copytree(enc_dir, den_dir / "encoders")
    return World(root=root, data=data, encoders=enc_dir, denoiser=den_dir)


@pytest.fixture(scope="session")
def world_bundle(world):
    return load_bundle(world.encoders)


@dataclass
class MiniSetup:
    """Tiny fixed-dimension pipeline pieces for finite-difference checks."""

    d_en: int
    d_llm: int
    l_max: int
    resolution: int
    enc_simple: Tensor
    enc_complex: Tensor
    len_simple: int
    len_complex: int
    knowledge: Tensor
    image: np.ndarray
    eps: np.ndarray
    t: int
    params: object
    proj: object
    denoiser: object
    sched: object
    loss_cfg: LossConfig


def make_mini_setup(seed: int = 0, eta: float = 0.3) -> MiniSetup:
    """Every piece of the composite objective at toy dimensions.

    eta defaults to a non-degenerate value so all gradient paths carry
    signal worth checking.
    """
    rng = np.random.default_rng(seed)
    d_en, d_llm, l_max, res = 6, 8, 4, 4
    params, proj = new_adapter(seed, d_en, d_llm)
    den = new_denoiser(seed, resolution=res, d_cond=d_en, hidden=16)
    # nudge the zero-initialized transform so its downstream paths are active
    g_rng = np.random.default_rng(seed + 1)
    params.g_w.data = params.g_w.data + 0.1 * g_rng.standard_normal(params.g_w.shape)
    params.g_b.data = params.g_b.data + 0.1 * g_rng.standard_normal(params.g_b.shape)
    sched = make_schedule(steps=8)
    return MiniSetup(
        d_en=d_en, d_llm=d_llm, l_max=l_max, resolution=res,
        enc_simple=Tensor(np.tanh(rng.standard_normal((l_max, d_en)))),
        enc_complex=Tensor(np.tanh(rng.standard_normal((l_max, d_en)))),
        len_simple=3, len_complex=4,
        knowledge=Tensor(rng.standard_normal(d_llm) * 0.5),
        image=rng.standard_normal((res, res)) * 0.4,
        eps=rng.standard_normal((res, res)),
        t=5,
        params=params, proj=proj, denoiser=den, sched=sched,
        loss_cfg=LossConfig(eta=eta, tau=1.0, lambda1=1.0, lambda2=1.0),
    )


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Infinity-norm relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def central_diff(f, base: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        flat[i] = (f(plus.reshape(base.shape)) - f(minus.reshape(base.shape))) / (2.0 * h)
    return grad
