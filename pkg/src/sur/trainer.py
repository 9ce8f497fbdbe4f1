"""Adapter fine-tuning loop.

Each step samples a batch of triplets with replacement, draws a corruption
step and a noise tensor per record, runs the adapter forward pass, forms the
weighted total loss, backpropagates, and updates only the adapter's
parameters. Text encodings and knowledge vectors are precomputed once per
run since everything upstream of the adapter is frozen.

Given a config, a seed, and a dataset, the loop is fully deterministic: the
same inputs produce byte-identical logs and checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .adapter import (
    AdapterParams,
    FixedProjection,
    LossConfig,
    adapter_forward,
    blend_condition,
    loss_cp,
    loss_llm,
    new_adapter,
    total_loss,
)
from .dataset import TripletRecord, load_image, load_knowledge_vector, read_manifest
from .diffusion import Denoiser, NoiseSchedule, condition_pool, load_denoiser, simple_loss
from .encoders import EncoderBundle, encode_text, load_bundle, tokenize
from .errors import ConfigError, DataError, NumericError
from .optim import make_optimizer, zero_grads
from .tensor import Tape, Tensor, backward
from .tnsio import read_hashed_bundle, write_hashed_bundle, write_json


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-5
    seed: int = 0
    optimizer: str = "adam"
    llm_layer: int | None = None  # None selects the profile's last layer
    checkpoint_every: int = 1000
    log_every: int = 1
    flip_probability: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("steps", "batch_size", "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class PreparedRecord:
    """A triplet with every frozen quantity resolved up front."""

    id: str
    image: np.ndarray
    enc_simple: Tensor
    enc_complex: Tensor
    len_simple: int
    len_complex: int
    knowledge: Tensor


@dataclass
class TrainerState:
    params: AdapterParams
    proj: FixedProjection
    denoiser: Denoiser
    sched: NoiseSchedule
    cfg: TrainConfig
    step: int = 0
    last_grads: dict = field(default_factory=dict)


def prepare_records(records: list[TripletRecord], bundle: EncoderBundle,
                    data_dir, layer: int) -> list[PreparedRecord]:
    """Resolve images, encodings, and knowledge vectors for the usable records."""
    prepared = []
    for rec in records:
        if rec.retained is False:
            continue
        ids_s, len_s = tokenize(rec.simple_prompt, bundle.vocab, bundle.l_max)
        ids_c, len_c = tokenize(rec.complex_prompt, bundle.vocab, bundle.l_max)
        knowledge = load_knowledge_vector(data_dir, rec, layer)
        prepared.append(PreparedRecord(
            id=rec.id,
            image=load_image(data_dir, rec),
            enc_simple=encode_text(bundle.text, ids_s),
            enc_complex=encode_text(bundle.text, ids_c),
            len_simple=len_s,
            len_complex=len_c,
            knowledge=Tensor(knowledge),
        ))
    if not prepared:
        raise DataError("no usable records: dataset empty or everything dropped")
    return prepared


def train_step(state: TrainerState, batch: list[PreparedRecord], rng,
               optimizer) -> dict:
    """One optimizer update over a batch; returns the log record.

    Per record: draw a corruption step and noise, maybe flip the image, run
    the adapter, and accumulate the three loss terms. Losses are averaged
    over the batch before the weighted total is formed. Only the adapter's
    phi tensors receive updates.
    """
    if not batch:
        raise DataError("empty batch")
    cfg = state.cfg
    lcfg = cfg.loss
    phi = state.params.phi()
    simple_terms, llm_terms, cp_terms = [], [], []
    with Tape() as tape:
        for prep in batch:
            if prep.knowledge is None:
                raise DataError(f"record {prep.id} is missing its knowledge vector")
            t = int(rng.integers(0, state.sched.steps))
            eps = rng.standard_normal(prep.image.shape)
            image = prep.image
            if rng.random() < cfg.flip_probability:
                image = image[:, ::-1]
            out = adapter_forward(state.params, prep.enc_simple)
            c_prime = blend_condition(out["c_llm"], prep.enc_simple, lcfg.eta)
            cond = condition_pool(c_prime)
            simple_terms.append(simple_loss(state.denoiser, image, t, eps, cond, state.sched))
            if lcfg.enable_llm:
                llm_terms.append(loss_llm(out["Q"], prep.knowledge, state.proj,
                                          prep.len_simple, lcfg.tau))
            if lcfg.enable_cp:
                cp_terms.append(loss_cp(c_prime, prep.enc_complex,
                                        (prep.len_simple, prep.len_complex), lcfg.tau))
        l_simple = tz.mean_of(simple_terms)
        l_llm = tz.mean_of(llm_terms) if llm_terms else Tensor(0.0)
        l_cp = tz.mean_of(cp_terms) if cp_terms else Tensor(0.0)
        l_total = total_loss({"l_simple": l_simple, "l_llm": l_llm, "l_cp": l_cp}, lcfg)
    backward(l_total, tape)

    record = {
        "step": state.step,
        "l_llm": l_llm.item(),
        "l_cp": l_cp.item(),
        "l_simple": l_simple.item(),
        "l_total": l_total.item(),
        "grad_norm": float(np.sqrt(sum(
            float((p.grad * p.grad).sum()) for p in phi.values() if p.grad is not None))),
    }
    for value in record.values():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {state.step}: {record}")
    state.last_grads = {k: p.grad.copy() for k, p in phi.items() if p.grad is not None}
    optimizer.step()
    zero_grads(phi)
    state.step += 1
    return record


def save_checkpoint(state: TrainerState, path) -> None:
    manifest = {
        "kind": "adapter",
        "d_en": state.params.d_en,
        "d_llm": state.proj.d_llm,
        "seed": state.params.seed,
        "step": state.step,
        "loss": state.cfg.loss.to_dict(),
        "train": state.cfg.to_dict(),
    }
    tensors = {name: t.data for name, t in state.params.phi().items()}
    tensors["w0"] = state.proj.w0.data
    write_hashed_bundle(path, manifest, tensors)


def load_checkpoint(path) -> tuple[AdapterParams, FixedProjection, TrainConfig, dict]:
    manifest, tensors = read_hashed_bundle(path)
    if manifest.get("kind") != "adapter":
        raise ConfigError(f"{path} is not an adapter checkpoint")
    params = AdapterParams(
        **{name: Tensor(tensors[name], requires_grad=True) for name in
           ("h1_w", "h1_b", "h2_w", "h2_b", "h3_w", "h3_b", "g_w", "g_b")},
        d_en=manifest["d_en"], seed=manifest["seed"],
    )
    proj = FixedProjection(w0=Tensor(tensors["w0"]))
    cfg = TrainConfig.from_dict(manifest["train"]) if "train" in manifest else TrainConfig(
        loss=LossConfig.from_dict(manifest["loss"]))
    return params, proj, cfg, manifest


def run_training(cfg: TrainConfig, data_dir, encoders_dir, denoiser_dir,
                 out_dir) -> tuple[TrainerState, list[dict]]:
    """Full fine-tuning run: initial checkpoint, cfg.steps updates, periodic
    checkpoints, a JSONL train log, and the final adapter under out/adapter."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(encoders_dir)
    den, sched = load_denoiser(denoiser_dir)
    if den.d_cond != bundle.d_en:
        raise ConfigError(f"denoiser condition width {den.d_cond} vs encoder width {bundle.d_en}")
    layer = cfg.llm_layer if cfg.llm_layer is not None else bundle.llm.n_layers
    records = read_manifest(data_dir)
    prepared = prepare_records(records, bundle, data_dir, layer)

    params, proj = new_adapter(cfg.seed, bundle.d_en, bundle.d_llm)
    state = TrainerState(params=params, proj=proj, denoiser=den, sched=sched, cfg=cfg)
    save_checkpoint(state, out / "checkpoints" / "step_000000")
    write_json(out / "train_config.json", cfg.to_dict())

    optimizer = make_optimizer(cfg.optimizer, params.phi(), cfg.learning_rate)
    rng = np.random.default_rng([int(cfg.seed), 10])
    log: list[dict] = []
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for _ in range(cfg.steps):
            idx = rng.integers(0, len(prepared), size=cfg.batch_size)
            batch = [prepared[int(i)] for i in idx]
            record = train_step(state, batch, rng, optimizer)
            if record["step"] % cfg.log_every == 0:
                log.append(record)
                fh.write(_log_line(record))
            if state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoints" / f"step_{state.step:06d}")
    save_checkpoint(state, out / "adapter")
    return state, log


def _log_line(record: dict) -> str:
    return json.dumps(record) + "\n"
