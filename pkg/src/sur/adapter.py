"""The trainable prompt adapter and its loss terms.

The adapter sits after the frozen text encoder. Three learnable affine maps
produce queries and keys for a single-head attention block whose values are
the raw encoder output, a residual affine refines the attended features, and
a zero-initialized output transform ``g`` gates everything: at creation the
adapter emits exactly zero, so the blended condition reproduces the frozen
encoder and fine-tuning starts from the baseline model.

Two distillation losses shape the adapter. One pulls the pooled query
features toward a fixed random projection of a language-model knowledge
vector; the other aligns the pooled blended condition with the encoding of
the paired keyword-heavy prompt. Both are temperature-softmax KL terms with
the teacher as the first argument.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DimensionError
from .tensor import Tensor
from .tnsio import read_hashed_bundle, write_hashed_bundle


@dataclass
class AdapterParams:
    """Learnable parameters: attention transforms (phi2) and the
    zero-initialized output transform g (phi1)."""

    h1_w: Tensor
    h1_b: Tensor
    h2_w: Tensor
    h2_b: Tensor
    h3_w: Tensor
    h3_b: Tensor
    g_w: Tensor
    g_b: Tensor
    d_en: int
    seed: int

    def phi(self) -> dict[str, Tensor]:
        """All trainable tensors, keyed by stable names."""
        return {
            "h1_w": self.h1_w, "h1_b": self.h1_b,
            "h2_w": self.h2_w, "h2_b": self.h2_b,
            "h3_w": self.h3_w, "h3_b": self.h3_b,
            "g_w": self.g_w, "g_b": self.g_b,
        }


@dataclass(frozen=True)
class FixedProjection:
    """Kaiming-initialized projection from LLM width to encoder width.

    Never trained and excluded from every optimizer; it only aligns the
    knowledge-vector dimension with the query dimension.
    """

    w0: Tensor  # d_en x d_llm, requires_grad stays False

    @property
    def d_en(self) -> int:
        return self.w0.shape[0]

    @property
    def d_llm(self) -> int:
        return self.w0.shape[1]


@dataclass(frozen=True)
class LossConfig:
    eta: float = 1e-5
    tau: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    enable_llm: bool = True
    enable_cp: bool = True

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name, lam in (("lambda1", self.lambda1), ("lambda2", self.lambda2)):
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {lam}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _kaiming_f32(rng, shape, fan_in: int) -> np.ndarray:
    std = np.float32((2.0 / fan_in) ** 0.5)
    return (rng.standard_normal(shape, dtype=np.float32) * std).astype(np.float64)


def new_adapter(seed: int, d_en: int, d_llm: int) -> tuple[AdapterParams, FixedProjection]:
    """Fresh adapter: h transforms Kaiming-initialized, g exactly zero."""
    rng = np.random.default_rng([int(seed), 6])
    def affine():
        w = Tensor(_kaiming_f32(rng, (d_en, d_en), d_en), requires_grad=True)
        b = Tensor(np.zeros(d_en), requires_grad=True)
        return w, b

    h1_w, h1_b = affine()
    h2_w, h2_b = affine()
    h3_w, h3_b = affine()
    g_w = Tensor(np.zeros((d_en, d_en)), requires_grad=True)
    g_b = Tensor(np.zeros(d_en), requires_grad=True)
    params = AdapterParams(h1_w, h1_b, h2_w, h2_b, h3_w, h3_b, g_w, g_b,
                           d_en=d_en, seed=int(seed))
    w0 = Tensor(_kaiming_f32(np.random.default_rng([int(seed), 7]), (d_en, d_llm), d_llm))
    return params, FixedProjection(w0=w0)


def _apply_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tz.add_rowvec(tz.matmul(x, w), b)


def adapter_forward(params: AdapterParams, enc: Tensor) -> dict:
    """Run the adapter on a token-feature matrix.

    Returns ``c_llm`` (the adapter output before blending), the query matrix
    ``Q`` (used for knowledge distillation), and the row-stochastic attention
    matrix ``att``. Values are the untouched encoder features.
    """
    if enc.data.ndim != 2 or enc.shape[1] != params.d_en:
        raise DimensionError(f"expected token features of width {params.d_en}, got shape {enc.shape}")
    q = _apply_affine(enc, params.h3_w, params.h3_b)
    k = _apply_affine(enc, params.h2_w, params.h2_b)
    v = enc
    scores = tz.scale(tz.matmul(q, tz.transpose(k)), 1.0 / params.d_en ** 0.5)
    att = tz.row_softmax(scores)
    v_prime = tz.matmul(att, v)
    mixed = tz.add(v_prime, v)
    inner = tz.add(mixed, _apply_affine(mixed, params.h1_w, params.h1_b))
    c_llm = _apply_affine(inner, params.g_w, params.g_b)
    return {"c_llm": c_llm, "Q": q, "att": att}


def blend_condition(c_llm: Tensor, enc: Tensor, eta: float) -> Tensor:
    """Mix adapter output into the encoder features: eta*c_llm + (1-eta)*enc.

    eta = 0 short-circuits to the encoder features themselves, which makes
    baseline equivalence bitwise rather than merely close.
    """
    if c_llm.shape != enc.shape:
        raise DimensionError(f"blend shapes {c_llm.shape} vs {enc.shape}")
    eta = float(eta)
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    if eta == 0.0:
        return enc
    if eta == 1.0:
        return c_llm
    return tz.add(tz.scale(c_llm, eta), tz.scale(enc, 1.0 - eta))


def loss_llm(q: Tensor, knowledge: Tensor, proj: FixedProjection,
             true_length: int, tau: float) -> Tensor:
    """Knowledge distillation: KL(projected knowledge || pooled queries).

    The teacher side is a constant (the projection is fixed and the
    knowledge vector comes from a frozen model), so gradients reach only Q.
    """
    if knowledge.shape != (proj.d_llm,):
        raise DimensionError(f"knowledge length {knowledge.shape} vs projection {proj.d_llm}")
    if q.data.ndim != 2 or q.shape[1] != proj.d_en:
        raise DimensionError(f"query width {q.shape} vs projection {proj.d_en}")
    teacher = Tensor(proj.w0.data @ knowledge.data)
    student = tz.mean_rows(tz.slice_rows(q, true_length))
    return tz.kl_div(teacher, student, tau)


def loss_cp(c_prime: Tensor, enc_complex: Tensor, lengths: tuple[int, int],
            tau: float) -> Tensor:
    """Prompt alignment: KL(pooled complex encoding || pooled condition).

    Both operands are mean-pooled over their own true lengths because the
    paired prompts rarely share a token count.
    """
    if c_prime.shape[1] != enc_complex.shape[1]:
        raise DimensionError(f"feature widths differ: {c_prime.shape} vs {enc_complex.shape}")
    len_simple, len_complex = lengths
    teacher = tz.mean_rows(tz.slice_rows(enc_complex, len_complex))
    student = tz.mean_rows(tz.slice_rows(c_prime, len_simple))
    return tz.kl_div(teacher, student, tau)


def total_loss(parts: dict, cfg: LossConfig) -> Tensor:
    """Weighted sum of the enabled loss terms plus the denoising objective.

    Disabled or zero-weighted terms are skipped entirely, so ablation runs
    degrade to the denoising loss bit-exactly.
    """
    total = parts["l_simple"]
    if cfg.enable_llm and cfg.lambda1 != 0.0:
        total = tz.add(total, tz.scale(parts["l_llm"], cfg.lambda1))
    if cfg.enable_cp and cfg.lambda2 != 0.0:
        total = tz.add(total, tz.scale(parts["l_cp"], cfg.lambda2))
    return total


def save_adapter(params: AdapterParams, proj: FixedProjection, cfg: LossConfig,
                 out_dir, step: int = 0) -> None:
    manifest = {
        "kind": "adapter",
        "d_en": params.d_en,
        "d_llm": proj.d_llm,
        "seed": params.seed,
        "step": int(step),
        "loss": cfg.to_dict(),
    }
    tensors = {name: t.data for name, t in params.phi().items()}
    tensors["w0"] = proj.w0.data
    write_hashed_bundle(out_dir, manifest, tensors)


def load_adapter(in_dir) -> tuple[AdapterParams, FixedProjection, LossConfig, dict]:
    manifest, tensors = read_hashed_bundle(in_dir)
    if manifest.get("kind") != "adapter":
        raise ConfigError(f"{in_dir} is not an adapter checkpoint")
    params = AdapterParams(
        h1_w=Tensor(tensors["h1_w"], requires_grad=True),
        h1_b=Tensor(tensors["h1_b"], requires_grad=True),
        h2_w=Tensor(tensors["h2_w"], requires_grad=True),
        h2_b=Tensor(tensors["h2_b"], requires_grad=True),
        h3_w=Tensor(tensors["h3_w"], requires_grad=True),
        h3_b=Tensor(tensors["h3_b"], requires_grad=True),
        g_w=Tensor(tensors["g_w"], requires_grad=True),
        g_b=Tensor(tensors["g_b"], requires_grad=True),
        d_en=manifest["d_en"], seed=manifest["seed"],
    )
    proj = FixedProjection(w0=Tensor(tensors["w0"]))
    cfg = LossConfig.from_dict(manifest["loss"])
    return params, proj, cfg, manifest
