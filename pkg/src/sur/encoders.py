"""Frozen, seed-materialized stand-ins for the text encoder, language model,
and image embedder.

All weights are drawn once from a seed in float32, promoted to float64, and
persisted as a hashed .tns bundle, so every process that loads the bundle
sees bit-identical parameters. Nothing in this module is ever trained.

The text encoder and the language model both act row-wise: each token's
output depends only on its own token and position embedding, never on its
neighbours. That keeps the stand-ins cheap while preserving the shapes and
the frozen-weights contract the rest of the pipeline needs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, RangeError, VocabularyError
from .tensor import Tensor
from .tnsio import read_hashed_bundle, write_hashed_bundle

D_EN = 48
L_MAX = 16
VOCAB_SIZE = 512
RESOLUTION = 8

# desk-scale analogues of the 7B/13B/33B language-model profiles
LLM_PROFILES = {
    "7b-toy": (8, 64),
    "13b-toy": (10, 80),
    "33b-toy": (12, 104),
}

UNK_ID = 0
PAD_ID = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Dense token-id mapping with reserved <unk>=0 and <pad>=1."""

    def __init__(self, tokens: list[str]):
        if tokens[:2] != ["<unk>", "<pad>"]:
            raise ConfigError("vocabulary must start with <unk>, <pad>")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts: list[str], max_size: int = VOCAB_SIZE) -> "Vocabulary":
        """Most frequent corpus tokens, capped at max_size including reserved."""
        counts: dict[str, int] = {}
        for text in texts:
            for word in split_words(text):
                counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [tok for tok, _ in ranked[: max_size - 2]]
        return cls(["<unk>", "<pad>"] + kept)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str, vocab: Vocabulary, l_max: int = L_MAX) -> tuple[list[int], int]:
    """Map text to a padded id sequence plus its true (unpadded) length.

    Out-of-vocabulary words fall back to <unk>; empty text yields a single
    <unk> token rather than an error; sequences truncate at ``l_max``.
    """
    if l_max < 1:
        raise ConfigError(f"l_max must be >= 1, got {l_max}")
    words = split_words(text)
    if not words:
        ids = [UNK_ID]
    else:
        ids = [vocab.id(w) for w in words[:l_max]]
    true_length = len(ids)
    ids = ids + [PAD_ID] * (l_max - true_length)
    return ids, true_length


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


def _f32_normal(rng, shape, std: float) -> np.ndarray:
    draw = rng.standard_normal(shape, dtype=np.float32)
    return (draw * np.float32(std)).astype(np.float64)


@dataclass(frozen=True)
class FrozenTextEncoder:
    token_embedding: np.ndarray   # V x d_en
    position_embedding: np.ndarray  # L_max x d_en
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def d_en(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def l_max(self) -> int:
        return self.position_embedding.shape[0]


def encode_text(enc: FrozenTextEncoder, ids: list[int]) -> Tensor:
    """Per-token feature matrix for a padded id sequence. No gradients."""
    if len(ids) != enc.l_max:
        raise DimensionError(f"expected {enc.l_max} ids, got {len(ids)}")
    vocab_size = enc.token_embedding.shape[0]
    for i in ids:
        if not 0 <= i < vocab_size:
            raise VocabularyError(f"token id {i} outside vocabulary of size {vocab_size}")
    x = enc.token_embedding[np.asarray(ids)] + enc.position_embedding
    h = np.tanh(x @ enc.w1 + enc.b1)
    y = np.tanh(h @ enc.w2 + enc.b2)
    return Tensor(y)


@dataclass(frozen=True)
class FrozenLlm:
    token_embedding: np.ndarray   # V x d_llm
    position_embedding: np.ndarray  # L_max x d_llm
    layer_weights: tuple          # n_layers of (w, b)

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    @property
    def d_llm(self) -> int:
        return self.token_embedding.shape[1]


def llm_hidden_states(llm: FrozenLlm, ids: list[int], layer: int) -> Tensor:
    """Hidden states of the requested layer, layers indexed 1..n_layers."""
    if not 1 <= layer <= llm.n_layers:
        raise RangeError(f"layer {layer} outside 1..{llm.n_layers}")
    vocab_size = llm.token_embedding.shape[0]
    for i in ids:
        if not 0 <= i < vocab_size:
            raise VocabularyError(f"token id {i} outside vocabulary of size {vocab_size}")
    h = llm.token_embedding[np.asarray(ids)] + llm.position_embedding
    for w, b in llm.layer_weights[:layer]:
        h = np.tanh(h @ w + b)
    return Tensor(h)


def pool_knowledge_vector(states: Tensor, true_length: int) -> Tensor:
    """Mean over the first ``true_length`` rows; padding rows are excluded."""
    rows = states.data
    if rows.ndim != 2:
        raise DimensionError(f"expected a matrix of states, got shape {states.shape}")
    if true_length == 0:
        raise DimensionError("cannot pool zero rows")
    if not 1 <= true_length <= rows.shape[0]:
        raise DimensionError(f"true_length {true_length} outside 1..{rows.shape[0]}")
    return Tensor(rows[:true_length].mean(axis=0))


@dataclass(frozen=True)
class FrozenImageEmbedder:
    weight: np.ndarray  # res*res x d_en
    bias: np.ndarray    # d_en

    @property
    def resolution(self) -> int:
        return int(round(self.weight.shape[0] ** 0.5))


def embed_image(emb: FrozenImageEmbedder, image) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    res = emb.resolution
    if arr.shape != (res, res):
        raise DimensionError(f"expected a {res}x{res} image, got shape {arr.shape}")
    return Tensor(arr.reshape(-1) @ emb.weight + emb.bias)


@dataclass(frozen=True)
class EncoderBundle:
    vocab: Vocabulary
    text: FrozenTextEncoder
    llm: FrozenLlm
    image: FrozenImageEmbedder
    seed: int
    profile: str
    l_max: int
    resolution: int

    @property
    def d_en(self) -> int:
        return self.text.d_en

    @property
    def d_llm(self) -> int:
        return self.llm.d_llm


def build_bundle(
    seed: int,
    profile: str,
    vocab: Vocabulary,
    d_en: int = D_EN,
    l_max: int = L_MAX,
    resolution: int = RESOLUTION,
) -> EncoderBundle:
    if profile not in LLM_PROFILES:
        raise ConfigError(f"unknown llm profile {profile!r}, expected one of {sorted(LLM_PROFILES)}")
    n_layers, d_llm = LLM_PROFILES[profile]
    v = len(vocab)

    r = _rng(seed, 1)
    text = FrozenTextEncoder(
        token_embedding=_f32_normal(r, (v, d_en), 1.0),
        position_embedding=_f32_normal(r, (l_max, d_en), 0.3),
        w1=_f32_normal(r, (d_en, d_en), (1.0 / d_en) ** 0.5),
        b1=_f32_normal(r, (d_en,), 0.1),
        w2=_f32_normal(r, (d_en, d_en), (1.0 / d_en) ** 0.5),
        b2=_f32_normal(r, (d_en,), 0.1),
    )

    r = _rng(seed, 2)
    layers = []
    for _ in range(n_layers):
        w = _f32_normal(r, (d_llm, d_llm), (1.0 / d_llm) ** 0.5)
        b = _f32_normal(r, (d_llm,), 0.1)
        layers.append((w, b))
    llm = FrozenLlm(
        token_embedding=_f32_normal(r, (v, d_llm), 1.0),
        position_embedding=_f32_normal(r, (l_max, d_llm), 0.3),
        layer_weights=tuple(layers),
    )

    r = _rng(seed, 3)
    image = FrozenImageEmbedder(
        weight=_f32_normal(r, (resolution * resolution, d_en), (1.0 / (resolution * resolution)) ** 0.5),
        bias=_f32_normal(r, (d_en,), 0.1),
    )

    return EncoderBundle(
        vocab=vocab, text=text, llm=llm, image=image,
        seed=int(seed), profile=profile, l_max=l_max, resolution=resolution,
    )


def save_bundle(bundle: EncoderBundle, out_dir) -> None:
    tensors = {
        "text_token_embedding": bundle.text.token_embedding,
        "text_position_embedding": bundle.text.position_embedding,
        "text_w1": bundle.text.w1,
        "text_b1": bundle.text.b1,
        "text_w2": bundle.text.w2,
        "text_b2": bundle.text.b2,
        "llm_token_embedding": bundle.llm.token_embedding,
        "llm_position_embedding": bundle.llm.position_embedding,
        "image_weight": bundle.image.weight,
        "image_bias": bundle.image.bias,
    }
    for k, (w, b) in enumerate(bundle.llm.layer_weights, start=1):
        tensors[f"llm_layer{k:02d}_w"] = w
        tensors[f"llm_layer{k:02d}_b"] = b
    manifest = {
        "kind": "encoders",
        "seed": bundle.seed,
        "profile": bundle.profile,
        "d_en": bundle.d_en,
        "d_llm": bundle.d_llm,
        "n_layers": bundle.llm.n_layers,
        "l_max": bundle.l_max,
        "resolution": bundle.resolution,
        "vocab": bundle.vocab.tokens,
    }
    write_hashed_bundle(out_dir, manifest, tensors)


def load_bundle(in_dir) -> EncoderBundle:
    manifest, tensors = read_hashed_bundle(in_dir)
    if manifest.get("kind") != "encoders":
        raise ConfigError(f"{in_dir} is not an encoder bundle")
    n_layers = manifest["n_layers"]
    text = FrozenTextEncoder(
        token_embedding=tensors["text_token_embedding"],
        position_embedding=tensors["text_position_embedding"],
        w1=tensors["text_w1"], b1=tensors["text_b1"],
        w2=tensors["text_w2"], b2=tensors["text_b2"],
    )
    llm = FrozenLlm(
        token_embedding=tensors["llm_token_embedding"],
        position_embedding=tensors["llm_position_embedding"],
        layer_weights=tuple(
            (tensors[f"llm_layer{k:02d}_w"], tensors[f"llm_layer{k:02d}_b"])
            for k in range(1, n_layers + 1)
        ),
    )
    image = FrozenImageEmbedder(weight=tensors["image_weight"], bias=tensors["image_bias"])
    return EncoderBundle(
        vocab=Vocabulary(manifest["vocab"]),
        text=text, llm=llm, image=image,
        seed=manifest["seed"], profile=manifest["profile"],
        l_max=manifest["l_max"], resolution=manifest["resolution"],
    )
