"""Measurement suite: paired softmax similarity scores, semantic accuracy
tallies, and Welch two-sample t-tests for quality parity.

Image quality metrics themselves are not computed here; per-image scores for
named metrics are ingested from plain-text files (one value per line,
aligned with the generated-image order) and only the parity statistics on
them are derived. Semantic correctness comes either from a label file or,
for grammar-generated prompts, from the renderer-attribute oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import adapter_forward, blend_condition, load_adapter
from .dataset import SimilarityScorer, image_matches_prompt, parse_prompt_attributes
from .diffusion import condition_pool, ddpm_sample, load_denoiser
from .encoders import encode_text, load_bundle, tokenize
from .errors import ConfigError, DataError, StatsError
from .tnsio import read_json, sha256_file

CATEGORIES = ("Action", "Color", "Counting")


@dataclass(frozen=True)
class PromptSuite:
    categories: dict[str, list[str]]
    images_per_prompt: int = 10

    def __post_init__(self):
        if tuple(sorted(self.categories)) != tuple(sorted(CATEGORIES)):
            raise ConfigError(f"suite categories must be exactly {CATEGORIES}")
        for cat, prompts in self.categories.items():
            if not prompts or any(not p.strip() for p in prompts):
                raise ConfigError(f"category {cat} has empty prompts")
        if self.images_per_prompt < 1:
            raise ConfigError("images_per_prompt must be >= 1")


def load_suite(path, images_per_prompt: int = 10) -> PromptSuite:
    doc = read_json(path)
    return PromptSuite(categories={k: list(v) for k, v in doc.items()},
                       images_per_prompt=images_per_prompt)


def image_id(category: str, prompt_index: int, sample_index: int) -> str:
    return f"{category}/{prompt_index:02d}/{sample_index:02d}"


def paired_clip_score(scorer: SimilarityScorer, prompt: str,
                      image_a, image_b) -> tuple[float, float]:
    """Softmax over the two prompt-image similarity logits.

    Identical images give exactly (0.5, 0.5); the pair always sums to 1.
    """
    a = np.asarray(image_a.data if hasattr(image_a, "data") else image_a, dtype=np.float64)
    b = np.asarray(image_b.data if hasattr(image_b, "data") else image_b, dtype=np.float64)
    la = scorer.score(prompt, a)
    lb = scorer.score(prompt, b)
    m = max(la, lb)
    ea, eb = math.exp(la - m), math.exp(lb - m)
    z = ea + eb
    return ea / z, eb / z


def accuracy_percent(correct: int, total: int) -> float:
    """Percentage with the two-decimal rounding used in reported tables."""
    if total <= 0:
        raise StatsError("accuracy over zero images")
    return round(100.0 * correct / total, 2)


def semantic_accuracy(labels: dict[str, bool], suite: PromptSuite) -> dict:
    """Per-prompt and per-category accuracy percentages from boolean labels.

    ``labels`` maps image ids (category/prompt/sample) to correctness; every
    expected image must be present.
    """
    per_category = {}
    per_prompt = {}
    for cat in CATEGORIES:
        prompts = suite.categories[cat]
        cat_correct = 0
        cat_total = 0
        rows = []
        for pi in range(len(prompts)):
            correct = 0
            for si in range(suite.images_per_prompt):
                key = image_id(cat, pi, si)
                if key not in labels:
                    raise DataError(f"missing label for image {key}")
                correct += int(bool(labels[key]))
            rows.append(accuracy_percent(correct, suite.images_per_prompt))
            cat_correct += correct
            cat_total += suite.images_per_prompt
        per_category[cat] = accuracy_percent(cat_correct, cat_total)
        per_prompt[cat] = rows
    return {"per_category": per_category, "per_prompt": per_prompt}


# ---------------------------------------------------------------------------
# Welch's t-test


def _betacf(a: float, b: float, x: float) -> float:
    # continued-fraction core of the incomplete beta function
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), computed with the standard continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def welch_ttest(xs, ys) -> dict:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite df.

    The two-sided p-value uses the identity P(|T| > |t|) = I_x(df/2, 1/2)
    with x = df / (df + t^2). Parity means p > 0.05: no significant
    difference between the samples' means.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 2 or len(ys) < 2:
        raise StatsError("welch_ttest needs at least two values per sample")
    v1 = float(xs.var(ddof=1))
    v2 = float(ys.var(ddof=1))
    if v1 == 0.0 or v2 == 0.0:
        raise StatsError("welch_ttest got a zero-variance sample")
    n1, n2 = len(xs), len(ys)
    se1, se2 = v1 / n1, v2 / n2
    pooled = se1 + se2
    t = (float(xs.mean()) - float(ys.mean())) / math.sqrt(pooled)
    df = pooled * pooled / (se1 * se1 / (n1 - 1) + se2 * se2 / (n2 - 1))
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return {"t": t, "df": df, "p": p, "parity": p > 0.05}


# ---------------------------------------------------------------------------
# full evaluation run


def _sample_seed(base: int, cat_index: int, prompt_index: int, sample_index: int) -> int:
    return ((base * 1000003 + cat_index) * 1000003 + prompt_index) * 1000003 + sample_index


def _condition_for(bundle, prompt: str, adapter=None, eta: float | None = None) -> np.ndarray:
    ids, _ = tokenize(prompt, bundle.vocab, bundle.l_max)
    enc = encode_text(bundle.text, ids)
    if adapter is None:
        return condition_pool(enc).data
    params, cfg = adapter
    out = adapter_forward(params, enc)
    c_prime = blend_condition(out["c_llm"], enc, cfg.eta if eta is None else eta)
    return condition_pool(c_prime).data


def read_score_file(path, expected: int) -> list[float]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != expected:
        raise DataError(f"{path}: {len(lines)} scores, expected {expected}")
    return [float(ln) for ln in lines]


def run_eval(baseline_dir, adapter_dir, suite: PromptSuite,
             quality_scores: dict[str, tuple[str, str]] | None = None,
             seed: int = 0, eta: float | None = None,
             labels: dict[str, dict[str, bool]] | None = None) -> dict:
    """Generate matched samples for baseline and adapter, score them, and
    assemble the evaluation report.

    ``baseline_dir`` is a denoiser checkpoint with an embedded encoder
    bundle; ``adapter_dir`` is an adapter checkpoint or None for a
    self-comparison. Seeds are fixed per (category, prompt, sample) and
    shared by both sides. ``quality_scores`` maps metric names to a pair of
    score files (baseline, adapter). ``labels`` may override the renderer
    oracle with hand labels per side.
    """
    den, sched = load_denoiser(baseline_dir)
    bundle = load_bundle(Path(baseline_dir) / "encoders")
    adapter = None
    if adapter_dir is not None:
        params, _, loss_cfg, _ = load_adapter(adapter_dir)
        adapter = (params, loss_cfg)
    scorer = SimilarityScorer(bundle)

    clip_scores = {"baseline": [], "adapter": []}
    oracle_labels = {"baseline": {}, "adapter": {}}
    oracle_ok = True
    n_images = 0
    for ci, cat in enumerate(CATEGORIES):
        for pi, prompt in enumerate(suite.categories[cat]):
            cond_base = _condition_for(bundle, prompt)
            cond_adapter = _condition_for(bundle, prompt, adapter, eta)
            parseable = parse_prompt_attributes(prompt) is not None
            for si in range(suite.images_per_prompt):
                s = _sample_seed(seed, ci, pi, si)
                img_base = ddpm_sample(den, sched, cond_base, s).data
                img_adapter = ddpm_sample(den, sched, cond_adapter, s).data
                pb, pa = paired_clip_score(scorer, prompt, img_base, img_adapter)
                clip_scores["baseline"].append(pb)
                clip_scores["adapter"].append(pa)
                key = image_id(cat, pi, si)
                if parseable:
                    oracle_labels["baseline"][key] = image_matches_prompt(img_base, prompt, cat)
                    oracle_labels["adapter"][key] = image_matches_prompt(img_adapter, prompt, cat)
                else:
                    oracle_ok = False
                n_images += 1

    report = {
        "schema_version": 1,
        "provenance": {
            # content-addressed so identically seeded runs agree byte for byte
            "baseline_manifest_sha256": sha256_file(Path(baseline_dir) / "manifest.json"),
            "adapter_manifest_sha256": (
                sha256_file(Path(adapter_dir) / "manifest.json")
                if adapter_dir is not None else None),
            "seed": seed,
            "images_per_prompt": suite.images_per_prompt,
            "clip_score_mean": "over all generated images",
        },
        "clip_score": {
            "baseline": float(np.mean(clip_scores["baseline"])),
            "adapter": float(np.mean(clip_scores["adapter"])),
        },
    }

    accuracy = {}
    for side in ("baseline", "adapter"):
        side_labels = (labels or {}).get(side)
        if side_labels is None:
            if not oracle_ok:
                raise DataError(
                    "prompts outside the grammar need a label file for side " + side)
            side_labels = oracle_labels[side]
        accuracy[side] = semantic_accuracy(side_labels, suite)
    report["semantic_accuracy"] = accuracy

    quality = {}
    for metric, (base_file, adapter_file) in (quality_scores or {}).items():
        xs = read_score_file(base_file, n_images)
        ys = read_score_file(adapter_file, n_images)
        test = welch_ttest(xs, ys)
        quality[metric] = {
            "baseline_mean": float(np.mean(xs)),
            "adapter_mean": float(np.mean(ys)),
            **test,
        }
    report["quality_parity"] = quality
    return report
