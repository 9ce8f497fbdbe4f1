"""Triplet dataset tooling: synthesis, cleaning, knowledge caching, stats.

A dataset directory holds ``manifest.jsonl`` (one record per line), an
``images/`` folder of .tns tensors, optional per-layer knowledge caches, and
a generated evaluation prompt suite. All paths inside manifests are relative
to the dataset directory so that two runs with the same seed produce
byte-identical trees wherever they live.

The synthetic corpus is built from a tiny attribute grammar
(count x color x object x action). Images are rendered procedurally from the
attributes: ``k`` separated 2x2 blobs at the color's intensity level plus a
low-intensity glyph row encoding the action, which lets tests and the
evaluation harness read the ground truth straight back out of the pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import (
    EncoderBundle,
    embed_image,
    encode_text,
    llm_hidden_states,
    pool_knowledge_vector,
    split_words,
    tokenize,
)
from .errors import ConfigError, DataError, FormatError, RangeError
from .tnsio import read_tns, write_json, write_tns

COUNT_WORDS = ("one", "two", "three", "four")
COLOR_LEVELS = {"red": 0.375, "green": 0.5, "blue": 0.75, "yellow": 1.0}
OBJECTS = ("cat", "dog", "bird", "star", "boat", "lamp", "tree", "frog")
ACTIONS = ("sleeping", "running", "jumping", "flying", "spinning")

QUALITY_SUFFIX = (
    "best quality, masterpiece best, extremely detailed, 8k uhd, "
    "sharp focus, cinematic lighting, intricate detail"
)

BLOB_THRESHOLD = 0.25
GLYPH_LEVEL = 0.125
_BLOB_SLOTS = ((0, 0), (0, 5), (5, 0), (5, 5))
_GLYPH_COLS = (2, 3, 4)
LENGTH_CLAMP = 300

STOPWORDS = (
    "a", "about", "above", "after", "again", "against", "all", "also",
    "although", "always", "am", "among", "an", "and", "any", "are", "around",
    "as", "at", "away", "be", "because", "been", "before", "being", "below",
    "between", "beyond", "both", "but", "by", "can", "cannot", "could", "did",
    "do", "does", "doing", "down", "during", "each", "even", "ever", "every",
    "few", "for", "from", "further", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how",
    "however", "i", "if", "in", "instead", "into", "is", "it", "its",
    "itself", "just", "many", "may", "me", "might", "more", "most", "much",
    "must", "my", "myself", "never", "no", "nor", "not", "now", "of", "off",
    "often", "on", "once", "only", "or", "other", "ought", "our", "ours",
    "ourselves", "out", "over", "own", "same", "shall", "she", "should",
    "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those",
    "through", "to", "too", "under", "until", "up", "upon", "very", "was",
    "we", "were", "what", "when", "where", "which", "while", "who", "whom",
    "why", "will", "with", "within", "would", "you", "your", "yours",
    "yourself", "yourselves",
)


@dataclass
class TripletRecord:
    id: str
    simple_prompt: str
    complex_prompt: str
    image_path: str
    knowledge_path: str | None = None
    retained: bool | None = None

    def to_json(self) -> str:
        doc = {
            "id": self.id,
            "simple_prompt": self.simple_prompt,
            "complex_prompt": self.complex_prompt,
            "image_path": self.image_path,
            "knowledge_path": self.knowledge_path,
            "retained": self.retained,
        }
        return json.dumps(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "TripletRecord":
        required = {"id", "simple_prompt", "complex_prompt", "image_path",
                    "knowledge_path", "retained"}
        missing = required - set(doc)
        if missing:
            raise DataError(f"manifest record missing fields: {sorted(missing)}")
        return cls(**{k: doc[k] for k in required})


def write_manifest(data_dir, records: list[TripletRecord]) -> None:
    path = Path(data_dir) / "manifest.jsonl"
    path.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_manifest(data_dir) -> list[TripletRecord]:
    path = Path(data_dir) / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no manifest.jsonl in {data_dir}")
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(TripletRecord.from_dict(json.loads(line)))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids in manifest")
    return records


def load_image(data_dir, record: TripletRecord) -> np.ndarray:
    return read_tns(Path(data_dir) / record.image_path)


# ---------------------------------------------------------------------------
# synthetic corpus


def render_image(count: int, color: str, action: str, slot_order,
                 resolution: int = 8) -> np.ndarray:
    """Draw ``count`` blobs at the color's level plus the action glyph row.

    Blob slots are far enough apart that blobs never touch, so the number of
    connected components above BLOB_THRESHOLD equals ``count`` by
    construction. Glyph pixels stay below the threshold.
    """
    img = np.zeros((resolution, resolution))
    level = COLOR_LEVELS[color]
    for slot in list(slot_order)[:count]:
        r, c = _BLOB_SLOTS[slot]
        img[r:r + 2, c:c + 2] = level
    img[resolution - 1, 0] = GLYPH_LEVEL
    action_id = ACTIONS.index(action)
    for bit, col in enumerate(_GLYPH_COLS):
        if action_id >> (len(_GLYPH_COLS) - 1 - bit) & 1:
            img[resolution - 1, col] = GLYPH_LEVEL
    return img


def simple_prompt_for(count: int, color: str, obj: str, action: str) -> str:
    noun = obj if count == 1 else obj + "s"
    return f"{COUNT_WORDS[count - 1]} {color} {noun} {action}"


def synth_corpus(seed: int, n: int, out_dir) -> list[TripletRecord]:
    """Generate n triplets under out_dir, plus an evaluation prompt suite."""
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), 8])
    records = []
    for i in range(n):
        count = int(rng.integers(1, len(COUNT_WORDS) + 1))
        color = list(COLOR_LEVELS)[int(rng.integers(0, len(COLOR_LEVELS)))]
        obj = OBJECTS[int(rng.integers(0, len(OBJECTS)))]
        action = ACTIONS[int(rng.integers(0, len(ACTIONS)))]
        slot_order = rng.permutation(len(_BLOB_SLOTS))
        simple = simple_prompt_for(count, color, obj, action)
        image = render_image(count, color, action, slot_order)
        rid = f"r{i:04d}"
        rel = f"images/{rid}.tns"
        write_tns(out / rel, image)
        records.append(TripletRecord(
            id=rid,
            simple_prompt=simple,
            complex_prompt=f"{simple}, {QUALITY_SUFFIX}",
            image_path=rel,
        ))
    write_manifest(out, records)
    write_json(out / "suite.json", build_prompt_suite(seed))
    return records


def build_prompt_suite(seed: int, per_category: int = 15) -> dict:
    """Typed evaluation prompts drawn from the grammar, one list per category."""
    rng = np.random.default_rng([int(seed), 9])
    suite = {}
    for category in ("Action", "Color", "Counting"):
        prompts = []
        seen = set()
        while len(prompts) < per_category:
            count = int(rng.integers(1, len(COUNT_WORDS) + 1))
            color = list(COLOR_LEVELS)[int(rng.integers(0, len(COLOR_LEVELS)))]
            obj = OBJECTS[int(rng.integers(0, len(OBJECTS)))]
            action = ACTIONS[int(rng.integers(0, len(ACTIONS)))]
            p = simple_prompt_for(count, color, obj, action)
            if p not in seen:
                seen.add(p)
                prompts.append(p)
        suite[category] = prompts
    return suite


# ---------------------------------------------------------------------------
# attribute readback (the renderer oracle)


def count_components(image: np.ndarray, threshold: float = BLOB_THRESHOLD) -> int:
    """4-connected components of pixels strictly above the threshold."""
    mask = image > threshold
    seen = np.zeros_like(mask)
    rows, cols = mask.shape
    count = 0
    for r0 in range(rows):
        for c0 in range(cols):
            if mask[r0, c0] and not seen[r0, c0]:
                count += 1
                frontier = [(r0, c0)]
                seen[r0, c0] = True
                while frontier:
                    r, c = frontier.pop()
                    for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                        if 0 <= rr < rows and 0 <= cc < cols and mask[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            frontier.append((rr, cc))
    return count


def dominant_color(image: np.ndarray, threshold: float = BLOB_THRESHOLD) -> str | None:
    vals = image[image > threshold]
    if vals.size == 0:
        return None
    mean = float(vals.mean())
    return min(COLOR_LEVELS, key=lambda name: abs(COLOR_LEVELS[name] - mean))


def action_glyph_id(image: np.ndarray) -> int:
    row = image.shape[0] - 1
    action_id = 0
    for col in _GLYPH_COLS:
        bit = 1 if GLYPH_LEVEL / 2.0 < image[row, col] < BLOB_THRESHOLD else 0
        action_id = action_id * 2 + bit
    return action_id


def parse_prompt_attributes(prompt: str) -> dict | None:
    """Recover (count, color, action) from a grammar-generated prompt."""
    words = split_words(prompt)
    count = next((i + 1 for i, w in enumerate(COUNT_WORDS) if w in words), None)
    color = next((c for c in COLOR_LEVELS if c in words), None)
    action = next((a for a in ACTIONS if a in words), None)
    if count is None or color is None or action is None:
        return None
    return {"count": count, "color": color, "action": action}


def image_matches_prompt(image: np.ndarray, prompt: str, category: str) -> bool:
    """Renderer-attribute check for one category of semantics."""
    attrs = parse_prompt_attributes(prompt)
    if attrs is None:
        raise DataError(f"prompt not parseable by the grammar: {prompt!r}")
    if category == "Counting":
        return count_components(image) == attrs["count"]
    if category == "Color":
        return dominant_color(image) == attrs["color"]
    if category == "Action":
        return action_glyph_id(image) == ACTIONS.index(attrs["action"])
    raise ConfigError(f"unknown category {category!r}")


# ---------------------------------------------------------------------------
# cleaning gate


class SimilarityScorer:
    """Cosine similarity between pooled text features and the image embedding."""

    def __init__(self, bundle: EncoderBundle):
        self.bundle = bundle

    def score(self, prompt: str, image: np.ndarray) -> float:
        ids, length = tokenize(prompt, self.bundle.vocab, self.bundle.l_max)
        enc = encode_text(self.bundle.text, ids)
        text_vec = enc.data[:length].mean(axis=0)
        img_vec = embed_image(self.bundle.image, image).data
        denom = float(np.linalg.norm(text_vec) * np.linalg.norm(img_vec))
        if denom == 0.0:
            return 0.0
        return float(text_vec @ img_vec / denom)


def clean_gate(records: list[TripletRecord], scorer: SimilarityScorer, data_dir,
               drop_ids: set[str] | None = None) -> dict:
    """Flag each record retained iff the simple prompt scores at least as
    high against the image as the complex prompt (ties keep).

    Mutates only the ``retained`` flags. ``drop_ids`` is the hook for a
    manual second-pass exclusion list. Unreadable images drop the record and
    are reported in the summary rather than aborting the pass.
    """
    drop_ids = drop_ids or set()
    errors = {}
    retained = 0
    for rec in records:
        if rec.id in drop_ids:
            rec.retained = False
            continue
        try:
            image = load_image(data_dir, rec)
        except (OSError, FormatError) as exc:
            rec.retained = False
            errors[rec.id] = str(exc)
            continue
        rec.retained = scorer.score(rec.simple_prompt, image) >= scorer.score(rec.complex_prompt, image)
        retained += int(rec.retained)
    return {
        "input": len(records),
        "retained": retained,
        "dropped": len(records) - retained,
        "score_variant": "cosine",
        "errors": errors,
    }


# ---------------------------------------------------------------------------
# knowledge cache


def knowledge_cache_dir(layer: int) -> str:
    return f"knowledge/layer_{layer:02d}"


def build_knowledge_cache(records: list[TripletRecord], bundle: EncoderBundle,
                          layer: int, data_dir) -> dict:
    """Persist the pooled LLM vector of every retained record's simple prompt.

    Vectors land under a per-layer cache folder; the records' knowledge_path
    fields point at the new files. The layer is validated before anything is
    written.
    """
    if not 1 <= layer <= bundle.llm.n_layers:
        raise RangeError(f"layer {layer} outside 1..{bundle.llm.n_layers}")
    rel_dir = knowledge_cache_dir(layer)
    out = Path(data_dir) / rel_dir
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for rec in records:
        if rec.retained is False:
            continue
        ids, length = tokenize(rec.simple_prompt, bundle.vocab, bundle.l_max)
        states = llm_hidden_states(bundle.llm, ids, layer)
        vec = pool_knowledge_vector(states, length)
        rel = f"{rel_dir}/{rec.id}.tns"
        write_tns(Path(data_dir) / rel, vec.data)
        rec.knowledge_path = rel
        entries[rec.id] = rel
    cache_manifest = {
        "layer": layer,
        "profile": bundle.profile,
        "d_llm": bundle.d_llm,
        "vectors": entries,
    }
    write_json(out / "cache.json", cache_manifest)
    return cache_manifest


def load_knowledge_vector(data_dir, record: TripletRecord, layer: int) -> np.ndarray:
    path = Path(data_dir) / knowledge_cache_dir(layer) / f"{record.id}.tns"
    if not path.exists():
        raise DataError(f"record {record.id} has no cached knowledge vector for layer {layer}")
    return read_tns(path)


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass
class CorpusStats:
    record_count: int
    simple_lengths: dict[int, int]
    complex_lengths: dict[int, int]
    token_frequencies: list[tuple[str, int]]

    def to_json_dict(self) -> dict:
        return {
            "record_count": self.record_count,
            "length_clamp": LENGTH_CLAMP,
            "simple_length_histogram": [[k, v] for k, v in sorted(self.simple_lengths.items())],
            "complex_length_histogram": [[k, v] for k, v in sorted(self.complex_lengths.items())],
            "token_frequencies": [[t, c] for t, c in self.token_frequencies],
        }


def corpus_stats(records: list[TripletRecord]) -> CorpusStats:
    """Prompt-length histograms (clamped at 300) plus a stopword-filtered
    token frequency table over all prompts."""
    stop = set(STOPWORDS)
    simple_hist: dict[int, int] = {}
    complex_hist: dict[int, int] = {}
    freq: dict[str, int] = {}
    for rec in records:
        for prompt, hist in ((rec.simple_prompt, simple_hist),
                             (rec.complex_prompt, complex_hist)):
            words = split_words(prompt)
            n = min(len(words), LENGTH_CLAMP)
            hist[n] = hist.get(n, 0) + 1
            for w in words:
                if w not in stop:
                    freq[w] = freq.get(w, 0) + 1
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    return CorpusStats(
        record_count=len(records),
        simple_lengths=simple_hist,
        complex_lengths=complex_hist,
        token_frequencies=ranked,
    )
