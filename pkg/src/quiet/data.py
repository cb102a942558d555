"""Dialogue dataset format, validation, batching and a synthetic generator.

On disk a dataset is UTF-8 JSON Lines, one dialogue per line::

    {"dialogue_id": "d00001",
     "utterances": [{"text": [...], "video": [...], "audio": [...],
                     "sentiment_prior": -1}, ...],
     "labels": {"sarcasm": 0, "sentiment": 2, "emotion": 7}}

Utterances are ordered contexts first, target last; labels describe the
target. A sibling ``<stem>.manifest.json`` records dims, counts and, for
generated data, the seed and recipe.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import stats

from .errors import DataError
from .layers import CLASS_COUNTS, MODALITIES

FORMAT_VERSION = 1
LABEL_KEYS = {"sar": "sarcasm", "sen": "sentiment", "emo": "emotion"}
DESK_DIMS = (32, 24, 16)


@dataclass
class Utterance:
    text: np.ndarray
    video: np.ndarray
    audio: np.ndarray
    sentiment_prior: int = 0

    def features(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


@dataclass
class DialogueSample:
    dialogue_id: str
    utterances: list[Utterance]
    labels: dict  # {"sarcasm": int, "sentiment": int, "emotion": int}

    def label(self, task: str) -> int:
        return int(self.labels[LABEL_KEYS[task]])

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "utterances": [
                {"text": u.text.tolist(), "video": u.video.tolist(), "audio": u.audio.tolist(),
                 "sentiment_prior": int(u.sentiment_prior)}
                for u in self.utterances
            ],
            "labels": {k: int(v) for k, v in self.labels.items()},
        }


@dataclass
class DatasetManifest:
    dims: dict  # {"text": d_t, "video": d_v, "audio": d_a}
    class_counts: dict = field(default_factory=lambda: {LABEL_KEYS[t]: n for t, n in CLASS_COUNTS.items()})
    sample_count: int = 0
    seed: int | None = None
    recipe: dict | None = None
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return asdict(self)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def _parse_sample(obj, lineno: int, dims: dict | None, max_utterances: int | None) -> DialogueSample:
    def fail(msg):
        raise DataError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("record is not an object")
    for key in ("dialogue_id", "utterances", "labels"):
        if key not in obj:
            fail(f"missing {key!r}")
    utts = obj["utterances"]
    if not isinstance(utts, list) or not utts:
        fail("utterances must be a non-empty list")
    if max_utterances is not None and len(utts) > max_utterances:
        fail(f"{len(utts)} utterances exceed the limit of {max_utterances}")
    parsed = []
    for j, u in enumerate(utts):
        vecs = {}
        for m in MODALITIES:
            if m not in u:
                fail(f"utterance {j} lacks {m!r}")
            try:
                arr = np.asarray(u[m], dtype=np.float64)
            except (TypeError, ValueError):
                fail(f"utterance {j} {m} is not numeric")
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                fail(f"utterance {j} {m} must be a finite vector")
            if dims is not None and arr.shape[0] != dims[m]:
                fail(f"utterance {j} {m} has dim {arr.shape[0]}, expected {dims[m]}")
            vecs[m] = arr
        prior = u.get("sentiment_prior", 0)
        if prior not in (-1, 0, 1):
            fail(f"utterance {j} sentiment_prior {prior!r} not in {{-1, 0, 1}}")
        parsed.append(Utterance(sentiment_prior=int(prior), **vecs))
        if dims is None:
            dims = {m: vecs[m].shape[0] for m in MODALITIES}
    labels = obj["labels"]
    out = {}
    for task, key in LABEL_KEYS.items():
        v = labels.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < CLASS_COUNTS[task]:
            fail(f"label {key}={v!r} out of range [0, {CLASS_COUNTS[task]})")
        out[key] = v
    return DialogueSample(str(obj["dialogue_id"]), parsed, out)


def load_dataset(path, max_utterances: int | None = None):
    """Read and fully validate a JSONL dataset. Returns (manifest, samples)."""
    path = Path(path)
    mpath = manifest_path(path)
    manifest = None
    if mpath.exists():
        manifest = DatasetManifest(**json.loads(mpath.read_text()))
    dims = dict(manifest.dims) if manifest else None
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            s = _parse_sample(obj, lineno, dims, max_utterances)
            if dims is None:
                dims = {m: s.utterances[0].features(m).shape[0] for m in MODALITIES}
            samples.append(s)
    if not samples:
        raise DataError(f"{path}: no samples")
    if manifest is None:
        manifest = DatasetManifest(dims=dims, sample_count=len(samples))
    elif manifest.sample_count != len(samples):
        raise DataError(f"manifest says {manifest.sample_count} samples, file has {len(samples)}")
    return manifest, samples


def save_dataset(path, samples: Sequence[DialogueSample], manifest: DatasetManifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.sample_count = len(samples)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")
    manifest_path(path).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")


def batches(samples: Sequence, batch_size: int, seed: int, epoch: int) -> Iterator[list]:
    """Shuffled mini-batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def split_dataset(samples: Sequence[DialogueSample], fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Disjoint train/dev/test split at dialogue granularity."""
    ids = sorted({s.dialogue_id for s in samples})
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_dev = int(round(fractions[1] * len(ids)))
    groups = [set(), set(), set()]
    for rank, i in enumerate(perm):
        groups[0 if rank < n_train else 1 if rank < n_train + n_dev else 2].add(ids[i])
    return tuple([s for s in samples if s.dialogue_id in g] for g in groups)


def label_marginals(samples: Sequence[DialogueSample]) -> dict:
    out = {}
    for task, key in LABEL_KEYS.items():
        counts = np.bincount([s.label(task) for s in samples], minlength=CLASS_COUNTS[task])
        out[key] = [int(c) for c in counts]
    return out


# -- synthetic generator ----------------------------------------------------

DEFAULT_RECIPE = {
    "latent_dim": 2,
    "noise": 0.1,
    "drift": 0.25,
    "prior_noise": 0.1,
    "emotion_noise": 0.05,
}


def sentiment_threshold(latent_dim: int) -> float:
    """Upper tertile of a.b for independent uniform unit vectors in R^k.

    (1 + a.b) / 2 follows Beta((k-1)/2, (k-1)/2), so the threshold is exact.
    """
    h = (latent_dim - 1) / 2.0
    return float(2.0 * stats.beta.ppf(2.0 / 3.0, h, h) - 1.0)


def _unit(rng, k, size=None):
    v = rng.normal(size=(k,) if size is None else (size, k))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def planted_labels(a, b, c, psi, threshold, noise_class: bool) -> dict:
    """The generator's label rule, a pure function of the latents."""
    ab = float(a @ b)
    sentiment = 0 if ab < -threshold else (2 if ab > threshold else 1)
    sarcasm = int(math.cos(psi) < 0.0 and sentiment == 2)
    sub = 2 if noise_class else int(float(b @ c) > 0.0)
    return {"sarcasm": sarcasm, "sentiment": sentiment, "emotion": 3 * sentiment + sub}


def generate_synthetic(n_dialogues: int, dims=DESK_DIMS, context_limit: int = 3, seed: int = 0,
                       recipe: dict | None = None):
    """Dialogues whose labels are planted in latent cross-modal structure.

    Per dialogue: unit latents a, b, c in R^k and a relative phase psi. Every
    modality observes a fixed noisy linear image of (a, b, c, cos psi, sin psi).
    Sentiment is the tertile of a.b, sarcasm is "cos psi < 0 and sentiment
    positive", emotion is (sentiment, sign of b.c) with a third noise slot.
    Context utterances re-draw the latents around the target with a spread
    that grows with distance. Returns (manifest, samples).
    """
    if n_dialogues <= 0:
        raise ValueError("n_dialogues must be positive")
    rec = dict(DEFAULT_RECIPE, **(recipe or {}))
    k = int(rec["latent_dim"])
    dims = dict(zip(MODALITIES, dims)) if not isinstance(dims, dict) else dict(dims)
    rng = np.random.default_rng(seed)
    code_dim = 3 * k + 2
    proj = {m: rng.normal(0.0, 1.0 / np.sqrt(code_dim), size=(dims[m], code_dim)) for m in MODALITIES}
    threshold = sentiment_threshold(k)

    def observe(a, b, c, psi, prior):
        code = np.concatenate([a, b, c, [math.cos(psi), math.sin(psi)]])
        feats = {m: proj[m] @ code + rec["noise"] * rng.normal(size=dims[m]) for m in MODALITIES}
        return Utterance(sentiment_prior=prior, **feats)

    def noisy_prior(bucket):
        prior = bucket - 1
        if rng.random() < rec["prior_noise"]:
            prior = int(rng.choice([p for p in (-1, 0, 1) if p != prior]))
        return prior

    samples = []
    oracle_hits = {"sarcasm": 0, "sentiment": 0, "emotion": 0}
    for i in range(n_dialogues):
        a, b, c = _unit(rng, k), _unit(rng, k), _unit(rng, k)
        psi = rng.uniform(-math.pi, math.pi)
        noise_class = bool(rng.random() < rec["emotion_noise"])
        labels = planted_labels(a, b, c, psi, threshold, noise_class)
        n_ctx = int(rng.integers(0, context_limit + 1))
        utts = []
        for dist in range(n_ctx, 0, -1):
            spread = rec["drift"] * dist
            ca = a + spread * rng.normal(size=k)
            cb = b + spread * rng.normal(size=k)
            cc = c + spread * rng.normal(size=k)
            ca, cb, cc = (v / np.linalg.norm(v) for v in (ca, cb, cc))
            cpsi = psi + spread * rng.normal()
            ctx_bucket = planted_labels(ca, cb, cc, cpsi, threshold, False)["sentiment"]
            utts.append(observe(ca, cb, cc, cpsi, noisy_prior(ctx_bucket)))
        utts.append(observe(a, b, c, psi, noisy_prior(labels["sentiment"])))
        samples.append(DialogueSample(f"d{i:06d}", utts, labels))

        # Bayes rule with the latents in hand: exact except for the noise slot.
        guess = planted_labels(a, b, c, psi, threshold, False)
        for key in oracle_hits:
            oracle_hits[key] += int(guess[key] == labels[key])

    manifest = DatasetManifest(
        dims=dims,
        sample_count=n_dialogues,
        seed=seed,
        recipe=dict(rec, context_limit=context_limit, sentiment_threshold=threshold,
                    oracle_accuracy={k2: v / n_dialogues for k2, v in oracle_hits.items()}),
    )
    return manifest, samples
