"""End-to-end model: parameters, forward pass, loss, training and metrics."""

from __future__ import annotations

import copy
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diff as D
from .data import DialogueSample, batches
from .diff import Tensor
from .errors import ConfigError, DataError, NumericalError
from .layers import (CLASS_COUNTS, MODALITIES, TASKS, ComplexTensor, EncoderParams, FusionConfig,
                     GruParams, MeasurementBank, compose_density, contextualize, encode_modality,
                     fuse, measure)

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    dims: dict = field(default_factory=lambda: {"text": 768, "video": 2048, "audio": 128})
    embedding_dim: int = 128
    hidden_dim: int = 128
    measurement_count: int = 1000
    context_limit: int = 3
    tasks: tuple = TASKS
    modalities: tuple = MODALITIES
    fusion: FusionConfig = field(default_factory=FusionConfig)
    no_context: bool = False
    trad_head: bool = False
    freeze_phase: bool = False

    def __post_init__(self):
        self.tasks = tuple(t for t in TASKS if t in self.tasks)
        self.modalities = tuple(m for m in MODALITIES if m in self.modalities)
        self.validate()

    def validate(self):
        if not self.tasks:
            raise ConfigError("task mask is empty")
        if not self.modalities:
            raise ConfigError("modality mask is empty")
        for name in ("embedding_dim", "hidden_dim", "measurement_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.context_limit <= 3:
            raise ConfigError("context_limit must lie in 0..3")
        for m in MODALITIES:
            if int(self.dims.get(m, 0)) < 1:
                raise ConfigError(f"feature dim for {m} must be positive")

    @property
    def fused_dim(self) -> int:
        return (3 if len(self.modalities) == 3 else 1) * self.hidden_dim

    @property
    def effective_context(self) -> int:
        return 0 if self.no_context else self.context_limit

    def to_json(self) -> dict:
        return {
            "dims": dict(self.dims), "embedding_dim": self.embedding_dim,
            "hidden_dim": self.hidden_dim, "measurement_count": self.measurement_count,
            "context_limit": self.context_limit, "tasks": list(self.tasks),
            "modalities": list(self.modalities), "fusion": vars(self.fusion).copy(),
            "no_context": self.no_context, "trad_head": self.trad_head,
            "freeze_phase": self.freeze_phase,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["fusion"] = FusionConfig(**obj["fusion"])
        return cls(**obj)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0075
    batch_size: int = 64
    dropout: float = 0.2
    epochs: int = 100
    early_stop_patience: int = 10
    lr_decay_factor: float = 0.5
    lr_patience: int = 5
    loss_weights: dict = field(default_factory=lambda: {t: 1.0 / 3.0 for t in TASKS})
    l2_coefficient: float = 1e-4
    select_by: str = "loss"
    seed: int = 0

    def __post_init__(self):
        if self.select_by not in ("loss", "f1"):
            raise ConfigError(f"select_by must be 'loss' or 'f1', got {self.select_by!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def task_weights(self, tasks: Sequence[str]) -> dict:
        """Loss weights restricted to ``tasks`` and renormalised to sum to one."""
        w = {t: float(self.loss_weights.get(t, 0.0)) for t in tasks}
        total = sum(w.values())
        if total <= 0:
            raise ConfigError(f"loss weights vanish on active tasks {list(tasks)}")
        return {t: v / total for t, v in w.items()}


@dataclass
class ModelParams:
    encoders: dict
    grus: dict
    mixtures: dict
    banks: dict
    heads: dict  # task -> (weight (in, E), bias (E,))
    cos_phi: Tensor | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d_e, d_h = cfg.embedding_dim, cfg.hidden_dim
        encoders, grus, mixtures = {}, {}, {}
        for m in MODALITIES:
            encoders[m] = EncoderParams.init(int(cfg.dims[m]), d_e, rng, f"enc.{m}")
            grus[m] = GruParams.init(2 * d_e, d_h, rng, f"gru.{m}")
            mixtures[m] = Tensor(np.zeros(cfg.context_limit + 1), True, f"mix.{m}")
        banks, heads = {}, {}
        head_in = cfg.fused_dim if cfg.trad_head else cfg.measurement_count
        for t in TASKS:
            banks[t] = MeasurementBank.init(t, cfg.measurement_count, cfg.fused_dim, rng)
            n = CLASS_COUNTS[t]
            limit = np.sqrt(6.0 / (head_in + n))
            heads[t] = (Tensor(rng.uniform(-limit, limit, size=(head_in, n)), True, f"head.{t}.weight"),
                        Tensor(np.zeros(n), True, f"head.{t}.bias"))
        cos_phi = None
        if cfg.fusion.trainable_phase:
            cos_phi = Tensor(np.arctanh(np.clip(cfg.fusion.cos_phi, -0.999, 0.999)), True, "fusion.phase")
        return cls(encoders, grus, mixtures, banks, heads, cos_phi)

    def named_tensors(self) -> dict:
        out = {}
        for m in MODALITIES:
            enc = self.encoders[m]
            out[f"enc.{m}.weight"] = enc.weight
            out[f"enc.{m}.bias"] = enc.bias
            out[f"enc.{m}.phase"] = enc.phase
        for m in MODALITIES:
            for name, t in zip(("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"),
                               self.grus[m].tensors()):
                out[f"gru.{m}.{name}"] = t
        for m in MODALITIES:
            out[f"mix.{m}"] = self.mixtures[m]
        for t in TASKS:
            out[f"bank.{t}"] = self.banks[t].vectors
            out[f"head.{t}.weight"], out[f"head.{t}.bias"] = self.heads[t]
        if self.cos_phi is not None:
            out["fusion.phase"] = self.cos_phi
        for name, t in out.items():
            t.name = name
        return out

    def trainable(self, cfg: ModelConfig) -> dict:
        """Tensors updated by training: those of active modalities and tasks."""
        keep = {}
        for name, t in self.named_tensors().items():
            kind, owner = name.split(".")[:2]
            if kind in ("enc", "gru", "mix") and owner not in cfg.modalities:
                continue
            if kind in ("bank", "head") and owner not in cfg.tasks:
                continue
            if kind == "bank" and cfg.trad_head:
                continue
            if name.endswith(".phase") and kind == "enc" and cfg.freeze_phase:
                continue
            keep[name] = t
        return keep

    def snapshot(self) -> dict:
        return {k: t.value.copy() for k, t in self.named_tensors().items()}

    def restore(self, values: dict):
        for k, t in self.named_tensors().items():
            t.value = values[k].copy()

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class Batch:
    ids: list
    features: dict  # modality -> (B, L, d_m)
    priors: np.ndarray  # (B, L) in {-1, 0, 1}
    mask: np.ndarray  # (B, L) bool, left padding
    labels: dict  # task -> (B,)


def collate(samples: Sequence[DialogueSample], cfg: ModelConfig) -> Batch:
    keep = cfg.effective_context + 1
    seqs = [s.utterances[-keep:] for s in samples]
    B, L = len(seqs), max(len(u) for u in seqs)
    feats = {m: np.zeros((B, L, int(cfg.dims[m]))) for m in cfg.modalities}
    priors = np.zeros((B, L), dtype=int)
    mask = np.zeros((B, L), dtype=bool)
    for i, (s, utts) in enumerate(zip(samples, seqs)):
        off = L - len(utts)
        for j, u in enumerate(utts):
            for m in cfg.modalities:
                v = u.features(m)
                if v.shape[0] != feats[m].shape[2]:
                    raise DataError(f"sample {s.dialogue_id}: {m} dim {v.shape[0]} != {feats[m].shape[2]}")
                if not np.all(np.isfinite(v)):
                    raise DataError(f"sample {s.dialogue_id}: non-finite {m} features")
                feats[m][i, off + j] = v
            priors[i, off + j] = u.sentiment_prior
            mask[i, off + j] = True
    labels = {}
    for t in TASKS:
        y = np.array([s.label(t) for s in samples], dtype=int)
        bad = np.flatnonzero((y < 0) | (y >= CLASS_COUNTS[t]))
        if bad.size:
            raise DataError(f"sample {samples[bad[0]].dialogue_id}: {t} label {y[bad[0]]} out of range")
        labels[t] = y
    return Batch([s.dialogue_id for s in samples], feats, priors, mask, labels)


@dataclass
class Outputs:
    logits: dict
    probs: dict
    features: dict  # per-task head inputs
    fused: Tensor
    rhos: dict


def forward(batch: Batch, params: ModelParams, cfg: ModelConfig, train: bool = False,
            dropout: float = 0.0, dropout_seed=None) -> Outputs:
    rhos = {}
    for m in cfg.modalities:
        state = encode_modality(batch.features[m], params.encoders[m], batch.priors)
        hidden = contextualize(ComplexTensor(*state), params.grus[m], batch.mask)
        rhos[m] = compose_density(hidden, params.mixtures[m], batch.mask)
    cos_phi = D.tanh(params.cos_phi) if params.cos_phi is not None else None
    fused = fuse(rhos, cfg.fusion, cos_phi)

    rng = np.random.default_rng(dropout_seed) if train and dropout > 0 else None
    logits, probs, feats = {}, {}, {}
    for t in cfg.tasks:
        feat = fused if cfg.trad_head else measure(params.banks[t], fused)
        if rng is not None:
            keep = rng.random(feat.shape) >= dropout
            feat = D.dropout_mask_apply(feat, keep, dropout)
        w, b = params.heads[t]
        logits[t] = feat @ w + b
        probs[t] = D.softmax(logits[t], axis=-1)
        feats[t] = feat
    return Outputs(logits, probs, feats, fused, rhos)


def task_losses(out: Outputs, labels: dict, tasks: Sequence[str]) -> dict:
    """Mean cross-entropy per task with predictions clamped at 1e-12."""
    res = {}
    for t in tasks:
        p = out.probs[t]
        y = np.asarray(labels[t], dtype=int)
        if y.size and (y.min() < 0 or y.max() >= p.shape[-1]):
            raise DataError(f"{t} label out of range [0, {p.shape[-1]})")
        picked = p[np.arange(len(y)), y]
        res[t] = D.scale(D.sum(D.log(picked, floor=1e-12)), -1.0 / len(y))
    return res


def l2_penalty(tensors) -> Tensor:
    terms = [D.sum(D.square(t)) for t in tensors]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def loss(out: Outputs, labels: dict, tcfg: TrainConfig, params: ModelParams,
         mcfg: ModelConfig) -> Tensor:
    """Weighted joint cross-entropy plus L2 over the trainable tensors."""
    weights = tcfg.task_weights(mcfg.tasks)
    per_task = task_losses(out, labels, mcfg.tasks)
    total = None
    for t in mcfg.tasks:
        term = D.scale(per_task[t], weights[t])
        total = term if total is None else total + term
    if tcfg.l2_coefficient > 0:
        total = total + D.scale(l2_penalty(params.trainable(mcfg).values()), tcfg.l2_coefficient)
    return total


# -- metrics ------------------------------------------------------------------


def micro_scores(confusion: np.ndarray) -> dict:
    """Micro-averaged precision/recall/F1 from a (true x predicted) confusion matrix."""
    tp = float(np.trace(confusion))
    fp = float(confusion.sum(axis=0).sum() - tp)
    fn = float(confusion.sum(axis=1).sum() - tp)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "micro_f1": f1}


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(p, axis=-1)


def predict(samples: Sequence[DialogueSample], params: ModelParams, cfg: ModelConfig,
            chunk: int = 256) -> dict:
    preds = {t: [] for t in cfg.tasks}
    for start in range(0, len(samples), chunk):
        out = forward(collate(samples[start:start + chunk], cfg), params, cfg)
        for t in cfg.tasks:
            preds[t].append(argmax_lowest(out.probs[t].value))
    return {t: np.concatenate(v) if v else np.zeros(0, dtype=int) for t, v in preds.items()}


def evaluate(samples: Sequence[DialogueSample], params: ModelParams, cfg: ModelConfig) -> dict:
    """Per-task micro P/R/F1, accuracy and confusion matrix."""
    if not cfg.tasks:
        raise ConfigError("task mask is empty")
    preds = predict(samples, params, cfg)
    metrics = {}
    for t in cfg.tasks:
        y = np.array([s.label(t) for s in samples], dtype=int)
        n = CLASS_COUNTS[t]
        conf = np.zeros((n, n), dtype=int)
        np.add.at(conf, (y, preds[t]), 1)
        row = micro_scores(conf)
        row["accuracy"] = float(np.mean(preds[t] == y)) if len(y) else 0.0
        row["confusion"] = conf.tolist()
        metrics[t] = row
    return metrics


def dataset_loss(samples, params, mcfg, tcfg, chunk: int = 256) -> float:
    """Eval-mode joint loss over a whole dataset (sample-weighted mean)."""
    total, n = 0.0, 0
    weights = tcfg.task_weights(mcfg.tasks)
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        batch = collate(part, mcfg)
        out = forward(batch, params, mcfg)
        per = task_losses(out, batch.labels, mcfg.tasks)
        total += len(part) * sum(weights[t] * float(per[t].value) for t in mcfg.tasks)
        n += len(part)
    if tcfg.l2_coefficient > 0:
        total += n * tcfg.l2_coefficient * sum(float(np.sum(t.value ** 2))
                                               for t in params.trainable(mcfg).values())
    return total / n


# -- training -------------------------------------------------------------------


def train_step(batch: Batch, params: ModelParams, mcfg: ModelConfig, tcfg: TrainConfig,
               dropout_seed=None) -> tuple[float, dict]:
    """One forward/backward pass; returns (loss value, gradients by name)."""
    trainable = params.trainable(mcfg)
    for t in params.named_tensors().values():
        t.zero_grad()
    with D.Tape() as tape:
        out = forward(batch, params, mcfg, train=True, dropout=tcfg.dropout, dropout_seed=dropout_seed)
        total = loss(out, batch.labels, tcfg, params, mcfg)
    tape.backward(total)
    grads = {k: (np.zeros_like(t.value) if t.grad is None else t.grad) for k, t in trainable.items()}
    return float(total.value), grads


def fit(train_set, dev_set, params: ModelParams, mcfg: ModelConfig, tcfg: TrainConfig,
        progress=None):
    """Mini-batch gradient descent with plateau LR decay and early stopping.

    Returns (best parameters by dev selection, history). Epoch 0 in the
    history is the evaluation of the initial parameters.
    """
    if not train_set or not dev_set:
        raise ValueError("fit needs non-empty train and dev sets")
    params = params.copy()
    lr = tcfg.learning_rate

    def record(epoch, batch_loss):
        dev_metrics = evaluate(dev_set, params, mcfg)
        row = {
            "epoch": epoch,
            "learning_rate": lr,
            "train_loss": dataset_loss(train_set, params, mcfg, tcfg),
            "train_batch_loss": batch_loss,
            "dev_loss": dataset_loss(dev_set, params, mcfg, tcfg),
            "dev_micro_f1": {t: dev_metrics[t]["micro_f1"] for t in mcfg.tasks},
        }
        if progress is not None:
            progress(row)
        return row

    def score(row):
        if tcfg.select_by == "f1":
            return -float(np.mean(list(row["dev_micro_f1"].values())))
        return row["dev_loss"]

    history = [record(0, None)]
    best_score, best_values, best_epoch = score(history[0]), params.snapshot(), 0
    stale = lr_stale = 0
    for epoch in range(1, tcfg.epochs + 1):
        losses = []
        for bi, part in enumerate(batches(train_set, tcfg.batch_size, tcfg.seed, epoch)):
            value, grads = train_step(collate(part, mcfg), params, mcfg, tcfg,
                                      dropout_seed=[tcfg.seed, epoch, bi])
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {bi}")
            losses.append(value)
            if lr != 0.0:
                for name, t in params.trainable(mcfg).items():
                    t.value = t.value - lr * grads[name]
        row = record(epoch, float(np.mean(losses)))
        history.append(row)
        s = score(row)
        if s < best_score:
            best_score, best_values, best_epoch = s, params.snapshot(), epoch
            stale = lr_stale = 0
        else:
            stale += 1
            lr_stale += 1
        if lr_stale >= tcfg.lr_patience:
            lr *= tcfg.lr_decay_factor
            lr_stale = 0
        if stale >= tcfg.early_stop_patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    params.restore(best_values)
    return params, {"epochs": history, "best_epoch": best_epoch}


# -- ablation / sweep matrix ----------------------------------------------------------


def nonempty_subsets(items: Sequence[str]) -> list[tuple]:
    return [c for r in range(1, len(items) + 1) for c in itertools.combinations(items, r)]


VARIANTS = {
    "full": {},
    "concat": {"fusion": "concat"},
    "no_context": {"no_context": True},
    "trad": {"trad_head": True},
}


def _variant(mcfg: ModelConfig, name: str) -> ModelConfig:
    variant = VARIANTS[name]
    cfg = replace(mcfg, fusion=replace(mcfg.fusion))
    if variant.get("fusion"):
        cfg.fusion.mode = variant["fusion"]
    cfg.no_context = variant.get("no_context", cfg.no_context)
    cfg.trad_head = variant.get("trad_head", cfg.trad_head)
    return cfg


def run_matrix(mcfg: ModelConfig, tcfg: TrainConfig, datasets, grid: bool = True,
               context: bool = True, variants: Sequence[str] = (), task_subsets=None,
               modality_subsets=None, progress=None) -> list[dict]:
    """Train one fresh model per cell and report test metrics per cell.

    Cells: the task-subset x modality-subset grid, the context-limit sweep
    0..3 and any named architecture variants. ``datasets`` is (train, dev, test).
    """
    train_set, dev_set, test_set = datasets
    cells = []
    if grid:
        for tasks in task_subsets or nonempty_subsets(TASKS):
            for mods in modality_subsets or nonempty_subsets(MODALITIES):
                cells.append(("grid", replace(mcfg, tasks=tuple(tasks), modalities=tuple(mods))))
    if context:
        for limit in range(4):
            cells.append(("context", replace(mcfg, context_limit=limit)))
    for name in variants:
        cells.append((f"variant:{name}", _variant(mcfg, name)))

    rows = []
    for kind, cfg in cells:
        params = ModelParams.init(cfg, tcfg.seed)
        trained, history = fit(train_set, dev_set, params, cfg, tcfg)
        metrics = evaluate(test_set, trained, cfg)
        row = {
            "kind": kind,
            "tasks": list(cfg.tasks),
            "modalities": list(cfg.modalities),
            "context_limit": cfg.context_limit,
            "fusion_mode": cfg.fusion.mode,
            "no_context": cfg.no_context,
            "trad_head": cfg.trad_head,
            "seed": tcfg.seed,
            "epochs_run": len(history["epochs"]) - 1,
            "metrics": {t: {k: v for k, v in m.items() if k != "confusion"} for t, m in metrics.items()},
        }
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, mcfg: ModelConfig):
    obj = {
        "format_version": 1,
        "model": mcfg.to_json(),
        "tensors": {k: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
                    for k, t in params.named_tensors().items()},
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    obj = json.loads(Path(path).read_text())
    mcfg = ModelConfig.from_json(obj["model"])
    params = ModelParams.init(mcfg, 0)
    tensors = params.named_tensors()
    for name, t in tensors.items():
        if name not in obj["tensors"]:
            raise ConfigError(f"checkpoint lacks tensor {name}")
        rec = obj["tensors"][name]
        if tuple(rec["shape"]) != t.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {rec['shape']}, expected {list(t.shape)}")
        t.value = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
    return params, mcfg
