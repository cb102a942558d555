"""Network building blocks: complex encoder, recurrent contextualizer,
density composition, interference fusion and measurement banks.

All differentiable blocks take batched :class:`~quiet.diff.Tensor` inputs;
leading axes are batch (and sequence) axes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import diff as D
from . import qcore
from .diff import Tensor
from .errors import ContractError, DimensionError

MODALITIES = ("text", "video", "audio")
TASKS = ("sar", "sen", "emo")
CLASS_COUNTS = {"sar": 2, "sen": 3, "emo": 9}
PRIORS = (-1, 0, 1)

# Fusion order of the modality pairs inside the tri-modal vector.
PAIRS = (("text", "video"), ("video", "audio"), ("text", "audio"))


def init_phase(prior: int, dim: int, rng_seed) -> np.ndarray:
    """Phase vector drawn from the half-plane matching a sentiment prior.

    Negative priors draw from (-pi, 0), positive from (0, pi) and neutral
    from the whole circle.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(rng_seed)
    lo, hi = {-1: (-np.pi, 0.0), 0: (-np.pi, np.pi), 1: (0.0, np.pi)}[int(prior)]
    theta = rng.uniform(lo, hi, size=dim)
    # uniform() is half-open; keep the open interval
    return np.where(theta == lo, 0.5 * (lo + hi), theta)


class ComplexTensor(NamedTuple):
    re: Tensor
    im: Tensor

    def to_vector(self) -> qcore.ComplexVector:
        return qcore.ComplexVector(self.re.value, self.im.value)


@dataclass
class EncoderParams:
    weight: Tensor  # (d_m, d_e)
    bias: Tensor  # (d_e,)
    phase: Tensor  # (3, d_e), one row per prior in PRIORS

    @classmethod
    def init(cls, in_dim: int, emb_dim: int, rng: np.random.Generator, name: str = ""):
        w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, emb_dim))
        phase = np.stack([init_phase(p, emb_dim, rng.integers(2**63)) for p in PRIORS])
        return cls(Tensor(w, True, f"{name}.weight"),
                   Tensor(np.zeros(emb_dim), True, f"{name}.bias"),
                   Tensor(phase, True, f"{name}.phase"))

    def tensors(self):
        return [self.weight, self.bias, self.phase]


def encode_modality(x, enc: EncoderParams, prior=0) -> ComplexTensor:
    """Map real features to a unit-norm superposition state.

    Amplitudes are the normalised magnitudes of an affine projection and
    phases come from the row of ``enc.phase`` selected by the sentiment prior.
    """
    x = D.as_tensor(x)
    if x.shape[-1] != enc.weight.shape[0]:
        raise DimensionError(f"encoder expects {enc.weight.shape[0]} features, got {x.shape[-1]}")
    v = x @ enc.weight + enc.bias
    r = D.l2_normalize(D.abs_smooth(v))
    idx = np.asarray(prior, dtype=int) + 1
    theta = D.take(enc.phase, idx, axis=0)
    return ComplexTensor(r * D.cos(theta), r * D.sin(theta))


@dataclass
class GruParams:
    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator, name: str = ""):
        k = 1.0 / np.sqrt(hidden)
        vals = {}
        for gate in "zrh":
            vals[f"w_{gate}"] = rng.uniform(-k, k, size=(in_dim, hidden))
            vals[f"u_{gate}"] = rng.uniform(-k, k, size=(hidden, hidden))
            vals[f"b_{gate}"] = np.zeros(hidden)
        return cls(**{key: Tensor(v, True, f"{name}.{key}") for key, v in vals.items()})

    @classmethod
    def zeros(cls, in_dim: int, hidden: int):
        shapes = {"w": (in_dim, hidden), "u": (hidden, hidden), "b": (hidden,)}
        return cls(**{f.name: Tensor(np.zeros(shapes[f.name[0]]), True) for f in fields(cls)})

    def tensors(self):
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def hidden_dim(self):
        return self.b_z.shape[0]


def gru_step(h_prev, u, p: GruParams) -> Tensor:
    h_prev, u = D.as_tensor(h_prev), D.as_tensor(u)
    z = D.sigmoid(u @ p.w_z + h_prev @ p.u_z + p.b_z)
    r = D.sigmoid(u @ p.w_r + h_prev @ p.u_r + p.b_r)
    cand = D.tanh(u @ p.w_h + (r * h_prev) @ p.u_h + p.b_h)
    return h_prev + z * (cand - h_prev)


def contextualize(states: ComplexTensor, p: GruParams, mask=None) -> Tensor:
    """Run the GRU over a (B, L, d_e) state sequence and return unit hidden states.

    Sequences are left-padded; ``mask`` (B, L) marks real positions. Padded
    steps leave the hidden state untouched, so they stay at zero.
    """
    seq = D.concat([states.re, states.im], axis=-1)
    if seq.value.ndim != 3:
        raise DimensionError(f"contextualize expects (batch, length, dim), got {seq.shape}")
    B, L, _ = seq.shape
    if L == 0:
        raise ContractError("empty utterance sequence")
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    h = Tensor(np.zeros((B, p.hidden_dim)))
    hs = []
    for t in range(L):
        step = gru_step(h, seq[:, t, :], p)
        if m[:, t].all():
            h = step
        else:
            h = h + m[:, t:t + 1] * (step - h)
        hs.append(h)
    return D.l2_normalize(D.stack(hs, axis=1))


def mixture_weights(logits: Tensor, mask) -> Tensor:
    """Softmax over the last L logits, L being the padded sequence length."""
    mask = np.asarray(mask, dtype=bool)
    B, L = mask.shape
    if L > logits.shape[0]:
        raise DimensionError(f"sequence length {L} exceeds mixture size {logits.shape[0]}")
    tail = logits[logits.shape[0] - L:]
    return D.softmax(D.add(tail, np.zeros((B, L))), axis=-1, mask=mask)


def compose_density(hiddens: Tensor, logits: Tensor, mask=None) -> Tensor:
    """rho = sum_l p_l |h_l><h_l| per batch row; returns (B, d_h, d_h)."""
    if mask is None:
        mask = np.ones(hiddens.shape[:2], dtype=bool)
    p = mixture_weights(logits, mask)
    weighted = hiddens * D.reshape(p, p.shape + (1,))
    return D.swapaxes(weighted, -1, -2) @ hiddens


@dataclass
class FusionConfig:
    cos_phi: float = -0.3
    alpha_sq: float = 0.5
    mode: str = "interference"
    trainable_phase: bool = False

    def __post_init__(self):
        if not -1.0 <= self.cos_phi <= 1.0:
            raise ContractError(f"cos_phi {self.cos_phi} outside [-1, 1]")
        if not 0.0 <= self.alpha_sq <= 1.0:
            raise ContractError(f"alpha_sq {self.alpha_sq} outside [0, 1]")
        if self.mode not in ("interference", "concat"):
            raise ContractError(f"unknown fusion mode {self.mode!r}")

    @property
    def beta_sq(self):
        return 1.0 - self.alpha_sq


def interfere(f_a, f_b, cfg: FusionConfig, cos_phi=None) -> Tensor:
    """Two-path fusion of non-negative distributions.

    f = a2*f_a + b2*f_b + 2*sqrt(a2*f_a*b2*f_b)*cos(phi), coordinate-wise.
    ``cos_phi`` may be a scalar Tensor to make the phase trainable.
    """
    f_a, f_b = D.as_tensor(f_a), D.as_tensor(f_b)
    if f_a.shape != f_b.shape:
        raise DimensionError(f"interfere: shapes differ {f_a.shape} vs {f_b.shape}")
    lowest = min(f_a.value.min(initial=0.0), f_b.value.min(initial=0.0))
    if lowest < -1e-12:
        raise ContractError(f"interfere needs non-negative inputs, got {lowest:.3e}")
    a2, b2 = cfg.alpha_sq, cfg.beta_sq
    linear = D.scale(f_a, a2) + D.scale(f_b, b2)
    if cfg.mode == "concat":
        return linear
    cross = D.scale(D.sqrt(f_a * f_b), 2.0 * np.sqrt(a2 * b2))
    if cos_phi is None:
        return linear + D.scale(cross, cfg.cos_phi)
    return linear + cross * cos_phi


def fuse(rhos: dict, cfg: FusionConfig, cos_phi=None) -> Tensor:
    """Unit fused vector from per-modality density matrices.

    Three modalities give [f_tv; f_va; f_ta]; two give their single pair; one
    gives its own diagonal. The result is L2-normalised.
    """
    diags = {m: D.diagonal(r) for m, r in rhos.items()}
    present = [m for m in MODALITIES if m in diags]
    if len(present) == 1:
        return D.l2_normalize(diags[present[0]])
    if len(present) == 2:
        a, b = present
        return D.l2_normalize(interfere(diags[a], diags[b], cfg, cos_phi))
    if len(present) != 3:
        raise ContractError("fuse needs one to three modalities")
    parts = [interfere(diags[a], diags[b], cfg, cos_phi) for a, b in PAIRS]
    return D.l2_normalize(D.concat(parts, axis=-1))


def fuse_trimodal(rho_text, rho_img, rho_auc, cfg: FusionConfig, cos_phi=None) -> Tensor:
    return fuse({"text": rho_text, "video": rho_img, "audio": rho_auc}, cfg, cos_phi)


@dataclass
class MeasurementBank:
    task: str
    vectors: Tensor  # (G, dim) raw, unit-normalised on use

    @classmethod
    def init(cls, task: str, count: int, dim: int, rng: np.random.Generator):
        v = rng.normal(size=(count, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return cls(task, Tensor(v, True, f"bank.{task}"))

    def unit_vectors(self) -> np.ndarray:
        v = self.vectors.value
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), D.NORM_FLOOR)

    def degenerate_rows(self) -> list[int]:
        norms = np.linalg.norm(self.vectors.value, axis=1)
        return [int(i) for i in np.flatnonzero(norms < D.NORM_FLOOR)]

    def projector(self, i: int) -> np.ndarray:
        return qcore.outer_product(self.unit_vectors()[i])


def measure(bank: MeasurementBank, f) -> Tensor:
    """Born probabilities of rank-1 projectors: m_g = <D_g|f>^2."""
    f = D.as_tensor(f)
    units = D.l2_normalize(bank.vectors, axis=-1)
    if f.shape[-1] != units.shape[-1]:
        raise DimensionError(f"measure: state dim {f.shape[-1]} vs bank dim {units.shape[-1]}")
    if f.value.ndim == 1:
        amps = D.reshape(D.reshape(f, (1, -1)) @ D.swapaxes(units, 0, 1), (-1,))
    else:
        amps = f @ D.swapaxes(units, 0, 1)
    return D.square(amps)


def incompatibility_report(bank_a: MeasurementBank, bank_b: MeasurementBank, pair_count: int,
                           rng_seed=0, indexwise: bool = False) -> dict:
    """Commutator norms and relative entropies between sampled projector pairs.

    With ``indexwise`` the pairs are (i, i); otherwise both indices are
    drawn independently with replacement.
    """
    ua, ub = bank_a.unit_vectors(), bank_b.unit_vectors()
    if ua.shape[1] != ub.shape[1]:
        raise DimensionError(f"bank dims differ: {ua.shape[1]} vs {ub.shape[1]}")
    rng = np.random.default_rng(rng_seed)
    if indexwise:
        n = min(len(ua), len(ub))
        ia = rng.integers(n, size=pair_count)
        ib = ia
    else:
        ia = rng.integers(len(ua), size=pair_count)
        ib = rng.integers(len(ub), size=pair_count)

    # A projector's spectrum is reused across pairs; cache the matrix log.
    log_cache: dict[tuple[str, int], np.ndarray] = {}
    entropy_cache: dict[tuple[str, int], float] = {}

    def spectral(tag, units, i):
        key = (tag, int(i))
        if key not in log_cache:
            P = qcore.outer_product(units[i])
            w, _ = qcore.hermitian_eig(P)
            w = np.maximum(w, 0.0)
            entropy_cache[key] = float(np.sum(w * np.log(np.maximum(w, qcore.LOG_EPS))))
            log_cache[key] = qcore.matrix_log(P)
        return entropy_cache[key], log_cache[key]

    pairs = []
    for a, b in zip(ia, ib):
        Pa = qcore.outer_product(ua[a])
        Pb = qcore.outer_product(ub[b])
        _, norm = qcore.commutator(Pa, Pb)
        s_ent, _ = spectral("a", ua, a)
        _, log_b = spectral("b", ub, b)
        rel = s_ent - float(np.sum(Pa * log_b))
        pairs.append({"a": int(a), "b": int(b), "commutator_norm": norm, "relative_entropy": rel})
    norms = np.array([p["commutator_norm"] for p in pairs])
    rels = np.array([p["relative_entropy"] for p in pairs])
    return {
        "bank_a": bank_a.task,
        "bank_b": bank_b.task,
        "pair_count": pair_count,
        "pairs": pairs,
        "mean_commutator_norm": float(norms.mean()) if pair_count else 0.0,
        "mean_relative_entropy": float(rels.mean()) if pair_count else 0.0,
        "nonzero_fraction": float(np.mean(norms > 1e-9)) if pair_count else 0.0,
    }
