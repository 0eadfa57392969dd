"""Object-aware adaptive-positivity learning.

For every segment a probe (the sentence-level question feature, or that
segment's audio feature) is compared with the segment's N object features.
Softmax-normalised cosine similarities above a threshold ``phi`` form the
positive set; the contrastive term pulls positives up against the rest.

Set membership is computed from the forward values and held fixed during the
backward pass, so gradients reach the features only through the similarity
scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

QUESTION_OBJECT, AUDIO_OBJECT = "qo", "ao"

PHI_PRESETS = {"faster-rcnn": 0.028, "detr": 0.011}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``phi=None`` selects the desk default 1/N + 0.005, resolved against the
    object count by :meth:`resolve_phi`.
    """

    phi: float | None = None
    tau: float = 0.4
    lam: float = 0.3
    use_qo: bool = True
    use_ao: bool = True
    audio_probe: str = "enhanced"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.phi is not None and self.phi < 0:
            raise ConfigError(f"phi must be non-negative, got {self.phi}")
        if self.audio_probe not in ("enhanced", "raw"):
            raise ConfigError(f"audio_probe must be 'enhanced' or 'raw', got {self.audio_probe!r}")

    def resolve_phi(self, n_objects: int) -> float:
        return default_phi(n_objects) if self.phi is None else float(self.phi)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def default_phi(n_objects: int) -> float:
    return 1.0 / n_objects + 0.005


@dataclass
class SimilarityRow:
    t: int
    probe: str
    s: np.ndarray


@dataclass
class PositivityPartition:
    t: int
    P: list[int]
    Neg: list[int]

    @property
    def K(self) -> int:
        return len(self.P)

    @classmethod
    def from_row(cls, row: SimilarityRow, phi: float) -> "PositivityPartition":
        mask = select_positivity(row.s, phi)
        return cls(row.t, np.flatnonzero(mask).tolist(), np.flatnonzero(~mask).tolist())


@dataclass
class LossReport:
    """Loss terms for a batch; every entry is per-sample, shape (B,)."""

    L_qo: Tensor
    L_ao: Tensor
    L_pc: Tensor
    l_t: dict[str, Tensor] = field(default_factory=dict)
    rows: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    L_ce: Tensor | None = None
    L_total: Tensor | None = None


def similarity_row(probe: Tensor, objects: Tensor, eps: float = 1e-8) -> Tensor:
    """Softmax over objects of cosine(probe, object).

    ``probe`` is (..., 1, d) and ``objects`` (..., N, d); leading axes
    broadcast.  Returns (..., N).
    """
    p = tc.l2_normalize_lastdim(probe, eps)
    o = tc.l2_normalize_lastdim(objects, eps)
    cos = tc.matmul(p, o.mT)
    s = tc.softmax_lastdim(cos)
    return s.reshape(s.shape[:-2] + (s.shape[-1],))


def select_positivity(s, phi: float) -> np.ndarray:
    """Boolean positive mask: s > phi (strictly)."""
    data = s.data if isinstance(s, Tensor) else np.asarray(s)
    return data > phi


def segment_loss(s: Tensor, positive: np.ndarray, tau: float) -> Tensor:
    """Contrastive term per row of ``s`` (..., N) given a fixed positive mask.

    l = -log(sum_P exp(s/tau) / sum_all exp(s/tau)); rows with no positive
    contribute exactly zero.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    positive = np.asarray(positive, dtype=bool)
    has_pos = positive.any(axis=-1)
    e = (s * (1.0 / tau)).exp()
    denom = e.sum(axis=-1)
    mask = tc.tensor(positive.astype(s.dtype))
    # empty rows get numerator := denominator so the log-ratio is 0
    fill = tc.tensor((~has_pos).astype(s.dtype))
    numer = (e * mask).sum(axis=-1) + denom * fill
    return denom.log() - numer.log()


def positivity_loss(F_q: Tensor, F_O_prime: Tensor, F_A_probe: Tensor, config: LossConfig, N: int) -> LossReport:
    """Question-object and audio-object contrastive losses for a batch.

    ``F_q`` is (B, 1, d), ``F_O_prime`` is (B, T*N, d) and ``F_A_probe`` is
    the (B, T, d) audio feature used as per-segment probe.
    """
    *lead, TN, d = F_O_prime.shape
    T = TN // N
    if T * N != TN:
        raise tc.DimensionError(f"object rows {TN} not divisible by N={N}")
    phi = config.resolve_phi(N)
    objects = F_O_prime.reshape(tuple(lead) + (T, N, d))
    probes = {
        QUESTION_OBJECT: F_q.reshape(tuple(lead) + (1, 1, d)),
        AUDIO_OBJECT: F_A_probe.reshape(tuple(lead) + (T, 1, d)),
    }
    enabled = {QUESTION_OBJECT: config.use_qo, AUDIO_OBJECT: config.use_ao}
    report = {}
    l_t, rows, masks = {}, {}, {}
    for pairing, probe in probes.items():
        s = similarity_row(probe, objects)
        mask = select_positivity(s, phi)
        rows[pairing], masks[pairing] = s.data, mask
        if enabled[pairing]:
            l_t[pairing] = segment_loss(s, mask, config.tau)
            report[pairing] = l_t[pairing].mean(axis=-1)
        else:
            report[pairing] = tc.zeros(tuple(lead), dtype=F_q.dtype)
    L_pc = report[QUESTION_OBJECT] + report[AUDIO_OBJECT]
    return LossReport(report[QUESTION_OBJECT], report[AUDIO_OBJECT], L_pc, l_t, rows, masks)


def segment_records(report: LossReport, phi: float, index: int = 0) -> list[dict]:
    """Per-segment JSON-ready records for one sample of a batch."""
    records = []
    for pairing in (QUESTION_OBJECT, AUDIO_OBJECT):
        s_all = report.rows[pairing][index]
        terms = report.l_t.get(pairing)
        for t, s in enumerate(s_all):
            part = PositivityPartition.from_row(SimilarityRow(t, pairing, s), phi)
            records.append(
                {
                    "t": t,
                    "pairing": pairing,
                    "s": [float(v) for v in s],
                    "P": part.P,
                    "Neg": part.Neg,
                    "l_t": float(terms.data[index, t]) if terms is not None else 0.0,
                }
            )
    return records
