"""Per-question-type accuracy, positivity-selection quality, and inspection dumps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import APLModel
from ..positivity import AUDIO_OBJECT, QUESTION_OBJECT, LossConfig, positivity_loss, segment_records
from ..scenes import QUESTION_TYPES, FeatureContainer, answer_names
from .train import length_buckets, make_batch


@dataclass
class SelectionScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "SelectionScore":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f)


@dataclass
class EvalReport:
    per_type: dict[str, float]
    counts: dict[str, int]
    overall: float
    type_average: float
    positivity: SelectionScore
    question_positivity: SelectionScore
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "per_type": self.per_type,
            "counts": self.counts,
            "overall": self.overall,
            "type_average": self.type_average,
            "positivity": self.positivity.__dict__,
            "question_positivity": self.question_positivity.__dict__,
        }


def _canonical_order(container: FeatureContainer) -> np.ndarray:
    # sort by record content so batch composition does not depend on file order
    keys = [rec.tobytes() for rec in container.records]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def run_inference(model: APLModel, container: FeatureContainer, loss: LossConfig | None = None, batch_size: int = 256):
    """Predictions and positivity masks for every sample, in container order."""
    loss = loss or LossConfig()
    n = len(container)
    T, N = container.dims.T, container.dims.N
    preds = np.zeros(n, dtype=np.int64)
    ao_masks = np.zeros((n, T, N), dtype=bool)
    qo_masks = np.zeros((n, T, N), dtype=bool)
    for idx in length_buckets(container, _canonical_order(container), batch_size):
        batch = make_batch(container, idx)
        out = model(batch.audio, batch.objects, batch.tokens)
        probe = out.enhanced.F_A_prime if loss.audio_probe == "enhanced" else out.F_A
        report = positivity_loss(out.question.F_q, out.enhanced.F_O_prime, probe, loss, N=N)
        preds[idx] = out.answer.c_hat
        ao_masks[idx] = report.masks[AUDIO_OBJECT]
        qo_masks[idx] = report.masks[QUESTION_OBJECT]
    return preds, ao_masks, qo_masks


def accuracy(model: APLModel, container: FeatureContainer) -> float:
    preds, _, _ = run_inference(model, container)
    return float((preds == container.labels).mean()) if len(container) else float("nan")


def _selection(masks: np.ndarray, truth: np.ndarray) -> SelectionScore:
    tp = int((masks & truth).sum())
    return SelectionScore.from_counts(tp, int((masks & ~truth).sum()), int((~masks & truth).sum()))


def evaluate(model: APLModel, container: FeatureContainer, loss: LossConfig | None = None) -> EvalReport:
    """Accuracy per question type and overall (count-weighted), plus P/R/F1
    of the audio-object positivity sets against the sounding slots."""
    preds, ao_masks, qo_masks = run_inference(model, container, loss)
    correct = preds == container.labels
    qtypes = container.question_types
    per_type, counts = {}, {}
    for code, name in QUESTION_TYPES.items():
        sel = qtypes == code
        counts[name] = int(sel.sum())
        if counts[name]:
            per_type[name] = float(correct[sel].mean())
    overall = float(correct.mean()) if len(container) else float("nan")
    type_average = float(np.mean(list(per_type.values()))) if per_type else float("nan")
    sounding = container.records["sounding"].astype(bool)
    relevant = container.records["relevant"].astype(bool)
    return EvalReport(
        per_type=per_type,
        counts=counts,
        overall=overall,
        type_average=type_average,
        positivity=_selection(ao_masks, sounding),
        question_positivity=_selection(qo_masks, relevant),
    )


def inspect(model: APLModel, container: FeatureContainer, index: int, loss: LossConfig | None = None) -> dict:
    """Numeric attention maps and positivity records for one sample."""
    if not 0 <= index < len(container):
        raise IndexError(f"sample index {index} outside 0..{len(container) - 1}")
    loss = loss or LossConfig()
    batch = make_batch(container, [index])
    out = model(batch.audio, batch.objects, batch.tokens)
    probe = out.enhanced.F_A_prime if loss.audio_probe == "enhanced" else out.F_A
    report = positivity_loss(out.question.F_q, out.enhanced.F_O_prime, probe, loss, N=container.dims.N)
    names = answer_names(container.dims.n_instruments)
    sample = container.sample(index)
    attention = {}
    for key, weights in out.attention.items():
        w = weights[0]
        attention[key] = {"per_head": w.tolist(), "mean": w.mean(axis=0).tolist()}
    return {
        "index": index,
        "question": sample.question,
        "question_type": QUESTION_TYPES[sample.question_type],
        "label": names[sample.label],
        "prediction": names[int(out.answer.c_hat[0])],
        "p": out.answer.p.data[0].tolist(),
        "beta": out.fusion.beta.data.reshape(-1).tolist(),
        "attention": attention,
        "phi": loss.resolve_phi(container.dims.N),
        "positivity": segment_records(report, loss.resolve_phi(container.dims.N)),
        "sounding": sample.sounding.astype(int).tolist(),
    }
