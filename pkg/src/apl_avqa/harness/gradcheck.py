"""Finite-difference check of the complete training objective at micro dims."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import tensorcore as tc
from ..blocks import ModelDims
from ..model import APLModel, ModelConfig
from ..positivity import LossConfig, positivity_loss
from .train import total_loss

MICRO_DIMS = ModelDims(T=2, N=3, L=3, d=8, d_a=5, d_o=6, C=4, heads=2, vocab=10)


@dataclass
class GradCheckConfig:
    dims: ModelDims = MICRO_DIMS
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    batch: int = 2
    n_samples: int = 600
    h: float = 1e-5
    tol: float = 1e-5
    floor: float = 1e-4  # eps*|f|/h roundoff swamps the ratio for gradients below this
    margin: float = 1e-4  # minimum |s - phi| before inputs are accepted
    seed: int = 0
    max_resample: int = 100


@dataclass
class GradCheckResult:
    report: tc.GradCheckReport
    seconds: float
    resamples: int
    worst_param: str | None

    def as_dict(self) -> dict:
        out = self.report.as_dict()
        out.update(seconds=self.seconds, resamples=self.resamples, worst_param=self.worst_param)
        return out


def _objective(model: APLModel, audio, objects, tokens, labels, loss: LossConfig):
    out = model(audio, objects, tokens)
    report = positivity_loss(out.question.F_q, out.enhanced.F_O_prime,
                             out.enhanced.F_A_prime if loss.audio_probe == "enhanced" else out.F_A,
                             loss, N=model.dims.N)
    report = total_loss(out.answer.log_p, labels, report, loss.lam)
    return report.L_total.mean(), report


def _near_threshold(report, phi: float, margin: float) -> bool:
    return any(np.any(np.abs(s - phi) < margin) for s in report.rows.values())


def gradcheck(config: GradCheckConfig | None = None) -> GradCheckResult:
    """Run the check in float64; inputs whose similarities sit within ``margin``
    of the threshold are redrawn, since the selection is not differentiable there."""
    config = config or GradCheckConfig()
    dims = config.dims
    phi = config.loss.resolve_phi(dims.N)
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    with tc.precision(np.float64):
        model = APLModel(dims, config.model, seed=config.seed, dtype=np.float64)
        for resamples in range(config.max_resample):
            audio = rng.standard_normal((config.batch, dims.T, dims.d_a))
            objects = rng.standard_normal((config.batch, dims.T, dims.N, dims.d_o))
            tokens = rng.integers(1, dims.vocab, size=(config.batch, dims.L))
            labels = rng.integers(0, dims.C, size=config.batch)
            _, report = _objective(model, audio, objects, tokens, labels, config.loss)
            if not _near_threshold(report, phi, config.margin):
                break
        else:
            raise RuntimeError("could not draw inputs away from the selection threshold")
        named = model.named_parameters()
        params = list(named.values())
        result = tc.finite_diff_check(
            lambda: _objective(model, audio, objects, tokens, labels, config.loss)[0],
            params,
            h=config.h,
            tol=config.tol,
            floor=config.floor,
            n_samples=config.n_samples,
            rng=rng,
        )
    worst = list(named)[result.worst[0]] if result.worst is not None else None
    return GradCheckResult(result, time.perf_counter() - start, resamples, worst)
