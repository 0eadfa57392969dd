"""The question-answering backbone.

Pipeline for one batch of videos whose questions share a token length::

    tokens --embed--> LSTM --> F_Q (L x d word-level), F_q (1 x d sentence-level)
    audio   --linear--> F_A (T x d)      objects --linear--> F_O (T*N x d)
    QCD:  F'_m  = TFM(F_m, F_Q, F_Q)     modality rows attend over words
    MCC:  F''_m = TFM(F_Q, F'_m, F'_m)   words attend over modality rows
    fusion: beta = softmax(linear(F_q)); f_out = beta . [T_O(pool F''_O), T_A(pool F''_A)]
    answer: p = softmax(linear(f_out))

Either attention stage can be swapped for row-wise fully connected layers to
reproduce the module ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .blocks import LSTM, TFM, Embedding, FeedForward, LayerNorm, Linear, ModelDims, Module
from .tensorcore import DimensionError, Tensor

OBJECT, AUDIO = "O", "A"
MODALITIES = (OBJECT, AUDIO)


@dataclass(frozen=True)
class ModelConfig:
    use_qcd: bool = True
    use_mcc: bool = True
    residual_norm: bool = True
    share_modalities: bool = False  # one QCD/MCC block per modality

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class QuestionEncoding:
    F_Q: Tensor
    F_q: Tensor


@dataclass
class EnhancedFeatures:
    F_O_prime: Tensor
    F_A_prime: Tensor


@dataclass
class CollectedFeatures:
    F_O_dprime: Tensor
    F_A_dprime: Tensor


@dataclass
class FusionOutput:
    beta: Tensor
    f_out: Tensor


@dataclass
class AnswerDistribution:
    logits: Tensor
    p: Tensor
    log_p: Tensor

    @property
    def c_hat(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return np.argmax(self.p.data, axis=-1)


@dataclass
class ForwardResult:
    question: QuestionEncoding
    F_A: Tensor
    F_O: Tensor
    enhanced: EnhancedFeatures
    collected: CollectedFeatures
    fusion: FusionOutput
    answer: AnswerDistribution
    attention: dict[str, np.ndarray] = field(default_factory=dict)


class RowEncoder(Module):
    """Fully connected stand-in for an attention stage: LN(x + FF(x))."""

    def __init__(self, d: int, rng, dtype=None):
        self.ff = FeedForward(d, rng, dtype)
        self.norm = LayerNorm(d, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.ff(x))


class APLModel(Module):
    def __init__(self, dims: ModelDims, config: ModelConfig | None = None, seed: int = 0, dtype=None):
        self.dims = dims
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        d = dims.d
        self.embedding = Embedding(dims.vocab, d, rng, dtype)
        self.lstm = LSTM(d, d, rng, dtype)
        self.audio_proj = Linear(dims.d_a, d, rng, dtype)
        self.object_proj = Linear(dims.d_o, d, rng, dtype)

        def stage(use_attention: bool):
            if use_attention:
                return TFM(d, dims.heads, rng, dtype, residual_norm=cfg.residual_norm)
            return RowEncoder(d, rng, dtype)

        if cfg.share_modalities:
            self.qcd = stage(cfg.use_qcd)
            self.mcc = stage(cfg.use_mcc)
        else:
            self.qcd_o, self.qcd_a = stage(cfg.use_qcd), stage(cfg.use_qcd)
            self.mcc_o, self.mcc_a = stage(cfg.use_mcc), stage(cfg.use_mcc)
        self.beta_layer = Linear(d, 2, rng, dtype)
        self.transform_o = Linear(d, d, rng, dtype)
        self.transform_a = Linear(d, d, rng, dtype)
        self.head = Linear(d, dims.C, rng, dtype)

    def _stage(self, name: str, modality: str):
        if self.config.share_modalities:
            return getattr(self, name)
        return getattr(self, f"{name}_{modality.lower()}")

    # -- stages ---------------------------------------------------------------
    def encode_question(self, tokens) -> QuestionEncoding:
        tokens = np.asarray(tokens)
        if tokens.shape[-1] < 1 or tokens.shape[-1] > self.dims.L:
            raise DimensionError(f"question length {tokens.shape[-1]} outside 1..{self.dims.L}")
        F_Q, F_q = self.lstm(self.embedding(tokens))
        return QuestionEncoding(F_Q, F_q)

    def project(self, audio, objects) -> tuple[Tensor, Tensor]:
        """Map raw features to width d; objects come back flattened to (T*N) rows."""
        audio = tc.tensor(audio, dtype=self.head.W.dtype)
        objects = tc.tensor(objects, dtype=self.head.W.dtype)
        *lead, T, N, d_o = objects.shape
        F_A = self.audio_proj(audio)
        F_O = self.object_proj(objects.reshape(tuple(lead) + (T * N, d_o)))
        return F_A, F_O

    def qcd_forward(self, F_m: Tensor, F_Q: Tensor, modality: str, return_attention: bool = False):
        block = self._stage("qcd", modality)
        if isinstance(block, TFM):
            return block(F_m, F_Q, F_Q, return_attention=return_attention)
        out = block(F_m)
        return (out, None) if return_attention else out

    def mcc_forward(self, F_Q: Tensor, F_m_prime: Tensor, modality: str, return_attention: bool = False):
        block = self._stage("mcc", modality)
        if isinstance(block, TFM):
            return block(F_Q, F_m_prime, F_m_prime, return_attention=return_attention)
        out = block(F_m_prime.mean(axis=-2, keepdims=True))
        return (out, None) if return_attention else out

    def modality_fusion(self, F_O_dprime: Tensor, F_A_dprime: Tensor, F_q: Tensor, beta_override=None) -> FusionOutput:
        if beta_override is None:
            beta = tc.softmax_lastdim(self.beta_layer(F_q))
        else:
            beta = tc.tensor(np.broadcast_to(np.asarray(beta_override, dtype=F_q.dtype), F_q.shape[:-1] + (2,)))
        pooled_o = self.transform_o(F_O_dprime.mean(axis=-2, keepdims=True))
        pooled_a = self.transform_a(F_A_dprime.mean(axis=-2, keepdims=True))
        f_out = tc.matmul(beta, tc.concat([pooled_o, pooled_a], axis=-2))
        return FusionOutput(beta, f_out)

    def predict_answer(self, f_out: Tensor) -> AnswerDistribution:
        logits = self.head(f_out)
        logits = logits.reshape(logits.shape[:-2] + (logits.shape[-1],))
        return AnswerDistribution(logits, tc.softmax_lastdim(logits), tc.log_softmax_lastdim(logits))

    # -- full pass ------------------------------------------------------------
    def forward(self, audio, objects, tokens, beta_override=None) -> ForwardResult:
        question = self.encode_question(tokens)
        F_A, F_O = self.project(audio, objects)
        attention: dict[str, np.ndarray] = {}
        enhanced, collected = {}, {}
        for m, F_m in ((OBJECT, F_O), (AUDIO, F_A)):
            enhanced[m], attention[f"qcd_{m}"] = self.qcd_forward(F_m, question.F_Q, m, return_attention=True)
            collected[m], attention[f"mcc_{m}"] = self.mcc_forward(question.F_Q, enhanced[m], m, return_attention=True)
        fusion = self.modality_fusion(collected[OBJECT], collected[AUDIO], question.F_q, beta_override)
        answer = self.predict_answer(fusion.f_out)
        return ForwardResult(
            question=question,
            F_A=F_A,
            F_O=F_O,
            enhanced=EnhancedFeatures(enhanced[OBJECT], enhanced[AUDIO]),
            collected=CollectedFeatures(collected[OBJECT], collected[AUDIO]),
            fusion=fusion,
            answer=answer,
            attention={k: v for k, v in attention.items() if v is not None},
        )

    __call__ = forward
