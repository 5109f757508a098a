"""Assembly of the full pipeline: backbone, shared expert pool, per-task
gates, and both heads, plus the per-utterance feature plumbing that training
and evaluation share.

With the backbone frozen, the concatenated layer features of an utterance
never change, so they are computed once and re-entered into each step's graph
as constants. The unfrozen variant rebuilds the backbone in-graph every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, const
from .backbone import (
    BackboneParams,
    ConcatRepresentation,
    Waveform,
    concat_layers,
    init_backbone,
    synth_layer_stack,
)
from .config import ExperimentConfig, component_rng
from .heads import (
    SeHead,
    SerHead,
    SpectralFeature,
    StftConfig,
    init_se_head,
    init_ser_head,
    log1p_spectrum,
    se_decode,
    ser_classify,
)
from .moe import (
    TASK_SE,
    TASK_SER,
    ExpertPool,
    GatingNetwork,
    RoutingDecision,
    TaskSequence,
    init_expert_pool,
    init_gate,
    moe_forward,
)


@dataclass
class JointModel:
    backbone: BackboneParams
    pool: ExpertPool
    gates: dict[str, GatingNetwork]
    ser_head: SerHead
    se_head: SeHead
    stft: StftConfig
    top_k: int

    @property
    def concat_width(self) -> int:
        return (self.backbone.n_layers + 1) * self.backbone.width


def build_model(cfg: ExperimentConfig) -> JointModel:
    """Construct every component from the config's seed split."""
    b = cfg.backbone
    backbone_seed = b.seed if b.seed is not None else None
    if backbone_seed is not None:
        backbone_rng = np.random.default_rng(backbone_seed)
    else:
        backbone_rng = component_rng(cfg.seed, "backbone")
    backbone = init_backbone(backbone_rng, n_layers=b.n_layers, width=b.width,
                             frame=b.frame, hop=b.hop, frozen=not b.unfrozen)

    rng = component_rng(cfg.seed, "model")
    width = (b.n_layers + 1) * b.width
    pool = init_expert_pool(rng, n_experts=cfg.moe.n_experts, in_width=width,
                            hidden=cfg.moe.expert_hidden, out_width=b.width)
    gates = {
        TASK_SER: init_gate(rng, TASK_SER, width, cfg.moe.n_experts),
        TASK_SE: init_gate(rng, TASK_SE, width, cfg.moe.n_experts),
    }
    stft = StftConfig(window=cfg.heads.stft.window, hop=cfg.heads.stft.hop,
                      fft_size=cfg.heads.stft.fft_size)
    ser_head = init_ser_head(rng, width=b.width, hidden=cfg.heads.ser_hidden)
    se_head = init_se_head(rng, width=b.width, n_bins=stft.n_bins,
                           hidden=cfg.heads.se_hidden)
    return JointModel(backbone=backbone, pool=pool, gates=gates,
                      ser_head=ser_head, se_head=se_head, stft=stft,
                      top_k=cfg.moe.top_k)


def named_parameters(model: JointModel) -> dict[str, Tensor]:
    """Every parameter tensor keyed by its name, in a stable order."""
    params: dict[str, Tensor] = {model.backbone.projection.name: model.backbone.projection}
    for w, b in model.backbone.affines:
        params[w.name] = w
        params[b.name] = b
    for e in model.pool.experts:
        for t in (e.w1, e.b1, e.w2, e.b2):
            params[t.name] = t
    for task in (TASK_SER, TASK_SE):
        gate = model.gates[task]
        params[gate.w.name] = gate.w
        params[gate.b.name] = gate.b
    h = model.ser_head
    for t in (h.scorer_w, h.scorer_b, h.cls_w1, h.cls_b1, h.cls_w2, h.cls_b2):
        params[t.name] = t
    s = model.se_head
    for t in (s.w1, s.b1, s.w2, s.b2):
        params[t.name] = t
    return params


def moe_head_parameters(model: JointModel) -> list[Tensor]:
    """Experts, gates, and both heads: the primary learning-rate group."""
    out: list[Tensor] = []
    for e in model.pool.experts:
        out.extend([e.w1, e.b1, e.w2, e.b2])
    for task in (TASK_SER, TASK_SE):
        out.extend([model.gates[task].w, model.gates[task].b])
    h = model.ser_head
    out.extend([h.scorer_w, h.scorer_b, h.cls_w1, h.cls_b1, h.cls_w2, h.cls_b2])
    s = model.se_head
    out.extend([s.w1, s.b1, s.w2, s.b2])
    return out


def ser_parameters(model: JointModel) -> list[Tensor]:
    h = model.ser_head
    return [h.scorer_w, h.scorer_b, h.cls_w1, h.cls_b1, h.cls_w2, h.cls_b2]


def se_parameters(model: JointModel) -> list[Tensor]:
    s = model.se_head
    return [s.w1, s.b1, s.w2, s.b2]


def backbone_parameters(model: JointModel) -> list[Tensor]:
    """The affine layers; empty when the backbone is frozen."""
    if model.backbone.frozen:
        return []
    out: list[Tensor] = []
    for w, b in model.backbone.affines:
        out.extend([w, b])
    return out


@dataclass
class UtteranceFeatures:
    """Cached per-utterance inputs, all in the normalized domain."""

    uid: str
    label: int | None
    sample_rate: int
    noisy_samples: np.ndarray
    x_noisy: np.ndarray
    x_clean: np.ndarray | None
    concat_rep: np.ndarray | None  # None when the backbone is unfrozen


def compute_features(model: JointModel, uid: str, noisy: Waveform,
                     clean: Waveform | None = None,
                     label: int | None = None) -> UtteranceFeatures:
    """Spectra and (for a frozen backbone) the cached layer concatenation."""
    x_noisy = log1p_spectrum(noisy, model.stft).frames.data
    x_clean = None
    if clean is not None:
        x_clean = log1p_spectrum(clean, model.stft).frames.data
    rep = None
    if model.backbone.frozen:
        rep = concat_layers(synth_layer_stack(noisy, model.backbone)).frames.data
        if rep.shape[0] != x_noisy.shape[0]:
            raise ValueError(
                f"backbone frames ({rep.shape[0]}) misaligned with spectral frames "
                f"({x_noisy.shape[0]})"
            )
    return UtteranceFeatures(uid=uid, label=label, sample_rate=noisy.sample_rate,
                             noisy_samples=noisy.samples, x_noisy=x_noisy,
                             x_clean=x_clean, concat_rep=rep)


@dataclass
class ModelOutputs:
    ser_logits: Tensor
    enhanced: SpectralFeature
    ser_seq: TaskSequence
    se_seq: TaskSequence
    ser_decision: RoutingDecision
    se_decision: RoutingDecision


def representation(model: JointModel, feats: UtteranceFeatures) -> ConcatRepresentation:
    if feats.concat_rep is not None:
        return ConcatRepresentation(frames=const(feats.concat_rep),
                                    n_layers=model.backbone.n_layers,
                                    width=model.backbone.width)
    wave = Waveform(samples=feats.noisy_samples, sample_rate=feats.sample_rate)
    return concat_layers(synth_layer_stack(wave, model.backbone))


def forward_features(model: JointModel, feats: UtteranceFeatures) -> ModelOutputs:
    """One utterance through routing and both heads."""
    rep = representation(model, feats)
    ser_seq, ser_dec = moe_forward(model.pool, model.gates[TASK_SER], rep, model.top_k)
    se_seq, se_dec = moe_forward(model.pool, model.gates[TASK_SE], rep, model.top_k)
    logits = ser_classify(model.ser_head, ser_seq)
    noisy_feat = SpectralFeature(frames=const(feats.x_noisy), config=model.stft)
    enhanced = se_decode(model.se_head, se_seq, noisy_feat)
    return ModelOutputs(ser_logits=logits, enhanced=enhanced,
                        ser_seq=ser_seq, se_seq=se_seq,
                        ser_decision=ser_dec, se_decision=se_dec)
