"""Task heads: emotion classification over pooled statistics and per-frame
spectral denoising.

The classification head pools the task sequence with attentive statistics
(softmax-weighted mean and standard deviation over frames) and maps the pooled
vector to four class logits. The denoising head concatenates each mixed frame
with the noisy log1p spectrum frame and decodes the clean log1p spectrum with
a small relu network; the final relu keeps outputs non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .autodiff import (
    Tensor,
    affine,
    clamp_min,
    concat,
    const,
    mul,
    param,
    relu,
    softmax_rows,
    sqrt,
    sub,
    sum_rows,
    transpose,
)
from .backbone import Waveform, frame_signal
from .moe import TaskSequence

N_CLASSES = 4
VARIANCE_FLOOR = 1e-8


class EmotionLabel(IntEnum):
    ANGER = 0
    SADNESS = 1
    HAPPINESS = 2
    NEUTRAL = 3


@dataclass
class StftConfig:
    window: int
    hop: int
    fft_size: int

    def __post_init__(self) -> None:
        if self.window < 2 or self.hop < 1 or self.hop > self.window:
            raise ValueError(f"bad stft framing: window={self.window} hop={self.hop}")
        if self.fft_size < self.window:
            raise ValueError(f"fft_size {self.fft_size} smaller than window {self.window}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class SpectralFeature:
    """Non-negative log1p magnitude frames, shape (T, n_bins)."""

    frames: Tensor
    config: StftConfig

    def __post_init__(self) -> None:
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.n_bins:
            raise ValueError(
                f"spectral frames of shape {self.frames.shape} do not match "
                f"{self.config.n_bins} bins"
            )
        if np.any(self.frames.data < 0.0):
            raise ValueError("log1p spectral magnitudes must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def stft(waveform: Waveform, config: StftConfig) -> np.ndarray:
    """Complex spectra of rectangular frames, shape (T, n_bins)."""
    frames = frame_signal(waveform.samples, config.window, config.hop)
    return np.fft.rfft(frames, n=config.fft_size, axis=1)


def log1p_spectrum(waveform: Waveform, config: StftConfig) -> SpectralFeature:
    """log(1 + |STFT|) of the waveform."""
    return SpectralFeature(frames=const(np.log1p(np.abs(stft(waveform, config)))),
                           config=config)


def resynthesize(log1p_mags: np.ndarray, phase_reference: np.ndarray,
                 config: StftConfig, n_samples: int) -> np.ndarray:
    """Overlap-add a waveform from log1p magnitudes and borrowed phase.

    The phase of each reference bin is reused as-is; bins with zero reference
    magnitude fall back to zero phase. Overlapping rectangular frames are
    averaged by their coverage count.
    """
    if log1p_mags.shape != phase_reference.shape:
        raise ValueError(
            f"magnitude shape {log1p_mags.shape} does not match phase reference "
            f"{phase_reference.shape}"
        )
    mags = np.expm1(log1p_mags)
    ref_abs = np.abs(phase_reference)
    unit = np.where(ref_abs > 0.0, phase_reference / np.where(ref_abs > 0.0, ref_abs, 1.0), 1.0)
    frames = np.fft.irfft(mags * unit, n=config.fft_size, axis=1)[:, : config.window]
    t = frames.shape[0]
    length = min(n_samples, (t - 1) * config.hop + config.window)
    out = np.zeros(length)
    cover = np.zeros(length)
    for i in range(t):
        start = i * config.hop
        if start >= length:
            break
        stop = min(start + config.window, length)
        out[start:stop] += frames[i, : stop - start]
        cover[start:stop] += 1.0
    return out / np.maximum(cover, 1.0)


@dataclass
class SerHead:
    """Attention scorer plus a two-layer classifier over pooled statistics."""

    scorer_w: Tensor
    scorer_b: Tensor
    cls_w1: Tensor
    cls_b1: Tensor
    cls_w2: Tensor
    cls_b2: Tensor


@dataclass
class SeHead:
    """Two-layer relu decoder from [z_t, x_t] frames to spectrum bins."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_ser_head(rng: np.random.Generator, width: int, hidden: int = 32) -> SerHead:
    pooled = 2 * width
    b_w = 1.0 / np.sqrt(width)
    b_p = 1.0 / np.sqrt(pooled)
    b_h = 1.0 / np.sqrt(hidden)
    return SerHead(
        scorer_w=param("ser.scorer.w", rng.uniform(-b_w, b_w, size=(width, 1))),
        scorer_b=param("ser.scorer.b", rng.uniform(-b_w, b_w, size=(1,))),
        cls_w1=param("ser.cls.w1", rng.uniform(-b_p, b_p, size=(pooled, hidden))),
        cls_b1=param("ser.cls.b1", rng.uniform(-b_p, b_p, size=(hidden,))),
        cls_w2=param("ser.cls.w2", rng.uniform(-b_h, b_h, size=(hidden, N_CLASSES))),
        cls_b2=param("ser.cls.b2", rng.uniform(-b_h, b_h, size=(N_CLASSES,))),
    )


def init_se_head(rng: np.random.Generator, width: int, n_bins: int, hidden: int = 64) -> SeHead:
    b_in = 1.0 / np.sqrt(width + n_bins)
    b_h = 1.0 / np.sqrt(hidden)
    return SeHead(
        w1=param("se.w1", rng.uniform(-b_in, b_in, size=(width + n_bins, hidden))),
        b1=param("se.b1", rng.uniform(-b_in, b_in, size=(hidden,))),
        w2=param("se.w2", rng.uniform(-b_h, b_h, size=(hidden, n_bins))),
        b2=param("se.b2", rng.uniform(-b_h, b_h, size=(n_bins,))),
    )


def identity_se_head(width: int, n_bins: int) -> SeHead:
    """A decoder that passes the spectral half of its input through untouched.

    Valid because log1p magnitudes are non-negative, so both relus are exact
    identities on them.
    """
    w1 = np.vstack([np.zeros((width, n_bins)), np.eye(n_bins)])
    return SeHead(
        w1=param("se.w1", w1),
        b1=param("se.b1", np.zeros(n_bins)),
        w2=param("se.w2", np.eye(n_bins)),
        b2=param("se.b2", np.zeros(n_bins)),
    )


def attentive_stats_pool(head: SerHead, seq: TaskSequence) -> Tensor:
    """Softmax-attention weighted mean and std over frames, shape (1, 2*D).

    The standard deviation is floored at sqrt(1e-8) to keep the gradient
    finite on constant sequences.
    """
    z = seq.z
    scores = affine(z, head.scorer_w, head.scorer_b)
    attn = transpose(softmax_rows(transpose(scores)))
    mean = sum_rows(mul(attn, z))
    second = sum_rows(mul(attn, mul(z, z)))
    std = sqrt(clamp_min(sub(second, mul(mean, mean)), VARIANCE_FLOOR))
    return concat([mean, std], axis=1)


def ser_classify(head: SerHead, seq: TaskSequence) -> Tensor:
    """Class logits from the pooled sequence, shape (1, 4)."""
    pooled = attentive_stats_pool(head, seq)
    hidden = relu(affine(pooled, head.cls_w1, head.cls_b1))
    return affine(hidden, head.cls_w2, head.cls_b2)


def se_decode(head: SeHead, seq: TaskSequence, noisy: SpectralFeature) -> SpectralFeature:
    """Decode the clean log1p spectrum from mixed frames and the noisy spectrum."""
    if seq.z.shape[0] != noisy.n_frames:
        raise ValueError(
            f"sequence has {seq.z.shape[0]} frames but noisy spectrum has {noisy.n_frames}"
        )
    x = concat([seq.z, noisy.frames], axis=1)
    hidden = relu(affine(x, head.w1, head.b1))
    out = relu(affine(hidden, head.w2, head.b2))
    return SpectralFeature(frames=out, config=noisy.config)


def predict_label(logits: Tensor) -> EmotionLabel:
    """Argmax over the four logits; ties resolve to the lowest class index."""
    return EmotionLabel(int(np.argmax(logits.data.reshape(-1))))
