"""Synthetic multi-layer feature extractor standing in for a pretrained encoder.

The stack maps a waveform to L+1 frame-aligned layer outputs: layer 0 is a
fixed random projection of log1p spectral magnitudes, each later layer is a
relu affine transform of the previous one. All weights are drawn once from a
seeded generator and are frozen by default; a config flag unfreezes the affine
layers so the two-rate optimizer path can be exercised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, affine, concat, const, matmul, param, relu


@dataclass
class Waveform:
    """A mono float64 signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"waveform must be a non-empty 1-d signal, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class LayerStack:
    """Per-layer outputs, each of shape (T, width)."""

    layers: list[Tensor]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("layer stack must hold at least one layer")
        shape = self.layers[0].shape
        for i, layer in enumerate(self.layers):
            if layer.ndim != 2 or layer.shape != shape:
                raise ValueError(f"layer {i} has shape {layer.shape}, expected {shape}")

    @property
    def n_frames(self) -> int:
        return self.layers[0].shape[0]

    @property
    def width(self) -> int:
        return self.layers[0].shape[1]


@dataclass
class ConcatRepresentation:
    """Column-wise concatenation of all layer outputs, shape (T, (L+1)*width)."""

    frames: Tensor
    n_layers: int
    width: int

    def __post_init__(self) -> None:
        if self.frames.ndim != 2:
            raise ValueError(f"concat representation must be 2-d, got {self.frames.shape}")
        expected = (self.n_layers + 1) * self.width
        if self.frames.shape[1] != expected:
            raise ValueError(
                f"concat width {self.frames.shape[1]} does not match (L+1)*D = {expected}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def frame_count(n_samples: int, frame: int, hop: int) -> int:
    if n_samples < frame:
        raise ValueError(f"signal of {n_samples} samples is shorter than one frame ({frame})")
    return (n_samples - frame) // hop + 1


def frame_signal(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Slice a signal into (T, frame) rows starting every `hop` samples."""
    t = frame_count(samples.size, frame, hop)
    view = np.lib.stride_tricks.sliding_window_view(samples, frame)
    return np.ascontiguousarray(view[:: hop][:t])


@dataclass
class BackboneParams:
    """Seeded weights of the synthetic stack.

    The spectral projection stays frozen always; the affine layers follow the
    `frozen` flag.
    """

    projection: Tensor
    affines: list[tuple[Tensor, Tensor]]
    frame: int
    hop: int
    width: int
    frozen: bool = True

    @property
    def n_layers(self) -> int:
        return len(self.affines)


def init_backbone(rng: np.random.Generator, n_layers: int, width: int,
                  frame: int, hop: int, frozen: bool = True) -> BackboneParams:
    """Draw the fixed projection and per-layer affine weights."""
    if n_layers < 1:
        raise ValueError(f"backbone needs at least one affine layer, got {n_layers}")
    if frame < 2 or hop < 1 or hop > frame:
        raise ValueError(f"bad framing: frame={frame} hop={hop}")
    n_bins = frame // 2 + 1
    proj = param("backbone.projection",
                 rng.uniform(-1.0, 1.0, size=(n_bins, width)) / np.sqrt(n_bins),
                 frozen=True)
    affines = []
    for layer in range(1, n_layers + 1):
        bound = 1.0 / np.sqrt(width)
        w = param(f"backbone.layer{layer}.w",
                  rng.uniform(-bound, bound, size=(width, width)), frozen=frozen)
        b = param(f"backbone.layer{layer}.b",
                  rng.uniform(-bound, bound, size=(width,)), frozen=frozen)
        affines.append((w, b))
    return BackboneParams(projection=proj, affines=affines,
                          frame=frame, hop=hop, width=width, frozen=frozen)


def synth_layer_stack(waveform: Waveform, params: BackboneParams) -> LayerStack:
    """Run the stack, returning all L+1 layer outputs frame-aligned."""
    frames = frame_signal(waveform.samples, params.frame, params.hop)
    mags = np.abs(np.fft.rfft(frames, n=params.frame, axis=1))
    h = matmul(const(np.log1p(mags)), params.projection)
    layers = [h]
    for w, b in params.affines:
        h = relu(affine(h, w, b))
        layers.append(h)
    return LayerStack(layers=layers)


def concat_layers(stack: LayerStack) -> ConcatRepresentation:
    """Concatenate layer outputs column-wise into one (T, (L+1)*D) matrix."""
    frames = concat(stack.layers, axis=1)
    return ConcatRepresentation(frames=frames, n_layers=len(stack.layers) - 1,
                                width=stack.width)
