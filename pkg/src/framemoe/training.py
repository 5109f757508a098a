"""Losses, optimizer, and the two-phase training procedure.

Phase 1 freezes everything except one task head at a time and trains the
denoising head on the L1 spectral loss and the classification head on the
weighted cross entropy. Phase 2 starts from the phase-1 head weights, keeps
the expert pool and gates at their initialization, and trains heads, gates,
experts (and optionally the backbone affine layers at a second learning rate)
against the joint objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    NumericalError,
    Tensor,
    abs_,
    add,
    backprop,
    concat,
    const,
    log_softmax_rows,
    mean_all,
    mul,
    neg,
    sub,
    sum_all,
)
from .backbone import Waveform
from .heads import N_CLASSES


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class NormStats:
    """Scalar mean and standard deviation pooled over training samples."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.mean) or not np.isfinite(self.std) or self.std <= 0.0:
            raise ValueError(f"bad normalization stats: mean={self.mean} std={self.std}")


def norm_stats(waveforms: list[Waveform]) -> NormStats:
    """Pooled mean and population std over every sample of every waveform."""
    if not waveforms:
        raise ValueError("cannot estimate normalization stats from an empty set")
    pooled = np.concatenate([w.samples for w in waveforms])
    return NormStats(mean=float(pooled.mean()), std=float(pooled.std()))


def z_normalize(waveform: Waveform, stats: NormStats) -> Waveform:
    return Waveform(samples=(waveform.samples - stats.mean) / stats.std,
                    sample_rate=waveform.sample_rate)


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights rescaled to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (N_CLASSES,) or np.any(counts <= 0):
        raise ValueError(f"need positive counts for all {N_CLASSES} classes, got {counts}")
    inv = 1.0 / counts
    return inv / inv.mean()


def weighted_cross_entropy(logits, labels, weights) -> Tensor:
    """Class-weighted cross entropy normalized by the sum of batch weights.

    logits: (B, 4) Tensor or array; labels: B class indices. With uniform
    weights this reduces to the plain mean cross entropy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (N_CLASSES,):
        raise ValueError(f"expected {N_CLASSES} class weights, got shape {weights.shape}")
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-d sequence")
    if np.any((labels < 0) | (labels >= N_CLASSES)):
        raise ValueError(f"labels out of range: {labels}")
    logp = log_softmax_rows(logits)
    if logp.shape[0] != labels.size:
        raise ValueError(f"{logp.shape[0]} logit rows for {labels.size} labels")
    picked = np.zeros((labels.size, N_CLASSES))
    picked[np.arange(labels.size), labels] = weights[labels]
    total_weight = float(weights[labels].sum())
    return mul(neg(sum_all(mul(logp, const(picked)))), 1.0 / total_weight)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference over all entries."""
    return mean_all(abs_(sub(pred, target)))


def joint_loss(wce: Tensor, l1: Tensor, balance: Tensor | None = None) -> Tensor:
    """Unweighted sum of the task losses, plus the balancing term if given."""
    total = add(wce, l1)
    if balance is not None:
        total = add(total, balance)
    return total


class AdamW:
    """Adam with decoupled weight decay and per-group learning rates."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.groups = []
        for g in groups:
            self.groups.append({"params": list(g["params"]), "lr": float(g["lr"])})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                m, v = self._state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = b1 * m + (1.0 - b1) * grad
                v = b2 * v + (1.0 - b2) * grad * grad
                self._state[id(p)] = (m, v)
                m_hat = m / (1.0 - b1 ** self.t)
                v_hat = v / (1.0 - b2 ** self.t)
                p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def grad_norms(self) -> list[float]:
        norms = []
        for g in self.groups:
            total = 0.0
            for p in g["params"]:
                if p.grad is not None:
                    total += float(np.sum(p.grad * p.grad))
            norms.append(float(np.sqrt(total)))
        return norms


def snapshot_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def restore_params(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in snapshot:
            raise KeyError(f"snapshot is missing parameter '{name}'")
        if snapshot[name].shape != p.data.shape:
            raise ValueError(
                f"snapshot parameter '{name}' has shape {snapshot[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data[...] = snapshot[name]


CHECKPOINT_FORMAT = "framemoe-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named parameters as versioned JSON with shapes alongside data."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in params.items()
        },
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    params = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    meta = {k: v for k, v in payload.items() if k not in ("format", "version", "params")}
    return params, meta


@dataclass
class LossCurve:
    """Per-epoch means of the loss components."""

    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, wce: float, l1: float, balance: float, total: float) -> None:
        self.rows.append({"epoch": epoch, "wce": wce, "l1": l1,
                          "balance": balance, "total": total})

    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_joint_loss(model, batch_feats, class_weights, moe_cfg, train_cfg):
    """Joint objective over a batch of utterances.

    Returns (total, parts, decisions) where parts holds float components and
    decisions the per-task routing for every utterance. The balancing term is
    computed once over the frames of the whole batch (per-batch pooling) and
    averaged over the two task gates so the uniform-routing value stays at
    alpha.
    """
    from .model import forward_features
    from .moe import balancing_loss, concat_decisions

    logit_rows = []
    labels = []
    l1_terms = []
    ser_decisions = []
    se_decisions = []
    for feats in batch_feats:
        out = forward_features(model, feats)
        ser_decisions.append(out.ser_decision)
        se_decisions.append(out.se_decision)
        if train_cfg.ser_loss_enabled:
            logit_rows.append(out.ser_logits)
            labels.append(feats.label)
        if train_cfg.se_loss_enabled:
            l1_terms.append(l1_loss(out.enhanced.frames, const(feats.x_clean)))

    zero = const(np.zeros(()))
    wce = zero
    if logit_rows:
        wce = weighted_cross_entropy(concat(logit_rows, axis=0), labels, class_weights)
    l1 = zero
    if l1_terms:
        acc = l1_terms[0]
        for term in l1_terms[1:]:
            acc = add(acc, term)
        l1 = mul(acc, 1.0 / len(l1_terms))

    balance = None
    if moe_cfg.balancing_loss_enabled:
        per_task = [
            balancing_loss(concat_decisions(ser_decisions), moe_cfg.balancing_alpha),
            balancing_loss(concat_decisions(se_decisions), moe_cfg.balancing_alpha),
        ]
        balance = mul(add(per_task[0], per_task[1]), 0.5)

    total = joint_loss(wce, l1, balance)
    parts = {
        "wce": float(wce.data),
        "l1": float(l1.data),
        "balance": float(balance.data) if balance is not None else 0.0,
        "total": float(total.data),
    }
    return total, parts, {"ser": ser_decisions, "se": se_decisions}


def cache_task_sequences(model, feats_list):
    """Mixed per-task sequences with the current (frozen) experts and gates.

    Used by phase 1: with the backbone, experts, and gates all fixed, each
    utterance's task sequences are constants, so the head-only training loops
    can reuse them instead of rebuilding the routing graph every step.
    """
    from .model import forward_features

    cached = []
    for feats in feats_list:
        out = forward_features(model, feats)
        cached.append({"ser": out.ser_seq.z.data.copy(), "se": out.se_seq.z.data.copy()})
    return cached


@dataclass
class PhaseResult:
    curve: LossCurve
    checkpoint: dict[str, np.ndarray]


@dataclass
class Phase2Result:
    curve: LossCurve
    dev_totals: list[float]
    best_epoch: int
    checkpoint: dict[str, np.ndarray]


def train_phase1(model, train_feats, class_weights, cfg, rng) -> PhaseResult:
    """Train each head separately with everything else frozen.

    The classification head minimizes the weighted cross entropy, the
    denoising head the L1 spectral loss. Returns the loss curves and a
    snapshot of all parameters after training.
    """
    from .heads import SpectralFeature, se_decode, ser_classify
    from .model import named_parameters, se_parameters, ser_parameters
    from .moe import TASK_SE, TASK_SER, TaskSequence

    if not train_feats:
        raise ValueError("phase 1 needs a non-empty training set")
    cached = cache_task_sequences(model, train_feats)
    curve = LossCurve()

    opt = AdamW([{"params": ser_parameters(model), "lr": cfg.phase1_ser_lr}],
                weight_decay=cfg.weight_decay)
    for epoch in range(cfg.phase1_ser_epochs):
        losses = []
        for batch in _batches(len(train_feats), cfg.phase1_ser_batch, rng):
            opt.zero_grad()
            rows = []
            labels = []
            for i in batch:
                seq = TaskSequence(task=TASK_SER, z=const(cached[i]["ser"]))
                rows.append(ser_classify(model.ser_head, seq))
                labels.append(train_feats[i].label)
            loss = weighted_cross_entropy(concat(rows, axis=0), labels, class_weights)
            backprop(loss)
            opt.step()
            losses.append(float(loss.data))
        curve.append(epoch, wce=float(np.mean(losses)), l1=0.0, balance=0.0,
                     total=float(np.mean(losses)))

    opt = AdamW([{"params": se_parameters(model), "lr": cfg.phase1_se_lr}],
                weight_decay=cfg.weight_decay)
    base = len(curve.rows)
    for epoch in range(cfg.phase1_se_epochs):
        losses = []
        for batch in _batches(len(train_feats), cfg.phase1_se_batch, rng):
            opt.zero_grad()
            terms = []
            for i in batch:
                feats = train_feats[i]
                seq = TaskSequence(task=TASK_SE, z=const(cached[i]["se"]))
                noisy = SpectralFeature(frames=const(feats.x_noisy), config=model.stft)
                enhanced = se_decode(model.se_head, seq, noisy)
                terms.append(l1_loss(enhanced.frames, const(feats.x_clean)))
            acc = terms[0]
            for term in terms[1:]:
                acc = add(acc, term)
            loss = mul(acc, 1.0 / len(terms))
            backprop(loss)
            opt.step()
            losses.append(float(loss.data))
        curve.append(base + epoch, wce=0.0, l1=float(np.mean(losses)), balance=0.0,
                     total=float(np.mean(losses)))

    return PhaseResult(curve=curve, checkpoint=snapshot_params(named_parameters(model)))


def evaluate_joint_loss(model, feats_list, class_weights, moe_cfg, train_cfg) -> float:
    """Forward-only joint loss over a whole split, as one pooled batch."""
    _, parts, _ = batch_joint_loss(model, feats_list, class_weights, moe_cfg, train_cfg)
    return parts["total"]


def train_phase2(model, train_feats, dev_feats, phase1_checkpoint,
                 class_weights, cfg, moe_cfg, rng) -> Phase2Result:
    """Joint training of experts, gates, and heads from the phase-1 weights.

    The backbone affine layers join in at their own learning rate when the
    backbone is unfrozen. After each epoch the joint loss on the dev split is
    measured and the best-scoring parameters are the ones returned. A
    non-finite loss aborts with the last gradient norms attached.
    """
    from .model import backbone_parameters, moe_head_parameters, named_parameters

    if not train_feats:
        raise ValueError("phase 2 needs a non-empty training set")
    params = named_parameters(model)
    restore_params(params, phase1_checkpoint)

    groups = [{"params": moe_head_parameters(model), "lr": cfg.lr_heads_gates_experts}]
    bb = backbone_parameters(model)
    if bb:
        groups.append({"params": bb, "lr": cfg.lr_backbone})
    opt = AdamW(groups, weight_decay=cfg.weight_decay)

    curve = LossCurve()
    dev_totals: list[float] = []
    best = snapshot_params(params)
    best_loss = float("inf")
    best_epoch = -1
    last_norms: list[float] = []

    for epoch in range(cfg.phase2_epochs):
        sums = {"wce": 0.0, "l1": 0.0, "balance": 0.0, "total": 0.0}
        n_batches = 0
        for batch in _batches(len(train_feats), cfg.phase2_batch, rng):
            opt.zero_grad()
            try:
                total, parts, _ = batch_joint_loss(
                    model, [train_feats[i] for i in batch], class_weights, moe_cfg, cfg)
                backprop(total)
            except NumericalError as exc:
                raise TrainingAborted(
                    f"non-finite loss in phase 2 at epoch {epoch}: {exc}",
                    diagnostics={"epoch": epoch, "batch": n_batches,
                                 "last_grad_norms": last_norms,
                                 "error": str(exc)},
                ) from exc
            last_norms = opt.grad_norms()
            opt.step()
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1
        curve.append(epoch, **{k: sums[k] / n_batches for k in sums})

        dev_total = evaluate_joint_loss(model, dev_feats, class_weights, moe_cfg, cfg) \
            if dev_feats else curve.rows[-1]["total"]
        dev_totals.append(dev_total)
        if dev_total < best_loss:
            best_loss = dev_total
            best_epoch = epoch
            best = snapshot_params(params)

    restore_params(params, best)
    return Phase2Result(curve=curve, dev_totals=dev_totals, best_epoch=best_epoch,
                        checkpoint=best)
