"""Cosine loss, angular metrics, Adam and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Tensor
from .unet import NetworkConfig, SpikingUNet, normalize_prediction

__all__ = [
    "UndefinedMeanError",
    "NonFiniteGradientError",
    "TrainingDivergedError",
    "TrainConfig",
    "EvalReport",
    "AdamState",
    "TrainResult",
    "cosine_loss",
    "angular_errors",
    "angular_metrics",
    "adam_step",
    "train",
    "evaluate",
    "best_constant_normal",
]

log = logging.getLogger(__name__)

THRESHOLDS = (11.25, 22.5, 30.0)


class UndefinedMeanError(ValueError):
    """The validity mask selects no pixels."""


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray], epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    seed: int = 0
    all_pixels: bool = False  # average the loss over every pixel instead of the valid mask

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class EvalReport:
    mae: float
    ae_11: float
    ae_22: float
    ae_30: float
    pixels: int
    per_sample: list["EvalReport"] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {"MAE": self.mae, "AE11.25": self.ae_11, "AE22.5": self.ae_22, "AE30": self.ae_30}


def _mask_for(gt: np.ndarray, mask) -> np.ndarray:
    shape = gt.shape[:-3] + gt.shape[-2:]
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return np.broadcast_to(mask, shape)


def cosine_loss(pred: Tensor, gt, mask=None) -> Tensor:
    """Mean of ``1 - <pred, gt>`` over the masked pixels (all pixels if no mask)."""
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ad.DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    m = _mask_for(gt, mask)
    count = int(m.sum())
    if count == 0:
        raise UndefinedMeanError("mask selects no pixels")
    err = 1.0 - (pred * gt).sum(axis=-3)
    if m.all():
        return err.mean()
    return (err * m.astype(pred.dtype)).sum() * (1.0 / count)


def angular_errors(pred, gt) -> np.ndarray:
    """Per-pixel angle between normals, in degrees.

    Same value as ``arccos(<a, b>)`` for unit vectors, but the atan2 form
    stays accurate for nearly parallel pairs stored in float32.
    """
    a = np.asarray(pred, np.float64)
    b = np.asarray(gt, np.float64)
    dot = (a * b).sum(axis=-3)
    cross = np.linalg.norm(np.cross(a, b, axis=-3), axis=-3)
    return np.degrees(np.arctan2(cross, dot))


def _report(err: np.ndarray) -> EvalReport:
    if err.size == 0:
        raise UndefinedMeanError("mask selects no pixels")
    return EvalReport(float(err.mean()), float((err < THRESHOLDS[0]).mean()),
                      float((err < THRESHOLDS[1]).mean()), float((err < THRESHOLDS[2]).mean()),
                      int(err.size))


def angular_metrics(pred, gt, mask=None) -> EvalReport:
    """MAE and AE<11.25/22.5/30 over masked pixels; batched input adds per-sample rows."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ad.DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    m = _mask_for(gt, mask)
    err = angular_errors(pred, gt)
    report = _report(err[m])
    if err.ndim == 3:
        report.per_sample = [_report(e[mm]) for e, mm in zip(err, m)]
    return report


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: AdamState,
              config: TrainConfig) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    ``grads`` defaults to each parameter's ``.grad`` (missing means zero).
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {bad} at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale


@dataclass
class TrainResult:
    network: SpikingUNet
    history: list[dict[str, float]]
    optimizer: AdamState


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples])


def train(dataset: Sequence, net_config: NetworkConfig | None = None,
          train_config: TrainConfig | None = None, network=None,
          on_epoch_end: Callable | None = None) -> TrainResult:
    """Mini-batch training with the cosine loss.

    ``dataset`` is a sequence of samples with ``cvgri`` ``(B, H, W)``,
    ``normals`` ``(3, H, W)`` and ``mask`` ``(H, W)`` attributes.  Each history
    row holds the epoch's mean loss and angular metrics of the training
    predictions.  ``on_epoch_end(epoch, network, row)`` runs after each epoch
    (checkpointing hooks in here).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    tc = train_config or TrainConfig()
    if network is None:
        network = SpikingUNet(net_config or NetworkConfig(), seed=tc.seed)
    network.train()
    params = network.parameters()
    opt = AdamState()
    rng = np.random.default_rng(tc.seed)
    history = []
    last_good = network.state_dict()
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(dataset))
        losses, errs = [], []
        for start in range(0, len(order), tc.batch_size):
            batch = [dataset[i] for i in order[start:start + tc.batch_size]]
            x = _stack(batch, "cvgri")
            gt = _stack(batch, "normals")
            mask = None if tc.all_pixels else _stack(batch, "mask")
            network.zero_grad()
            raw = network.forward(x)
            pred, _ = normalize_prediction(raw)
            loss = cosine_loss(pred, gt, mask)
            value = loss.item()
            if not math.isfinite(value):
                network.load_state_dict(last_good)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", last_good, epoch)
            assert -1e-5 <= value <= 2 + 1e-5, value
            ad.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            if tc.clip_norm:
                _clip(grads, tc.clip_norm)
            try:
                adam_step(params, grads, opt, tc)
            except NonFiniteGradientError as exc:
                network.load_state_dict(last_good)
                raise TrainingDivergedError(f"epoch {epoch}: {exc}", last_good, epoch) from exc
            losses.append(value)
            m = _stack(batch, "mask")
            errs.append(angular_errors(pred.data, gt)[m])
        err = np.concatenate(errs)
        rep = _report(err)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), **rep.row()}
        history.append(row)
        last_good = network.state_dict()
        log.info("epoch %d loss %.4f MAE %.2f", epoch, row["loss"], row["MAE"])
        if on_epoch_end is not None:
            on_epoch_end(epoch, network, row)
    return TrainResult(network, history, opt)


def evaluate(network, dataset: Sequence, batch_size: int = 2) -> EvalReport:
    """Inference-mode metrics pooled over the dataset, with one per-sample row each."""
    network.eval()
    preds = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start:start + batch_size]
        preds.append(network.predict(_stack(batch, "cvgri")).values)
    pred = np.concatenate(preds)
    return angular_metrics(pred, _stack(dataset, "normals"), _stack(dataset, "mask"))


def best_constant_normal(gt: np.ndarray, mask=None) -> tuple[np.ndarray, float]:
    """Single normal minimizing the mean angular error over ``gt`` pixels.

    Returns ``(normal, mae_degrees)``.
    """
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask_for(gt, mask)
    vecs = np.moveaxis(gt, -3, -1)[m]
    if len(vecs) == 0:
        raise UndefinedMeanError("mask selects no pixels")

    def unit(angles):
        az, ze = angles
        return np.array([np.sin(ze) * np.cos(az), np.sin(ze) * np.sin(az), np.cos(ze)])

    def mae(angles):
        return float(np.degrees(np.arccos(np.clip(vecs @ unit(angles), -1, 1))).mean())

    mean = vecs.mean(axis=0)
    mean = mean / np.linalg.norm(mean) if np.linalg.norm(mean) > 0 else np.array([0, 0, 1.0])
    starts = [np.array([math.atan2(mean[1], mean[0]), math.acos(np.clip(mean[2], -1, 1))]),
              np.array([0.0, 0.0])]
    best = min((minimize(mae, s, method="Nelder-Mead",
                         options={"xatol": 1e-6, "fatol": 1e-8}) for s in starts),
               key=lambda r: r.fun)
    return unit(best.x), float(best.fun)
