"""Multi-task downstream classifier: hybrid loss, training (standard and
noisy clipped-gradient mode), and utility evaluation.

The model predicts [protest score, violence estimate, 10 attribute scores].
Violence and attribute losses are computed only over protest-positive examples,
where those labels are defined; protest-negative rows contribute zero to them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .corpus import ImageRecord
from .dp import dp_epsilon
from .metrics import auc_roc, pearson_and_fit, roc_points, wilson_interval
from .modelcore import ModelHandle, loss_and_grad, per_sample_grads, sgd_step

logger = logging.getLogger(__name__)

SCORE_CLAMP = 1e-7


class TrainingDiverged(Exception):
    pass


@dataclass
class HybridLossWeights:
    protest: float = 1.0
    violence: float = 10.0
    attributes: float = 5.0

    def __post_init__(self):
        if min(self.protest, self.violence, self.attributes) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class DpSgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    target_delta: float = 1e-5

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if not 0.0 < self.target_delta < 1.0:
            raise ValueError("target_delta must be in (0,1)")


@dataclass
class DownstreamTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.002
    momentum: float = 0.9
    weights: HybridLossWeights = field(default_factory=HybridLossWeights)
    width: int = 16
    augment: bool = True
    seed: int = 0
    max_rotation_deg: float = 30.0


def _clamp(scores: torch.Tensor) -> torch.Tensor:
    return scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def protest_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy for the protest head."""
    p = _clamp(y_hat)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


_warned_all_masked: set = set()


def _warn_if_all_masked(total: torch.Tensor, which: str):
    try:
        if float(total) == 0.0 and which not in _warned_all_masked:
            # warn once per process: single-example evaluation hits this on
            # every protest-negative row, which would flood the log
            _warned_all_masked.add(which)
            logger.warning("%s loss: all examples masked; returning 0", which)
    except RuntimeError:
        # inside vmap tracing; skip the diagnostic
        pass


def violence_loss(v: torch.Tensor, v_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over protest-positive examples; 0 when none."""
    m = mask.to(v_hat.dtype)
    total = m.sum()
    _warn_if_all_masked(total, "violence")
    # safe division keeps this traceable under vmap; 0/1 when fully masked
    return (m * (v_hat - v) ** 2).sum() / total.clamp(min=1.0)


def attribute_loss(y_a: torch.Tensor, y_a_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over the 10 attributes, averaged over
    protest-positive examples; 0 when none."""
    m = mask.to(y_a_hat.dtype)
    total = m.sum()
    _warn_if_all_masked(total, "attribute")
    p = _clamp(y_a_hat)
    per_example = -(y_a * torch.log(p) + (1 - y_a) * torch.log(1 - p)).sum(dim=1)
    return (m * per_example).sum() / total.clamp(min=1.0)


def hybrid_loss(components, weights: HybridLossWeights):
    lp, lv, la = components
    return weights.protest * lp + weights.violence * lv + weights.attributes * la


def split_logits(logits: torch.Tensor):
    """12 logits -> (protest score, violence estimate, attribute scores)."""
    s = torch.sigmoid(logits)
    return s[:, 0], s[:, 1], s[:, 2:12]


def batch_hybrid_loss(module, batch, weights: HybridLossWeights):
    """loss_fn contract for modelcore: batch = (x, targets) with targets as the
    12-dim annotation encoding [protest, violence, attr_1..10]."""
    x, t = batch
    y_p, v, y_a = t[:, 0], t[:, 1], t[:, 2:12]
    p_hat, v_hat, a_hat = split_logits(module(x))
    mask = y_p > 0.5
    return hybrid_loss(
        (protest_loss(y_p, p_hat), violence_loss(v, v_hat, mask), attribute_loss(y_a, a_hat, mask)),
        weights,
    )


def _records_to_tensors(records: list[ImageRecord]):
    from .generative import encode_annotations

    x = torch.from_numpy(np.stack([r.image for r in records]).transpose(0, 3, 1, 2)).float()
    t = encode_annotations([r.annotation for r in records])
    return x, t


def _augment_batch(x: torch.Tensor, gen: torch.Generator, max_rot: float) -> torch.Tensor:
    """Random resized crop + rotation + brightness jitter, parameterized from
    an explicit torch generator for reproducibility."""
    import torchvision.transforms.v2.functional as tvf

    n, _, h, w = x.shape
    out = torch.empty_like(x)
    for i in range(n):
        img = x[i]
        angle = float((torch.rand(1, generator=gen) * 2 - 1) * max_rot)
        img = tvf.rotate(img, angle)
        scale = float(0.7 + 0.3 * torch.rand(1, generator=gen))
        ch, cw = max(2, int(h * scale)), max(2, int(w * scale))
        top = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
        left = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
        img = tvf.resized_crop(img, top, left, ch, cw, [h, w], antialias=True)
        bright = float(0.8 + 0.4 * torch.rand(1, generator=gen))
        img = torch.clamp(img * bright, 0.0, 1.0)
        out[i] = img
    return out


def _has_batch_coupled_norm(module: nn.Module) -> bool:
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in module.modules())


def train_downstream(
    records: list[ImageRecord],
    config: DownstreamTrainConfig,
    dp: DpSgdConfig | None = None,
    log_path=None,
):
    """SGD over the hybrid loss on the train split.

    Standard mode: mini-batch gradients with momentum and optional augmentation.
    Noisy mode (dp given): per-sample gradients clipped to clip_norm, Gaussian
    noise added to the sum, accountant updated per step; batch-coupled
    normalization is refused. Returns (handle, log rows, dp summary or None).
    """
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError("corpus has no train split")
    side = train[0].image.shape[0]
    x_all, t_all = _records_to_tensors(train)
    n = x_all.shape[0]

    handle = ModelHandle(
        {"kind": "downstream_cnn", "side": side, "width": config.width}, seed=config.seed
    )
    if dp is not None and _has_batch_coupled_norm(handle.module):
        raise ValueError("noisy training mode requires batch-decoupled normalization")

    weights = config.weights
    loss_fn = lambda module, batch: batch_hybrid_loss(module, batch, weights)  # noqa: E731

    gen = torch.Generator().manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 17)
    log = []
    steps = 0
    sampling_rate = min(1.0, config.batch_size / n)
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, tb = x_all[idx], t_all[idx]
            if config.augment and dp is None:
                xb = _augment_batch(xb, gen, config.max_rotation_deg)
            if dp is None:
                bundle = loss_and_grad(handle, (xb, tb), loss_fn)
                if not math.isfinite(bundle.loss):
                    raise TrainingDiverged(f"loss diverged at step {steps}")
                sgd_step(handle, bundle.grads, lr=config.lr, momentum=config.momentum)
                epoch_losses.append(bundle.loss)
            else:
                grads = per_sample_grads(handle, (xb, tb), loss_fn)
                b = xb.shape[0]
                sq = torch.zeros(b)
                for g in grads.values():
                    sq += g.reshape(b, -1).pow(2).sum(dim=1)
                norms = torch.sqrt(sq)
                factors = torch.clamp(dp.clip_norm / (norms + 1e-12), max=1.0)
                noised = {}
                for name, g in grads.items():
                    clipped = (g.reshape(b, -1) * factors[:, None]).sum(dim=0)
                    noise = dp.noise_multiplier * dp.clip_norm * torch.randn(
                        clipped.shape, generator=noise_gen
                    )
                    noised[name] = ((clipped + noise) / b).reshape(g.shape[1:])
                sgd_step(handle, noised, lr=config.lr, momentum=config.momentum)
                with torch.no_grad():
                    epoch_losses.append(float(loss_fn(handle.module, (xb, tb))))
            steps += 1
        row = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)), "steps": steps}
        log.append(row)
        if log_path is not None:
            import json

            with open(log_path, "a") as f:
                f.write(json.dumps(row) + "\n")

    dp_summary = None
    if dp is not None:
        eps = dp_epsilon(dp.noise_multiplier, sampling_rate, steps, dp.target_delta)
        dp_summary = {
            "clip_norm": dp.clip_norm,
            "noise_multiplier": dp.noise_multiplier,
            "delta": dp.target_delta,
            "epsilon": eps,
            "steps": steps,
            "sampling_rate": sampling_rate,
        }
    return handle, log, dp_summary


def predict(handle: ModelHandle, records: list[ImageRecord], batch_size: int = 128):
    """Scores for every record: dict of numpy arrays."""
    x, _ = _records_to_tensors(records)
    outs = []
    for start in range(0, x.shape[0], batch_size):
        with torch.no_grad():
            outs.append(torch.sigmoid(handle.module(x[start : start + batch_size])))
    s = torch.cat(outs).numpy()
    return {"protest": s[:, 0], "violence": s[:, 1], "attributes": s[:, 2:12]}


def evaluate_downstream(handle: ModelHandle, records: list[ImageRecord]) -> dict:
    """Per-head utility report on the given (test) records.

    Protest AUC over all records; attribute AUCs and the violence fit over
    protest-positive records, where those labels are defined.
    """
    from .corpus import ATTRIBUTE_NAMES

    preds = predict(handle, records)
    y_p = np.array([r.annotation.protest for r in records])
    pos = y_p == 1

    report = {"n": len(records)}
    report["protest"] = _head_report(preds["protest"], y_p)
    report["protest"]["roc"] = roc_points(preds["protest"], y_p).tolist()

    attrs = {}
    y_attr = np.array([r.annotation.attributes for r in records])
    for j, name in enumerate(ATTRIBUTE_NAMES):
        truth = y_attr[pos, j]
        scores = preds["attributes"][pos, j]
        if truth.min() == truth.max():
            attrs[name] = {"auc": None, "n": int(pos.sum())}
        else:
            attrs[name] = _head_report(scores, truth)
    report["attributes"] = attrs

    v_true = np.array([r.annotation.violence for r in records])[pos]
    v_pred = preds["violence"][pos]
    if v_true.size >= 2 and v_true.std() > 0:
        r, slope, intercept = pearson_and_fit(v_true, v_pred)
        report["violence"] = {
            "pearson_r": r,
            "fit_slope": slope,
            "fit_intercept": intercept,
            "n": int(pos.sum()),
            "scatter": np.column_stack([v_true, v_pred]).tolist(),
        }
    else:
        report["violence"] = {"pearson_r": None, "n": int(pos.sum())}
    return report


def _head_report(scores: np.ndarray, truth: np.ndarray) -> dict:
    acc_k = int(((scores >= 0.5).astype(int) == truth).sum())
    lo, hi = wilson_interval(acc_k, truth.size)
    return {
        "auc": auc_roc(scores, truth),
        "accuracy": acc_k / truth.size,
        "accuracy_wilson_95": [lo, hi],
        "n": int(truth.size),
    }
