"""Membership-inference attacks against the downstream classifier.

Two attacker capabilities:

* Black-box: the attacker can only query protest scores. The score for a
  record is the confidence of the argmax protest decision, max(p, 1-p); the
  record is called a member when that score reaches a threshold.
* White-box: the attacker sees per-example internals of the victim -- the
  activations and parameter gradients of the last k parameterized layers,
  the loss value, and the label encoding -- summarized into a fixed vector
  and fed to a small learned classifier.

Evaluation is on a balanced membership pool split 80/20 into attacker
train/test halves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import ImageRecord
from .downstream import SCORE_CLAMP, HybridLossWeights, batch_hybrid_loss, predict
from .metrics import auc_roc
from .modelcore import (
    ModelHandle,
    adam_step,
    capture_layer_features,
    loss_and_grad,
)

logger = logging.getLogger(__name__)


class AttackError(Exception):
    pass


# ---------------------------------------------------------------------------
# membership pool


@dataclass
class AttackPool:
    """Balanced member/non-member pool with an attacker-side 80/20 split."""

    records: list[ImageRecord]
    membership: np.ndarray  # 1 = member (seen in victim training), 0 = not
    split: np.ndarray  # "train" / "test" per record, for the learned attacker

    def subset(self, which: str):
        idx = np.flatnonzero(self.split == which)
        return [self.records[i] for i in idx], self.membership[idx]


def build_attack_pool(
    members: list[ImageRecord],
    non_members: list[ImageRecord],
    seed: int = 0,
    train_frac: float = 0.8,
    max_per_class: int | None = None,
) -> AttackPool:
    """Balanced 50/50 pool: downsample the larger side, shuffle, split 80/20."""
    if not members or not non_members:
        raise AttackError("both member and non-member records are required")
    rng = np.random.default_rng(seed)
    k = min(len(members), len(non_members))
    if max_per_class is not None:
        k = min(k, max_per_class)
    mem = [members[i] for i in rng.choice(len(members), size=k, replace=False)]
    non = [non_members[i] for i in rng.choice(len(non_members), size=k, replace=False)]
    records = mem + non
    labels = np.concatenate([np.ones(k), np.zeros(k)])
    order = rng.permutation(2 * k)
    records = [records[i] for i in order]
    labels = labels[order]
    n_train = int(round(train_frac * 2 * k))
    split = np.array(["train"] * n_train + ["test"] * (2 * k - n_train))
    return AttackPool(records=records, membership=labels, split=split)


# ---------------------------------------------------------------------------
# black-box threshold attack


class QueryInterface:
    """Query-only access to the victim: protest scores, nothing else."""

    def __init__(self, handle: ModelHandle):
        self._query = lambda records: predict(handle, records)["protest"]

    def protest_scores(self, records: list[ImageRecord]) -> np.ndarray:
        return self._query(records)


def blackbox_scores(victim, records: list[ImageRecord]) -> np.ndarray:
    """Confidence of the argmax protest decision, max(p, 1-p), in [0.5, 1]."""
    if isinstance(victim, ModelHandle):
        victim = QueryInterface(victim)
    p = np.asarray(victim.protest_scores(records), dtype=np.float64)
    return np.maximum(p, 1.0 - p)


def blackbox_decide(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Member iff confidence >= threshold. Returns a 0/1 array."""
    if not 0.0 <= threshold <= 1.0:
        raise AttackError("threshold must be in [0,1]")
    return (np.asarray(scores) >= threshold).astype(int)


# ---------------------------------------------------------------------------
# white-box learned attack

_STAT_NAMES = ("mean", "std", "absmean", "l2", "min", "max")


def _array_stats(a: np.ndarray) -> list[float]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return [
        float(a.mean()),
        float(a.std()),
        float(np.abs(a).mean()),
        float(np.linalg.norm(a)),
        float(a.min()),
        float(a.max()),
    ]


@dataclass
class WhiteboxConfig:
    last_k: int = 10
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-4
    hidden: tuple = (64, 32)
    val_frac: float = 0.2
    weights: HybridLossWeights = field(default_factory=HybridLossWeights)
    seed: int = 0


def whitebox_feature_vector(
    victim: ModelHandle, record: ImageRecord, config: WhiteboxConfig
) -> np.ndarray:
    """Fixed-length summary of one record's internals on the victim.

    Per selected layer: summary statistics of the activation map and of the
    concatenated parameter gradients; plus the loss and the label encoding.
    """
    from .generative import encode_annotation

    x = torch.from_numpy(record.image.transpose(2, 0, 1)).float()
    label = torch.from_numpy(encode_annotation(record.annotation))
    loss_fn = lambda m, b: batch_hybrid_loss(m, b, config.weights)  # noqa: E731
    last_k = min(config.last_k, len(victim.layers()))
    bundle = capture_layer_features(victim, (x, label), loss_fn, last_k=last_k)

    feats: list[float] = []
    for name in bundle.activations:
        feats.extend(_array_stats(bundle.activations[name]))
        grads = bundle.gradients.get(name, {})
        if grads:
            flat = np.concatenate([g.reshape(-1) for g in grads.values()])
        else:
            flat = np.zeros(1)
        feats.extend(_array_stats(flat))
    feats.append(bundle.loss)
    feats.extend(bundle.label.tolist())
    return np.asarray(feats, dtype=np.float64)


def extract_whitebox_features(
    victim: ModelHandle, records: list[ImageRecord], config: WhiteboxConfig
) -> np.ndarray:
    return np.stack([whitebox_feature_vector(victim, r, config) for r in records])


@dataclass
class WhiteboxAttacker:
    handle: ModelHandle
    feat_mean: np.ndarray
    feat_std: np.ndarray
    config: WhiteboxConfig

    def scores(self, victim: ModelHandle, records: list[ImageRecord]) -> np.ndarray:
        feats = extract_whitebox_features(victim, records, self.config)
        return self.score_features(feats)

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.feat_mean) / self.feat_std
        with torch.no_grad():
            logits = self.handle.module(torch.from_numpy(z).float())
        return torch.sigmoid(logits.reshape(-1)).numpy().astype(np.float64)


def _bce_loss(module, batch):
    x, y = batch
    p = torch.sigmoid(module(x).reshape(-1)).clamp(SCORE_CLAMP, 1 - SCORE_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def train_whitebox_attacker(
    victim: ModelHandle,
    pool: AttackPool,
    config: WhiteboxConfig | None = None,
    features: np.ndarray | None = None,
) -> tuple[WhiteboxAttacker, list[dict]]:
    """Fit the learned attacker on the pool's train half.

    A slice of the train half is held out for validation; the parameters from
    the best-validation epoch are kept. `features` may pass in precomputed
    feature rows aligned with pool.records to avoid re-extraction.
    """
    config = config or WhiteboxConfig()
    if features is None:
        features = extract_whitebox_features(victim, pool.records, config)
    if features.shape[0] != len(pool.records):
        raise AttackError("feature rows must align with pool records")

    train_idx = np.flatnonzero(pool.split == "train")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(train_idx)
    n_val = max(1, int(round(config.val_frac * order.size)))
    val_idx, fit_idx = order[:n_val], order[n_val:]

    mean = features[fit_idx].mean(axis=0)
    std = features[fit_idx].std(axis=0)
    std[std < 1e-12] = 1.0

    def tensors(idx):
        z = (features[idx] - mean) / std
        return torch.from_numpy(z).float(), torch.from_numpy(pool.membership[idx]).float()

    x_fit, y_fit = tensors(fit_idx)
    x_val, y_val = tensors(val_idx)

    sizes = [features.shape[1], *config.hidden, 1]
    handle = ModelHandle({"kind": "mlp", "sizes": sizes}, seed=config.seed)

    gen = torch.Generator().manual_seed(config.seed)
    best_val = np.inf
    best_state = {k: v.clone() for k, v in handle.module.state_dict().items()}
    log = []
    n = x_fit.shape[0]
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            bundle = loss_and_grad(handle, (x_fit[idx], y_fit[idx]), _bce_loss)
            adam_step(handle, bundle.grads, lr=config.lr)
            losses.append(bundle.loss)
        with torch.no_grad():
            val_loss = float(_bce_loss(handle.module, (x_val, y_val)))
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.clone() for k, v in handle.module.state_dict().items()}
    handle.module.load_state_dict(best_state)
    return WhiteboxAttacker(handle, mean, std, config), log


# ---------------------------------------------------------------------------
# attack evaluation


def evaluate_attack(
    membership: np.ndarray, scores: np.ndarray, threshold: float = 0.5
) -> dict:
    """Accuracy / precision / recall at the threshold, plus AUC and log-loss.

    Precision is reported as None when nothing is flagged. Log-loss of an
    uninformative attacker on a balanced pool sits at ln 2.
    """
    y = np.asarray(membership, dtype=int)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise AttackError("membership and scores must align")
    decided = (s >= threshold).astype(int)
    tp = int(((decided == 1) & (y == 1)).sum())
    fp = int(((decided == 1) & (y == 0)).sum())
    fn = int(((decided == 0) & (y == 1)).sum())
    flagged = tp + fp
    sc = np.clip(s, SCORE_CLAMP, 1 - SCORE_CLAMP)
    out = {
        "n": int(y.size),
        "threshold": threshold,
        "accuracy": float((decided == y).mean()),
        "precision": (tp / flagged) if flagged else None,
        "recall": (tp / (tp + fn)) if (tp + fn) else None,
        "log_loss": float(-(y * np.log(sc) + (1 - y) * np.log(1 - sc)).mean()),
    }
    out["auc"] = auc_roc(s, y) if 0 < y.sum() < y.size else None
    return out


def run_blackbox_attack(
    victim: ModelHandle, pool: AttackPool, thresholds=(0.95, 0.99)
) -> dict:
    """Threshold attack over the full pool (no attacker training needed)."""
    scores = blackbox_scores(victim, pool.records)
    return {
        "kind": "blackbox",
        "per_threshold": {
            str(t): evaluate_attack(pool.membership, scores, threshold=t)
            for t in thresholds
        },
        "auc": auc_roc(scores, pool.membership),
    }


def run_whitebox_attack(
    victim: ModelHandle, pool: AttackPool, config: WhiteboxConfig | None = None
) -> dict:
    """Train the learned attacker on the train half, report on the test half."""
    config = config or WhiteboxConfig()
    features = extract_whitebox_features(victim, pool.records, config)
    attacker, log = train_whitebox_attacker(victim, pool, config, features=features)
    test_idx = np.flatnonzero(pool.split == "test")
    scores = attacker.score_features(features[test_idx])
    report = evaluate_attack(pool.membership[test_idx], scores)
    return {"kind": "whitebox", "test": report, "train_log": log}
