"""Focal loss, optimizer, splits, and the training loop for edge logits.

The loss reweights the two classes asymmetrically: anomalous edges (the
positive class) carry a weight delta, and easy examples of both classes
are damped by a power gamma of the predicted probability of the wrong
class.  With standard_focal=False the normal-class term carries the
literal coefficient (1 - delta), which flips sign for delta > 1 and
rewards confident mistakes on normal edges; standard_focal=True replaces
that coefficient with 1, which is the form that trains stably for
delta > 1.  Both branches share the anomalous-class term.

Training is full batch and transductive: the forward pass always runs
over every edge, and the split masks only gate which rows contribute to
the loss and to the metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import EdgeEmbedNet, backward, forward

PROB_CLAMP = 1e-7


class TrainingError(Exception):
    pass


class SingleClassSplit(TrainingError):
    """Stratified splitting needs both classes present."""


@dataclass(frozen=True)
class FocalConfig:
    delta: float = 2.0
    gamma: float = 2.0
    standard_focal: bool = False


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    patience: int = 20
    train_frac: float = 0.7
    val_frac: float = 0.15
    seed: int = 0


def anomaly_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the anomalous class, clamped away from 0/1."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e[:, 1] / e.sum(axis=1)
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def focal_loss(logits: np.ndarray, y: np.ndarray, cfg: FocalConfig,
               mask: np.ndarray | None = None
               ) -> tuple[float, np.ndarray]:
    """Mean loss over the masked rows and its gradient wrt the logits.

    Rows outside the mask contribute nothing and get zero gradient, as do
    rows whose probability sits in the clamp region.
    """
    if mask is None:
        mask = np.ones(len(y), dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("empty mask: nothing to average the loss over")

    prob = anomaly_probability(logits)
    p = prob[mask]
    yk = y[mask].astype(float)
    delta, gamma = cfg.delta, cfg.gamma
    coeff0 = 1.0 if cfg.standard_focal else (1.0 - delta)

    log_p = np.log(p)
    log_q = np.log(1.0 - p)
    per = (-coeff0 * (1.0 - yk) * p ** gamma * log_q
           - delta * yk * (1.0 - p) ** gamma * log_p)
    loss = float(per.mean())

    # d per / d p, with the gamma * p^(gamma-1) factors safe because the
    # clamp keeps p and 1-p strictly positive.
    d0 = -coeff0 * (gamma * p ** (gamma - 1.0) * log_q
                    - p ** gamma / (1.0 - p))
    d1 = delta * (gamma * (1.0 - p) ** (gamma - 1.0) * log_p
                  - (1.0 - p) ** gamma / p)
    dp = ((1.0 - yk) * d0 + yk * d1) / count

    interior = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    slope = p * (1.0 - p) * interior
    dlogits = np.zeros_like(logits)
    rows = np.nonzero(mask)[0]
    dlogits[rows, 1] = dp * slope
    dlogits[rows, 0] = -dp * slope
    return loss, dlogits


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_split(y: np.ndarray, train_frac: float, val_frac: float,
                     seed: int) -> SplitMasks:
    """Per-class shuffled split into train/val/test boolean masks."""
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClassSplit(f"labels contain only class {classes.tolist()}")
    if train_frac <= 0 or val_frac < 0 or train_frac + val_frac >= 1.0:
        raise TrainingError(
            f"bad split fractions train={train_frac} val={val_frac}")
    rng = np.random.default_rng(seed)
    n = len(y)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in classes:
        idx = rng.permutation(np.nonzero(y == c)[0])
        n_tr = int(np.floor(train_frac * len(idx)))
        n_va = int(np.floor(val_frac * len(idx)))
        train[idx[:n_tr]] = True
        val[idx[n_tr:n_tr + n_va]] = True
        test[idx[n_tr + n_va:]] = True
    return SplitMasks(train, val, test)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray],
             grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def classification_report(y: np.ndarray, pred: np.ndarray) -> EvalReport:
    """Anomalous (1) is the positive class; empty denominators give 0."""
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return EvalReport(accuracy, precision, recall, f1, tp, fp, fn, tn)


def evaluate(net: EdgeEmbedNet, X: np.ndarray, plan, y: np.ndarray,
             mask: np.ndarray) -> EvalReport:
    logits, _ = forward(net, X, plan)
    pred = np.argmax(logits, axis=1)
    return classification_report(y[mask], pred[mask])


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    loss: float
    val_accuracy: float
    val_precision: float
    val_recall: float
    val_f1: float


@dataclass
class TrainResult:
    history: list[HistoryEntry]
    best_epoch: int
    best_val_f1: float
    masks: SplitMasks


def train(net: EdgeEmbedNet, X: np.ndarray, plan, y: np.ndarray,
          focal_cfg: FocalConfig, cfg: TrainConfig,
          masks: SplitMasks | None = None) -> TrainResult:
    """Full-batch Adam with early stopping on validation F1.

    The network is left holding the parameters of the best validation
    epoch, not the last one.
    """
    if masks is None:
        masks = stratified_split(y, cfg.train_frac, cfg.val_frac, cfg.seed)
    if not masks.val.any():
        raise TrainingError("validation split is empty")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(net.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.adam_eps)

    history: list[HistoryEntry] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state = [p.copy() for p in net.parameters()]
    since_best = 0
    for epoch in range(cfg.epochs):
        logits, cache = forward(net, X, plan, train=True, rng=rng)
        loss, dlogits = focal_loss(logits, y, focal_cfg, mask=masks.train)
        grads = backward(net, plan, cache, dlogits)
        optimizer.step(net.parameters(), grads.parameters())
        net.mark_updated()

        report = evaluate(net, X, plan, y, masks.val)
        history.append(HistoryEntry(epoch, loss, report.accuracy,
                                    report.precision, report.recall,
                                    report.f1))
        if report.f1 > best_f1:
            best_f1 = report.f1
            best_epoch = epoch
            best_state = [p.copy() for p in net.parameters()]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    for p, saved in zip(net.parameters(), best_state):
        p[...] = saved
    net.mark_updated()
    return TrainResult(history, best_epoch, best_f1, masks)


HISTORY_COLUMNS = ("epoch", "loss", "val_accuracy", "val_precision",
                   "val_recall", "val_f1")


def save_history(history: list[HistoryEntry], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([h.epoch, format(h.loss, ".17g"),
                        format(h.val_accuracy, ".17g"),
                        format(h.val_precision, ".17g"),
                        format(h.val_recall, ".17g"),
                        format(h.val_f1, ".17g")])
