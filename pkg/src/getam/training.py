"""Single-stage training with one attribution backward and one supervised backward.

Each phase-2 iteration runs the attribution pass (per-class score backwards,
gradients cleared, parameters untouched) to mint a pseudo label, then a fresh
forward whose combined loss

    L = L_cls + L_seg + L_sal

drives exactly one optimizer step.  Phase 1 trains with the classification
loss alone.  Pseudo labels are regenerated every iteration; nothing is
cached.  The attribution code path is the same one the standalone tools use,
so in-loop maps match standalone maps bit for bit on frozen parameters.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attribution import attribute_image
from .autodiff import Tensor
from .data import Sample, miou
from .gtt import atomic_write_bytes
from .labels import MiningConfig, complete_labels
from .vit import Prediction, VisionTransformer

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "iter", "l_cls", "l_seg", "l_sal", "total", "pseudo_miou"]


@dataclass
class LossConfig:
    """Loss weights, schedule, and optimizer; mining knobs live in MiningConfig.

    Adam is the default: plain SGD with momentum cannot reliably escape the
    constant-predictor plateau of this toy at any fixed learning rate (and
    learning-rate schedules are out of scope), while Adam converges in a few
    dozen epochs.  SGD remains available via ``optimizer="sgd"``.
    """

    sal_weight: float = 0.1
    phase1_epochs: int = 25
    total_epochs: int = 50
    lr: float = 3e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.phase1_epochs <= self.total_epochs:
            raise ValueError(
                f"need 0 <= phase1_epochs <= total_epochs, got "
                f"{self.phase1_epochs}/{self.total_epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self, params: list[Tensor]):
        if self.optimizer == "sgd":
            return SGD(params, lr=self.lr, momentum=self.momentum)
        return Adam(params, lr=self.lr)


@dataclass
class LossReport:
    epoch: int
    iter: int
    l_cls: float
    l_seg: float
    l_sal: float   # already weighted
    total: float   # l_cls + l_seg + l_sal as plain float addition

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.l_cls, self.l_seg,
                                            self.l_sal, self.total))


class SGD:
    """Plain SGD with momentum over the model's trainable parameters."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    """Adam with bias correction; parameters without gradients are skipped."""

    def __init__(self, params: list[Tensor], lr: float = 3e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def labels_to_targets(labels: set[int], n_classes: int) -> np.ndarray:
    t = np.zeros(n_classes)
    for c in labels:
        if not 1 <= c <= n_classes:
            raise ValueError(f"label {c} outside 1..{n_classes}")
        t[c - 1] = 1.0
    return t


def l_cls(pred: Prediction, labels: set[int]) -> Tensor:
    """Multi-label binary cross-entropy over the class logits, mean over classes."""
    targets = labels_to_targets(labels, pred.logits.size)
    return ad.bce_with_logits_mean(pred.logits, targets)


def l_seg(seg_logits: Tensor, pseudo: np.ndarray) -> Tensor:
    """Pixel softmax cross-entropy against the pseudo label, 255 excluded.

    The mean runs over non-255 pixels only; an all-255 label contributes an
    exact zero (with a warning), and ignored pixels are never read.
    """
    k, h, w = seg_logits.shape
    if pseudo.shape != (h, w):
        raise ad.DimensionError(
            f"pseudo label {pseudo.shape} does not match logits {(h, w)}")
    if np.all(pseudo == 255):
        log.warning("l_seg: pseudo label is entirely unknown; loss is 0")
    rows = ad.transpose2d(ad.reshape(seg_logits, (k, h * w)))
    return ad.softmax_xent_ignore(rows, pseudo.reshape(-1), ignore_index=255)


def l_sal(seg_logits: Tensor, saliency: np.ndarray, weight: float = 0.1) -> Tensor:
    """Weighted BCE pulling the background channel toward the non-salient mask."""
    k, h, w = seg_logits.shape
    if saliency.shape != (h, w):
        raise ad.DimensionError(
            f"saliency {saliency.shape} does not match logits {(h, w)}")
    bg = ad.slice_rows(ad.reshape(seg_logits, (k, h * w)), 0, 1)
    target = (1.0 - saliency.reshape(1, -1)).astype(np.float64)
    return ad.scale(ad.bce_with_logits_mean(bg, target), weight)


def double_backward_step(model: VisionTransformer, sample: Sample,
                         cfg: LossConfig, optimizer: "SGD | Adam",
                         mining: MiningConfig, fusion: str = "sum",
                         pamr_iters: int = 10, use_pamr: bool = True,
                         epoch: int = 0, iteration: int = 0,
                         capture: dict | None = None,
                         ) -> tuple[LossReport, np.ndarray | None]:
    """One iteration: mint a pseudo label, then a single supervised update.

    Parameters are bitwise unchanged through the attribution and completion
    stages; the sole update happens after the second backward.  With an empty
    label set the step degrades to classification only (warned).
    """
    C = model.cfg.C
    pseudo = None
    if sample.labels:
        maps = attribute_image(model, sample.image, sorted(sample.labels),
                               method="getam", fusion=fusion)
        pseudo = complete_labels(maps, sample.saliency, sample.image, mining,
                                 n_classes=C, pamr_iters=pamr_iters,
                                 use_pamr=use_pamr)
        if capture is not None:
            capture["maps"] = maps
            capture["param_hash_after_attribution"] = model.param_hash()
    else:
        log.warning("image %s has no labels; classification-only step",
                    sample.image_id)

    pred, feats, _ = model.forward_with_taps(sample.image)
    cls_term = l_cls(pred, sample.labels)
    if pseudo is not None:
        seg = model.segmentation_head(feats)
        seg_term = l_seg(seg, pseudo)
        sal_term = l_sal(seg, sample.saliency, cfg.sal_weight)
        total = ad.add(ad.add(cls_term, seg_term), sal_term)
    else:
        seg_term = sal_term = None
        total = cls_term
    tape = total.tape
    ad.backward(total, tape)
    optimizer.step()
    tape.clear_gradients()

    lc = cls_term.item()
    ls = seg_term.item() if seg_term is not None else 0.0
    lsal = sal_term.item() if sal_term is not None else 0.0
    report = LossReport(epoch=epoch, iter=iteration, l_cls=lc, l_seg=ls,
                        l_sal=lsal, total=lc + ls + lsal)
    return report, pseudo


def classification_step(model: VisionTransformer, sample: Sample,
                        optimizer: "SGD | Adam", epoch: int = 0,
                        iteration: int = 0) -> LossReport:
    """Phase-1 iteration: one ordinary backward on the classification loss."""
    pred, _, _ = model.forward_with_taps(sample.image)
    loss = l_cls(pred, sample.labels)
    tape = loss.tape
    ad.backward(loss, tape)
    optimizer.step()
    tape.clear_gradients()
    lc = loss.item()
    return LossReport(epoch=epoch, iter=iteration, l_cls=lc, l_seg=0.0,
                      l_sal=0.0, total=lc)


def run_training(samples: list[Sample], model: VisionTransformer,
                 cfg: LossConfig, mining: MiningConfig | None = None,
                 fusion: str = "sum", pamr_iters: int = 10,
                 use_pamr: bool = True, metrics_path: str | Path | None = None,
                 checkpoint_dir: str | Path | None = None,
                 ) -> list[LossReport]:
    """Two-phase schedule: classification-only epochs, then double-backward.

    Per-iteration losses and per-image pseudo-label quality go to the metrics
    CSV; the checkpoint (including freshly fitted CAM heads) is written at
    the end.
    """
    if not samples:
        raise ValueError("training needs a nonempty dataset")
    mining = mining or MiningConfig()
    optimizer = cfg.make_optimizer(model.parameters())
    order_rng = np.random.default_rng(cfg.seed)
    history: list[LossReport] = []
    rows: list[list[str]] = []

    for epoch in range(cfg.total_epochs):
        order = order_rng.permutation(len(samples))
        for it, idx in enumerate(order):
            sample = samples[idx]
            if epoch < cfg.phase1_epochs:
                report = classification_step(model, sample, optimizer,
                                             epoch=epoch, iteration=it)
                pseudo_score = ""
            else:
                report, pseudo = double_backward_step(
                    model, sample, cfg, optimizer, mining, fusion=fusion,
                    pamr_iters=pamr_iters, use_pamr=use_pamr,
                    epoch=epoch, iteration=it)
                pseudo_score = "" if pseudo is None else repr(
                    miou(pseudo, sample.gt_mask, model.cfg.C + 1).mean)
            history.append(report)
            rows.append([str(report.epoch), str(report.iter), repr(report.l_cls),
                         repr(report.l_seg), repr(report.l_sal),
                         repr(report.total), pseudo_score])

    fit_cam_heads(model, samples)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    if checkpoint_dir is not None:
        try:
            model.save_checkpoint(checkpoint_dir)
        except OSError as exc:
            raise OSError(f"failed to write checkpoint to {checkpoint_dir}: {exc}") from exc
    return history


def write_metrics_csv(path: str | Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    writer.writerows(rows)
    try:
        atomic_write_bytes(path, buf.getvalue().encode())
    except OSError as exc:
        raise OSError(f"failed to write metrics to {path}: {exc}") from exc


def fit_cam_heads(model: VisionTransformer, samples: list[Sample],
                  iters: int = 800, lr: float = 1.0) -> None:
    """Fit the two auxiliary GAP classifiers on frozen backbone features.

    Full-batch logistic regression per CAM variant; the backbone itself is
    untouched, so this can run after any training phase.
    """
    feats_add, feats_ign, targets = [], [], []
    for s in samples:
        _, feats, _ = model.forward_with_taps(s.image)
        patch = feats.O_patch.data
        cls_row = feats.O_cls.data[0]
        feats_ign.append(patch.mean(axis=0))
        feats_add.append(patch.mean(axis=0) + cls_row)
        targets.append(labels_to_targets(s.labels, model.cfg.C))
    T = np.stack(targets)
    for variant, X in (("add", np.stack(feats_add)), ("ignore", np.stack(feats_ign))):
        head = model.cam_heads[variant]
        w = np.zeros_like(head["w"].data)
        b = np.zeros_like(head["b"].data)
        n = X.shape[0]
        for _ in range(iters):
            z = X @ w + b
            sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                           np.exp(z) / (1.0 + np.exp(z)))
            delta = (sig - T) / n
            w -= lr * (X.T @ delta)
            b -= lr * delta.sum(axis=0)
        head["w"].data[...] = w
        head["b"].data[...] = b


def multilabel_accuracy(model: VisionTransformer, samples: list[Sample]) -> float:
    """Share of (image, class) decisions where sign(logit) matches the label."""
    hits = 0
    total = 0
    for s in samples:
        pred, _, _ = model.forward_with_taps(s.image)
        want = labels_to_targets(s.labels, model.cfg.C)
        hits += int(((pred.values() > 0) == (want > 0.5)).sum())
        total += model.cfg.C
    return hits / total
