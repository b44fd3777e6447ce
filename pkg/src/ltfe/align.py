"""Proposal-level alignment losses and the toy detection heads."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DomainError, ShapeError

LAMBDA_INTRA = 1.0
LAMBDA_INTER = 0.1


@dataclass
class ProposalBatch:
    features: Tensor                 # m×n
    labels: np.ndarray               # m class indices
    boxes: np.ndarray | None = None  # m×4 regression targets

    def __post_init__(self):
        if not isinstance(self.features, Tensor) and np.shape(self.features)[:1] == (0,):
            raise DomainError("a proposal batch needs at least one row")
        self.features = dc.tensor(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"proposal features must be m×n, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("one label per proposal row required")
        if self.boxes is not None:
            self.boxes = np.asarray(self.boxes, dtype=np.float64)
            if self.boxes.shape != (self.features.shape[0], 4):
                raise ShapeError("box targets must be m×4")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]


def check_paired(p: ProposalBatch, p_hat: ProposalBatch) -> None:
    if p.features.shape != p_hat.features.shape:
        raise ShapeError(f"unpaired batches {p.features.shape} vs {p_hat.features.shape}")
    if not np.array_equal(p.labels, p_hat.labels):
        raise ShapeError("paired batches must share labels row for row")


@dataclass
class ToyHeadParams:
    w_cls: Tensor  # n×C
    b_cls: Tensor  # C
    w_reg: Tensor  # n×4
    b_reg: Tensor  # 4

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, dc.tensor(getattr(self, f.name)))
        n = self.w_cls.shape[0]
        if self.b_cls.shape != (self.w_cls.shape[1],):
            raise ShapeError("classifier bias length must equal the class count")
        if self.w_reg.shape != (n, 4) or self.b_reg.shape != (4,):
            raise ShapeError("regressor must be n×4 with a length-4 bias")

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1]

    @classmethod
    def init(cls, n: int, num_classes: int, rng) -> "ToyHeadParams":
        """Small Gaussian weights (std 0.01 classifier, 0.001 regressor), zero biases."""
        return cls(rng.normal(0.0, 0.01, (n, num_classes)), np.zeros(num_classes),
                   rng.normal(0.0, 0.001, (n, 4)), np.zeros(4))

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def logits(self, features) -> Tensor:
        return dc.bias_add(dc.tensor(features) @ self.w_cls, self.b_cls)

    def regress(self, features) -> Tensor:
        return dc.bias_add(dc.tensor(features) @ self.w_reg, self.b_reg)


@dataclass
class LossBundle:
    l_intra: Tensor
    l_inter: Tensor
    l_align: Tensor
    l_cls: Tensor
    l_reg: Tensor
    l_total: Tensor

    def values(self) -> dict:
        return {f.name: float(getattr(self, f.name).data) for f in fields(self)}


def intra_loss(p: ProposalBatch, p_hat: ProposalBatch) -> Tensor:
    """Mean squared Euclidean distance between paired rows."""
    check_paired(p, p_hat)
    if p.m == 0:
        raise DomainError("intra_loss needs at least one proposal")
    diff = p.features - p_hat.features
    return dc.sum(diff * diff) * (1.0 / p.m)


def inter_loss(p: ProposalBatch, p_hat: ProposalBatch, include_positive: bool = False) -> Tensor:
    """Mean over rows of ``-log(exp(s_ii) / Σ_j exp(s_ij))`` with cosine ``s``.

    By default the denominator runs over ``j != i`` only; ``include_positive``
    adds the ``j = i`` term (the usual InfoNCE form).
    """
    check_paired(p, p_hat)
    m = p.m
    if m < 2:
        raise DomainError("inter_loss needs at least two proposals")
    sim = dc.normalize_rows(p.features) @ dc.transpose(dc.normalize_rows(p_hat.features))
    positive = dc.pick(sim, np.arange(m))
    mask = None if include_positive else ~np.eye(m, dtype=bool)
    return dc.sum(dc.logsumexp(sim, mask) - positive) * (1.0 / m)


def cross_entropy(logits, labels) -> Tensor:
    logits = dc.tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError(f"labels must lie in 0..{logits.shape[1] - 1}")
    return dc.sum(dc.logsumexp(logits) - dc.pick(logits, labels)) * (1.0 / logits.shape[0])


def head_losses(p: ProposalBatch, p_hat: ProposalBatch | None, heads: ToyHeadParams):
    """Classification and box losses averaged over the rows of both batches.

    With ``p_hat=None`` only ``p`` contributes. The box loss is smooth-L1
    summed over the 4 coordinates and is 0 without targets.
    """
    if p_hat is None:
        feats, labels, boxes = p.features, p.labels, p.boxes
    else:
        check_paired(p, p_hat)
        feats = dc.concat([p.features, p_hat.features], axis=0)
        labels = np.concatenate([p.labels, p_hat.labels])
        boxes = None
        if p.boxes is not None and p_hat.boxes is not None:
            boxes = np.concatenate([p.boxes, p_hat.boxes])
    if feats.shape[1] != heads.w_cls.shape[0]:
        raise ShapeError(f"heads expect {heads.w_cls.shape[0]} features, got {feats.shape[1]}")
    l_cls = cross_entropy(heads.logits(feats), labels)
    if boxes is None:
        l_reg = Tensor(0.0)
    else:
        err = heads.regress(feats) - Tensor(boxes)
        l_reg = dc.sum(dc.smooth_l1(err)) * (1.0 / feats.shape[0])
    return l_cls, l_reg


def total_loss(l_intra, l_inter, l_cls, l_reg,
               lam1: float = LAMBDA_INTRA, lam2: float = LAMBDA_INTER) -> LossBundle:
    """Weighted alignment term plus detection terms."""
    if lam1 < 0 or lam2 < 0:
        raise DomainError("loss weights must be non-negative")
    l_intra, l_inter, l_cls, l_reg = (dc.tensor(v) for v in (l_intra, l_inter, l_cls, l_reg))
    l_align = lam1 * l_intra + lam2 * l_inter
    return LossBundle(l_intra, l_inter, l_align, l_cls, l_reg, l_cls + l_reg + l_align)


def compute_losses(p: ProposalBatch, p_hat: ProposalBatch, heads: ToyHeadParams,
                   lam1: float = LAMBDA_INTRA, lam2: float = LAMBDA_INTER,
                   include_positive: bool = False) -> LossBundle:
    l_cls, l_reg = head_losses(p, p_hat, heads)
    return total_loss(intra_loss(p, p_hat), inter_loss(p, p_hat, include_positive),
                      l_cls, l_reg, lam1, lam2)
