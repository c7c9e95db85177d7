"""Alignment, contrastive, cross-entropy and the weighted hybrid objective.

Every pair loss accepts batches of rows ``[N, D]`` (a single vector ``[D]`` is
promoted to one row) and reduces with the batch mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_COLUMNS = ("step", "CE_S", "CE_I", "CE_E", "L_SI", "L_align", "L_SE", "total")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 100.0
    gamma: float = 10.0
    m1: float = 0.3
    m2: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


def _rows(x: Tensor) -> Tensor:
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0]))
    return x


def _label_tensor(l_sim, n: int) -> np.ndarray:
    lab = np.asarray(l_sim, dtype=np.float64).reshape(-1)
    if lab.size == 1 and n > 1:
        lab = np.full(n, lab[0])
    if lab.shape != (n,) or not np.isin(lab, (0.0, 1.0)).all():
        raise ValueError("l_sim must be 0/1 with one entry per pair")
    return lab


def alignment_loss(f_image: Tensor, f_edge: Tensor) -> Tensor:
    """Mean squared Euclidean distance between paired rows."""
    a, b = _rows(f_image), _rows(f_edge)
    return T.mean(T.row_sq_distance(a, b))


def contrastive_loss(fa: Tensor, fb: Tensor, l_sim, margin: float) -> Tensor:
    """``l*d + (1-l)*max(0, margin - d)`` with ``d`` the plain Euclidean distance."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    a, b = _rows(fa), _rows(fb)
    lab = _label_tensor(l_sim, a.shape[0])
    d = T.row_distance(a, b)
    pos = T.elementwise_mul(d, T.constant(lab))
    hinge = T.relu(T.add_scalar(T.scale(d, -1.0), margin))
    neg = T.elementwise_mul(hinge, T.constant(1.0 - lab))
    return T.mean(T.add(pos, neg))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy_loss(logits: Tensor, onehot) -> Tensor:
    y = onehot if isinstance(onehot, Tensor) else T.constant(onehot)
    return T.cross_entropy(logits, y)


@dataclass
class LossComponents:
    ce_s: Tensor
    ce_i: Tensor
    ce_e: Tensor
    si: Tensor
    align: Tensor
    se: Tensor

    @property
    def ce_sum(self) -> float:
        return self.ce_s.item() + self.ce_i.item() + self.ce_e.item()

    def values(self) -> tuple[float, ...]:
        return tuple(t.item() for t in (self.ce_s, self.ce_i, self.ce_e, self.si, self.align, self.se))


def combine(ce_terms, si, align, se, weights: LossWeights):
    """Weighted sum in a fixed order; works on floats or tensors alike."""
    ce = list(ce_terms)
    if isinstance(si, Tensor):
        total = ce[0]
        for c in ce[1:]:
            total = T.add(total, c)
        total = T.add(total, T.scale(si, weights.alpha))
        total = T.add(total, T.scale(align, weights.beta))
        return T.add(total, T.scale(se, weights.gamma))
    total = ce[0]
    for c in ce[1:]:
        total = total + c
    total = total + si * weights.alpha
    total = total + align * weights.beta
    return total + se * weights.gamma


def hybrid_loss(out, categories, l_sim, weights: LossWeights) -> tuple[Tensor, LossComponents]:
    """Total objective for one batch of triple-branch outputs.

    ``out`` carries ``f_S, f_I, f_E`` (unit embeddings) and ``logits_S,
    logits_I, logits_E``. ``categories`` is either one label array shared by
    all three domains or a ``(sketch, image, edgemap)`` triple of arrays.
    """
    k = out.logits_S.shape[1]
    if isinstance(categories, tuple) and len(categories) == 3:
        cat_s, cat_i, cat_e = categories
    else:
        cat_s = cat_i = cat_e = categories
    comps = LossComponents(
        ce_s=cross_entropy_loss(out.logits_S, one_hot(cat_s, k)),
        ce_i=cross_entropy_loss(out.logits_I, one_hot(cat_i, k)),
        ce_e=cross_entropy_loss(out.logits_E, one_hot(cat_e, k)),
        si=contrastive_loss(out.f_S, out.f_I, l_sim, weights.m2),
        align=alignment_loss(out.f_I, out.f_E),
        se=contrastive_loss(out.f_S, out.f_E, l_sim, weights.m1),
    )
    total = combine((comps.ce_s, comps.ce_i, comps.ce_e), comps.si, comps.align, comps.se, weights)
    return total, comps


class LossLog:
    """Per-step component losses, written as CSV."""

    def __init__(self):
        self.rows: list[tuple] = []

    def append(self, step: int, values, total: float) -> None:
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError(f"log steps must increase: {step} after {self.rows[-1][0]}")
        self.rows.append((int(step), *map(float, values), float(total)))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        idx = LOG_COLUMNS.index(name)
        return np.array([r[idx] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])

    @classmethod
    def read_csv(cls, path) -> "LossLog":
        log = cls()
        with open(Path(path), newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows)
            if tuple(header) != LOG_COLUMNS:
                raise ValueError(f"unexpected log header {header}")
            for r in rows:
                log.append(int(r[0]), [float(v) for v in r[1:-1]], float(r[-1]))
        return log
