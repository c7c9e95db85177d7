"""Cosine-distance ranking of a gallery against sketch queries, scored by MAP."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, network_input
from .model import Semi3Model

SOURCES = ("image", "edgemap")


class MissingCategoryWarning(UserWarning):
    """A query's category has no item in the gallery; its AP is 0."""


@dataclass(frozen=True)
class RetrievalIndex:
    features: np.ndarray
    categories: np.ndarray
    ids: np.ndarray
    source: str

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("gallery must hold at least one feature row")
        norms = np.linalg.norm(self.features, axis=1)
        if np.abs(norms - 1).max() > 1e-9:
            raise ValueError("gallery features must be unit-norm rows")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Ranking:
    query_id: int
    order: np.ndarray  # gallery positions, nearest first
    ids: np.ndarray
    distances: np.ndarray
    categories: np.ndarray


def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def embed_gallery(model: Semi3Model, images: np.ndarray, edgemaps: np.ndarray,
                  source: str = "image", batch_size: int = 64) -> np.ndarray:
    """Embed image/edgemap pairs; co-attention couples them, so both are needed."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    out = []
    with T.no_record():
        for sl in _batched(len(images), batch_size):
            (f_i, _), (f_e, _) = model.embed_pair(T.constant(network_input(images[sl])),
                                            T.constant(network_input(edgemaps[sl])))
            out.append((f_i if source == "image" else f_e).data)
    return np.concatenate(out)


def embed_sketches(model: Semi3Model, sketches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_record():
        for sl in _batched(len(sketches), batch_size):
            out.append(model.embed_sketch(T.constant(network_input(sketches[sl])))[0].data)
    return np.concatenate(out)


def build_index(model: Semi3Model, dataset: Dataset, source: str = "image") -> RetrievalIndex:
    """Gallery is every image in the dataset, train and test alike."""
    if len(dataset) == 0:
        raise ValueError("empty gallery")
    feats = embed_gallery(model, dataset.images, dataset.edgemaps, source)
    return RetrievalIndex(feats, dataset.categories.copy(), dataset.ids.copy(), source)


def cosine_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise T.DimensionError(f"cosine_distance: {a.shape} vs {b.shape}")
    return float(1.0 - np.dot(a, b))


def rank(index: RetrievalIndex, query, query_id: int = -1) -> Ranking:
    """Full gallery by ascending cosine distance; equal distances keep gallery order."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.features.shape[1],):
        raise T.DimensionError(f"query of shape {q.shape} for gallery width {index.features.shape[1]}")
    # row-wise product + sum keeps identical rows bitwise identical
    dist = 1.0 - (index.features * q).sum(axis=1)
    order = np.argsort(dist, kind="stable")
    return Ranking(query_id, order, index.ids[order], dist[order], index.categories[order])


def average_precision(relevant) -> float:
    """Mean of precision@k over the ranks ``k`` holding a relevant item."""
    rel = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def mean_average_precision(rankings, query_categories) -> float:
    aps = []
    for r, cat in zip(rankings, query_categories, strict=True):
        rel = r.categories == cat
        if not rel.any():
            warnings.warn(f"query {r.query_id}: category {cat} absent from gallery",
                          MissingCategoryWarning, stacklevel=2)
        aps.append(average_precision(rel))
    if not aps:
        raise ValueError("no rankings to score")
    return float(np.mean(aps))


def evaluate(model: Semi3Model, dataset: Dataset, source: str = "image") -> float:
    """MAP of test-split sketch queries against the full image gallery."""
    index = build_index(model, dataset, source)
    q_idx = dataset.split_indices("test")
    if q_idx.size == 0:
        raise ValueError("dataset has no test queries")
    queries = embed_sketches(model, dataset.sketches[q_idx])
    rankings = [rank(index, q, int(dataset.ids[i])) for q, i in zip(queries, q_idx)]
    return mean_average_precision(rankings, dataset.categories[q_idx])
