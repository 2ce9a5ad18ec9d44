"""Exact cosine top-k retrieval over an embedding gallery."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write
from .exceptions import ConfigError, ShapeError


def _unit(rows, eps=1e-12):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.maximum(np.linalg.norm(rows, axis=-1, keepdims=True), eps)


@dataclass
class EmbeddingIndex:
    """Unit-normalized gallery embeddings, their labels and (optionally) images."""

    matrix: np.ndarray
    labels: np.ndarray
    images: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = _unit(self.matrix)
        self.labels = np.asarray(self.labels)
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.labels):
            raise ShapeError(f"index needs (N, D) embeddings and N labels, got {self.matrix.shape}, {self.labels.shape}")
        if self.images is not None and len(self.images) != len(self.labels):
            raise ShapeError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)


def build_index(model, ds, batch_size=256) -> EmbeddingIndex:
    """Embed a dataset with an infer-mode forward pass."""
    if len(ds) == 0:
        raise ConfigError("cannot index an empty dataset")
    return EmbeddingIndex(model.embed(ds.images, batch_size), ds.labels, ds.images)


def _ranked(idx: EmbeddingIndex, queries, k, exclude):
    q = _unit(np.atleast_2d(queries))
    if q.shape[1] != idx.matrix.shape[1]:
        raise ShapeError(f"query dimension {q.shape[1]} != index dimension {idx.matrix.shape[1]}")
    sims = q @ idx.matrix.T
    available = len(idx) - (0 if exclude is None else 1)
    if not 1 <= k <= available:
        raise ConfigError(f"k must be in [1, {available}], got {k}")
    if exclude is not None:
        exclude = np.asarray(exclude)
        rows = np.flatnonzero(exclude >= 0)
        sims[rows, exclude[rows]] = -np.inf
    # stable sort on -sim keeps the lower gallery index first among ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def query_topk(idx: EmbeddingIndex, query, k, exclude: int | None = None):
    """Top-``k`` ``(gallery_row, similarity)`` pairs, most similar first.

    ``exclude`` drops one gallery row, used when the query is itself in the
    gallery.
    """
    order, sims = _ranked(idx, query, k, None if exclude is None else [exclude])
    return [(int(i), float(s)) for i, s in zip(order[0], sims[0])]


def recall_at_k(idx: EmbeddingIndex, queries, query_labels, k, exclude=None) -> float:
    """Fraction of queries with a same-label gallery item among the top ``k``.

    ``exclude`` gives, per query, its own gallery row (or -1) so that
    self-matches do not count.
    """
    query_labels = np.asarray(query_labels)
    if len(query_labels) == 0:
        raise ConfigError("no queries")
    order, _ = _ranked(idx, queries, k, exclude)
    hits = (idx.labels[order] == query_labels[:, None]).any(axis=1)
    return float(hits.mean())


def results_csv(idx: EmbeddingIndex, query_ids, query_labels, results) -> str:
    """Rows of (query_id, rank, gallery_id, similarity, label_match)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "rank", "gallery_id", "similarity", "label_match"])
    for qid, qlab, hits in zip(query_ids, query_labels, results):
        for rank, (gid, sim) in enumerate(hits, start=1):
            w.writerow([qid, rank, gid, f"{sim:.6f}", int(idx.labels[gid] == qlab)])
    return buf.getvalue()


def _rgb(img):
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    return np.repeat(img, 3, axis=-1) if img.shape[-1] == 1 else img


def prediction_grid(idx: EmbeddingIndex, query_images, query_embeddings, k, exclude=None):
    """Montage array: one row per query, the query then its ``k`` neighbours.

    Returns ``(montage, results)`` where ``results`` holds each query's
    :func:`query_topk` output.
    """
    if idx.images is None:
        raise ConfigError("index has no image source for the montage")
    query_images = np.asarray(query_images)
    results = []
    rows = []
    for n, emb in enumerate(np.atleast_2d(query_embeddings)):
        ex = None if exclude is None or exclude[n] < 0 else int(exclude[n])
        hits = query_topk(idx, emb, k, exclude=ex)
        results.append(hits)
        cells = [_rgb(query_images[n])] + [_rgb(idx.images[g]) for g, _ in hits]
        rows.append(np.concatenate(cells, axis=1))
    return np.concatenate(rows, axis=0), results


def export_prediction_grid(idx: EmbeddingIndex, query_images, query_embeddings, k, out_path,
                           exclude=None):
    """Write the montage as a binary PPM; returns the per-query results."""
    from PIL import Image

    montage, results = prediction_grid(idx, query_images, query_embeddings, k, exclude)
    buf = io.BytesIO()
    Image.fromarray(montage).save(buf, format="PPM")
    atomic_write(out_path, buf.getvalue())
    return results
