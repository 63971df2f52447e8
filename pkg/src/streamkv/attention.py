"""Reference attention and attention-mass measurements over a cache."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .cache import LayerCache


@dataclass
class AttentionProfile:
    """Mean softmax mass a query chunk puts on each effective frame."""

    per_frame_weight: dict[int, float]
    layer: int | None = None
    head: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "weight"])
        for frame in sorted(self.per_frame_weight):
            writer.writerow([frame, repr(float(self.per_frame_weight[frame]))])
        return buf.getvalue()


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(queries, keys, scale: float | None = None) -> np.ndarray:
    """Row-stochastic ``softmax(q . k * scale)`` of shape ``(..., nq, nk)``."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return softmax(q @ np.swapaxes(k, -1, -2) * scale)


def attend(queries, keys, values, scale: float | None = None) -> np.ndarray:
    """Scaled dot-product attention; ``scale`` defaults to ``1/sqrt(D)``."""
    v = np.asarray(values, dtype=np.float64)
    k = np.asarray(keys)
    if k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"keys {k.shape} and values {v.shape} disagree on token count")
    return attention_weights(queries, keys, scale) @ v


def frame_attention_profile(query_chunk, cache: LayerCache, head: int = 0,
                            scale: float | None = None, layer: int | None = None
                            ) -> AttentionProfile:
    """Average attention from ``query_chunk`` (``(nq, D)``) summed per effective frame."""
    if len(cache) == 0:
        raise ValueError("cannot profile an empty cache")
    w = attention_weights(query_chunk, cache.keys[head], scale).mean(axis=0)
    frames = cache.effective_frames[head]
    uniq, inverse = np.unique(frames, return_inverse=True)
    sums = np.bincount(inverse, weights=w, minlength=uniq.size)
    return AttentionProfile({int(f): float(s) for f, s in zip(uniq, sums)}, layer=layer, head=head)


def retained_mass(query_chunk, full_keys, retained_indices, scale: float | None = None) -> float:
    """Fraction of full-key-set attention mass that lands on ``retained_indices``.

    Softmax is taken over all of ``full_keys`` (``(n, D)``); the mass on the
    retained subset is averaged over the ``(nq, D)`` queries.
    """
    k = np.asarray(full_keys)
    idx = np.asarray(retained_indices, dtype=np.int64).ravel()
    n = k.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"retained index out of range for {n} keys")
    if idx.size == 0:
        return 0.0
    idx = np.unique(idx)
    w = attention_weights(query_chunk, k, scale)
    return float(w[..., idx].sum(axis=-1).mean())


def retained_mass_batched(queries: np.ndarray, keys: np.ndarray, retained: np.ndarray,
                          scale: float) -> np.ndarray:
    """Batched :func:`retained_mass` over leading axes.

    Args:
        queries: ``(B, q, D)``.
        keys: ``(B, n, D)``, the full key set per batch entry.
        retained: ``(B, k)`` distinct indices into ``keys`` per batch entry.

    Returns:
        ``(B,)`` mean retained fraction. Computed in the dtype of the inputs.
    """
    out = np.empty(len(queries), dtype=np.float64)
    for b in range(len(queries)):
        # rows stay contiguous for the reductions; pass keys as a transposed
        # view of a (D, n) buffer to avoid a copy inside the product
        w = queries[b] @ keys[b].T
        w *= scale
        w -= w.max(axis=1, keepdims=True)
        np.exp(w, out=w)
        out[b] = np.mean(w[:, retained[b]].sum(axis=1) / w.sum(axis=1))
    return out
