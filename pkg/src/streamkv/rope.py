"""Multi-axis rotary position embedding with incremental temporal rotation.

The head dimension is split into three contiguous blocks ``[temporal | height |
width]``. Inside each block, adjacent element pairs ``(x[2i], x[2i+1])`` are
rotated by ``position_axis * freq_i`` (interleaved layout).

Because rotations compose additively, a key that was embedded at frame ``tau``
can be moved to frame ``tau + delta`` by rotating only its temporal block by
``delta * freq``. That is what :func:`rotate_temporal` does; it never touches
the spatial blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class TokenPosition:
    """Original 3D position of a token: frame index plus spatial grid cell."""

    frame: int
    h: int = 0
    w: int = 0

    def __post_init__(self):
        if min(self.frame, self.h, self.w) < 0:
            raise ValueError(f"position indices must be >= 0, got {self}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.frame, self.h, self.w)


@dataclass(frozen=True, eq=False)
class RopeFrequencies:
    """Per-axis angular frequency tables.

    Attributes:
        temporal_freqs: ``d_t / 2`` frequencies for the frame axis.
        height_freqs: ``d_h / 2`` frequencies for the height axis.
        width_freqs: ``d_w / 2`` frequencies for the width axis.
        dim_split: ``(d_t, d_h, d_w)``.
        base: frequency base used to build the tables.
    """

    temporal_freqs: np.ndarray
    height_freqs: np.ndarray
    width_freqs: np.ndarray
    dim_split: tuple[int, int, int]
    base: float

    @property
    def head_dim(self) -> int:
        return sum(self.dim_split)

    @property
    def temporal_dim(self) -> int:
        return self.dim_split[0]


def default_split(head_dim: int) -> tuple[int, int, int]:
    """Spatial axes get the largest even number <= head_dim // 3; time gets the rest."""
    if head_dim <= 0 or head_dim % 2:
        raise ValueError(f"head_dim must be a positive even integer, got {head_dim}")
    spatial = (head_dim // 3) // 2 * 2
    return (head_dim - 2 * spatial, spatial, spatial)


def _axis_freqs(dim: int, base: float) -> np.ndarray:
    return base ** (-2.0 * np.arange(dim // 2) / dim) if dim else np.empty(0)


def build_frequencies(
    head_dim: int,
    dim_split: tuple[int, int, int] | None = None,
    base: float = DEFAULT_BASE,
) -> RopeFrequencies:
    """Build the rotary frequency tables for a ``(d_t, d_h, d_w)`` split.

    Frequency ``i`` of an axis with ``d`` dimensions is ``base ** (-2 i / d)``.

    Raises:
        ValueError: if a split part is odd or negative, the parts do not sum
            to ``head_dim``, or ``base <= 0``.
    """
    if base <= 0:
        raise ValueError(f"base must be positive, got {base}")
    if dim_split is None:
        dim_split = default_split(head_dim)
    dim_split = tuple(int(d) for d in dim_split)
    if len(dim_split) != 3:
        raise ValueError(f"dim_split needs three parts, got {dim_split}")
    for d in dim_split:
        if d < 0 or d % 2:
            raise ValueError(f"dim_split parts must be even and >= 0, got {dim_split}")
    if sum(dim_split) != head_dim:
        raise ValueError(f"dim_split {dim_split} does not sum to head_dim {head_dim}")
    d_t, d_h, d_w = dim_split
    return RopeFrequencies(
        temporal_freqs=_axis_freqs(d_t, base),
        height_freqs=_axis_freqs(d_h, base),
        width_freqs=_axis_freqs(d_w, base),
        dim_split=dim_split,
        base=float(base),
    )


def _rotate_pairs(block: np.ndarray, angles: np.ndarray) -> np.ndarray:
    # block: (..., 2k) interleaved pairs, angles: (..., k)
    even = block[..., 0::2]
    odd = block[..., 1::2]
    cos = np.cos(angles)
    sin = np.sin(angles)
    out = np.empty(np.broadcast_shapes(block.shape[:-1], angles.shape[:-1]) + block.shape[-1:])
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _as_positions(pos) -> np.ndarray:
    if isinstance(pos, TokenPosition):
        return np.asarray(pos.as_tuple(), dtype=np.float64)
    arr = np.asarray(pos, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"positions must have a trailing axis of size 3, got {arr.shape}")
    return arr


def apply_rope(x: np.ndarray, pos, freqs: RopeFrequencies) -> np.ndarray:
    """Rotate vectors by their 3D position.

    Args:
        x: array of shape ``(..., head_dim)``.
        pos: a :class:`TokenPosition` or an array of shape ``(..., 3)`` holding
            ``(frame, h, w)``; broadcast against ``x.shape[:-1]``.
        freqs: frequency tables from :func:`build_frequencies`.

    Returns:
        A new array with the same shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != freqs.head_dim:
        raise ValueError(f"vector length {x.shape[-1]} != head_dim {freqs.head_dim}")
    p = _as_positions(pos)
    angles = np.concatenate([
        p[..., 0, None] * freqs.temporal_freqs,
        p[..., 1, None] * freqs.height_freqs,
        p[..., 2, None] * freqs.width_freqs,
    ], axis=-1)
    return _rotate_pairs(x, angles)


def rotate_temporal(keys: np.ndarray, delta, freqs: RopeFrequencies) -> np.ndarray:
    """Shift already-embedded keys by ``delta`` frames along the time axis.

    ``rotate_temporal(apply_rope(k, (t, h, w)), d)`` equals
    ``apply_rope(k, (t + d, h, w))`` up to rounding. Height and width blocks are
    copied through unchanged.

    Args:
        keys: array of shape ``(..., head_dim)``.
        delta: integer frame offset, scalar or broadcastable to
            ``keys.shape[:-1]``. May be negative.
        freqs: frequency tables the keys were embedded with.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[-1] != freqs.head_dim:
        raise ValueError(f"vector length {keys.shape[-1]} != head_dim {freqs.head_dim}")
    out = keys.copy()
    d_t = freqs.temporal_dim
    if d_t == 0:
        return out
    delta = np.asarray(delta, dtype=np.float64)
    if not np.any(delta):
        return out
    angles = np.broadcast_to(delta, keys.shape[:-1])[..., None] * freqs.temporal_freqs
    out[..., :d_t] = _rotate_pairs(keys[..., :d_t], angles)
    return out
