"""Per-layer KV token store with frame bookkeeping.

Keys are stored post-RoPE, values are never rotated. Every array carries a
leading head axis so that heads may keep different token subsets after
per-head Top-C selection; all heads always hold the same number of tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from .errors import CacheError, ConfigError
from .rope import TokenPosition


class Policy(str, Enum):
    FIFO = "fifo"
    SHALLOW_SINK = "shallow_sink"
    LONGLIVE_SINK = "longlive_sink"
    ROLLINGFORCING_SINK = "rollingforcing_sink"
    RANDOM_TOPC = "random_topc"
    DEEP_FORCING = "deep_forcing"


class QueryMode(str, Enum):
    PAST_ONLY = "past_only"
    DENOISING_ONLY = "denoising_only"
    BOTH = "both"


class ScoreMode(str, Enum):
    RAW_LOGIT = "raw_logit"
    SOFTMAX = "softmax"


class HeadMode(str, Enum):
    PER_HEAD = "per_head"
    SHARED = "shared"


class SinkAlignment(str, Enum):
    LITERAL = "literal"  # last sink frame lands on the first tail frame
    ADJACENT = "adjacent"  # last sink frame lands one before it


_ENUM_FIELDS = {
    "policy": Policy,
    "query_mode": QueryMode,
    "score_mode": ScoreMode,
    "head_mode": HeadMode,
    "sink_alignment": SinkAlignment,
}


@dataclass(frozen=True)
class CachePolicyConfig:
    """Frame budgets and policy switches for one cache.

    ``sink_frames`` (S), ``budget_frames`` (N), ``recent_frames`` (R) and
    ``max_window_frames`` (M) are counted in frames; the Top-C token capacity
    is ``(N - S - R) * tokens_per_frame``.
    """

    sink_frames: int = 10
    budget_frames: int = 16
    recent_frames: int = 4
    max_window_frames: int = 21
    tokens_per_frame: int = 64
    chunk_frames: int = 3
    policy: Policy = Policy.DEEP_FORCING
    query_mode: QueryMode = QueryMode.BOTH
    score_mode: ScoreMode = ScoreMode.RAW_LOGIT
    head_mode: HeadMode = HeadMode.PER_HEAD
    sink_alignment: SinkAlignment = SinkAlignment.LITERAL

    def __post_init__(self):
        for name, enum in _ENUM_FIELDS.items():
            value = getattr(self, name)
            if not isinstance(value, enum):
                try:
                    object.__setattr__(self, name, enum(value))
                except ValueError:
                    valid = ", ".join(e.value for e in enum)
                    raise ConfigError(f"unknown {name} {value!r}; valid: {valid}") from None
        for name in ("sink_frames", "budget_frames", "recent_frames", "max_window_frames",
                     "tokens_per_frame", "chunk_frames"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        s, n, r, m = self.sink_frames, self.budget_frames, self.recent_frames, self.max_window_frames
        if s < 0 or r < 0:
            raise ConfigError(f"sink_frames and recent_frames must be >= 0 (S={s}, R={r})")
        if s + r > n:
            raise ConfigError(f"S + R must not exceed N (S={s}, R={r}, N={n})")
        if n > m:
            raise ConfigError(f"N must not exceed M (N={n}, M={m})")
        if self.tokens_per_frame < 1:
            raise ConfigError(f"tokens_per_frame must be >= 1, got {self.tokens_per_frame}")
        if self.chunk_frames < 1:
            raise ConfigError(f"chunk_frames must be >= 1, got {self.chunk_frames}")

    @property
    def topc_capacity(self) -> int:
        return (self.budget_frames - self.sink_frames - self.recent_frames) * self.tokens_per_frame

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in _ENUM_FIELDS:
            out[name] = out[name].value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CachePolicyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class TokenRecord:
    """Read-only view of one cached token in one head."""

    token_id: int
    key: np.ndarray
    value: np.ndarray
    original_pos: TokenPosition
    effective_frame: int


@dataclass(frozen=True)
class Partition:
    """Half-open token-index intervals of the three cache regions."""

    sink: tuple[int, int]
    candidate: tuple[int, int]
    recent: tuple[int, int]


class LayerCache:
    """Ordered token store for one attention layer.

    Attributes:
        keys: ``(H, n, D)`` post-RoPE keys.
        values: ``(H, n, D)`` values, bit-identical to insertion.
        token_ids: ``(H, n)`` insertion identity of each token.
        positions: ``(H, n, 3)`` original ``(frame, h, w)``.
        effective_frames: ``(H, n)`` temporal index implied by all rotations.
    """

    _ARRAYS = ("keys", "values", "token_ids", "positions", "effective_frames")

    def __init__(self, tokens_per_frame: int, num_heads: int, head_dim: int):
        if tokens_per_frame < 1 or num_heads < 1 or head_dim < 1:
            raise CacheError("tokens_per_frame, num_heads and head_dim must be >= 1")
        self.tokens_per_frame = tokens_per_frame
        self.num_heads = num_heads
        self.head_dim = head_dim
        self._n = 0
        self._buf = self._allocate(0)
        self.next_frame: int | None = None
        self.next_id = 0

    def _allocate(self, capacity: int) -> dict[str, np.ndarray]:
        h, d = self.num_heads, self.head_dim
        return {
            "keys": np.empty((h, capacity, d)),
            "values": np.empty((h, capacity, d)),
            "token_ids": np.empty((h, capacity), dtype=np.int64),
            "positions": np.empty((h, capacity, 3), dtype=np.int64),
            "effective_frames": np.empty((h, capacity), dtype=np.int64),
        }

    def _reserve(self, size: int) -> None:
        cap = self._buf["keys"].shape[1]
        if size <= cap:
            return
        new = self._allocate(max(size, 2 * cap))
        for name, arr in new.items():
            arr[:, :self._n] = self._buf[name][:, :self._n]
        self._buf = new

    def _set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        n = arrays["keys"].shape[1]
        self._buf = self._allocate(n)
        for name, arr in arrays.items():
            self._buf[name][...] = arr
        self._n = n

    # Views into the backing buffers; writes through them mutate the cache.
    keys = property(lambda self: self._buf["keys"][:, :self._n])
    values = property(lambda self: self._buf["values"][:, :self._n])
    token_ids = property(lambda self: self._buf["token_ids"][:, :self._n])
    positions = property(lambda self: self._buf["positions"][:, :self._n])
    effective_frames = property(lambda self: self._buf["effective_frames"][:, :self._n])

    def __len__(self) -> int:
        return self._n

    @property
    def frame_count(self) -> int:
        """Cache size in frames' worth of tokens."""
        return len(self) // self.tokens_per_frame

    def frames(self, head: int = 0) -> np.ndarray:
        """Distinct original frames in cache order."""
        f = self.positions[head, :, 0]
        if f.size == 0:
            return f
        starts = np.flatnonzero(np.r_[True, f[1:] != f[:-1]])
        return f[starts]

    def frame_starts(self, head: int = 0) -> dict[int, int]:
        """Map from original frame to the token offset where it starts."""
        f = self.positions[head, :, 0]
        if f.size == 0:
            return {}
        starts = np.flatnonzero(np.r_[True, f[1:] != f[:-1]])
        return {int(f[i]): int(i) for i in starts}

    def records(self, head: int = 0) -> list[TokenRecord]:
        return [
            TokenRecord(
                token_id=int(self.token_ids[head, i]),
                key=self.keys[head, i].copy(),
                value=self.values[head, i].copy(),
                original_pos=TokenPosition(*(int(x) for x in self.positions[head, i])),
                effective_frame=int(self.effective_frames[head, i]),
            )
            for i in range(len(self))
        ]

    def append_chunk(self, keys, values, positions) -> None:
        """Append whole frames of tokens after the current last frame.

        Args:
            keys: ``(H, T, D)`` post-RoPE keys (``(T, D)`` allowed when H == 1).
            values: same shape as ``keys``.
            positions: ``(T, 3)`` original positions, frame-major and
                contiguous, starting right after the last appended frame.
        """
        keys = self._as_heads(keys, "keys")
        values = self._as_heads(values, "values")
        if len(positions) and isinstance(positions[0], TokenPosition):
            positions = [p.as_tuple() for p in positions]
        positions = np.asarray(positions, dtype=np.int64)
        t = keys.shape[1]
        f = self.tokens_per_frame
        if values.shape != keys.shape:
            raise CacheError(f"keys {keys.shape} and values {values.shape} differ")
        if positions.shape != (t, 3):
            raise CacheError(f"positions shape {positions.shape} != ({t}, 3)")
        if t == 0 or t % f:
            raise CacheError(f"chunk of {t} tokens is not a positive multiple of F={f}")
        if (positions < 0).any():
            raise CacheError("positions must be >= 0")
        frames = positions[:, 0].reshape(-1, f)
        if (frames != frames[:, :1]).any():
            raise CacheError("each frame must contribute exactly F consecutive tokens")
        first = int(frames[0, 0])
        expected = np.arange(first, first + frames.shape[0])
        if (frames[:, 0] != expected).any():
            raise CacheError("chunk frames are not contiguous")
        if self.next_frame is not None and first != self.next_frame:
            raise CacheError(f"chunk starts at frame {first}, expected {self.next_frame}")

        n = self._n
        self._reserve(n + t)
        b = self._buf
        b["keys"][:, n:n + t] = keys
        b["values"][:, n:n + t] = values
        b["token_ids"][:, n:n + t] = np.arange(self.next_id, self.next_id + t)
        b["positions"][:, n:n + t] = positions
        b["effective_frames"][:, n:n + t] = positions[:, 0]
        self._n = n + t
        self.next_id += t
        self.next_frame = int(expected[-1]) + 1

    def _as_heads(self, arr, name: str) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2 and self.num_heads == 1:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] != self.num_heads or arr.shape[2] != self.head_dim:
            raise CacheError(
                f"{name} must be (H={self.num_heads}, T, D={self.head_dim}), got {arr.shape}")
        return arr

    def partition(self, cfg: CachePolicyConfig) -> Partition:
        """Split into first-S-frames sink, last-R-frames recent, and candidates between."""
        s, r = cfg.sink_frames, cfg.recent_frames
        starts = sorted(self.frame_starts().values())
        if len(starts) < s + r:
            raise CacheError(f"cache holds {len(starts)} frames, partition needs S+R={s + r}")
        n = len(self)
        sink_end = starts[s] if s < len(starts) else n
        recent_start = starts[len(starts) - r] if r else n
        return Partition(sink=(0, sink_end), candidate=(sink_end, recent_start),
                         recent=(recent_start, n))

    def keep(self, indices) -> None:
        """Retain the given token indices (``(K,)`` shared or ``(H, K)`` per head)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim == 1:
            idx = np.broadcast_to(idx, (self.num_heads, idx.size))
        if idx.shape[0] != self.num_heads:
            raise CacheError(f"keep indices need {self.num_heads} rows, got {idx.shape}")
        if idx.size and (np.diff(idx, axis=1) <= 0).any():
            raise CacheError("keep indices must be strictly increasing (order is preserved)")
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise CacheError("keep index out of range")
        rows = np.arange(self.num_heads)[:, None]
        k = idx.shape[1]
        for name in self._ARRAYS:
            arr = self._buf[name]
            arr[:, :k] = arr[:, :self._n][rows, idx]
        self._n = k

    def evict_fifo(self, frames: int) -> None:
        """Drop the oldest ``frames`` frames."""
        if frames < 0:
            raise CacheError(f"cannot evict {frames} frames")
        if frames == 0:
            return
        starts = sorted(self.frame_starts().values())
        if frames > len(starts):
            raise CacheError(f"cannot evict {frames} frames from a {len(starts)}-frame cache")
        cut = starts[frames] if frames < len(starts) else len(self)
        self.keep(np.arange(cut, len(self)))

    def copy(self) -> "LayerCache":
        other = LayerCache(self.tokens_per_frame, self.num_heads, self.head_dim)
        other._set_arrays({name: getattr(self, name) for name in self._ARRAYS})
        other.next_frame = self.next_frame
        other.next_id = self.next_id
        return other

    def to_dict(self) -> dict:
        """JSON-ready dump: positions, effective frames and vector payloads as number lists."""
        return {
            "tokens_per_frame": self.tokens_per_frame,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "next_frame": self.next_frame,
            "next_id": self.next_id,
            "heads": [
                {
                    "token_ids": self.token_ids[h].tolist(),
                    "positions": self.positions[h].tolist(),
                    "effective_frames": self.effective_frames[h].tolist(),
                    "keys": self.keys[h].tolist(),
                    "values": self.values[h].tolist(),
                }
                for h in range(self.num_heads)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerCache":
        cache = cls(data["tokens_per_frame"], data["num_heads"], data["head_dim"])
        heads = data["heads"]
        d = cache.head_dim
        cache._set_arrays({
            "keys": np.array([np.reshape(h["keys"], (-1, d)) for h in heads], dtype=np.float64),
            "values": np.array([np.reshape(h["values"], (-1, d)) for h in heads], dtype=np.float64),
            "token_ids": np.array([h["token_ids"] for h in heads], dtype=np.int64).reshape(len(heads), -1),
            "positions": np.array([np.reshape(h["positions"], (-1, 3)) for h in heads], dtype=np.int64),
            "effective_frames": np.array([h["effective_frames"] for h in heads],
                                         dtype=np.int64).reshape(len(heads), -1),
        })
        cache.next_frame = data["next_frame"]
        cache.next_id = data["next_id"]
        return cache


def append_chunk(cache: LayerCache, keys, values, positions) -> None:
    cache.append_chunk(keys, values, positions)


def partition(cache: LayerCache, cfg: CachePolicyConfig) -> Partition:
    return cache.partition(cfg)


def evict_fifo(cache: LayerCache, frames: int) -> None:
    cache.evict_fifo(frames)


class KVCache:
    """One :class:`LayerCache` per attention layer, each compressed independently."""

    def __init__(self, num_layers: int, tokens_per_frame: int, num_heads: int, head_dim: int):
        self.layers = [LayerCache(tokens_per_frame, num_heads, head_dim) for _ in range(num_layers)]

    def __len__(self) -> int:
        return len(self.layers[0])

    def __getitem__(self, layer: int) -> LayerCache:
        return self.layers[layer]

    def __iter__(self):
        return iter(self.layers)

    @property
    def frame_count(self) -> int:
        return self.layers[0].frame_count

    def append_chunk(self, keys, values, positions) -> None:
        """``keys``/``values`` are ``(L, H, T, D)``; positions are shared by all layers."""
        for layer, k, v in zip(self.layers, keys, values):
            layer.append_chunk(k, v, positions)

    def to_dict(self) -> dict:
        return {"layers": [layer.to_dict() for layer in self.layers]}
