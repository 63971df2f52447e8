"""Eviction and temporal re-alignment policies.

``deep_forcing`` keeps a deep sink whose keys are rotated forward so that it
sits right before the tail of the window, scores the middle of the window by
aggregated query-key logits, keeps the Top-C tokens, and compacts their
temporal phases into a gap-free timeline in front of the recent frames.

Baselines: plain FIFO rolling, two 3-frame sinks without re-alignment
(``shallow_sink``, ``longlive_sink``), a 3-frame sink that is re-indexed next
to the tail on every roll (``rollingforcing_sink``), and Top-C with standard
normal scores (``random_topc``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import (CachePolicyConfig, HeadMode, LayerCache, Policy, QueryMode, ScoreMode,
                    SinkAlignment)
from .errors import CacheError, TriggerError
from .rope import RopeFrequencies, rotate_temporal

SCHEDULE = (1000, 750, 500, 250)
FIRST_TIMESTEP = SCHEDULE[0]
BASELINE_SINK_FRAMES = 3


@dataclass
class ImportanceVector:
    """Scores for candidate tokens; ``scores`` is ``(C,)`` or ``(H, C)``."""

    scores: np.ndarray
    candidate_index_map: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.candidate_index_map = np.asarray(self.candidate_index_map, dtype=np.int64)
        if self.scores.shape[-1] != self.candidate_index_map.size:
            raise ValueError("scores and candidate_index_map lengths differ")
        if not np.isfinite(self.scores).all():
            raise ValueError("importance scores must be finite")


@dataclass
class CompressionReport:
    """What one policy step did to one layer cache.

    Index arrays refer to token positions in the cache *before* the step and
    have a leading head axis.
    """

    policy: str
    selected_token_indices: np.ndarray
    evicted_token_indices: np.ndarray
    delta_sink: np.ndarray
    delta_top: np.ndarray
    pre_size: int
    post_size: int
    candidate_range: tuple[int, int] = (0, 0)
    layer: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_evicted: bool = True) -> dict:
        out = {
            "policy": self.policy,
            "layer": self.layer,
            "pre_size": self.pre_size,
            "post_size": self.post_size,
            "candidate_range": list(self.candidate_range),
            "selected_token_indices": self.selected_token_indices.tolist(),
            "evicted_count": int(self.evicted_token_indices.shape[-1]),
            "delta_sink": self.delta_sink.tolist(),
            "delta_top": self.delta_top.tolist(),
        }
        if include_evicted:
            out["evicted_token_indices"] = self.evicted_token_indices.tolist()
        return out


def _empty(h: int) -> np.ndarray:
    return np.empty((h, 0), dtype=np.int64)


def compute_delta_sink(s_tail: int, s_sink: int) -> int:
    """Frames the sink must move so its last frame lands on ``s_tail``."""
    if s_tail < s_sink:
        raise ValueError(f"s_tail={s_tail} precedes s_sink={s_sink}")
    return int(s_tail - s_sink)


def _realign_sink(cache: LayerCache, sink_end: int, s_tail, adjacent: bool,
                  freqs: RopeFrequencies) -> np.ndarray:
    # s_tail: (H,) first tail frame per head
    h = cache.num_heads
    deltas = np.zeros(h, dtype=np.int64)
    if sink_end == 0:
        return deltas
    for head in range(h):
        target = int(s_tail[head]) - (1 if adjacent else 0)
        deltas[head] = compute_delta_sink(target, int(cache.effective_frames[head, sink_end - 1]))
    if deltas.any():
        cache.keys[:, :sink_end] = rotate_temporal(cache.keys[:, :sink_end], deltas[:, None], freqs)
        cache.effective_frames[:, :sink_end] += deltas[:, None]
    return deltas


def deep_sink_realign(cache: LayerCache, cfg: CachePolicyConfig,
                      freqs: RopeFrequencies) -> np.ndarray:
    """Rotate sink keys so the last sink frame sits on the first tail frame.

    Returns the applied per-head frame increments. Values and spatial key
    blocks are untouched; calling twice without tail movement is a no-op the
    second time.
    """
    part = cache.partition(cfg)
    sink_end = part.sink[1]
    if sink_end == 0:
        return np.zeros(cache.num_heads, dtype=np.int64)
    if sink_end >= len(cache):
        raise CacheError("deep sink realignment needs a non-empty tail")
    return _realign_sink(cache, sink_end, cache.effective_frames[:, sink_end],
                         cfg.sink_alignment is SinkAlignment.ADJACENT, freqs)


def _as_heads(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    return x, False


def importance_scores(recent_queries, denoising_queries, candidate_keys,
                      mode: QueryMode | str = QueryMode.BOTH,
                      score_mode: ScoreMode | str = ScoreMode.RAW_LOGIT, *,
                      full_keys=None, candidate_slice: tuple[int, int] | None = None,
                      scale: float | None = None) -> ImportanceVector:
    """Aggregate query-key scores for each candidate key.

    In ``raw_logit`` mode the score of key ``j`` is ``sum_r q_r . k_j`` over
    the contributing queries. In ``softmax`` mode each query row is
    softmax-normalised over ``full_keys`` (the whole cache, scaled by
    ``scale``) before the candidate columns are summed.

    Query and key blocks are ``(n, D)`` or ``(H, n, D)``; the returned scores
    follow the same head convention.
    """
    mode = QueryMode(mode)
    score_mode = ScoreMode(score_mode)
    keys, squeeze = _as_heads(candidate_keys)
    d = keys.shape[-1]
    blocks = []
    if mode in (QueryMode.PAST_ONLY, QueryMode.BOTH) and recent_queries is not None:
        blocks.append(_as_heads(recent_queries)[0])
    if mode in (QueryMode.DENOISING_ONLY, QueryMode.BOTH) and denoising_queries is not None:
        blocks.append(_as_heads(denoising_queries)[0])
    blocks = [b for b in blocks if b.shape[-2] > 0]
    if not blocks:
        raise ValueError(f"no contributing queries for query_mode={mode.value}")
    for b in blocks:
        if b.shape[-1] != d:
            raise ValueError(f"query dim {b.shape[-1]} != key dim {d}")
    queries = np.concatenate(blocks, axis=-2)

    if score_mode is ScoreMode.RAW_LOGIT:
        scores = np.einsum("hd,hkd->hk", queries.sum(axis=-2), keys)
        offset = 0 if candidate_slice is None else candidate_slice[0]
    else:
        if full_keys is None:
            full = keys
            candidate_slice = (0, keys.shape[-2])
        else:
            full = _as_heads(full_keys)[0]
            if candidate_slice is None:
                raise ValueError("softmax scoring over full_keys needs candidate_slice")
        scale = 1.0 / np.sqrt(d) if scale is None else scale
        logits = np.einsum("hqd,hkd->hqk", queries, full) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=-1, keepdims=True)
        lo, hi = candidate_slice
        scores = weights[..., lo:hi].sum(axis=-2)
        offset = lo
    index_map = np.arange(offset, offset + scores.shape[-1])
    return ImportanceVector(scores[0] if squeeze else scores, index_map)


def top_c_select(phi, c_tok: int) -> np.ndarray:
    """Positions of the ``c_tok`` highest scores in ascending position order.

    Ties go to the earlier position. Accepts an :class:`ImportanceVector` or
    a plain ``(C,)`` / ``(H, C)`` score array; returned positions index into
    the score axis (not the cache).
    """
    if c_tok < 0:
        raise ValueError(f"c_tok must be >= 0, got {c_tok}")
    scores = phi.scores if isinstance(phi, ImportanceVector) else np.asarray(phi, dtype=np.float64)
    k = min(c_tok, scores.shape[-1])
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def _topc_targets(frames: np.ndarray, start: int) -> np.ndarray:
    # frames: original frames of selected tokens, in cache order
    if frames.size == 0:
        return frames.astype(np.int64)
    new_frame = np.r_[True, frames[1:] != frames[:-1]]
    return start + np.cumsum(new_frame) - 1


def unify_topc_rope(cache: LayerCache, selected, freqs: RopeFrequencies,
                    cfg: CachePolicyConfig, start_frame=None) -> np.ndarray:
    """Compact the temporal phase of selected tokens into consecutive frames.

    The k-th distinct original frame among ``selected`` is moved to effective
    frame ``start_frame + k``; by default ``start_frame`` is one past the
    sink's last effective frame. Each key's temporal block is rotated by its
    own ``target - current`` and ``effective_frames`` is updated.

    Args:
        selected: ``(K,)`` or ``(H, K)`` cache token indices in temporal order.
        start_frame: scalar or per-head ``(H,)`` first target frame.

    Returns:
        ``(H, K)`` per-token frame increments.
    """
    sel = np.asarray(selected, dtype=np.int64)
    if sel.ndim == 1:
        sel = np.broadcast_to(sel, (cache.num_heads, sel.size))
    h = cache.num_heads
    if start_frame is None:
        sink_end = cache.partition(cfg).sink[1]
        start_frame = (cache.effective_frames[:, sink_end - 1] + 1 if sink_end
                       else np.zeros(h, dtype=np.int64))
    start = np.broadcast_to(np.asarray(start_frame, dtype=np.int64), (h,))
    deltas = np.zeros(sel.shape, dtype=np.int64)
    for head in range(h):
        idx = sel[head]
        if idx.size == 0:
            continue
        targets = _topc_targets(cache.positions[head, idx, 0], int(start[head]))
        deltas[head] = targets - cache.effective_frames[head, idx]
        cache.keys[head, idx] = rotate_temporal(cache.keys[head, idx], deltas[head], freqs)
        cache.effective_frames[head, idx] = targets
    return deltas


def _check_trigger(cache: LayerCache, cfg: CachePolicyConfig, timestep: int) -> None:
    if cache.frame_count < cfg.max_window_frames:
        raise TriggerError(
            f"window not full: {cache.frame_count} frames < M={cfg.max_window_frames}")
    if timestep != FIRST_TIMESTEP:
        raise TriggerError(f"compression only runs at t={FIRST_TIMESTEP}, got t={timestep}")


def _compress_with_scores(cache: LayerCache, cfg: CachePolicyConfig, freqs: RopeFrequencies,
                          score_fn, policy_name: str) -> CompressionReport:
    part = cache.partition(cfg)
    h, n = cache.num_heads, len(cache)
    lo, hi = part.candidate
    rlo = part.recent[0]
    c_tok = cfg.topc_capacity
    if hi > lo and c_tok > 0:
        scores = np.asarray(score_fn(lo, hi), dtype=np.float64)
        if scores.ndim == 1:
            scores = np.broadcast_to(scores, (h, hi - lo))
        local = top_c_select(scores, c_tok)
        selected = local + lo
    else:
        selected = _empty(h)
    k = selected.shape[1]

    # Anchor the timeline on the recent block: Top-C ends right before it and
    # the sink ends on the first tail frame.
    if rlo < n:
        r0 = cache.effective_frames[:, rlo]
    else:
        r0 = cache.effective_frames[:, -1] + 1
    distinct = np.array([
        np.count_nonzero(np.diff(cache.positions[head, selected[head], 0])) + 1 if k else 0
        for head in range(h)
    ], dtype=np.int64)
    top_start = r0 - distinct
    delta_top = unify_topc_rope(cache, selected, freqs, cfg, start_frame=top_start)

    keep = np.concatenate([
        np.broadcast_to(np.arange(0, part.sink[1]), (h, part.sink[1])),
        selected,
        np.broadcast_to(np.arange(rlo, n), (h, n - rlo)),
    ], axis=1)
    evict_mask = np.ones((h, n), dtype=bool)
    evict_mask[np.arange(h)[:, None], keep] = False
    evicted = np.array([np.flatnonzero(evict_mask[head]) for head in range(h)],
                       dtype=np.int64).reshape(h, -1)
    cache.keep(keep)
    delta_sink = _realign_sink(cache, part.sink[1], top_start,
                               cfg.sink_alignment is SinkAlignment.ADJACENT, freqs)
    return CompressionReport(
        policy=policy_name,
        selected_token_indices=selected,
        evicted_token_indices=evicted,
        delta_sink=delta_sink,
        delta_top=delta_top,
        pre_size=n,
        post_size=len(cache),
        candidate_range=(lo, hi),
    )


def participative_compress(cache: LayerCache, recent_queries, denoising_queries,
                           cfg: CachePolicyConfig, freqs: RopeFrequencies,
                           timestep: int = FIRST_TIMESTEP) -> CompressionReport:
    """Compress a full window to ``[sink || Top-C || recent]`` with Deep Sink.

    Must be called only at the first denoising timestep of a chunk while the
    cache holds at least ``M`` frames; the selection is then reused for the
    remaining timesteps of that chunk.

    Args:
        recent_queries: ``(H, q, D)`` clean queries of the most recent frames.
        denoising_queries: ``(H, q', D)`` queries of the chunk being denoised.

    Raises:
        TriggerError: window not full or not the first timestep.
    """
    _check_trigger(cache, cfg, timestep)

    def score(lo, hi):
        phi = importance_scores(
            recent_queries, denoising_queries, cache.keys[:, lo:hi],
            cfg.query_mode, cfg.score_mode,
            full_keys=cache.keys, candidate_slice=(lo, hi))
        scores = phi.scores.reshape(cache.num_heads, -1)
        if cfg.head_mode is HeadMode.SHARED:
            return scores.sum(axis=0)
        return scores

    return _compress_with_scores(cache, cfg, freqs, score, Policy.DEEP_FORCING.value)


def _roll_with_sink(cache: LayerCache, cfg: CachePolicyConfig, sink_frames: int,
                    freqs: RopeFrequencies | None, policy_name: str,
                    realign: bool) -> CompressionReport:
    h, n = cache.num_heads, len(cache)
    starts = sorted(cache.frame_starts().values())
    overflow = cache.frame_count + cfg.chunk_frames - cfg.max_window_frames
    sink_frames = min(sink_frames, len(starts))
    drop = max(0, min(overflow, len(starts) - sink_frames))
    sink_end = starts[sink_frames] if sink_frames < len(starts) else n
    cut = starts[sink_frames + drop] if sink_frames + drop < len(starts) else n
    keep = np.r_[np.arange(sink_end), np.arange(cut, n)]
    evicted = np.broadcast_to(np.arange(sink_end, cut), (h, cut - sink_end))
    cache.keep(keep)
    delta_sink = np.zeros(h, dtype=np.int64)
    if realign and sink_end and len(cache) > sink_end:
        # re-embedding raw keys over the window == rotating the sink next to the tail
        delta_sink = _realign_sink(cache, sink_end, cache.effective_frames[:, sink_end],
                                   True, freqs)
    return CompressionReport(
        policy=policy_name,
        selected_token_indices=_empty(h),
        evicted_token_indices=np.array(evicted, dtype=np.int64),
        delta_sink=delta_sink,
        delta_top=_empty(h),
        pre_size=n,
        post_size=len(cache),
        candidate_range=(sink_end, cut),
    )


def baseline_step(cache: LayerCache, cfg: CachePolicyConfig, rng: np.random.Generator | None,
                  freqs: RopeFrequencies | None = None,
                  timestep: int = FIRST_TIMESTEP) -> CompressionReport:
    """Run one step of a baseline policy on a full window.

    Rolling baselines evict just enough of the oldest non-sink frames for the
    next chunk to fit in ``M`` frames. ``random_topc`` is the full
    Deep Forcing pipeline with ``N(0, 1)`` scores drawn from ``rng``.
    """
    policy = cfg.policy
    _check_trigger(cache, cfg, timestep)
    if policy is Policy.FIFO:
        return _roll_with_sink(cache, cfg, 0, None, policy.value, realign=False)
    if policy in (Policy.SHALLOW_SINK, Policy.LONGLIVE_SINK):
        return _roll_with_sink(cache, cfg, BASELINE_SINK_FRAMES, None, policy.value, realign=False)
    if policy is Policy.ROLLINGFORCING_SINK:
        if freqs is None:
            raise ValueError("rollingforcing_sink needs rope frequencies")
        return _roll_with_sink(cache, cfg, BASELINE_SINK_FRAMES, freqs, policy.value, realign=True)
    if policy is Policy.RANDOM_TOPC:
        if rng is None or freqs is None:
            raise ValueError("random_topc needs an rng and rope frequencies")
        h = cache.num_heads

        def score(lo, hi):
            if cfg.head_mode is HeadMode.SHARED:
                return rng.standard_normal(hi - lo)
            return rng.standard_normal((h, hi - lo))

        return _compress_with_scores(cache, cfg, freqs, score, policy.value)
    raise ValueError(f"unknown baseline policy {policy!r}")


def policy_step(cache: LayerCache, cfg: CachePolicyConfig, freqs: RopeFrequencies, *,
                recent_queries=None, denoising_queries=None,
                rng: np.random.Generator | None = None,
                timestep: int = FIRST_TIMESTEP) -> CompressionReport:
    """Dispatch to :func:`participative_compress` or :func:`baseline_step`."""
    if cfg.policy is Policy.DEEP_FORCING:
        return participative_compress(cache, recent_queries, denoising_queries, cfg, freqs,
                                      timestep)
    return baseline_step(cache, cfg, rng, freqs, timestep)
