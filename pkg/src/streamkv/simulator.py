"""Synthetic chunk-wise autoregressive rollout.

A seeded surrogate stands in for the video generator: every chunk yields
post-RoPE queries, keys and values for ``chunk_frames * F`` tokens per layer
and head. Three stream kinds are available:

* ``gaussian``: i.i.d. standard normal raw vectors.
* ``clustered``: a handful of planted anchor keys whose logits against every
  later query exceed ordinary keys by ``anchor_gain`` on average.
* ``drifting``: queries and keys share a direction that rotates slowly with
  the frame index, so nearby frames attend to each other more.

Denoising queries at timestep ``t`` are the clean queries plus Gaussian jitter
of standard deviation ``jitter_scale * t / 1000``.

The rollout keeps a shadow of every key ever generated so that each policy's
cache can be scored by how much of the full-history attention mass it keeps.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .attention import frame_attention_profile, retained_mass_batched
from .cache import CachePolicyConfig, KVCache, Policy, QueryMode
from .errors import ConfigError
from .policy import SCHEDULE, policy_step
from .rope import RopeFrequencies, apply_rope, build_frequencies

logger = logging.getLogger(__name__)

CLEAN_TIMESTEP = 0
TIMESTEPS = SCHEDULE + (CLEAN_TIMESTEP,)
STREAM_KINDS = ("gaussian", "clustered", "drifting")

# SeedSequence stream tags
_RAW, _JITTER, _ANCHOR, _POLICY = 1, 2, 3, 4


@dataclass(frozen=True)
class StreamModel:
    """Seeded surrogate generator for per-layer query/key/value blocks."""

    kind: str = "clustered"
    seed: int = 0
    tokens_per_frame: int = 64
    head_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    anchor_count: int = 8
    anchor_gain: float = 10.0
    anchor_frames: tuple[int, int] = (10, 17)
    drift_rate: float = 0.05
    drift_gain: float = 3.0
    query_alignment: float = 4.0
    jitter_scale: float = 1.0
    rope_base: float = 10000.0
    dim_split: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise ConfigError(f"unknown stream kind {self.kind!r}; valid: {', '.join(STREAM_KINDS)}")
        for name in ("tokens_per_frame", "head_dim", "num_heads", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even")
        if self.anchor_count < 0:
            raise ConfigError("anchor_count must be >= 0")
        if self.kind == "clustered" and self.anchor_gain < 0:
            raise ConfigError("anchor_gain must be >= 0")
        lo, hi = self.anchor_frames
        if lo < 0 or hi <= lo:
            raise ConfigError(f"anchor_frames must be a non-empty range, got {self.anchor_frames}")
        if self.anchor_count > (hi - lo) * self.tokens_per_frame:
            raise ConfigError("more anchors than tokens in anchor_frames")
        if self.query_alignment <= 0:
            raise ConfigError("query_alignment must be > 0")
        if self.jitter_scale < 0:
            raise ConfigError("jitter_scale must be >= 0")
        object.__setattr__(self, "anchor_frames", tuple(self.anchor_frames))
        if self.dim_split is not None:
            object.__setattr__(self, "dim_split", tuple(self.dim_split))
        try:
            self.freqs
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, data: dict) -> "StreamModel":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["anchor_frames"] = list(self.anchor_frames)
        if self.dim_split is not None:
            out["dim_split"] = list(self.dim_split)
        return out

    @cached_property
    def freqs(self) -> RopeFrequencies:
        return build_frequencies(self.head_dim, self.dim_split, self.rope_base)

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)

    @cached_property
    def grid(self) -> tuple[int, int]:
        f = self.tokens_per_frame
        h = max(d for d in range(1, int(np.sqrt(f)) + 1) if f % d == 0)
        return h, f // h

    @cached_property
    def anchor_ids(self) -> np.ndarray:
        """Sorted token ids of planted anchors (empty unless clustered)."""
        if self.kind != "clustered" or self.anchor_count == 0:
            return np.empty(0, dtype=np.int64)
        lo, hi = self.anchor_frames
        f = self.tokens_per_frame
        rng = _rng(self.seed, _ANCHOR)
        picks = rng.choice((hi - lo) * f, size=self.anchor_count, replace=False)
        return np.sort(lo * f + picks).astype(np.int64)

    @cached_property
    def _directions(self) -> np.ndarray:
        # (L, H, 2, D) unit vectors on the lowest-frequency pair of each axis,
        # where RoPE barely rotates them across the horizons simulated here.
        d_t, d_h, d_w = self.freqs.dim_split
        support = [s for s, d in ((d_t, d_t), (d_t + d_h, d_h), (d_t + d_h + d_w, d_w)) if d]
        dims = np.array([i for end in support for i in (end - 2, end - 1)])
        rng = _rng(self.seed, _ANCHOR, 1)
        out = np.zeros((self.num_layers, self.num_heads, 2, self.head_dim))
        for l in range(self.num_layers):
            for h in range(self.num_heads):
                basis, _ = np.linalg.qr(rng.standard_normal((dims.size, 2)))
                out[l, h, :, dims] = basis
        return out


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class ChunkBlocks:
    """Post-RoPE blocks for one chunk: arrays are ``(L, H, T, D)``; positions ``(T, 3)``."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray


def chunk_positions(model: StreamModel, chunk_index: int, chunk_frames: int) -> np.ndarray:
    gh, gw = model.grid
    frames = np.arange(chunk_index * chunk_frames, (chunk_index + 1) * chunk_frames)
    hh, ww = np.divmod(np.arange(model.tokens_per_frame), gw)
    return np.stack([
        np.repeat(frames, model.tokens_per_frame),
        np.tile(hh, chunk_frames),
        np.tile(ww, chunk_frames),
    ], axis=1).astype(np.int64)


def _raw_chunk(model: StreamModel, chunk_index: int, chunk_frames: int):
    """Pre-RoPE clean queries, keys and values of one chunk."""
    L, H, D = model.num_layers, model.num_heads, model.head_dim
    t = chunk_frames * model.tokens_per_frame
    pos = chunk_positions(model, chunk_index, chunk_frames)
    q = np.empty((L, H, t, D))
    k = np.empty((L, H, t, D))
    v = np.empty((L, H, t, D))
    for l in range(L):
        # float32 draws are about twice as fast; widened on assignment
        rng = _rng(model.seed, _RAW, l, chunk_index)
        q[l] = rng.standard_normal((H, t, D), dtype=np.float32)
        k[l] = rng.standard_normal((H, t, D), dtype=np.float32)
        v[l] = rng.standard_normal((H, t, D), dtype=np.float32)
    dirs = model._directions
    a = model.query_alignment
    if model.kind == "clustered":
        q += a * dirs[:, :, None, 0, :]
        first_id = chunk_index * t
        local = model.anchor_ids[(model.anchor_ids >= first_id) & (model.anchor_ids < first_id + t)]
        if local.size:
            boost = model.anchor_gain / (a * model.scale)
            k[:, :, local - first_id, :] += boost * dirs[:, :, None, 0, :]
    elif model.kind == "drifting":
        theta = model.drift_rate * pos[:, 0]
        wave = (np.cos(theta)[:, None] * dirs[:, :, None, 0, :]
                + np.sin(theta)[:, None] * dirs[:, :, None, 1, :])
        q += a * wave
        k += model.drift_gain / (a * model.scale) * wave
    return q, k, v, pos


def _jitter(model: StreamModel, chunk_index: int, timestep: int, shape) -> np.ndarray:
    sigma = model.jitter_scale * timestep / 1000.0
    if sigma == 0:
        return np.zeros(shape)
    out = np.empty(shape)
    for l in range(shape[0]):
        out[l] = _rng(model.seed, _JITTER, l, chunk_index, timestep).standard_normal(
            shape[1:], dtype=np.float32)
    return sigma * out


def _embed_queries(model, raw_q, pos, chunk_index, timestep):
    if timestep not in TIMESTEPS:
        raise ValueError(f"timestep {timestep} not in schedule {TIMESTEPS}")
    q = raw_q + _jitter(model, chunk_index, timestep, raw_q.shape) if timestep else raw_q
    return apply_rope(q, pos, model.freqs)


def generate_chunk(model: StreamModel, chunk_index: int, timestep: int,
                   chunk_frames: int = 3) -> ChunkBlocks:
    """Deterministic blocks for ``(model.seed, chunk_index, timestep)``.

    Keys and values are the clean cache entries of the chunk; only the
    queries depend on ``timestep`` (0 is the clean pass).
    """
    if timestep not in TIMESTEPS:
        raise ValueError(f"timestep {timestep} not in schedule {TIMESTEPS}")
    q, k, v, pos = _raw_chunk(model, chunk_index, chunk_frames)
    return ChunkBlocks(
        queries=_embed_queries(model, q, pos, chunk_index, timestep),
        keys=apply_rope(k, pos, model.freqs),
        values=v,
        positions=pos,
    )


class _Shadow:
    """Every key ever generated, float32, stored ``(L*H, D, capacity)``."""

    def __init__(self, num_layers, num_heads, head_dim, capacity):
        self.keys_t = np.empty((num_layers * num_heads, head_dim, capacity), dtype=np.float32)
        self.size = 0

    def append(self, keys: np.ndarray) -> None:
        t = keys.shape[2]
        flat = keys.reshape(-1, t, keys.shape[3])
        self.keys_t[:, :, self.size:self.size + t] = np.swapaxes(flat, 1, 2)
        self.size += t

    def view(self) -> np.ndarray:
        """``(L*H, n, D)`` view of the keys stored so far."""
        return np.swapaxes(self.keys_t[:, :, :self.size], 1, 2)


@dataclass
class RolloutTrace:
    """Header, one record per (chunk, denoising step), and a summary."""

    header: dict
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def compressions(self) -> list[dict]:
        return [r for r in self.records if r["compressed"]]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps({"type": "step", **r}, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"type": "summary", **self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> list["RolloutTrace"]:
        """Parse one or more concatenated traces."""
        traces: list[RolloutTrace] = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"corrupt trace line {n}: {exc}") from None
            if not isinstance(obj, dict) or "type" not in obj:
                raise ValueError(f"corrupt trace line {n}: expected an object with a type")
            kind = obj.pop("type")
            if kind == "header":
                traces.append(cls(header=obj))
            elif not traces:
                raise ValueError(f"trace line {n} precedes any header")
            elif kind == "step":
                traces[-1].records.append(obj)
            elif kind == "summary":
                traces[-1].summary = obj
            else:
                raise ValueError(f"unknown record type {kind!r} on line {n}")
        return traces


def rollout(model: StreamModel, cfg: CachePolicyConfig, chunks: int, *,
            track_mass: bool = True, probe_queries: int = 4, mass_every: int = 4,
            keep_cache: bool = False) -> RolloutTrace:
    """Drive one policy through ``chunks`` chunks of the surrogate stream.

    Per chunk the denoising schedule runs from high to low noise. At the
    first timestep, if the cache holds at least ``M`` frames, the configured
    policy runs once per layer; its selection then stands for the remaining
    timesteps. The chunk's clean keys and values are appended at the end.

    Args:
        track_mass: measure retained attention mass against the shadow cache
            using ``probe_queries`` evenly spaced clean queries of the chunk.
        mass_every: measure on every k-th compression event only. The oracle
            reads the whole shadow, so this dominates cost on long rollouts.
        keep_cache: attach the final :class:`KVCache` as ``trace.cache``.
    """
    if chunks < 1:
        raise ConfigError(f"chunks must be >= 1, got {chunks}")
    if mass_every < 1 or probe_queries < 1:
        raise ConfigError("mass_every and probe_queries must be >= 1")
    if cfg.tokens_per_frame != model.tokens_per_frame:
        raise ConfigError(
            f"policy F={cfg.tokens_per_frame} != model F={model.tokens_per_frame}")
    L, H, D, F = model.num_layers, model.num_heads, model.head_dim, model.tokens_per_frame
    cf = cfg.chunk_frames
    M = cfg.max_window_frames
    t_chunk = cf * F
    freqs = model.freqs
    cache = KVCache(L, F, H, D)
    shadow = _Shadow(L, H, D, chunks * t_chunk) if track_mass else None
    recent_q = np.empty((L, H, 0, D))
    recent_tokens = cfg.recent_frames * F
    need_denoise = (cfg.policy is Policy.DEEP_FORCING
                    and cfg.query_mode in (QueryMode.DENOISING_ONLY, QueryMode.BOTH))
    anchors = model.anchor_ids

    trace = RolloutTrace(header={
        "seed": model.seed,
        "model": model.to_dict(),
        "policy": cfg.to_dict(),
        "chunks": chunks,
        "schedule": list(SCHEDULE),
        "heatmap": heatmap_layout(cfg),
    })
    masses = []
    events = 0
    evicted_total = 0
    anchor_checks = anchor_ok = 0
    raw = None

    for chunk in range(chunks):
        raw = _raw_chunk(model, chunk, cf)
        raw_q, raw_k, raw_v, pos = raw
        chunk_records = []
        for step, t in enumerate(SCHEDULE):
            frames_before = cache.frame_count
            rec = {"seed": model.seed, "chunk": chunk, "step": step, "timestep": t,
                   "frames_before": frames_before, "compressed": False, "reports": []}
            if step == 0 and frames_before >= M:
                dq = _embed_queries(model, raw_q, pos, chunk, t) if need_denoise else None
                for l, layer in enumerate(cache):
                    before = layer.token_ids.copy() if anchors.size else None
                    rep = policy_step(
                        layer, cfg, freqs,
                        recent_queries=recent_q[l] if recent_q.shape[2] else None,
                        denoising_queries=None if dq is None else dq[l],
                        rng=_rng(model.seed, _POLICY, chunk, l),
                        timestep=t)
                    rep.layer = l
                    out = rep.to_dict(include_evicted=False)
                    if anchors.size:
                        out.update(_anchor_audit(anchors, before, layer, rep))
                        anchor_checks += out["anchor_checks"]
                        anchor_ok += out["anchor_ok"]
                    evicted_total += out["evicted_count"]
                    rec["reports"].append(out)
                rec["compressed"] = True
                events += 1
            rec["frames_after"] = cache.frame_count
            rec["tokens"] = len(cache)
            chunk_records.append(rec)

        clean_q = _embed_queries(model, raw_q, pos, chunk, CLEAN_TIMESTEP)
        mass = None
        if (track_mass and chunk_records[0]["compressed"]
                and (events - 1) % mass_every == 0):
            mass = _measure_mass(model, cache, shadow, clean_q, probe_queries)
            masses.append(mass)
        for rec in chunk_records:
            rec["retained_mass"] = mass
        trace.records.extend(chunk_records)

        if chunk == chunks - 1:
            trace.summary["profiles"] = _profiles(model, cache, clean_q)
        keys = apply_rope(raw_k, pos, freqs)
        cache.append_chunk(keys, raw_v, pos)
        if shadow is not None:
            shadow.append(keys)
        if recent_tokens:
            recent_q = np.concatenate([recent_q, clean_q], axis=2)[:, :, -recent_tokens:]

    trace.summary.update({
        "seed": model.seed,
        "policy": cfg.policy.value,
        "chunks": chunks,
        "frames_generated": chunks * cf,
        "compressions": events,
        "evicted_tokens": evicted_total,
        "final_cache_tokens": len(cache),
        "final_cache_frames": cache.frame_count,
        "mean_retained_mass": float(np.mean(masses)) if masses else None,
        "anchor_checks": anchor_checks,
        "anchor_recovery": anchor_ok / anchor_checks if anchor_checks else None,
    })
    if keep_cache:
        trace.cache = cache
    logger.debug("rollout seed=%s policy=%s events=%d", model.seed, cfg.policy.value, events)
    return trace


def _anchor_audit(anchors: np.ndarray, before_ids: np.ndarray, layer, rep) -> dict:
    lo, hi = rep.candidate_range
    checks = ok = 0
    slots = []
    for head in range(layer.num_heads):
        is_anchor = np.isin(before_ids[head], anchors)
        slots.append((np.flatnonzero(is_anchor[lo:hi]) + lo).tolist())
        present = before_ids[head][is_anchor]
        if present.size:
            checks += 1
            ok += bool(np.isin(present, layer.token_ids[head]).all())
    return {"anchor_checks": checks, "anchor_ok": ok, "anchor_slots": slots}


def _measure_mass(model, cache: KVCache, shadow: _Shadow, clean_q, probe_queries) -> float:
    L, H = model.num_layers, model.num_heads
    t = clean_q.shape[2]
    idx = np.unique(np.linspace(0, t - 1, max(1, probe_queries)).round().astype(int))
    probes = clean_q[:, :, idx].astype(np.float32).reshape(L * H, idx.size, -1)
    retained = np.concatenate([layer.token_ids for layer in cache]).reshape(L * H, -1)
    fractions = retained_mass_batched(probes, shadow.view(), retained, np.float32(model.scale))
    return float(np.mean(fractions, dtype=np.float64))


def _profiles(model, cache: KVCache, clean_q) -> list[dict]:
    if len(cache) == 0:
        return []
    out = []
    for l, layer in enumerate(cache):
        for h in range(model.num_heads):
            prof = frame_attention_profile(clean_q[l, h], layer, h, model.scale, layer=l)
            out.append({"layer": l, "head": h,
                        "per_frame_weight": [[f, w] for f, w in sorted(prof.per_frame_weight.items())]})
    return out


def heatmap_layout(cfg: CachePolicyConfig) -> dict:
    """Slot-axis annotations for a full ``M``-frame window.

    ``candidate_end`` marks where the newest chunk begins, which is how the
    selection heatmap labels its recent block; ``recent_start`` is the
    partition's own boundary ``(M - R) * F``. They coincide when
    ``R == chunk_frames``.
    """
    m, f = cfg.max_window_frames, cfg.tokens_per_frame
    return {
        "length": m * f,
        "sink_boundary": cfg.sink_frames * f,
        "candidate_end": (m - cfg.chunk_frames) * f,
        "recent_start": (m - cfg.recent_frames) * f,
    }


@dataclass
class Heatmap:
    """Top-C selection counts per pre-compression token slot."""

    counts: np.ndarray
    sink_boundary: int
    candidate_end: int
    recent_start: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["slot", "count"])
        writer.writerows((i, int(c)) for i, c in enumerate(self.counts))
        return buf.getvalue()


def selection_heatmap(traces) -> Heatmap:
    """Sum Top-C selection counts by slot over one trace or a list of traces.

    Slots run ``0 .. M*F - 1`` (extended if a candidate region ever reached
    further). See :func:`heatmap_layout` for the boundary annotations.
    """
    if isinstance(traces, RolloutTrace):
        traces = [traces]
    traces = list(traces)
    if not traces:
        raise ValueError("empty trace")
    meta = traces[0].header["heatmap"]
    length = meta["length"]
    for tr in traces:
        for rec in tr.compressions:
            for rep in rec["reports"]:
                length = max(length, rep["candidate_range"][1])
    counts = np.zeros(length, dtype=np.int64)
    for tr in traces:
        for rec in tr.compressions:
            for rep in rec["reports"]:
                sel = np.asarray(rep["selected_token_indices"], dtype=np.int64).ravel()
                np.add.at(counts, sel, 1)
    return Heatmap(counts, meta["sink_boundary"], meta["candidate_end"],
                   meta.get("recent_start"))


SUMMARY_FIELDS = ("seed", "policy", "chunks", "frames_generated", "compressions",
                  "evicted_tokens", "final_cache_tokens", "final_cache_frames",
                  "mean_retained_mass", "anchor_recovery")


def compare_policies(model: StreamModel, cfgs: list[CachePolicyConfig], chunks: int,
                     seeds=None, *, workers: int = 1, **rollout_kw) -> list[dict]:
    """Run every config on the same stream(s) and tabulate per-policy means.

    Rollouts are independent, so ``workers > 1`` fans them out over threads;
    rows come back in ``cfgs`` order regardless.

    Raises:
        ConfigError: if a config's ``tokens_per_frame`` disagrees with the model.
    """
    for cfg in cfgs:
        if cfg.tokens_per_frame != model.tokens_per_frame:
            raise ConfigError(
                f"policy {cfg.policy.value} F={cfg.tokens_per_frame} "
                f"!= model F={model.tokens_per_frame}")
    seeds = [model.seed] if seeds is None else list(seeds)
    jobs = [(cfg, s) for cfg in cfgs for s in seeds]

    def run(job):
        cfg, s = job
        return rollout(replace(model, seed=s), cfg, chunks, **rollout_kw).summary

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    rows = []
    for i, cfg in enumerate(cfgs):
        summaries = results[i * len(seeds):(i + 1) * len(seeds)]
        masses = [s["mean_retained_mass"] for s in summaries if s["mean_retained_mass"] is not None]
        rows.append({
            "policy": cfg.policy.value,
            "seeds": len(seeds),
            "mean_retained_mass": float(np.mean(masses)) if masses else None,
            "compressions": float(np.mean([s["compressions"] for s in summaries])),
            "evicted_tokens": float(np.mean([s["evicted_tokens"] for s in summaries])),
            "final_cache_tokens": float(np.mean([s["final_cache_tokens"] for s in summaries])),
            "final_cache_frames": float(np.mean([s["final_cache_frames"] for s in summaries])),
        })
    return rows


def rows_to_csv(rows: list[dict], columns=None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else
                         repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()


def write_trace(trace_or_traces, path: Path) -> None:
    if isinstance(trace_or_traces, RolloutTrace):
        trace_or_traces = [trace_or_traces]
    Path(path).write_text("".join(t.to_jsonl() for t in trace_or_traces), encoding="utf-8")
